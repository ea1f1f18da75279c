#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sepnorm::config::RunConfig;
use sepnorm::graph::Graph;
use sepnorm::nn::{Ctx, Mode};
use sepnorm::norm::NormScheme;
use sepnorm::objectives::{sample_mask, u_mae_loss, MaskPlan};
use sepnorm::tensor::Tensor;
use sepnorm::train::Model;

/// Relative error with a small absolute floor so that gradients which are
/// zero up to roundoff compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Checks `build` (a scalar function of the leaves) against central
/// differences for every element of every leaf. Returns the worst relative
/// error.
pub fn check_leaves(inputs: &[Tensor], h: f64, build: impl Fn(&mut Graph, &[sepnorm::Var]) -> sepnorm::Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for (li, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut xs = inputs.to_vec();
            xs[li].data_mut()[k] += h;
            let up = eval(&xs);
            xs[li].data_mut()[k] -= 2.0 * h;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[li].data()[k], fd));
        }
    }
    worst
}

/// Tiny run configuration: 8×8 images, 4×4 patches, d=8, depth 2, 2 heads,
/// and a small decoder.
pub fn tiny_run(scheme: NormScheme, lambda: f64, target: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_kv_str(&format!(
        "image_side=8\npatch_side=4\ndim=8\ndepth=2\nheads=2\nmlp_ratio=2\n\
         decoder_depth=2\ndecoder_dim=8\ndecoder_heads=2\nlambda={lambda}\ntarget={target}\nseed=7"
    ))
    .unwrap();
    cfg.encoder.norm_scheme = scheme;
    cfg
}

pub struct GradCheckReport {
    pub checked: usize,
    pub failed: usize,
    pub worst: f64,
    pub worst_param: String,
}

/// Finite-difference check of the full U-MAE loss over every trainable
/// parameter of the model built from `cfg`, on a fixed random batch and
/// mask, using the five-point central stencil. Perturbs the freshly
/// initialized parameters slightly first so that γ, β and zero biases are
/// not at special values.
pub fn model_gradcheck(cfg: &RunConfig, batch: usize, tol: f64) -> GradCheckReport {
    let mut model = Model::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.is_trainable(id) {
            for v in model.store.value_mut(id).data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += 0.05 * n;
            }
        }
    }
    let enc = cfg.encoder_config();
    let patches = normal_tensor(&[batch, enc.num_patches(), enc.patch_len()], &mut rng);
    let plan = sample_mask(batch, enc.num_patches(), cfg.objective.mask_ratio, &mut rng).unwrap();

    let loss_value = |model: &mut Model, plan: &MaskPlan| -> f64 {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut model.store, Mode::Train);
        let parts = u_mae_loss(&mut ctx, &model.encoder, &model.decoder, &patches, plan, &cfg.objective).unwrap();
        g.value(parts.total).item()
    };

    {
        let mut g = Graph::new();
        let parts = {
            let mut ctx = Ctx::new(&mut g, &mut model.store, Mode::Train);
            u_mae_loss(&mut ctx, &model.encoder, &model.decoder, &patches, &plan, &cfg.objective).unwrap()
        };
        g.backward(parts.total).unwrap();
        model.store.zero_grad();
        model.store.accumulate_grads(&g);
    }

    let h = 1e-4;
    let mut report = GradCheckReport {
        checked: 0,
        failed: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    for id in model.store.ids().collect::<Vec<_>>() {
        if !model.store.is_trainable(id) {
            continue;
        }
        let analytic = model.store.grad(id).clone();
        for k in 0..analytic.numel() {
            let orig = model.store.value(id).data()[k];
            let at = |model: &mut Model, dx: f64| {
                model.store.value_mut(id).data_mut()[k] = orig + dx;
                loss_value(model, &plan)
            };
            let fd = (8.0 * (at(&mut model, h) - at(&mut model, -h)) - (at(&mut model, 2.0 * h) - at(&mut model, -2.0 * h))) / (12.0 * h);
            model.store.value_mut(id).data_mut()[k] = orig;
            let e = rel_err(analytic.data()[k], fd);
            report.checked += 1;
            if e >= tol {
                report.failed += 1;
            }
            if e > report.worst {
                report.worst = e;
                report.worst_param = format!("{}[{k}]", model.store.name(id));
            }
        }
    }
    report
}
