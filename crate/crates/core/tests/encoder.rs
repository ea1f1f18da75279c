mod common;

use common::{normal_tensor, rel_err};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepnorm::encoder::{patchify, unpatchify, Attention, Block, Encoder, EncoderConfig};
use sepnorm::graph::Graph;
use sepnorm::nn::{Ctx, Mode};
use sepnorm::norm::{NormKind, NormScheme};
use sepnorm::params::ParamStore;
use sepnorm::Tensor;

const SEP_BN_LN: NormScheme = NormScheme::Sep {
    cls: NormKind::Bn,
    token: NormKind::Ln,
};

fn cls_of(enc: &Encoder, store: &mut ParamStore, patches: &Tensor, kept: &[Vec<usize>]) -> Tensor {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Mode::Train);
    let out = enc.forward_patches(&mut ctx, patches, Some(kept)).unwrap();
    g.value(out.cls).clone()
}

#[test]
fn permuting_kept_tokens_leaves_cls_unchanged() {
    for scheme in [NormScheme::Share(NormKind::Ln), SEP_BN_LN, NormScheme::Share(NormKind::Bn)] {
        let cfg = EncoderConfig::tiny(scheme);
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg.clone(), &mut store).unwrap();
        let patches = normal_tensor(&[3, cfg.num_patches(), cfg.patch_len()], &mut ChaCha8Rng::seed_from_u64(1));
        // tiny config has 4 patches; keep 3 of them
        let kept = vec![vec![0, 2, 3], vec![1, 2, 3], vec![0, 1, 3]];
        let permuted: Vec<Vec<usize>> = kept.iter().map(|k| vec![k[2], k[0], k[1]]).collect();
        let a = cls_of(&enc, &mut store, &patches, &kept);
        let b = cls_of(&enc, &mut store, &patches, &permuted);
        assert!(a.max_abs_diff(&b) < 1e-12, "{scheme}: {}", a.max_abs_diff(&b));
    }
}

/// Moves every trainable parameter off its initial value. At init the norm
/// inputs are tiny and the loss curves sharply on the scale of the
/// finite-difference step.
fn jitter(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_trainable(id) {
            let noise = normal_tensor(store.value(id).shape(), rng);
            for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *v += std * n;
            }
        }
    }
}

#[test]
fn cls_loss_gradients_match_finite_differences() {
    for scheme in [NormScheme::Share(NormKind::Ln), SEP_BN_LN] {
        let cfg = EncoderConfig::tiny(scheme);
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg.clone(), &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        jitter(&mut store, 0.3, &mut rng);
        let patches = normal_tensor(&[8, cfg.num_patches(), cfg.patch_len()], &mut rng);
        let w = normal_tensor(&[8, cfg.dim], &mut rng);
        let loss = |store: &mut ParamStore, backward: bool| -> f64 {
            let mut g = Graph::new();
            let l = {
                let mut ctx = Ctx::new(&mut g, store, Mode::Train);
                let out = enc.forward_patches(&mut ctx, &patches, None).unwrap();
                let wv = ctx.graph.constant(w.clone());
                let p = ctx.graph.mul(out.cls, wv).unwrap();
                let t = ctx.graph.gelu(p);
                ctx.graph.sum_all(t)
            };
            if backward {
                g.backward(l).unwrap();
                store.zero_grad();
                store.accumulate_grads(&g);
            }
            g.value(l).item()
        };
        loss(&mut store, true);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = store.grad(id).clone();
            for k in 0..grad.numel() {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + h;
                let up = loss(&mut store, false);
                store.value_mut(id).data_mut()[k] = orig - h;
                let down = loss(&mut store, false);
                store.value_mut(id).data_mut()[k] = orig;
                worst = worst.max(rel_err(grad.data()[k], (up - down) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-4, "{scheme}: worst {worst}");
    }
}

#[test]
fn zero_output_projection_makes_attention_an_identity_residual() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let block = Block::new(&mut store, "b", 4, 2, 8, NormScheme::Share(NormKind::Ln), &mut rng);
    store.set_value(block.attn.o.weight, Tensor::zeros(vec![4, 4])).unwrap();
    store.set_value(block.fc2.weight, Tensor::zeros(vec![8, 4])).unwrap();
    let x = normal_tensor(&[2, 3, 4], &mut rng);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
    let xv = ctx.graph.constant(x.clone());
    let y = block.forward(&mut ctx, xv).unwrap();
    assert_eq!(g.value(y).data(), x.data());
    assert_eq!(g.value(y).shape(), x.shape());
}

#[test]
fn two_position_single_head_attention_by_hand() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let attn = Attention::new(&mut store, "a", 2, 1, &mut rng);
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    for lin in [&attn.q, &attn.k, &attn.o] {
        store.set_value(lin.weight, eye.clone()).unwrap();
    }
    store.set_value(attn.v.weight, Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap()).unwrap();
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
    let xv = ctx.graph.constant(x);
    let y = attn.forward(&mut ctx, xv).unwrap();
    // scores q·k/√2: diagonal 1/√2, off-diagonal 0
    let a = 1.0 / 2f64.sqrt();
    let w_self = a.exp() / (a.exp() + 1.0);
    let w_other = 1.0 / (a.exp() + 1.0);
    let want = [2.0 * w_self, 3.0 * w_other, 2.0 * w_other, 3.0 * w_self];
    for (got, w) in g.value(y).data().iter().zip(want) {
        assert!((got - w).abs() < 1e-14);
    }
}

#[test]
fn tied_sep_and_share_blocks_agree() {
    let x = normal_tensor(&[2, 4, 4], &mut ChaCha8Rng::seed_from_u64(5));
    let mut outs = Vec::new();
    for scheme in [NormScheme::Share(NormKind::Ln), NormScheme::Sep { cls: NormKind::Ln, token: NormKind::Ln }] {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, 2, 8, scheme, &mut ChaCha8Rng::seed_from_u64(6));
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
        let xv = ctx.graph.constant(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();
        outs.push(g.value(y).clone());
    }
    assert_eq!(outs[0].data(), outs[1].data());
}

#[test]
fn sep_norm_adds_one_affine_pair_per_site() {
    let base = EncoderConfig::default();
    let count = |scheme: NormScheme| {
        let mut store = ParamStore::new();
        Encoder::new(EncoderConfig { norm_scheme: scheme, ..base.clone() }, &mut store).unwrap();
        (store.trainable_scalars(), store.buffer_scalars())
    };
    let sites = 2 * base.depth + 1;
    let d = base.dim;
    let (share_ln, share_ln_buf) = count(NormScheme::Share(NormKind::Ln));
    let (sep_ln_ln, sep_ln_ln_buf) = count(NormScheme::Sep { cls: NormKind::Ln, token: NormKind::Ln });
    let (share_bn, share_bn_buf) = count(NormScheme::Share(NormKind::Bn));
    let (sep_bn_ln, sep_bn_ln_buf) = count(SEP_BN_LN);
    let (sep_bn_bn, sep_bn_bn_buf) = count(NormScheme::Sep { cls: NormKind::Bn, token: NormKind::Bn });
    assert_eq!(sep_ln_ln - share_ln, sites * 2 * d);
    assert_eq!(sep_bn_ln - share_ln, sites * 2 * d);
    assert_eq!(sep_bn_bn - share_bn, sites * 2 * d);
    assert_eq!((share_ln_buf, sep_ln_ln_buf), (0, 0));
    assert_eq!(share_bn_buf, sites * 2 * d);
    assert_eq!(sep_bn_ln_buf, sites * 2 * d);
    assert_eq!(sep_bn_bn_buf, sites * 4 * d);
}

#[test]
fn residual_stream_keeps_its_shape_and_sites_are_not_shared() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg.clone(), &mut store).unwrap();
    assert_eq!(enc.norm_sites().len(), 2 * cfg.depth + 1);
    let mut ids: Vec<_> = enc.norm_sites().iter().flat_map(|s| s.param_ids()).collect();
    let n = ids.len();
    ids.sort_by_key(|id| store.name(*id).to_string());
    ids.dedup();
    assert_eq!(ids.len(), n);
    assert_eq!(store.value(enc.pos_embed).shape(), &[cfg.num_patches() + 1, cfg.dim]);

    let images = normal_tensor(&[2, 16, 16], &mut ChaCha8Rng::seed_from_u64(7));
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &mut store, Mode::Eval);
    let out = enc.encode(&mut ctx, &images, None).unwrap();
    assert_eq!(g.shape(out.cls), &[2, cfg.dim]);
    assert_eq!(g.shape(out.tokens), &[2, cfg.num_patches(), cfg.dim]);
    assert_eq!(g.shape(out.sequence), &[2, cfg.num_patches() + 1, cfg.dim]);
}

#[test]
fn patch_layout_roundtrip() {
    let img = Tensor::from_fn(vec![4, 4], |i| i as f64);
    let p = patchify(&img, 2).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(unpatchify(&p, 2).unwrap(), img);
    let whole = patchify(&img, 4).unwrap();
    assert_eq!(whole.data(), img.data());
    assert!(patchify(&img, 3).is_err());
}

#[test]
fn same_seed_builds_identical_parameters() {
    let build = || {
        let mut store = ParamStore::new();
        Encoder::new(EncoderConfig::tiny(SEP_BN_LN), &mut store).unwrap();
        store.iter().map(|p| p.value.clone()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}
