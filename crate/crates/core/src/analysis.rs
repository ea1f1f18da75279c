//! Representation diagnostics on plain embedding matrices: uniformity,
//! singular spectra, effective rank, per-dimension statistics and linear
//! probing. Nothing here touches a differentiation graph.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Row cap for [`measure_uniformity`]; larger inputs are subsampled.
pub const UNIFORMITY_MAX_ROWS: usize = 4096;
/// Seed of the subsample drawn when the row cap is exceeded.
pub const UNIFORMITY_SUBSAMPLE_SEED: u64 = 0x5E9_A0B5;
pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct UniformityMeasurement {
    pub value: f64,
    /// Zero-norm rows that were left out.
    pub skipped_rows: usize,
    /// Rows actually used (after skipping and subsampling).
    pub rows_used: usize,
}

fn check_matrix(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Uniformity of the rows of `embeddings`, same formula and arithmetic as
/// [`crate::objectives::uniformity_loss`]. Zero rows are skipped and counted.
pub fn measure_uniformity(embeddings: &Tensor) -> Result<UniformityMeasurement> {
    let (n, d) = check_matrix("measure_uniformity", embeddings)?;
    let mut rows: Vec<usize> = (0..n).filter(|&i| embeddings.row(i).iter().any(|&v| v != 0.0)).collect();
    let skipped = n - rows.len();
    if rows.len() > UNIFORMITY_MAX_ROWS {
        let mut rng = ChaCha8Rng::seed_from_u64(UNIFORMITY_SUBSAMPLE_SEED);
        let mut pick = sample(&mut rng, rows.len(), UNIFORMITY_MAX_ROWS).into_vec();
        pick.sort_unstable();
        rows = pick.into_iter().map(|i| rows[i]).collect();
    }
    let m = rows.len();
    if m < 2 {
        return Err(contract(format!("uniformity needs at least two non-zero rows, got {m}")));
    }
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let r = embeddings.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| {
        let mut acc = 0.0;
        for k in 0..d {
            acc += a[k] * b[k];
        }
        acc
    };
    let diag: Vec<f64> = unit.iter().map(|u| dot(u, u)).collect();
    let mut logits = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in a + 1..m {
            let dist = (diag[a] + diag[b]) - 2.0 * dot(&unit[a], &unit[b]);
            logits.push(dist * -2.0);
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x + -max).exp()).sum();
    let pairs = logits.len() as f64;
    Ok(UniformityMeasurement {
        value: sum.ln() + (max - pairs.ln()),
        skipped_rows: skipped,
        rows_used: m,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
/// Converged when every off-diagonal entry is below
/// `JACOBI_TOLERANCE · |trace|`.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = check_matrix("symmetric_eigenvalues", a)?;
    if n != c {
        return Err(Error::Shape {
            op: "symmetric_eigenvalues",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut m: Vec<f64> = a.data().to_vec();
    let at = |i: usize, j: usize| i * n + j;
    let trace: f64 = (0..n).map(|i| m[at(i, i)]).sum::<f64>().abs();
    let threshold = JACOBI_TOLERANCE * trace;
    let off_max = |m: &[f64]| {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max(m[at(i, j)].abs());
            }
        }
        worst
    };
    let mut sweeps = 0;
    while off_max(&m) > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps (n = {n}, max off-diagonal {:.3e}, threshold {:.3e})",
                off_max(&m),
                threshold
            )));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[at(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[at(p, p)], m[at(q, q)]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (m[at(k, p)], m[at(k, q)]);
                    m[at(k, p)] = cs * akp - sn * akq;
                    m[at(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[at(p, k)], m[at(q, k)]);
                    m[at(p, k)] = cs * apk - sn * aqk;
                    m[at(q, k)] = sn * apk + cs * aqk;
                }
                m[at(p, q)] = 0.0;
                m[at(q, p)] = 0.0;
            }
        }
        sweeps += 1;
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[at(i, i)]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Singular values of `x: [N×d]`, descending, `min(N, d)` of them. With
/// `center` the column means are removed first.
///
/// One-sided Jacobi: pairs of columns are rotated until all are mutually
/// orthogonal, after which the column norms are the singular values. Small
/// singular values keep full relative accuracy, unlike eigenvalues of the
/// Gram matrix.
pub fn singular_spectrum(x: &Tensor, center: bool) -> Result<Vec<f64>> {
    let (n, d) = check_matrix("singular_spectrum", x)?;
    if n < 2 {
        return Err(contract("singular spectrum needs at least two rows"));
    }
    let mut data = x.data().to_vec();
    if center {
        for j in 0..d {
            let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                data[i * d + j] -= mean;
            }
        }
    }
    // rotate whichever side is shorter: columns of X, or columns of Xᵀ
    let mut cols: Vec<Vec<f64>> = if n >= d {
        (0..d).map(|j| (0..n).map(|i| data[i * d + j]).collect()).collect()
    } else {
        data.chunks_exact(d).map(<[f64]>::to_vec).collect()
    };
    let k = cols.len();
    let tol = (cols[0].len() as f64).sqrt() * f64::EPSILON;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (lo, hi) = cols.split_at_mut(q);
                let (a, b) = (&mut lo[p], &mut hi[0]);
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (u, v) in a.iter().zip(b.iter()) {
                    alpha += u * u;
                    beta += v * v;
                    gamma += u * v;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (u, v) in a.iter_mut().zip(b.iter_mut()) {
                    let (x0, y0) = (*u, *v);
                    *u = c * x0 - s * y0;
                    *v = s * x0 + c * y0;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "one-sided Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps ({n}×{d})"
        )));
    }
    let mut sigma: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// `exp(H(p))` with `p_i = σ_i / Σσ`.
pub fn effective_rank(singular_values: &[f64]) -> Result<f64> {
    let total: f64 = singular_values.iter().sum();
    if !(total > 0.0) {
        return Err(contract("effective rank of an all-zero spectrum"));
    }
    let entropy: f64 = singular_values
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Per-column mean and population standard deviation.
pub fn per_dim_stats(x: &Tensor) -> Result<Vec<DimStats>> {
    let (n, d) = check_matrix("per_dim_stats", x)?;
    if n < 2 {
        return Err(contract("per-dimension statistics need at least two rows"));
    }
    Ok((0..d)
        .map(|j| {
            let col = (0..n).map(|i| x.data()[i * d + j]);
            let mean = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            DimStats { mean, std: var.sqrt() }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Standardize features with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.05,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Training cross-entropy before each update, then after the last.
    pub loss_history: Vec<f64>,
}

/// Affine softmax classifier on frozen features, trained by full-batch
/// gradient descent on cross-entropy; returns top-1 test accuracy.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (n, d) = check_matrix("linear_probe", train_x)?;
    let (nt, dt) = check_matrix("linear_probe", test_x)?;
    if d != dt || n != train_y.len() || nt != test_y.len() {
        return Err(Error::Shape {
            op: "linear_probe",
            lhs: train_x.shape().to_vec(),
            rhs: test_x.shape().to_vec(),
        });
    }
    let classes = train_y.iter().chain(test_y).copied().max().unwrap_or(0) + 1;
    let mut distinct = train_y.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(contract("linear probe needs at least two classes in the training split"));
    }
    let (shift, scale): (Vec<f64>, Vec<f64>) = if cfg.standardize {
        per_dim_stats(train_x)?
            .into_iter()
            .map(|s| (s.mean, if s.std > 1e-12 { 1.0 / s.std } else { 1.0 }))
            .unzip()
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let prep = |x: &Tensor| -> Vec<f64> {
        x.data()
            .chunks(d)
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - shift[j]) * scale[j]).collect::<Vec<_>>())
            .collect()
    };
    let xtr = prep(train_x);
    let xte = prep(test_x);

    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-3).expect("valid std");
    let mut w: Vec<f64> = (0..d * classes).map(|_| init.sample(&mut rng)).collect();
    let mut b = vec![0.0; classes];

    let logits_of = |x: &[f64], w: &[f64], b: &[f64], out: &mut Vec<f64>| {
        out.clear();
        for c in 0..classes {
            let mut z = b[c];
            for j in 0..d {
                z += x[j] * w[j * classes + c];
            }
            out.push(z);
        }
    };
    let softmax = |z: &mut Vec<f64>| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter_mut().map(|v| {
            *v = (*v - m).exp();
            *v
        }).sum();
        z.iter_mut().for_each(|v| *v /= s);
    };

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut z = Vec::with_capacity(classes);
    for epoch in 0..=cfg.epochs {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        let mut loss = 0.0;
        for i in 0..n {
            let x = &xtr[i * d..(i + 1) * d];
            logits_of(x, &w, &b, &mut z);
            softmax(&mut z);
            loss -= z[train_y[i]].max(1e-300).ln();
            z[train_y[i]] -= 1.0;
            for c in 0..classes {
                gb[c] += z[c];
            }
            for j in 0..d {
                for c in 0..classes {
                    gw[j * classes + c] += x[j] * z[c];
                }
            }
        }
        history.push(loss / n as f64);
        if epoch == cfg.epochs {
            break;
        }
        let step = cfg.lr / n as f64;
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= step * gv;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= step * gv;
        }
    }

    let mut correct = 0;
    for i in 0..nt {
        logits_of(&xte[i * d..(i + 1) * d], &w, &b, &mut z);
        let pred = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
            .0;
        if pred == test_y[i] {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / nt as f64,
        loss_history: history,
    })
}

/// Diagnostics for one embedding class ([CLS] or tokens).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSummary {
    pub uniformity: f64,
    pub dim_stats: Vec<DimStats>,
    pub singular_values: Vec<f64>,
    pub effective_rank: f64,
}

impl EmbeddingSummary {
    pub fn compute(x: &Tensor, center: bool) -> Result<Self> {
        let singular_values = singular_spectrum(x, center)?;
        Ok(Self {
            uniformity: measure_uniformity(x)?.value,
            dim_stats: per_dim_stats(x)?,
            effective_rank: effective_rank(&singular_values)?,
            singular_values,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub cls: EmbeddingSummary,
    pub token: EmbeddingSummary,
    pub probe_accuracy: Option<f64>,
}

impl AnalysisReport {
    pub fn cls_uniformity(&self) -> f64 {
        self.cls.uniformity
    }

    pub fn token_uniformity(&self) -> f64 {
        self.token.uniformity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_rank_hand_values() {
        assert!((effective_rank(&[3.0, 3.0, 3.0, 3.0]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(effective_rank(&[5.0, 0.0, 0.0]).unwrap(), 1.0);
        let want = (-(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln())).exp();
        assert!((effective_rank(&[2.0, 1.0, 1.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 2.8284).abs() < 1e-4);
        assert!(effective_rank(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_rows_spectrum() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let s = singular_spectrum(&x, true).unwrap();
        // centred rows are I − J/3, a projector of rank 2
        assert!((s[0] - 1.0).abs() < 1e-8 && (s[1] - 1.0).abs() < 1e-8 && s[2].abs() < 1e-7, "{s:?}");
    }

    #[test]
    fn constant_column_stats() {
        let x = Tensor::from_rows(&[vec![2.5, 1.0], vec![2.5, 3.0], vec![2.5, 2.0]]);
        let s = per_dim_stats(&x).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], DimStats { mean: 2.5, std: 0.0 });
    }

    #[test]
    fn uniformity_skips_zero_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.0]]);
        let m = measure_uniformity(&x).unwrap();
        assert_eq!(m.skipped_rows, 1);
        assert_eq!(m.value, -8.0);
    }

    #[test]
    fn probe_requires_two_classes() {
        let x = Tensor::ones(vec![4, 2]);
        assert!(linear_probe(&x, &[1, 1, 1, 1], &x, &[1, 1, 1, 1], &ProbeConfig::default()).is_err());
    }
}
