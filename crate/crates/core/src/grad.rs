//! Analytic gradients of MHLA, a central-difference checker, and a small
//! trainer that fits the mixing coefficients to a target output.

use std::io::Write;

use crate::attention::{
    check_partition_len, check_qkv, mhla_forward, AttentionConfig, NORMALIZER_FLOOR,
};
use crate::causal::{causal_parts, chunkwise_causal_forward};
use crate::error::{shape_err, MhlaError, Result};
use crate::mixing::{
    clip_coefficients, compute_local_summaries, mix_summaries, CoefficientMatrix, SummaryStack,
};
use crate::partition::BlockPartition;
use crate::tensor::{apply_feature_map, axpy_slice, dot, gemm, DenseMatrix, FeatureMap};

/// Gradients of `Σ ⟨upstream, Y⟩` with respect to every differentiable input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_q: DenseMatrix,
    pub d_k: DenseMatrix,
    pub d_v: DenseMatrix,
    pub d_coefficients: DenseMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub coefficient_snapshot_norm: f64,
}

/// Bidirectional MHLA, or the chunkwise causal form when the coefficients
/// are causal.
pub fn mhla_apply(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<DenseMatrix> {
    let (_, c) = cfg.blocks()?;
    if c.is_causal() {
        chunkwise_causal_forward(q, k, v, cfg)
    } else {
        mhla_forward(q, k, v, cfg)
    }
}

// Cotangents of the numerator and denominator of one output row.
fn row_cotangents(
    g: &[f64],
    num: &[f64],
    den: f64,
    normalize: bool,
    row: usize,
) -> Result<(Vec<f64>, f64)> {
    if !normalize {
        return Ok((g.to_vec(), 0.0));
    }
    if !(den >= NORMALIZER_FLOOR) {
        return Err(MhlaError::DegenerateNormalizer { row, value: den });
    }
    let d_num: Vec<f64> = g.iter().map(|x| x / den).collect();
    let d_den = -dot(g, num) / (den * den);
    Ok((d_num, d_den))
}

/// `x · S` for a row-major `d x d` matrix `S`.
fn vec_mat(x: &[f64], s: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (a, &xa) in x.iter().enumerate() {
        axpy_slice(xa, &s[a * d..(a + 1) * d], &mut out);
    }
    out
}

/// `S · y` for a row-major `d x d` matrix `S`.
fn mat_vec(s: &[f64], y: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|a| dot(&s[a * d..(a + 1) * d], y)).collect()
}

/// Rank-one update `S += x yᵀ`.
fn add_outer(s: &mut [f64], x: &[f64], y: &[f64], d: usize) {
    for (a, &xa) in x.iter().enumerate() {
        axpy_slice(xa, y, &mut s[a * d..(a + 1) * d]);
    }
}

// Pushes per-block summary cotangents down to the keys and values.
fn summary_backward(
    d_stack: &DenseMatrix,
    kf: &DenseMatrix,
    v: &DenseMatrix,
    partition: &BlockPartition,
    d_kf: &mut DenseMatrix,
    d_v: &mut DenseMatrix,
) {
    let d = kf.cols();
    for b in 0..partition.num_blocks() {
        let row = d_stack.row(b);
        let (d_s, d_z) = row.split_at(d * d);
        for &j in partition.tokens(b) {
            let mut dk = mat_vec(d_s, v.row(j), d);
            for (x, &z) in dk.iter_mut().zip(d_z) {
                *x += z;
            }
            axpy_slice(1.0, &dk, d_kf.row_mut(j));
            let dv = vec_mat(kf.row(j), d_s, d);
            axpy_slice(1.0, &dv, d_v.row_mut(j));
        }
    }
}

fn chain_feature_map(d_feat: &DenseMatrix, x: &DenseMatrix, fm: FeatureMap) -> DenseMatrix {
    let data = d_feat
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &xi)| g * fm.derivative(xi))
        .collect();
    DenseMatrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// Exact gradients of `Σ ⟨upstream, Y⟩` where `Y` is [`mhla_apply`].
pub fn mhla_backward(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
    upstream: &DenseMatrix,
) -> Result<GradientBundle> {
    check_qkv("mhla_backward", q, k, v)?;
    if upstream.shape() != q.shape() {
        return Err(shape_err(
            "mhla_backward",
            format!("upstream {:?} vs output {:?}", upstream.shape(), q.shape()),
        ));
    }
    let (partition, coefficients) = cfg.blocks()?;
    check_partition_len("mhla_backward", partition, q.rows())?;
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let stack = compute_local_summaries(&kf, v, partition)?;
    let (n, d) = q.shape();
    let mut d_qf = DenseMatrix::zeros(n, d);
    let mut d_kf = DenseMatrix::zeros(n, d);
    let mut d_v = DenseMatrix::zeros(n, d);

    let d_coefficients = if coefficients.is_causal() {
        causal_parts(cfg)?;
        causal_backward(
            &qf,
            &kf,
            v,
            &stack,
            partition,
            coefficients,
            cfg.normalize,
            upstream,
            &mut d_qf,
            &mut d_kf,
            &mut d_v,
        )?
    } else {
        let mixed = mix_summaries(coefficients, &stack)?;
        let mut d_mixed = DenseMatrix::zeros(partition.num_blocks(), d * d + d);
        for i in 0..partition.num_blocks() {
            let s = mixed.summary(i);
            let z = mixed.normalizer(i);
            for &t in partition.tokens(i) {
                let qt = qf.row(t);
                let num = vec_mat(qt, s, d);
                let den = dot(qt, z);
                let (d_num, d_den) = row_cotangents(upstream.row(t), &num, den, cfg.normalize, t)?;
                let mut dq = mat_vec(s, &d_num, d);
                axpy_slice(d_den, z, &mut dq);
                d_qf.row_mut(t).copy_from_slice(&dq);
                let dm = d_mixed.row_mut(i);
                add_outer(&mut dm[..d * d], qt, &d_num, d);
                axpy_slice(d_den, qt, &mut dm[d * d..]);
            }
        }
        let d_stack = gemm(coefficients.values(), &d_mixed, true, false)?;
        summary_backward(&d_stack, &kf, v, partition, &mut d_kf, &mut d_v);
        gemm(&d_mixed, stack.packed(), false, true)?
    };

    Ok(GradientBundle {
        d_q: chain_feature_map(&d_qf, q, cfg.feature_map),
        d_k: chain_feature_map(&d_kf, k, cfg.feature_map),
        d_v,
        d_coefficients,
    })
}

#[allow(clippy::too_many_arguments)]
fn causal_backward(
    qf: &DenseMatrix,
    kf: &DenseMatrix,
    v: &DenseMatrix,
    stack: &SummaryStack<f64>,
    partition: &BlockPartition,
    coefficients: &CoefficientMatrix,
    normalize: bool,
    upstream: &DenseMatrix,
    d_qf: &mut DenseMatrix,
    d_kf: &mut DenseMatrix,
    d_v: &mut DenseMatrix,
) -> Result<DenseMatrix> {
    let d = qf.cols();
    let width = d * d + d;
    let blocks = partition.num_blocks();
    let mut d_coeff = DenseMatrix::zeros(blocks, blocks);
    let mut d_prefix = DenseMatrix::zeros(blocks, width);
    for i in 0..blocks {
        let mut prefix = vec![0.0; width];
        for b in 0..i {
            axpy_slice(coefficients.get(i, b), stack.packed().row(b), &mut prefix);
        }
        let (p_s, p_z) = prefix.split_at(d * d);
        let self_w = coefficients.get(i, i);
        let idx = partition.tokens(i);
        for (r, &t) in idx.iter().enumerate() {
            let qt = qf.row(t);
            let scores: Vec<f64> = idx[..=r].iter().map(|&j| dot(qt, kf.row(j))).collect();
            let mut num = vec_mat(qt, p_s, d);
            let mut den = dot(qt, p_z);
            for (&j, &sc) in idx[..=r].iter().zip(&scores) {
                axpy_slice(self_w * sc, v.row(j), &mut num);
                den += self_w * sc;
            }
            let (d_num, d_den) = row_cotangents(upstream.row(t), &num, den, normalize, t)?;

            let mut dq = mat_vec(p_s, &d_num, d);
            axpy_slice(d_den, p_z, &mut dq);
            let dp = d_prefix.row_mut(i);
            add_outer(&mut dp[..d * d], qt, &d_num, d);
            axpy_slice(d_den, qt, &mut dp[d * d..]);

            let mut d_self = 0.0;
            for (&j, &sc) in idx[..=r].iter().zip(&scores) {
                let g_score = dot(&d_num, v.row(j)) + d_den;
                d_self += sc * g_score;
                let d_score = self_w * g_score;
                axpy_slice(d_score, kf.row(j), &mut dq);
                axpy_slice(d_score, qt, d_kf.row_mut(j));
                axpy_slice(self_w * sc, &d_num, d_v.row_mut(j));
            }
            d_coeff.set(i, i, d_coeff.get(i, i) + d_self);
            axpy_slice(1.0, &dq, d_qf.row_mut(t));
        }
    }
    let mut d_stack = DenseMatrix::zeros(blocks, width);
    for i in 0..blocks {
        for b in 0..i {
            let g = dot(d_prefix.row(i), stack.packed().row(b));
            d_coeff.set(i, b, d_coeff.get(i, b) + g);
            let w = coefficients.get(i, b);
            let src = d_prefix.row(i).to_vec();
            axpy_slice(w, &src, d_stack.row_mut(b));
        }
    }
    summary_backward(&d_stack, kf, v, partition, d_kf, d_v);
    Ok(d_coeff)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = f(&work);
            work[i] = orig - h;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn mean_squared_error(y: &DenseMatrix, target: &DenseMatrix) -> Result<f64> {
    if y.shape() != target.shape() {
        return Err(shape_err(
            "mean_squared_error",
            format!("{:?} vs {:?}", y.shape(), target.shape()),
        ));
    }
    let n = y.data().len().max(1) as f64;
    Ok(y.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gradient descent on the mixing coefficients only, with every update
/// clipped into `[ε, 1-ε]`. The trace holds the loss before each update.
pub fn distill_coefficients(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    target: &DenseMatrix,
    cfg: &AttentionConfig,
    steps: usize,
    lr: f64,
) -> Result<(CoefficientMatrix, Vec<TrainRecord>)> {
    if target.shape() != q.shape() {
        return Err(shape_err(
            "distill_coefficients",
            format!("target {:?} vs inputs {:?}", target.shape(), q.shape()),
        ));
    }
    let (_, init) = cfg.blocks()?;
    let mut coefficients = init.clone();
    let mut trace = Vec::with_capacity(steps);
    let scale = 2.0 / q.data().len().max(1) as f64;
    for step in 0..steps {
        let cur = cfg.with_coefficients(coefficients.clone())?;
        let y = mhla_apply(q, k, v, &cur)?;
        let loss = mean_squared_error(&y, target)?;
        if !loss.is_finite() {
            return Err(MhlaError::NonFiniteLoss { step });
        }
        trace.push(TrainRecord {
            step,
            loss,
            coefficient_snapshot_norm: coefficients.values().frobenius_norm(),
        });
        let upstream = y.axpy(-1.0, target)?.scaled(scale);
        let grads = mhla_backward(q, k, v, &cur, &upstream)?;
        let updated = coefficients.values().axpy(-lr, &grads.d_coefficients)?;
        let causal = coefficients.is_causal();
        let updated = if causal {
            crate::mixing::causal_mask(&CoefficientMatrix::new(updated, false)?)
        } else {
            CoefficientMatrix::new(updated, false)?
        };
        coefficients = clip_coefficients(&updated);
    }
    Ok((coefficients, trace))
}

/// Writes a loss trace as `step,loss` CSV.
pub fn write_loss_csv<W: Write>(out: W, trace: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss"])?;
    for r in trace {
        w.write_record([r.step.to_string(), r.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
