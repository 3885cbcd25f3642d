//! Bidirectional attention forwards: softmax, global linear, and MHLA, plus
//! the explicit per-token expansion of MHLA used as its oracle.

use crate::error::{shape_err, MhlaError, Result};
use crate::mixing::{compute_local_summaries, mix_summaries, CoefficientMatrix, SummaryStack};
use crate::partition::BlockPartition;
use crate::tensor::{apply_feature_map, dot, gemm, row_softmax_in_place, FeatureMap, Matrix, Real};

/// Normalizers below this are reported instead of divided by.
pub const NORMALIZER_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub feature_map: FeatureMap,
    pub normalize: bool,
    pub partition: Option<BlockPartition>,
    pub coefficients: Option<CoefficientMatrix>,
}

impl AttentionConfig {
    /// Configuration for global linear attention.
    pub fn global(feature_map: FeatureMap, normalize: bool) -> Result<Self> {
        check_normalizable(feature_map, normalize)?;
        Ok(Self {
            feature_map,
            normalize,
            partition: None,
            coefficients: None,
        })
    }

    /// Configuration for MHLA over `partition` mixed by `coefficients`.
    pub fn mhla(
        feature_map: FeatureMap,
        normalize: bool,
        partition: BlockPartition,
        coefficients: CoefficientMatrix,
    ) -> Result<Self> {
        check_normalizable(feature_map, normalize)?;
        if partition.num_blocks() != coefficients.num_blocks() {
            return Err(shape_err(
                "attention config",
                format!(
                    "partition has {} blocks but coefficients are {}x{}",
                    partition.num_blocks(),
                    coefficients.num_blocks(),
                    coefficients.num_blocks()
                ),
            ));
        }
        Ok(Self {
            feature_map,
            normalize,
            partition: Some(partition),
            coefficients: Some(coefficients),
        })
    }

    pub fn with_coefficients(&self, coefficients: CoefficientMatrix) -> Result<Self> {
        let partition = self
            .partition
            .clone()
            .ok_or_else(|| MhlaError::InvalidConfig("configuration has no partition".into()))?;
        Self::mhla(self.feature_map, self.normalize, partition, coefficients)
    }

    pub(crate) fn blocks(&self) -> Result<(&BlockPartition, &CoefficientMatrix)> {
        match (&self.partition, &self.coefficients) {
            (Some(p), Some(c)) => Ok((p, c)),
            _ => Err(MhlaError::InvalidConfig(
                "MHLA needs a partition and a coefficient matrix".into(),
            )),
        }
    }
}

fn check_normalizable(feature_map: FeatureMap, normalize: bool) -> Result<()> {
    if normalize && !feature_map.is_nonnegative() {
        return Err(MhlaError::InvalidConfig(format!(
            "normalization needs a nonnegative feature map, got {feature_map}"
        )));
    }
    Ok(())
}

pub(crate) fn check_qkv<T: Real>(
    op: &'static str,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<()> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(shape_err(
            op,
            format!(
                "q {:?}, k {:?}, v {:?} must all be N x d",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(())
}

pub(crate) fn check_partition_len(op: &'static str, p: &BlockPartition, n: usize) -> Result<()> {
    if p.seq_len() != n {
        return Err(shape_err(
            op,
            format!("{n} tokens but the partition covers {}", p.seq_len()),
        ));
    }
    Ok(())
}

#[inline]
pub(crate) fn normalize_row<T: Real>(row: &mut [T], den: T, index: usize) -> Result<()> {
    if !(den.as_f64() >= NORMALIZER_FLOOR) {
        return Err(MhlaError::DegenerateNormalizer {
            row: index,
            value: den.as_f64(),
        });
    }
    let inv = T::one() / den;
    for x in row {
        *x *= inv;
    }
    Ok(())
}

/// `softmax(QKᵀ/√d) V`, materializing the `N x N` score matrix.
pub fn softmax_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_qkv("softmax_attention", q, k, v)?;
    let d = q.cols();
    let mut scores = gemm(q, k, false, true)?;
    let scale = T::one() / T::from_usize(d.max(1)).expect("dimension fits").sqrt();
    row_softmax_in_place(&mut scores, scale);
    gemm(&scores, v, false, false)
}

/// Global linear attention through the `d x d` summary `G = φ(K)ᵀV` and
/// normalizer `z = Σ_j φ(K_j)`.
pub fn linear_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &AttentionConfig,
) -> Result<Matrix<T>> {
    check_qkv("linear_attention", q, k, v)?;
    check_normalizable(cfg.feature_map, cfg.normalize)?;
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let g = gemm(&kf, v, true, false)?;
    let mut out = gemm(&qf, &g, false, false)?;
    if cfg.normalize {
        let d = q.cols();
        let mut z = vec![T::zero(); d];
        for r in 0..kf.rows() {
            for (zi, &x) in z.iter_mut().zip(kf.row(r)) {
                *zi += x;
            }
        }
        for i in 0..out.rows() {
            let den = dot(qf.row(i), &z);
            normalize_row(out.row_mut(i), den, i)?;
        }
    }
    Ok(out)
}

/// Applies each block's mixed summary to that block's feature-mapped queries.
pub(crate) fn apply_mixed_summaries<T: Real>(
    qf: &Matrix<T>,
    mixed: &SummaryStack<T>,
    partition: &BlockPartition,
    normalize: bool,
) -> Result<Matrix<T>> {
    let (n, d) = qf.shape();
    let mut out = Matrix::zeros(n, d);
    for i in 0..partition.num_blocks() {
        let idx = partition.tokens(i);
        let qb = qf.gather_rows(idx);
        let num = gemm(&qb, &mixed.summary_matrix(i), false, false)?;
        let z = mixed.normalizer(i);
        for (r, &t) in idx.iter().enumerate() {
            let dst = out.row_mut(t);
            dst.copy_from_slice(num.row(r));
            if normalize {
                normalize_row(dst, dot(qb.row(r), z), t)?;
            }
        }
    }
    Ok(out)
}

/// Multi-head linear attention: local summaries per block, mixed per query
/// block by the coefficient matrix, then applied to that block's queries.
/// Costs `O(N d² + M² d²)`.
pub fn mhla_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &AttentionConfig,
) -> Result<Matrix<T>> {
    check_qkv("mhla_forward", q, k, v)?;
    let (partition, coefficients) = cfg.blocks()?;
    if coefficients.is_causal() {
        return Err(MhlaError::InvalidConfig(
            "mhla_forward is bidirectional; use chunkwise_causal_forward for causal coefficients"
                .into(),
        ));
    }
    check_partition_len("mhla_forward", partition, q.rows())?;
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let stack = compute_local_summaries(&kf, v, partition)?;
    let mixed = mix_summaries(coefficients, &stack)?;
    apply_mixed_summaries(&qf, &mixed, partition, cfg.normalize)
}

/// Explicit `O(N² d)` evaluation of MHLA: token `t` in block `i` sums
/// `m_{i,b(j)} (q̃_t · k̃_j) v_j` over every token `j`.
pub fn mhla_token_expansion(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    cfg: &AttentionConfig,
) -> Result<Matrix<f64>> {
    check_qkv("mhla_token_expansion", q, k, v)?;
    let (partition, coefficients) = cfg.blocks()?;
    if coefficients.is_causal() {
        return Err(MhlaError::InvalidConfig(
            "mhla_token_expansion is bidirectional; use naive_causal_oracle for causal coefficients"
                .into(),
        ));
    }
    check_partition_len("mhla_token_expansion", partition, q.rows())?;
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let (n, d) = q.shape();
    let mut out = Matrix::zeros(n, d);
    for t in 0..n {
        let i = partition.block_of(t);
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..n {
            let w = coefficients.get(i, partition.block_of(j)) * dot(qf.row(t), kf.row(j));
            for (x, &vj) in num.iter_mut().zip(v.row(j)) {
                *x += w * vj;
            }
            den += w;
        }
        if cfg.normalize {
            normalize_row(&mut num, den, t)?;
        }
        out.row_mut(t).copy_from_slice(&num);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::locality_init;
    use crate::tensor::DenseMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qkv(seed: u64, n: usize, d: usize) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            DenseMatrix::gaussian(&mut rng, n, d),
            DenseMatrix::gaussian(&mut rng, n, d),
            DenseMatrix::gaussian(&mut rng, n, d),
        )
    }

    fn mhla_cfg(n: usize, m: usize, c: CoefficientMatrix, normalize: bool) -> AttentionConfig {
        AttentionConfig::mhla(
            FeatureMap::EluPlusOne,
            normalize,
            BlockPartition::linear(n, m).unwrap(),
            c,
        )
        .unwrap()
    }

    // Direct evaluation of softmax attention, one query at a time.
    fn softmax_oracle(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> DenseMatrix {
        let (n, d) = q.shape();
        let mut out = DenseMatrix::zeros(n, d);
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|a| q.get(i, a) * k.get(j, a)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let total: f64 = w.iter().sum();
            for j in 0..n {
                for a in 0..d {
                    out.set(i, a, out.get(i, a) + w[j] / total * v.get(j, a));
                }
            }
        }
        out
    }

    // Direct evaluation of normalized kernelized attention, one query at a time.
    fn linear_oracle(
        q: &DenseMatrix,
        k: &DenseMatrix,
        v: &DenseMatrix,
        fm: FeatureMap,
    ) -> DenseMatrix {
        let (n, d) = q.shape();
        let mut out = DenseMatrix::zeros(n, d);
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                let w: f64 = (0..d)
                    .map(|a| fm.eval(q.get(i, a)) * fm.eval(k.get(j, a)))
                    .sum();
                den += w;
                for a in 0..d {
                    out.set(i, a, out.get(i, a) + w * v.get(j, a));
                }
            }
            for a in 0..d {
                out.set(i, a, out.get(i, a) / den);
            }
        }
        out
    }

    #[test]
    fn softmax_single_token_returns_value() {
        let (q, k, v) = qkv(1, 1, 3);
        let y = softmax_attention(&q, &k, &v).unwrap();
        assert!(y.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_identical_keys_average_values() {
        let (q, _, v) = qkv(2, 5, 3);
        let k = DenseMatrix::filled(5, 3, 0.7);
        let y = softmax_attention(&q, &k, &v).unwrap();
        for a in 0..3 {
            let mean: f64 = (0..5).map(|j| v.get(j, a)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((y.get(i, a) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_matches_per_token_oracle() {
        let (q, k, v) = qkv(7, 3, 2);
        let y = softmax_attention(&q, &k, &v).unwrap();
        assert!(y.max_abs_diff(&softmax_oracle(&q, &k, &v)).unwrap() < 1e-14);
    }

    #[test]
    fn linear_single_token_returns_value() {
        let (q, k, v) = qkv(3, 1, 4);
        let cfg = AttentionConfig::global(FeatureMap::EluPlusOne, true).unwrap();
        let y = linear_attention(&q, &k, &v, &cfg).unwrap();
        assert!(y.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn linear_identity_unnormalized_is_associative_product() {
        let (q, k, v) = qkv(4, 6, 3);
        let cfg = AttentionConfig::global(FeatureMap::Identity, false).unwrap();
        let y = linear_attention(&q, &k, &v, &cfg).unwrap();
        let direct = gemm(&gemm(&q, &k, false, true).unwrap(), &v, false, false).unwrap();
        assert!(y.max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn linear_matches_per_token_oracle() {
        let (q, k, v) = qkv(3, 8, 4);
        let cfg = AttentionConfig::global(FeatureMap::EluPlusOne, true).unwrap();
        let y = linear_attention(&q, &k, &v, &cfg).unwrap();
        let oracle = linear_oracle(&q, &k, &v, FeatureMap::EluPlusOne);
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-13);
    }

    #[test]
    fn identity_map_cannot_be_normalized() {
        assert!(AttentionConfig::global(FeatureMap::Identity, true).is_err());
    }

    #[test]
    fn degenerate_normalizer_names_row() {
        let q = DenseMatrix::from_rows(&[[1.0, 1.0], [-1.0, -2.0]]).unwrap();
        let k = DenseMatrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        let v = k.clone();
        let cfg = AttentionConfig::global(FeatureMap::Relu, true).unwrap();
        match linear_attention(&q, &k, &v, &cfg) {
            Err(MhlaError::DegenerateNormalizer { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate normalizer, got {other:?}"),
        }
    }

    #[test]
    fn mhla_single_block_is_global_linear() {
        let (q, k, v) = qkv(8, 12, 3);
        for normalize in [true, false] {
            let cfg = mhla_cfg(12, 1, CoefficientMatrix::identity(1), normalize);
            let y = mhla_forward(&q, &k, &v, &cfg).unwrap();
            let g = linear_attention(
                &q,
                &k,
                &v,
                &AttentionConfig::global(FeatureMap::EluPlusOne, normalize).unwrap(),
            )
            .unwrap();
            assert!(y.max_abs_diff(&g).unwrap() <= 1e-12 * g.max_abs().max(1.0));
        }
    }

    #[test]
    fn mhla_identity_coefficients_is_blockwise_linear() {
        let (q, k, v) = qkv(9, 12, 3);
        let cfg = mhla_cfg(12, 3, CoefficientMatrix::identity(3), true);
        let y = mhla_forward(&q, &k, &v, &cfg).unwrap();
        let global = AttentionConfig::global(FeatureMap::EluPlusOne, true).unwrap();
        for b in 0..3 {
            let idx: Vec<usize> = (b * 4..(b + 1) * 4).collect();
            let yb = linear_attention(
                &q.gather_rows(&idx),
                &k.gather_rows(&idx),
                &v.gather_rows(&idx),
                &global,
            )
            .unwrap();
            assert!(y.gather_rows(&idx).max_abs_diff(&yb).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mhla_matches_token_expansion() {
        let (q, k, v) = qkv(1, 16, 4);
        let p = BlockPartition::linear(16, 4).unwrap();
        let cfg = AttentionConfig::mhla(FeatureMap::EluPlusOne, true, p.clone(), locality_init(&p))
            .unwrap();
        let y = mhla_forward(&q, &k, &v, &cfg).unwrap();
        let e = mhla_token_expansion(&q, &k, &v, &cfg).unwrap();
        assert!(y.max_abs_diff(&e).unwrap() <= 1e-12);
    }

    #[test]
    fn uniform_mixture_reconstructs_global() {
        let (q, k, v) = qkv(10, 16, 4);
        let cfg = mhla_cfg(16, 4, CoefficientMatrix::uniform(4), true);
        let e = mhla_token_expansion(&q, &k, &v, &cfg).unwrap();
        let g = linear_attention(
            &q,
            &k,
            &v,
            &AttentionConfig::global(FeatureMap::EluPlusOne, true).unwrap(),
        )
        .unwrap();
        assert!(e.max_abs_diff(&g).unwrap() < 1e-12);
    }

    #[test]
    fn one_hot_row_selects_own_block() {
        let (q, k, mut v) = qkv(11, 8, 2);
        let mut w = DenseMatrix::filled(2, 2, 0.5);
        w.set(0, 0, 1.0);
        w.set(0, 1, 0.0);
        let cfg = mhla_cfg(8, 2, CoefficientMatrix::new(w, false).unwrap(), true);
        let before = mhla_token_expansion(&q, &k, &v, &cfg).unwrap();
        for j in 4..8 {
            v.row_mut(j).iter_mut().for_each(|x| *x += 100.0);
        }
        let after = mhla_token_expansion(&q, &k, &v, &cfg).unwrap();
        for t in 0..4 {
            assert_eq!(before.row(t), after.row(t));
        }
        assert_ne!(before.row(5), after.row(5));
    }

    #[test]
    fn mhla_rejects_mismatched_partition_and_causal_coefficients() {
        let (q, k, v) = qkv(12, 8, 2);
        let cfg = mhla_cfg(12, 2, CoefficientMatrix::identity(2), true);
        assert!(mhla_forward(&q, &k, &v, &cfg).is_err());
        let causal = crate::mixing::causal_mask(&CoefficientMatrix::uniform(2));
        let cfg = mhla_cfg(8, 2, causal, true);
        assert!(mhla_forward(&q, &k, &v, &cfg).is_err());
        assert!(AttentionConfig::mhla(
            FeatureMap::Relu,
            true,
            BlockPartition::linear(8, 2).unwrap(),
            CoefficientMatrix::identity(4)
        )
        .is_err());
    }

    #[test]
    fn single_precision_tracks_double() {
        let (q, k, v) = qkv(13, 16, 4);
        let cfg = mhla_cfg(16, 4, CoefficientMatrix::uniform(4), true);
        let y64 = mhla_forward(&q, &k, &v, &cfg).unwrap();
        let y32 = mhla_forward(&q.cast::<f32>(), &k.cast(), &v.cast(), &cfg).unwrap();
        assert!(y32.cast::<f64>().max_abs_diff(&y64).unwrap() < 1e-5);
    }
}
