//! Causal MHLA: chunkwise-parallel form, a per-prefix oracle, and an
//! O(d²)-per-token streaming state.
//!
//! Token `t` in block `i` sees the mixed prefix `Σ_{b<i} m_ib S_b` of all
//! completed blocks plus the `m_ii`-weighted part of its own block up to and
//! including itself. Normalizers are weighted identically.

use crate::attention::{check_partition_len, check_qkv, normalize_row, AttentionConfig};
use crate::error::{shape_err, MhlaError, Result};
use crate::fixture::{Fixture, FixtureError};
use crate::mixing::{compute_local_summaries, CoefficientMatrix};
use crate::partition::{BlockPartition, Layout};
use crate::tensor::{
    apply_feature_map, axpy_slice, dot, gemm, DenseMatrix, FeatureMap, Matrix, Real,
};

pub(crate) fn causal_parts(cfg: &AttentionConfig) -> Result<(&BlockPartition, &CoefficientMatrix)> {
    let (partition, coefficients) = cfg.blocks()?;
    if !coefficients.is_causal() {
        return Err(MhlaError::InvalidConfig(
            "causal attention needs causal (lower-triangular) coefficients".into(),
        ));
    }
    if partition.layout() != Layout::Linear {
        return Err(MhlaError::InvalidConfig(
            "causal attention is only defined on a linear-1d partition".into(),
        ));
    }
    Ok((partition, coefficients))
}

/// Chunkwise-parallel causal MHLA.
///
/// Per block: one GEMM of the block's queries against its mixed prefix
/// summary, plus a masked `C x C` intra-block term scaled by `m_ii`.
pub fn chunkwise_causal_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &AttentionConfig,
) -> Result<Matrix<T>> {
    check_qkv("chunkwise_causal_forward", q, k, v)?;
    let (partition, coefficients) = causal_parts(cfg)?;
    check_partition_len("chunkwise_causal_forward", partition, q.rows())?;
    let (n, d) = q.shape();
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let stack = compute_local_summaries(&kf, v, partition)?;
    let width = d * d + d;
    let mut out = Matrix::zeros(n, d);
    for i in 0..partition.num_blocks() {
        // Mixed prefix over completed blocks only, so later blocks never
        // enter the arithmetic.
        let mut prefix = vec![T::zero(); width];
        for b in 0..i {
            let w = T::from_f64_lossy(coefficients.get(i, b));
            axpy_slice(w, stack.packed().row(b), &mut prefix);
        }
        let prefix_s = Matrix::from_vec(d, d, prefix[..d * d].to_vec())?;
        let prefix_z = &prefix[d * d..];

        let idx = partition.tokens(i);
        let qb = qf.gather_rows(idx);
        let kb = kf.gather_rows(idx);
        let vb = v.gather_rows(idx);
        let mut num = gemm(&qb, &prefix_s, false, false)?;
        let scores = gemm(&qb, &kb, false, true)?;
        let self_w = T::from_f64_lossy(coefficients.get(i, i));
        for (r, &t) in idx.iter().enumerate() {
            let mut den = dot(qb.row(r), prefix_z);
            let num_row = num.row_mut(r);
            for j in 0..=r {
                let w = self_w * scores.get(r, j);
                axpy_slice(w, vb.row(j), num_row);
                den += w;
            }
            if cfg.normalize {
                normalize_row(num_row, den, t)?;
            }
            out.row_mut(t).copy_from_slice(num_row);
        }
    }
    Ok(out)
}

/// For every token, the explicit sum `Σ_{j≤t} m_{i(t),b(j)} (q̃_t·k̃_j) v_j`.
pub fn naive_causal_oracle(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cfg: &AttentionConfig,
) -> Result<DenseMatrix> {
    check_qkv("naive_causal_oracle", q, k, v)?;
    let (partition, coefficients) = causal_parts(cfg)?;
    check_partition_len("naive_causal_oracle", partition, q.rows())?;
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let (n, d) = q.shape();
    let mut out = DenseMatrix::zeros(n, d);
    for t in 0..n {
        let i = partition.block_of(t);
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..=t {
            let w = coefficients.get(i, partition.block_of(j)) * dot(qf.row(t), kf.row(j));
            axpy_slice(w, v.row(j), &mut num);
            den += w;
        }
        if cfg.normalize {
            normalize_row(&mut num, den, t)?;
        }
        out.row_mut(t).copy_from_slice(&num);
    }
    Ok(out)
}

/// Incremental causal inference state.
///
/// Completed blocks are cached as packed `[S_b | z_b]` rows; the block in
/// progress keeps a running partial sum. The mixed prefix for the current
/// block is computed once on entering the block.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    config: AttentionConfig,
    dim: usize,
    completed: Vec<Vec<f64>>,
    current: Vec<f64>,
    prefix: Vec<f64>,
    tokens_in_current_block: usize,
    block_index: usize,
}

/// Empty stream for a causal linear-1d configuration with head dimension `dim`.
pub fn stream_init(cfg: &AttentionConfig, dim: usize) -> Result<StreamState> {
    causal_parts(cfg)?;
    let width = dim * dim + dim;
    Ok(StreamState {
        config: cfg.clone(),
        dim,
        completed: Vec::new(),
        current: vec![0.0; width],
        prefix: vec![0.0; width],
        tokens_in_current_block: 0,
        block_index: 0,
    })
}

impl StreamState {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_index(&self) -> usize {
        self.block_index
    }

    pub fn tokens_in_current_block(&self) -> usize {
        self.tokens_in_current_block
    }

    pub fn completed_blocks(&self) -> usize {
        self.completed.len()
    }

    pub fn block_size(&self) -> usize {
        self.partition().block_size()
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    fn partition(&self) -> &BlockPartition {
        self.config.partition.as_ref().expect("validated at init")
    }

    fn coefficients(&self) -> &CoefficientMatrix {
        self.config
            .coefficients
            .as_ref()
            .expect("validated at init")
    }

    /// `S_b` of a sealed block, row-major `d x d`.
    pub fn completed_summary(&self, b: usize) -> &[f64] {
        &self.completed[b][..self.dim * self.dim]
    }

    /// Partial summary of the block in progress.
    pub fn current_summary(&self) -> &[f64] {
        &self.current[..self.dim * self.dim]
    }

    pub fn current_normalizer(&self) -> &[f64] {
        &self.current[self.dim * self.dim..]
    }

    /// Packed `[S | z]` prefix mixed from the sealed blocks, as cached when
    /// the current block received its first token.
    pub fn mixed_prefix(&self) -> &[f64] {
        &self.prefix
    }

    /// Consumes one token and returns its output row.
    pub fn step(&mut self, q_t: &[f64], k_t: &[f64], v_t: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if q_t.len() != d || k_t.len() != d || v_t.len() != d {
            return Err(shape_err(
                "stream_step",
                format!(
                    "expected vectors of length {d}, got {}/{}/{}",
                    q_t.len(),
                    k_t.len(),
                    v_t.len()
                ),
            ));
        }
        let num_blocks = self.coefficients().num_blocks();
        if self.block_index >= num_blocks {
            return Err(MhlaError::StreamOverflow {
                block_index: self.block_index,
                num_blocks,
            });
        }
        let i = self.block_index;
        if self.tokens_in_current_block == 0 {
            self.prefix.iter_mut().for_each(|x| *x = 0.0);
            for (b, sealed) in self.completed.iter().enumerate() {
                let w = self.coefficients().get(i, b);
                axpy_slice(w, sealed, &mut self.prefix);
            }
        }
        let fm = self.config.feature_map;
        let qf: Vec<f64> = q_t.iter().map(|&x| fm.eval(x)).collect();
        let kf: Vec<f64> = k_t.iter().map(|&x| fm.eval(x)).collect();
        for (a, &ka) in kf.iter().enumerate() {
            axpy_slice(ka, v_t, &mut self.current[a * d..(a + 1) * d]);
        }
        for (z, &ka) in self.current[d * d..].iter_mut().zip(&kf) {
            *z += ka;
        }

        let self_w = self.coefficients().get(i, i);
        let mut out = vec![0.0; d];
        for (a, &qa) in qf.iter().enumerate() {
            axpy_slice(qa, &self.prefix[a * d..(a + 1) * d], &mut out);
        }
        let mut own = vec![0.0; d];
        for (a, &qa) in qf.iter().enumerate() {
            axpy_slice(qa, &self.current[a * d..(a + 1) * d], &mut own);
        }
        axpy_slice(self_w, &own, &mut out);
        if self.config.normalize {
            let den = dot(&qf, &self.prefix[d * d..]) + self_w * dot(&qf, &self.current[d * d..]);
            let t = i * self.block_size() + self.tokens_in_current_block;
            normalize_row(&mut out, den, t)?;
        }

        self.tokens_in_current_block += 1;
        if self.tokens_in_current_block == self.block_size() {
            let sealed = std::mem::replace(&mut self.current, vec![0.0; d * d + d]);
            self.completed.push(sealed);
            self.tokens_in_current_block = 0;
            self.block_index += 1;
        }
        Ok(out)
    }

    /// Serializes the state into named tensors.
    pub fn to_fixture(&self) -> Fixture {
        let partition = self.partition();
        let mut fx = Fixture::new();
        let meta = DenseMatrix::from_vec(
            1,
            7,
            vec![
                partition.seq_len() as f64,
                partition.num_blocks() as f64,
                self.dim as f64,
                self.config.feature_map.code(),
                if self.config.normalize { 1.0 } else { 0.0 },
                self.block_index as f64,
                self.tokens_in_current_block as f64,
            ],
        )
        .expect("7 entries");
        fx.insert("stream.meta".into(), meta);
        fx.insert(
            "stream.coefficients".into(),
            self.coefficients().values().clone(),
        );
        let width = self.dim * self.dim + self.dim;
        let completed = DenseMatrix::from_vec(
            self.completed.len(),
            width,
            self.completed.iter().flatten().copied().collect(),
        )
        .expect("rows of equal width");
        fx.insert("stream.completed".into(), completed);
        fx.insert(
            "stream.current".into(),
            DenseMatrix::from_vec(1, width, self.current.clone()).expect("width"),
        );
        fx.insert(
            "stream.prefix".into(),
            DenseMatrix::from_vec(1, width, self.prefix.clone()).expect("width"),
        );
        fx
    }

    /// Rebuilds a state written by [`StreamState::to_fixture`].
    pub fn from_fixture(fx: &Fixture) -> Result<Self> {
        let get = |name: &str| {
            fx.get(name)
                .ok_or_else(|| FixtureError::MissingEntry(name.to_string()))
        };
        let meta = get("stream.meta")?;
        if meta.shape() != (1, 7) {
            return Err(shape_err("stream fixture", "meta must be 1x7"));
        }
        let m = meta.row(0);
        let as_count = |x: f64| x as usize;
        let (seq_len, num_blocks, dim) = (as_count(m[0]), as_count(m[1]), as_count(m[2]));
        let feature_map = FeatureMap::from_code(m[3]).ok_or_else(|| {
            MhlaError::InvalidConfig(format!("unknown feature map code {}", m[3]))
        })?;
        let normalize = m[4] != 0.0;
        let coefficients = CoefficientMatrix::new(get("stream.coefficients")?.clone(), true)?;
        let partition = BlockPartition::linear(seq_len, num_blocks)?;
        let config = AttentionConfig::mhla(feature_map, normalize, partition, coefficients)?;
        let width = dim * dim + dim;
        let completed_m = get("stream.completed")?;
        let current = get("stream.current")?;
        let prefix = get("stream.prefix")?;
        if completed_m.cols() != width && completed_m.rows() != 0
            || current.shape() != (1, width)
            || prefix.shape() != (1, width)
        {
            return Err(shape_err(
                "stream fixture",
                format!("summaries must be {width} wide"),
            ));
        }
        let block_index = as_count(m[5]);
        if completed_m.rows() != block_index {
            return Err(shape_err(
                "stream fixture",
                format!(
                    "{} sealed blocks but block index {block_index}",
                    completed_m.rows()
                ),
            ));
        }
        Ok(StreamState {
            config,
            dim,
            completed: (0..completed_m.rows())
                .map(|b| completed_m.row(b).to_vec())
                .collect(),
            current: current.row(0).to_vec(),
            prefix: prefix.row(0).to_vec(),
            tokens_in_current_block: as_count(m[6]),
            block_index,
        })
    }
}

/// Free-function form of [`StreamState::step`].
pub fn stream_step(
    state: &mut StreamState,
    q_t: &[f64],
    k_t: &[f64],
    v_t: &[f64],
) -> Result<Vec<f64>> {
    state.step(q_t, k_t, v_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{causal_mask, locality_init};
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

    fn causal_cfg(n: usize, m: usize, normalize: bool) -> AttentionConfig {
        let p = BlockPartition::linear(n, m).unwrap();
        let c = causal_mask(&crate::mixing::locality_init_with_floor(&p, 0.2));
        AttentionConfig::mhla(FeatureMap::EluPlusOne, normalize, p, c).unwrap()
    }

    #[test]
    fn first_token_returns_its_value() {
        let (q, k, v) = qkv(1, 2, 3);
        let cfg = causal_cfg(2, 2, true);
        let y = chunkwise_causal_forward(&q, &k, &v, &cfg).unwrap();
        assert!(y
            .row(0)
            .iter()
            .zip(v.row(0))
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let o = naive_causal_oracle(&q, &k, &v, &cfg).unwrap();
        assert!(o
            .row(0)
            .iter()
            .zip(v.row(0))
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn single_block_is_causal_linear_recurrence() {
        let (q, k, v) = qkv(2, 10, 3);
        let p = BlockPartition::linear(10, 1).unwrap();
        let cfg = AttentionConfig::mhla(
            FeatureMap::EluPlusOne,
            true,
            p,
            causal_mask(&CoefficientMatrix::identity(1)),
        )
        .unwrap();
        let y = chunkwise_causal_forward(&q, &k, &v, &cfg).unwrap();
        // Standard recurrence: S_t = S_{t-1} + k̃_t v_tᵀ, z_t = z_{t-1} + k̃_t.
        let fm = FeatureMap::EluPlusOne;
        let mut s = [0.0; 9];
        let mut z = [0.0; 3];
        for t in 0..10 {
            let kf: Vec<f64> = k.row(t).iter().map(|&x| fm.eval(x)).collect();
            let qf: Vec<f64> = q.row(t).iter().map(|&x| fm.eval(x)).collect();
            for a in 0..3 {
                z[a] += kf[a];
                for e in 0..3 {
                    s[a * 3 + e] += kf[a] * v.get(t, e);
                }
            }
            let den: f64 = (0..3).map(|a| qf[a] * z[a]).sum();
            for e in 0..3 {
                let num: f64 = (0..3).map(|a| qf[a] * s[a * 3 + e]).sum();
                assert!((y.get(t, e) - num / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_map_single_block_is_masked_product() {
        let (q, k, v) = qkv(3, 6, 2);
        let p = BlockPartition::linear(6, 1).unwrap();
        let cfg = AttentionConfig::mhla(
            FeatureMap::Identity,
            false,
            p,
            causal_mask(&CoefficientMatrix::identity(1)),
        )
        .unwrap();
        let mut scores = gemm(&q, &k, false, true).unwrap();
        for i in 0..6 {
            for j in (i + 1)..6 {
                scores.set(i, j, 0.0);
            }
        }
        let masked = gemm(&scores, &v, false, false).unwrap();
        let o = naive_causal_oracle(&q, &k, &v, &cfg).unwrap();
        assert!(o.max_abs_diff(&masked).unwrap() < 1e-12);
    }

    #[test]
    fn chunkwise_matches_oracle() {
        let (q, k, v) = qkv(5, 32, 4);
        for normalize in [true, false] {
            let cfg = causal_cfg(32, 4, normalize);
            let y = chunkwise_causal_forward(&q, &k, &v, &cfg).unwrap();
            let o = naive_causal_oracle(&q, &k, &v, &cfg).unwrap();
            assert!(y.max_abs_diff(&o).unwrap() <= 1e-11 * o.max_abs().max(1.0));
        }
    }

    #[test]
    fn rejects_non_causal_and_grid_configs() {
        let (q, k, v) = qkv(6, 16, 2);
        let p = BlockPartition::linear(16, 4).unwrap();
        let cfg = AttentionConfig::mhla(FeatureMap::EluPlusOne, true, p.clone(), locality_init(&p))
            .unwrap();
        assert!(chunkwise_causal_forward(&q, &k, &v, &cfg).is_err());
        assert!(stream_init(&cfg, 2).is_err());
        let g = BlockPartition::square_grid(4, 2).unwrap();
        let cfg = AttentionConfig::mhla(
            FeatureMap::EluPlusOne,
            true,
            g.clone(),
            causal_mask(&locality_init(&g)),
        )
        .unwrap();
        assert!(chunkwise_causal_forward(&q, &k, &v, &cfg).is_err());
        assert!(naive_causal_oracle(&q, &k, &v, &cfg).is_err());
    }

    #[test]
    fn stream_init_is_empty_and_deterministic() {
        let cfg = causal_cfg(32, 4, true);
        let s = stream_init(&cfg, 4).unwrap();
        assert!(s.current_summary().iter().all(|&x| x == 0.0));
        assert_eq!(s.block_index(), 0);
        assert_eq!(s.block_size(), 8);
        assert_eq!(s, stream_init(&cfg, 4).unwrap());
    }

    #[test]
    fn streaming_matches_chunkwise_and_seals_blocks() {
        let (q, k, v) = qkv(7, 32, 4);
        let cfg = causal_cfg(32, 4, true);
        let batch = chunkwise_causal_forward(&q, &k, &v, &cfg).unwrap();
        let mut s = stream_init(&cfg, 4).unwrap();
        for t in 0..32 {
            let y = stream_step(&mut s, q.row(t), k.row(t), v.row(t)).unwrap();
            if t == 0 {
                assert!(y.iter().zip(v.row(0)).all(|(a, b)| (a - b).abs() < 1e-14));
            }
            for (a, b) in y.iter().zip(batch.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
            // Sealing happens as the last token of each 8-token block arrives.
            assert_eq!(s.completed_blocks(), (t + 1) / 8);
        }
        assert!(matches!(
            s.step(q.row(0), k.row(0), v.row(0)),
            Err(MhlaError::StreamOverflow {
                block_index: 4,
                num_blocks: 4
            })
        ));
    }

    #[test]
    fn first_token_of_new_block_writes_fresh_summary() {
        let (q, k, v) = qkv(8, 8, 2);
        let cfg = causal_cfg(8, 2, false);
        let mut s = stream_init(&cfg, 2).unwrap();
        for t in 0..4 {
            s.step(q.row(t), k.row(t), v.row(t)).unwrap();
        }
        assert_eq!(s.completed_blocks(), 1);
        assert_eq!(s.tokens_in_current_block(), 0);
        s.step(q.row(4), k.row(4), v.row(4)).unwrap();
        assert_eq!(s.completed_blocks(), 1);
        assert_eq!(s.tokens_in_current_block(), 1);
        let fm = FeatureMap::EluPlusOne;
        for a in 0..2 {
            for e in 0..2 {
                let expected = fm.eval(k.get(4, a)) * v.get(4, e);
                assert_eq!(s.current_summary()[a * 2 + e], expected);
            }
        }
    }

    #[test]
    fn stream_fixture_resume_continues_identically() {
        let (q, k, v) = qkv(9, 16, 3);
        let cfg = causal_cfg(16, 4, true);
        let mut a = stream_init(&cfg, 3).unwrap();
        for t in 0..6 {
            a.step(q.row(t), k.row(t), v.row(t)).unwrap();
        }
        let mut b = StreamState::from_fixture(&a.to_fixture()).unwrap();
        assert_eq!(a, b);
        for t in 6..16 {
            let ya = a.step(q.row(t), k.row(t), v.row(t)).unwrap();
            let yb = b.step(q.row(t), k.row(t), v.row(t)).unwrap();
            assert_eq!(ya, yb);
        }
    }

    #[test]
    fn stream_rejects_wrong_width() {
        let cfg = causal_cfg(8, 2, true);
        let mut s = stream_init(&cfg, 2).unwrap();
        assert!(s.step(&[1.0], &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}
