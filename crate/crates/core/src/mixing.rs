//! Multi-head mixing: the coefficient matrix over blocks, per-block
//! key-value summaries, and the GEMM that mixes them per query block.

use crate::error::{shape_err, MhlaError, Result};
use crate::partition::BlockPartition;
use crate::tensor::{gemm, DenseMatrix, Matrix, Real};

/// Clamp margin applied by [`clip_coefficients`].
pub const CLIP_EPS: f64 = 1e-6;

/// `M x M` mixing weights; row `i` says how query block `i` combines the
/// block summaries. A causal matrix is lower-triangular.
///
/// The constructor does not force entries into `[0, 1]`: that range is
/// maintained by [`locality_init`] and [`clip_coefficients`].
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix {
    values: DenseMatrix,
    causal: bool,
}

impl CoefficientMatrix {
    pub fn new(values: DenseMatrix, causal: bool) -> Result<Self> {
        if values.rows() != values.cols() || values.rows() == 0 {
            return Err(shape_err(
                "coefficients",
                format!(
                    "expected a non-empty square matrix, got {:?}",
                    values.shape()
                ),
            ));
        }
        if !values.is_finite() {
            return Err(MhlaError::InvalidConfig(
                "coefficient matrix has non-finite entries".into(),
            ));
        }
        if causal {
            let m = values.rows();
            for i in 0..m {
                for j in (i + 1)..m {
                    if values.get(i, j) != 0.0 {
                        return Err(MhlaError::InvalidConfig(format!(
                            "causal coefficient matrix has nonzero entry above the diagonal at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(Self { values, causal })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            values: DenseMatrix::identity(m),
            causal: false,
        }
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            values: DenseMatrix::filled(m, m, 1.0 / m as f64),
            causal: false,
        }
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn into_values(self) -> DenseMatrix {
        self.values
    }

    #[inline]
    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.num_blocks())
            .map(|i| self.values.row(i).iter().sum())
            .collect()
    }
}

/// Locality-biased initialization: `m_ij ∝ 1 - dist(i,j) / max_k dist(i,k)`,
/// rows normalized to sum to one.
pub fn locality_init(partition: &BlockPartition) -> CoefficientMatrix {
    locality_init_with_floor(partition, 0.0)
}

/// [`locality_init`] with `floor` added to every raw weight before
/// normalization, so no block starts with a zero coefficient.
pub fn locality_init_with_floor(partition: &BlockPartition, floor: f64) -> CoefficientMatrix {
    let m = partition.num_blocks();
    let mut values = DenseMatrix::zeros(m, m);
    for i in 0..m {
        let dists: Vec<f64> = (0..m).map(|j| partition.block_distance(i, j)).collect();
        let max = dists.iter().cloned().fold(0.0, f64::max);
        let row = values.row_mut(i);
        for (j, &d) in dists.iter().enumerate() {
            let raw = if max > 0.0 { 1.0 - d / max } else { 1.0 };
            row[j] = raw.max(0.0) + floor;
        }
        let sum: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    CoefficientMatrix {
        values,
        causal: false,
    }
}

/// Clamps every unmasked coefficient into `[CLIP_EPS, 1 - CLIP_EPS]`.
/// Entries above the diagonal of a causal matrix stay exactly zero.
pub fn clip_coefficients(c: &CoefficientMatrix) -> CoefficientMatrix {
    let m = c.num_blocks();
    let mut values = c.values.clone();
    for i in 0..m {
        for j in 0..m {
            if c.causal && j > i {
                values.set(i, j, 0.0);
            } else {
                let x = values.get(i, j);
                values.set(i, j, x.clamp(CLIP_EPS, 1.0 - CLIP_EPS));
            }
        }
    }
    CoefficientMatrix {
        values,
        causal: c.causal,
    }
}

/// Zeros every entry above the diagonal and marks the matrix causal.
pub fn causal_mask(c: &CoefficientMatrix) -> CoefficientMatrix {
    let m = c.num_blocks();
    let mut values = c.values.clone();
    for i in 0..m {
        for j in (i + 1)..m {
            values.set(i, j, 0.0);
        }
    }
    CoefficientMatrix {
        values,
        causal: true,
    }
}

/// Per-block key-value summaries `S_b` (`d x d`) and normalizers `z_b`.
///
/// Stored packed: row `b` holds `S_b` row-major followed by `z_b`, so that
/// mixing all blocks is a single `M x M` by `M x (d² + d)` product.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryStack<T> {
    dim: usize,
    packed: Matrix<T>,
}

impl<T: Real> SummaryStack<T> {
    pub fn zeros(num_blocks: usize, dim: usize) -> Self {
        Self {
            dim,
            packed: Matrix::zeros(num_blocks, dim * dim + dim),
        }
    }

    pub fn from_packed(dim: usize, packed: Matrix<T>) -> Result<Self> {
        if packed.cols() != dim * dim + dim {
            return Err(shape_err(
                "summary stack",
                format!("packed width {} does not match d={dim}", packed.cols()),
            ));
        }
        Ok(Self { dim, packed })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.packed.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.packed.rows() == 0
    }

    pub fn packed(&self) -> &Matrix<T> {
        &self.packed
    }

    /// `S_b` as a row-major `d x d` slice.
    #[inline]
    pub fn summary(&self, b: usize) -> &[T] {
        &self.packed.row(b)[..self.dim * self.dim]
    }

    #[inline]
    pub fn normalizer(&self, b: usize) -> &[T] {
        &self.packed.row(b)[self.dim * self.dim..]
    }

    pub fn summary_matrix(&self, b: usize) -> Matrix<T> {
        Matrix::from_vec(self.dim, self.dim, self.summary(b).to_vec()).expect("d x d")
    }
}

/// `S_b = Σ_{j∈b} k̃_j v_jᵀ` and `z_b = Σ_{j∈b} k̃_j` for every block.
pub fn compute_local_summaries<T: Real>(
    k_feat: &Matrix<T>,
    v: &Matrix<T>,
    partition: &BlockPartition,
) -> Result<SummaryStack<T>> {
    if k_feat.shape() != v.shape() {
        return Err(shape_err(
            "compute_local_summaries",
            format!("keys {:?} vs values {:?}", k_feat.shape(), v.shape()),
        ));
    }
    if k_feat.rows() != partition.seq_len() {
        return Err(shape_err(
            "compute_local_summaries",
            format!(
                "{} tokens but the partition covers {}",
                k_feat.rows(),
                partition.seq_len()
            ),
        ));
    }
    let d = k_feat.cols();
    let mut stack = SummaryStack::zeros(partition.num_blocks(), d);
    for b in 0..partition.num_blocks() {
        let idx = partition.tokens(b);
        let kb = k_feat.gather_rows(idx);
        let vb = v.gather_rows(idx);
        let s = gemm(&kb, &vb, true, false)?;
        let row = stack.packed.row_mut(b);
        row[..d * d].copy_from_slice(s.data());
        let z = &mut row[d * d..];
        for r in 0..kb.rows() {
            for (zi, &ki) in z.iter_mut().zip(kb.row(r)) {
                *zi += ki;
            }
        }
    }
    Ok(stack)
}

/// `S̃_i = Σ_b m_ib S_b`, `z̃_i = Σ_b m_ib z_b`, as one GEMM.
pub fn mix_summaries<T: Real>(
    c: &CoefficientMatrix,
    stack: &SummaryStack<T>,
) -> Result<SummaryStack<T>> {
    if c.num_blocks() != stack.len() {
        return Err(shape_err(
            "mix_summaries",
            format!(
                "{} coefficient rows for {} summaries",
                c.num_blocks(),
                stack.len()
            ),
        ));
    }
    let weights: Matrix<T> = c.values.cast();
    let packed = gemm(&weights, &stack.packed, false, false)?;
    Ok(SummaryStack {
        dim: stack.dim,
        packed,
    })
}
