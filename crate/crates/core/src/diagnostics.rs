//! Materialized attention maps and the two collapse metrics: numerical rank
//! and mean row entropy.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{check_partition_len, AttentionConfig, NORMALIZER_FLOOR};
use crate::error::{shape_err, MhlaError, Result};
use crate::mixing::{locality_init_with_floor, CoefficientMatrix};
use crate::partition::{make_partition, padded_len, zero_pad_rows, BlockPartition, Layout};
use crate::svd::singular_values;
use crate::tensor::{apply_feature_map, gemm, row_softmax, DenseMatrix, FeatureMap};

/// Largest sequence length for which an `N x N` map is built.
pub const MATERIALIZE_CAP: usize = 8192;

/// Rows may deviate from summing to one by this much before entropy is refused.
pub const ENTROPY_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Softmax,
    Linear,
    Mhla,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Softmax, Mechanism::Linear, Mechanism::Mhla];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Softmax => "softmax",
            Mechanism::Linear => "linear",
            Mechanism::Mhla => "mhla",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = MhlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Mechanism::Softmax),
            "linear" => Ok(Mechanism::Linear),
            "mhla" => Ok(Mechanism::Mhla),
            other => Err(MhlaError::InvalidConfig(format!(
                "unknown mechanism '{other}' (expected softmax, linear or mhla)"
            ))),
        }
    }
}

/// Builds the `N x N` matrix `A` with `A V` equal to the mechanism's output.
pub fn materialize_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    cfg: &AttentionConfig,
    mechanism: Mechanism,
) -> Result<DenseMatrix> {
    if q.shape() != k.shape() {
        return Err(shape_err(
            "materialize_attention",
            format!("q {:?} vs k {:?}", q.shape(), k.shape()),
        ));
    }
    let (n, d) = q.shape();
    if n > MATERIALIZE_CAP {
        return Err(MhlaError::TooLarge {
            n,
            cap: MATERIALIZE_CAP,
        });
    }
    if mechanism == Mechanism::Softmax {
        let scores = gemm(q, k, false, true)?;
        return Ok(row_softmax(&scores, 1.0 / (d.max(1) as f64).sqrt()));
    }
    let qf = apply_feature_map(q, cfg.feature_map);
    let kf = apply_feature_map(k, cfg.feature_map);
    let mut a = gemm(&qf, &kf, false, true)?;
    if mechanism == Mechanism::Mhla {
        let (partition, coefficients) = cfg.blocks()?;
        check_partition_len("materialize_attention", partition, n)?;
        if coefficients.is_causal() {
            return Err(MhlaError::InvalidConfig(
                "materialize_attention builds bidirectional maps only".into(),
            ));
        }
        for t in 0..n {
            let i = partition.block_of(t);
            let row = a.row_mut(t);
            for (j, x) in row.iter_mut().enumerate() {
                *x *= coefficients.get(i, partition.block_of(j));
            }
        }
    }
    if cfg.normalize {
        for t in 0..n {
            let row = a.row_mut(t);
            let sum: f64 = row.iter().sum();
            if !(sum >= NORMALIZER_FLOOR) {
                return Err(MhlaError::DegenerateNormalizer { row: t, value: sum });
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
    }
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TolPolicy {
    /// `max(rows, cols) * machine epsilon * σ_max`.
    Auto,
    Explicit(f64),
}

/// Number of singular values above the tolerance.
pub fn numerical_rank(a: &DenseMatrix, tol_policy: TolPolicy) -> Result<usize> {
    let sigma = singular_values(a)?;
    let tol = match tol_policy {
        TolPolicy::Auto => {
            let s_max = sigma.first().copied().unwrap_or(0.0);
            a.rows().max(a.cols()) as f64 * f64::EPSILON * s_max
        }
        TolPolicy::Explicit(t) => t,
    };
    Ok(sigma.iter().filter(|&&s| s > tol).count())
}

/// Mean Shannon entropy (nats) of the rows, with `0 ln 0 = 0`.
pub fn mean_row_entropy(a: &DenseMatrix) -> Result<f64> {
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in 0..a.rows() {
        let row = a.row(r);
        let sum: f64 = row.iter().sum();
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > ENTROPY_SUM_TOL || min < -1e-12 || !sum.is_finite() {
            return Err(MhlaError::NotNormalized { row: r, sum, min });
        }
        total -= row
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
    }
    Ok(total / a.rows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub mechanism: Mechanism,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub numerical_rank: usize,
    pub rank_bound: usize,
    /// `None` when the map can have negative weights (identity feature map).
    pub mean_row_entropy: Option<f64>,
    pub normalized_entropy: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutChoice {
    /// Square 2D grid when `N` and `M` are both perfect squares that tile
    /// evenly, otherwise 1D.
    #[default]
    Auto,
    Linear,
    Grid,
}

impl FromStr for LayoutChoice {
    type Err = MhlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LayoutChoice::Auto),
            "linear" | "linear-1d" => Ok(LayoutChoice::Linear),
            "grid" | "grid-2d" => Ok(LayoutChoice::Grid),
            other => Err(MhlaError::InvalidConfig(format!(
                "unknown layout '{other}'"
            ))),
        }
    }
}

fn exact_sqrt(x: usize) -> Option<usize> {
    let r = (x as f64).sqrt().round() as usize;
    (r * r == x).then_some(r)
}

/// Partition used by the diagnostics for `n` tokens and `m` blocks.
pub fn diagnostic_partition(n: usize, m: usize, layout: LayoutChoice) -> Result<BlockPartition> {
    let grid = match (exact_sqrt(n), exact_sqrt(m)) {
        (Some(side), Some(bside)) if bside > 0 && side % bside == 0 => Some((side, bside)),
        _ => None,
    };
    match (layout, grid) {
        (LayoutChoice::Linear, _) | (LayoutChoice::Auto, None) => {
            make_partition(n, Layout::Linear, m)
        }
        (_, Some((side, bside))) => BlockPartition::square_grid(side, bside),
        (LayoutChoice::Grid, None) => Err(MhlaError::InvalidConfig(format!(
            "grid layout needs square N and M with sqrt(M) dividing sqrt(N) (got N={n}, M={m})"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportOptions {
    pub layout: LayoutChoice,
    pub feature_map: FeatureMap,
    pub init_floor: f64,
    pub tol: TolPolicy,
    /// Zero-pad the sequence up to the next multiple of `M` instead of
    /// rejecting a non-divisible length.
    pub pad: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            layout: LayoutChoice::Auto,
            feature_map: FeatureMap::EluPlusOne,
            init_floor: 0.0,
            tol: TolPolicy::Auto,
            pad: false,
        }
    }
}

/// Reports for softmax, linear and MHLA on the same seeded Gaussian inputs.
pub fn collapse_report(seed: u64, n: usize, d: usize, m: usize) -> Result<[DiagnosticsReport; 3]> {
    collapse_report_with(seed, n, d, m, &ReportOptions::default())
}

pub fn collapse_report_with(
    seed: u64,
    n: usize,
    d: usize,
    m: usize,
    opts: &ReportOptions,
) -> Result<[DiagnosticsReport; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DenseMatrix::gaussian(&mut rng, n, d);
    let mut k = DenseMatrix::gaussian(&mut rng, n, d);
    let n = if opts.pad && m > 0 && !n.is_multiple_of(m) {
        let padded = padded_len(n, m);
        q = zero_pad_rows(&q, padded);
        k = zero_pad_rows(&k, padded);
        padded
    } else {
        n
    };
    let partition = diagnostic_partition(n, m, opts.layout)?;
    let coefficients: CoefficientMatrix = locality_init_with_floor(&partition, opts.init_floor);
    let normalize = opts.feature_map.is_nonnegative();
    let rank_bound_mhla = partition.mhla_rank_bound(d);
    let cfg = AttentionConfig::mhla(opts.feature_map, normalize, partition, coefficients)?;

    let report = |mechanism: Mechanism, rank_bound: usize| -> Result<DiagnosticsReport> {
        let a = materialize_attention(&q, &k, &cfg, mechanism)?;
        let rank = numerical_rank(&a, opts.tol)?;
        let entropy = if mechanism == Mechanism::Softmax || normalize {
            Some(mean_row_entropy(&a)?)
        } else {
            None
        };
        Ok(DiagnosticsReport {
            mechanism,
            n,
            d,
            m,
            numerical_rank: rank,
            rank_bound,
            mean_row_entropy: entropy,
            normalized_entropy: entropy.map(|e| if n > 1 { e / (n as f64).ln() } else { 0.0 }),
            seed,
        })
    };
    Ok([
        report(Mechanism::Softmax, n)?,
        report(Mechanism::Linear, n.min(d))?,
        report(Mechanism::Mhla, rank_bound_mhla)?,
    ])
}

pub const DIAGNOSE_HEADER: [&str; 9] = [
    "mechanism",
    "N",
    "d",
    "M",
    "rank",
    "rank_bound",
    "entropy",
    "normalized_entropy",
    "seed",
];

const UNSUPPORTED: &str = "unsupported";

/// Writes reports as CSV, preceded by `#` comment lines describing the protocol.
pub fn write_reports_csv<W: Write>(
    mut out: W,
    reports: &[DiagnosticsReport],
    protocol: &[String],
) -> Result<()> {
    for line in protocol {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIAGNOSE_HEADER)?;
    let opt = |x: Option<f64>| x.map_or(UNSUPPORTED.to_string(), |v| v.to_string());
    for r in reports {
        w.write_record([
            r.mechanism.to_string(),
            r.n.to_string(),
            r.d.to_string(),
            r.m.to_string(),
            r.numerical_rank.to_string(),
            r.rank_bound.to_string(),
            opt(r.mean_row_entropy),
            opt(r.normalized_entropy),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| {
        MhlaError::InvalidConfig(format!("bad CSV field {} = '{raw}'", DIAGNOSE_HEADER[i]))
    })
}

pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<DiagnosticsReport>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(DIAGNOSE_HEADER.iter().copied()) {
        return Err(MhlaError::InvalidConfig(format!(
            "unexpected diagnose header {header:?}"
        )));
    }
    let opt = |rec: &csv::StringRecord, i: usize| -> Result<Option<f64>> {
        if rec.get(i) == Some(UNSUPPORTED) {
            Ok(None)
        } else {
            parse_field(rec, i).map(Some)
        }
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(DiagnosticsReport {
            mechanism: parse_field(&rec, 0)?,
            n: parse_field(&rec, 1)?,
            d: parse_field(&rec, 2)?,
            m: parse_field(&rec, 3)?,
            numerical_rank: parse_field(&rec, 4)?,
            rank_bound: parse_field(&rec, 5)?,
            mean_row_entropy: opt(&rec, 6)?,
            normalized_entropy: opt(&rec, 7)?,
            seed: parse_field(&rec, 8)?,
        });
    }
    Ok(out)
}
