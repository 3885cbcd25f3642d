//! Throughput sweeps over sequence length and log-log scaling fits.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{linear_attention, mhla_forward, softmax_attention, AttentionConfig};
use crate::diagnostics::Mechanism;
use crate::error::{MhlaError, Result};
use crate::mixing::locality_init;
use crate::partition::BlockPartition;
use crate::tensor::{DenseMatrix, FeatureMap, Matrix, Real};

pub const DEFAULT_MEM_BUDGET_BYTES: u64 = 4 << 30;
pub const MEM_BUDGET_ENV: &str = "MHLA_MEM_BUDGET_BYTES";
pub const MIN_REPS: usize = 5;

pub const BENCH_HEADER: [&str; 7] = [
    "mechanism",
    "n",
    "d",
    "m",
    "reps",
    "median_seconds",
    "tokens_per_second",
];

/// How the MHLA block count follows the sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MRule {
    Fixed(usize),
    /// Largest divisor of `N` not exceeding `floor(sqrt(N))`, so `M² <= N`.
    FloorSqrtN,
}

impl MRule {
    pub fn blocks_for(self, n: usize) -> usize {
        match self {
            MRule::Fixed(m) => m,
            MRule::FloorSqrtN => {
                let mut m = (n as f64).sqrt().floor() as usize;
                while m * m > n {
                    m -= 1;
                }
                while m > 1 && !n.is_multiple_of(m) {
                    m -= 1;
                }
                m.max(1)
            }
        }
    }
}

impl fmt::Display for MRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MRule::Fixed(m) => write!(f, "{m}"),
            MRule::FloorSqrtN => f.write_str("floor-sqrt-n"),
        }
    }
}

impl FromStr for MRule {
    type Err = MhlaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "floor-sqrt-n" {
            return Ok(MRule::FloorSqrtN);
        }
        let raw = s.strip_prefix("fixed:").unwrap_or(s);
        raw.parse::<usize>()
            .ok()
            .filter(|&m| m > 0)
            .map(MRule::Fixed)
            .ok_or_else(|| {
                MhlaError::InvalidConfig(format!(
                    "bad M rule '{s}' (use floor-sqrt-n or a positive count)"
                ))
            })
    }
}

impl TryFrom<String> for MRule {
    type Error = MhlaError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MRule> for String {
    fn from(r: MRule) -> String {
        r.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl FromStr for Precision {
    type Err = MhlaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double" | "f64" => Ok(Precision::Double),
            "single" | "f32" => Ok(Precision::Single),
            other => Err(MhlaError::InvalidConfig(format!(
                "unknown precision '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingThresholds {
    pub mhla_max_slope: f64,
    pub linear_max_slope: f64,
    pub softmax_min_slope: f64,
}

impl Default for ScalingThresholds {
    fn default() -> Self {
        Self {
            mhla_max_slope: 1.2,
            linear_max_slope: 1.2,
            softmax_min_slope: 1.7,
        }
    }
}

/// Settings shared by the CLI workflows; loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mechanisms: Vec<Mechanism>,
    pub n_values: Vec<usize>,
    pub d: usize,
    pub m_rule: MRule,
    pub feature_map: FeatureMap,
    pub normalize: bool,
    pub seed: u64,
    pub precision: Precision,
    pub reps: usize,
    pub mem_budget_bytes: Option<u64>,
    pub thresholds: ScalingThresholds,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mechanisms: Mechanism::ALL.to_vec(),
            n_values: vec![1024, 2048, 4096, 8192],
            d: 64,
            m_rule: MRule::FloorSqrtN,
            feature_map: FeatureMap::EluPlusOne,
            normalize: true,
            seed: 0,
            precision: Precision::Double,
            reps: MIN_REPS,
            mem_budget_bytes: None,
            thresholds: ScalingThresholds::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(MhlaError::InvalidConfig(format!(
                "at least {MIN_REPS} timed repetitions are required (got {})",
                self.reps
            )));
        }
        if self.d == 0 || self.n_values.contains(&0) {
            return Err(MhlaError::InvalidConfig("N and d must be positive".into()));
        }
        if self.normalize && !self.feature_map.is_nonnegative() {
            return Err(MhlaError::InvalidConfig(format!(
                "normalization needs a nonnegative feature map, got {}",
                self.feature_map
            )));
        }
        for &n in &self.n_values {
            let m = self.m_rule.blocks_for(n);
            if n % m != 0 {
                return Err(MhlaError::NotDivisible {
                    what: format!("sequence length {n}"),
                    parts: m,
                    padded: crate::partition::padded_len(n, m),
                });
            }
        }
        Ok(())
    }

    /// Explicit config value, then the environment variable, then 4 GiB.
    pub fn effective_mem_budget(&self) -> u64 {
        self.mem_budget_bytes
            .or_else(|| {
                std::env::var(MEM_BUDGET_ENV)
                    .ok()
                    .and_then(|s| s.trim().parse().ok())
            })
            .unwrap_or(DEFAULT_MEM_BUDGET_BYTES)
    }

    /// Protocol description written as CSV comment lines.
    pub fn protocol_lines(&self) -> Vec<String> {
        vec![
            format!(
                "protocol: 1 warm-up run discarded, median of {} timed runs, monotonic wall clock, single thread",
                self.reps
            ),
            format!(
                "inputs: seeded standard normal q,k,v (seed {}), identical across mechanisms per n; precision {}",
                self.seed,
                match self.precision {
                    Precision::Double => "double",
                    Precision::Single => "single",
                }
            ),
            format!(
                "mhla: linear-1d partition, m rule {}, locality init; feature map {}, normalize {}; softmax memory budget {} bytes",
                self.m_rule,
                self.feature_map,
                self.normalize,
                self.effective_mem_budget()
            ),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub tokens_per_second: f64,
    /// SHA-256 of the input tensors, shared by every mechanism at this `n`.
    pub input_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BenchEntry {
    Measured(BenchRecord),
    Skipped {
        mechanism: Mechanism,
        n: usize,
        reason: String,
    },
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

fn input_hash<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> String {
    let mut h = Sha256::new();
    for m in [q, k, v] {
        h.update(m.le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn time_runs(reps: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    run()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(median(&mut times))
}

fn bench_one_n<T: Real>(
    cfg: &RunConfig,
    n: usize,
    budget: u64,
    out: &mut Vec<BenchEntry>,
) -> Result<()> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let q: Matrix<T> = DenseMatrix::gaussian(&mut rng, n, cfg.d).cast();
    let k: Matrix<T> = DenseMatrix::gaussian(&mut rng, n, cfg.d).cast();
    let v: Matrix<T> = DenseMatrix::gaussian(&mut rng, n, cfg.d).cast();
    let reference_hash = input_hash(&q, &k, &v);
    log::info!("n={n} input sha256={reference_hash}");

    let m = cfg.m_rule.blocks_for(n);
    let partition = BlockPartition::linear(n, m)?;
    let mhla_cfg = AttentionConfig::mhla(
        cfg.feature_map,
        cfg.normalize,
        partition.clone(),
        locality_init(&partition),
    )?;
    let global_cfg = AttentionConfig::global(cfg.feature_map, cfg.normalize)?;

    for &mech in &cfg.mechanisms {
        let hash = input_hash(&q, &k, &v);
        if hash != reference_hash {
            return Err(MhlaError::InvalidConfig(format!(
                "inputs changed between mechanisms at n={n}"
            )));
        }
        log::info!("{mech} n={n} input sha256={hash}");
        let record_m = if mech == Mechanism::Mhla { m } else { 0 };
        let median_seconds = match mech {
            Mechanism::Softmax => {
                let need = (n as u128) * (n as u128) * std::mem::size_of::<T>() as u128;
                if need > budget as u128 {
                    out.push(BenchEntry::Skipped {
                        mechanism: mech,
                        n,
                        reason: format!("score matrix needs {need} bytes, budget {budget}"),
                    });
                    continue;
                }
                time_runs(cfg.reps, || softmax_attention(&q, &k, &v).map(drop))?
            }
            Mechanism::Linear => time_runs(cfg.reps, || {
                linear_attention(&q, &k, &v, &global_cfg).map(drop)
            })?,
            Mechanism::Mhla => {
                time_runs(cfg.reps, || mhla_forward(&q, &k, &v, &mhla_cfg).map(drop))?
            }
        };
        out.push(BenchEntry::Measured(BenchRecord {
            mechanism: mech,
            n,
            d: cfg.d,
            m: record_m,
            repetitions: cfg.reps,
            median_seconds,
            tokens_per_second: n as f64 / median_seconds,
            input_hash: hash,
        }));
    }
    Ok(())
}

/// Times every mechanism at every `n`, single-threaded.
pub fn run_benchmark(cfg: &RunConfig) -> Result<Vec<BenchEntry>> {
    cfg.validate()?;
    let budget = cfg.effective_mem_budget();
    let mut out = Vec::new();
    for &n in &cfg.n_values {
        match cfg.precision {
            Precision::Double => bench_one_n::<f64>(cfg, n, budget, &mut out)?,
            Precision::Single => bench_one_n::<f32>(cfg, n, budget, &mut out)?,
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln(median_seconds)` against `ln(n)`.
pub fn fit_scaling_exponent(records: &[BenchRecord], mechanism: Mechanism) -> Result<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mechanism == mechanism)
        .map(|r| ((r.n as f64).ln(), r.median_seconds.ln()))
        .collect();
    let lo = records
        .iter()
        .filter(|r| r.mechanism == mechanism)
        .map(|r| r.n)
        .min();
    let hi = records
        .iter()
        .filter(|r| r.mechanism == mechanism)
        .map(|r| r.n)
        .max();
    match (lo, hi) {
        (Some(lo), Some(hi)) if pts.len() >= 3 && hi >= 8 * lo => {}
        _ => {
            return Err(MhlaError::InsufficientPoints(format!(
                "{mechanism}: need at least 3 records spanning 8x in n, have {}",
                pts.len()
            )))
        }
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub fn measured(entries: &[BenchEntry]) -> Vec<BenchRecord> {
    entries
        .iter()
        .filter_map(|e| match e {
            BenchEntry::Measured(r) => Some(r.clone()),
            BenchEntry::Skipped { .. } => None,
        })
        .collect()
}

/// Slope per mechanism, or the reason it could not be fitted.
pub fn scaling_summary(
    entries: &[BenchEntry],
    mechanisms: &[Mechanism],
) -> Vec<(Mechanism, Result<f64>)> {
    let records = measured(entries);
    mechanisms
        .iter()
        .map(|&m| (m, fit_scaling_exponent(&records, m)))
        .collect()
}

/// Checks fitted slopes against the thresholds; `None` when no slope exists.
pub fn slope_passes(mech: Mechanism, slope: f64, t: &ScalingThresholds) -> bool {
    match mech {
        Mechanism::Mhla => slope <= t.mhla_max_slope,
        Mechanism::Linear => slope <= t.linear_max_slope,
        Mechanism::Softmax => slope >= t.softmax_min_slope,
    }
}

/// Renders the bench CSV: protocol comments, header, measured rows, then
/// `#` lines for skipped pairs and fitted slopes.
pub fn render_bench_csv(
    entries: &[BenchEntry],
    slopes: &[(Mechanism, Result<f64>)],
    protocol: &[String],
    with_header: bool,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for line in protocol {
        writeln!(buf, "# {line}")?;
    }
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(&mut buf);
        if with_header {
            w.write_record(BENCH_HEADER)?;
        }
        for e in entries {
            if let BenchEntry::Measured(r) = e {
                w.write_record([
                    r.mechanism.to_string(),
                    r.n.to_string(),
                    r.d.to_string(),
                    r.m.to_string(),
                    r.repetitions.to_string(),
                    r.median_seconds.to_string(),
                    r.tokens_per_second.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    for e in entries {
        if let BenchEntry::Skipped {
            mechanism,
            n,
            reason,
        } = e
        {
            writeln!(buf, "# skipped,{mechanism},{n},{reason}")?;
        }
    }
    for (mech, slope) in slopes {
        match slope {
            Ok(s) => writeln!(buf, "# slope,{mech},{s}")?,
            Err(e) => writeln!(buf, "# slope,{mech},NA,{e}")?,
        }
    }
    Ok(buf)
}

/// Writes the CSV to `path` via a temporary file and rename. An existing
/// file with the same header is extended rather than replaced.
pub fn write_bench_csv_atomic(
    path: &Path,
    entries: &[BenchEntry],
    slopes: &[(Mechanism, Result<f64>)],
    protocol: &[String],
) -> Result<()> {
    let mut content = match fs::read(path) {
        Ok(existing) if !existing.is_empty() => {
            let text = String::from_utf8_lossy(&existing);
            let has_header = text
                .lines()
                .find(|l| !l.starts_with('#'))
                .is_some_and(|l| l == BENCH_HEADER.join(","));
            if !has_header {
                return Err(MhlaError::InvalidConfig(format!(
                    "{} exists and is not a bench CSV",
                    path.display()
                )));
            }
            let mut existing = existing;
            if !existing.ends_with(b"\n") {
                existing.push(b'\n');
            }
            existing.extend(render_bench_csv(entries, slopes, protocol, false)?);
            existing
        }
        _ => render_bench_csv(entries, slopes, protocol, true)?,
    };
    let tmp = path.with_extension("tmp-bench");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&content)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    content.clear();
    Ok(())
}

/// Parses measured rows back out of a bench CSV.
pub fn read_bench_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(BENCH_HEADER.iter().copied()) {
        return Err(MhlaError::InvalidConfig(format!(
            "unexpected bench header {header:?}"
        )));
    }
    let field = |rec: &csv::StringRecord, i: usize| -> Result<String> {
        rec.get(i).map(str::to_string).ok_or_else(|| {
            MhlaError::InvalidConfig(format!("missing bench field {}", BENCH_HEADER[i]))
        })
    };
    let num = |s: String| -> Result<f64> {
        s.parse()
            .map_err(|_| MhlaError::InvalidConfig(format!("bad number '{s}'")))
    };
    let count = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| MhlaError::InvalidConfig(format!("bad count '{s}'")))
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(BenchRecord {
            mechanism: field(&rec, 0)?.parse()?,
            n: count(field(&rec, 1)?)?,
            d: count(field(&rec, 2)?)?,
            m: count(field(&rec, 3)?)?,
            repetitions: count(field(&rec, 4)?)?,
            median_seconds: num(field(&rec, 5)?)?,
            tokens_per_second: num(field(&rec, 6)?)?,
            input_hash: String::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(mech: Mechanism, f: impl Fn(f64) -> f64) -> Vec<BenchRecord> {
        [1024usize, 2048, 4096, 8192]
            .iter()
            .map(|&n| BenchRecord {
                mechanism: mech,
                n,
                d: 64,
                m: 0,
                repetitions: 5,
                median_seconds: f(n as f64),
                tokens_per_second: 0.0,
                input_hash: String::new(),
            })
            .collect()
    }

    #[test]
    fn exact_power_laws() {
        let quad = synthetic(Mechanism::Softmax, |n| 3e-9 * n * n);
        assert!((fit_scaling_exponent(&quad, Mechanism::Softmax).unwrap() - 2.0).abs() < 1e-9);
        let lin = synthetic(Mechanism::Linear, |n| 7e-7 * n);
        assert!((fit_scaling_exponent(&lin, Mechanism::Linear).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_needs_three_points_over_8x() {
        let two = synthetic(Mechanism::Mhla, |n| n)[..2].to_vec();
        assert!(fit_scaling_exponent(&two, Mechanism::Mhla).is_err());
        let narrow = synthetic(Mechanism::Mhla, |n| n)[..3].to_vec();
        assert!(fit_scaling_exponent(&narrow, Mechanism::Mhla).is_err());
        let all = synthetic(Mechanism::Mhla, |n| n);
        assert!(fit_scaling_exponent(&all, Mechanism::Linear).is_err());
    }

    #[test]
    fn floor_sqrt_rule_keeps_m_squared_below_n() {
        for n in [1024usize, 2048, 4096, 8192, 16384, 32768, 65536, 100, 97] {
            let m = MRule::FloorSqrtN.blocks_for(n);
            assert!(m * m <= n && n % m == 0, "n={n} m={m}");
        }
        assert_eq!(MRule::FloorSqrtN.blocks_for(1024), 32);
        assert_eq!(MRule::FloorSqrtN.blocks_for(2048), 32);
        assert_eq!(MRule::FloorSqrtN.blocks_for(65536), 256);
    }

    #[test]
    fn m_rule_parsing() {
        assert_eq!("floor-sqrt-n".parse::<MRule>().unwrap(), MRule::FloorSqrtN);
        assert_eq!("16".parse::<MRule>().unwrap(), MRule::Fixed(16));
        assert_eq!("fixed:8".parse::<MRule>().unwrap(), MRule::Fixed(8));
        assert!("0".parse::<MRule>().is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn small_sweep_is_complete_and_fair() {
        let cfg = RunConfig {
            n_values: vec![64, 128],
            d: 8,
            ..RunConfig::default()
        };
        let entries = run_benchmark(&cfg).unwrap();
        assert_eq!(entries.len(), 6);
        let recs = measured(&entries);
        for n in [64, 128] {
            let hashes: Vec<&String> = recs
                .iter()
                .filter(|r| r.n == n)
                .map(|r| &r.input_hash)
                .collect();
            assert_eq!(hashes.len(), 3);
            assert!(hashes.iter().all(|h| *h == hashes[0]));
        }
        assert!(recs
            .iter()
            .all(|r| r.median_seconds > 0.0 && r.repetitions >= 5));
    }

    #[test]
    fn softmax_over_budget_is_skipped() {
        let cfg = RunConfig {
            n_values: vec![64],
            d: 4,
            mem_budget_bytes: Some(64 * 64 * 8 - 1),
            precision: Precision::Single,
            ..RunConfig::default()
        };
        let entries = run_benchmark(&cfg).unwrap();
        assert_eq!(entries.len(), 3);
        let cfg = RunConfig {
            precision: Precision::Double,
            ..cfg
        };
        let entries = run_benchmark(&cfg).unwrap();
        assert!(matches!(
            entries[0],
            BenchEntry::Skipped {
                mechanism: Mechanism::Softmax,
                n: 64,
                ..
            }
        ));
        assert_eq!(measured(&entries).len(), 2);
    }

    #[test]
    fn csv_round_trip_and_append() {
        let cfg = RunConfig {
            n_values: vec![16, 32],
            d: 4,
            mechanisms: vec![Mechanism::Mhla, Mechanism::Linear],
            ..RunConfig::default()
        };
        let entries = run_benchmark(&cfg).unwrap();
        let slopes = scaling_summary(&entries, &cfg.mechanisms);
        let bytes = render_bench_csv(&entries, &slopes, &cfg.protocol_lines(), true).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text
            .lines()
            .any(|l| l == "mechanism,n,d,m,reps,median_seconds,tokens_per_second"));
        assert!(text.lines().any(|l| l.starts_with("# slope,mhla,NA")));
        let back = read_bench_csv(bytes.as_slice()).unwrap();
        let orig = measured(&entries);
        assert_eq!(back.len(), 4);
        for (a, b) in back.iter().zip(&orig) {
            assert_eq!(a.median_seconds, b.median_seconds);
            assert_eq!(a.tokens_per_second, b.tokens_per_second);
            assert_eq!((a.mechanism, a.n, a.m), (b.mechanism, b.n, b.m));
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_bench_csv_atomic(&path, &entries, &slopes, &[]).unwrap();
        write_bench_csv_atomic(&path, &entries, &slopes, &[]).unwrap();
        let back = read_bench_csv(fs::File::open(&path).unwrap()).unwrap();
        assert_eq!(back.len(), 8);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::default();
        cfg.reps = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.feature_map = FeatureMap::Identity;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.m_rule = MRule::Fixed(3);
        assert!(matches!(
            cfg.validate(),
            Err(MhlaError::NotDivisible { .. })
        ));
    }

    #[test]
    fn explicit_budget_wins() {
        let cfg = RunConfig {
            mem_budget_bytes: Some(123),
            ..RunConfig::default()
        };
        assert_eq!(cfg.effective_mem_budget(), 123);
    }
}
