//! Oracle-equivalence checks run by `mhla verify`.
//!
//! Each check draws its own seeded instances, so running them in parallel
//! changes neither the numbers nor the order of the report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{linear_attention, mhla_forward, mhla_token_expansion, AttentionConfig};
use crate::causal::{chunkwise_causal_forward, naive_causal_oracle, stream_init};
use crate::error::Result;
use crate::fixture::{decode_fixture, encode_fixture, Fixture};
use crate::grad::{finite_diff_grad, mhla_apply, mhla_backward};
use crate::mixing::{causal_mask, locality_init, CoefficientMatrix};
use crate::partition::BlockPartition;
use crate::tensor::{relative_max_error, DenseMatrix, FeatureMap};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: max_error <= tolerance,
            max_error,
            tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

/// One random problem: inputs plus an MHLA configuration.
#[derive(Clone, Debug)]
pub struct Instance {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub cfg: AttentionConfig,
}

/// Gaussian `q`, `k`, `v` (drawn in that order). With relu and
/// normalization the first feature of `q` and `k` is made positive so every
/// normalizer stays away from zero.
pub fn gaussian_qkv(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    fm: FeatureMap,
    normalize: bool,
) -> [DenseMatrix; 3] {
    let mut q = DenseMatrix::gaussian(rng, n, d);
    let mut k = DenseMatrix::gaussian(rng, n, d);
    let v = DenseMatrix::gaussian(rng, n, d);
    if normalize && fm == FeatureMap::Relu {
        for m in [&mut q, &mut k] {
            for r in 0..n {
                let x = m.get(r, 0);
                m.set(r, 0, x.abs() + 0.1);
            }
        }
    }
    [q, k, v]
}

/// Valid (feature map, normalize) pairs: identity cannot be normalized.
pub fn valid_settings() -> Vec<(FeatureMap, bool)> {
    FeatureMap::ALL
        .iter()
        .flat_map(|&fm| [false, true].map(move |nz| (fm, nz)))
        .filter(|&(fm, nz)| !nz || fm.is_nonnegative())
        .collect()
}

fn random_coefficients(rng: &mut ChaCha8Rng, m: usize, causal: bool) -> CoefficientMatrix {
    let mut c = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if !causal || j <= i {
                c.set(i, j, rng.gen_range(0.05..1.0));
            }
        }
    }
    CoefficientMatrix::new(c, causal).expect("valid by construction")
}

/// Random bidirectional instance with `n` a multiple of `m` in
/// `[n_min, n_max]`, `d` in `[2, d_max]` and `m` in `[1, m_max]`.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    (n_min, n_max): (usize, usize),
    d_max: usize,
    m_max: usize,
    fm: FeatureMap,
    normalize: bool,
    causal: bool,
) -> Instance {
    let m = rng.gen_range(1..=m_max.min(n_max));
    let lo = n_min.div_ceil(m).max(1);
    let hi = (n_max / m).max(lo);
    let n = m * rng.gen_range(lo..=hi);
    let d = rng.gen_range(2..=d_max.max(2));
    let partition = BlockPartition::linear(n, m).expect("n divisible by m");
    let coefficients = if rng.gen_bool(0.5) {
        let init = locality_init(&partition);
        if causal {
            causal_mask(&init)
        } else {
            init
        }
    } else {
        random_coefficients(rng, m, causal)
    };
    let [q, k, v] = gaussian_qkv(rng, n, d, fm, normalize);
    let cfg =
        AttentionConfig::mhla(fm, normalize, partition, coefficients).expect("valid settings");
    Instance { q, k, v, cfg }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

/// Blockwise MHLA against its per-token expansion.
pub fn check_oracle_equivalence(seed: u64, instances: usize) -> Result<CheckResult> {
    let settings = valid_settings();
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (fm, nz) = settings[i % settings.len()];
        let inst = random_instance(&mut rng, (8, 1024), 64, 32, fm, nz, false);
        let fast = mhla_forward(&inst.q, &inst.k, &inst.v, &inst.cfg)?;
        let slow = mhla_token_expansion(&inst.q, &inst.k, &inst.v, &inst.cfg)?;
        worst = worst.max(relative_max_error(&fast, &slow)?);
    }
    Ok(CheckResult::new("oracle_equivalence", worst, 1e-11))
}

/// One block, and uniform coefficients with normalization, both reduce to
/// global linear attention.
pub fn check_reduction_identity(seed: u64, seeds: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in 0..seeds as u64 {
        let mut rng = rng_for(seed, 1000 + s);
        let n = rng.gen_range(4..=64) * 4;
        let d = rng.gen_range(2..=16);
        for &(fm, nz) in &valid_settings() {
            let [q, k, v] = gaussian_qkv(&mut rng, n, d, fm, nz);
            let global = linear_attention(&q, &k, &v, &AttentionConfig::global(fm, nz)?)?;
            let one = AttentionConfig::mhla(
                fm,
                nz,
                BlockPartition::linear(n, 1)?,
                CoefficientMatrix::identity(1),
            )?;
            worst = worst.max(relative_max_error(
                &mhla_forward(&q, &k, &v, &one)?,
                &global,
            )?);
            if nz {
                let uniform = AttentionConfig::mhla(
                    fm,
                    nz,
                    BlockPartition::linear(n, 4)?,
                    CoefficientMatrix::uniform(4),
                )?;
                worst = worst.max(relative_max_error(
                    &mhla_forward(&q, &k, &v, &uniform)?,
                    &global,
                )?);
            }
        }
    }
    Ok(CheckResult::new("reduction_identity", worst, 1e-12))
}

/// Naive causal oracle, chunkwise form and token streaming agree.
pub fn check_causal_equivalence(seed: u64, seeds: usize) -> Result<CheckResult> {
    let settings = valid_settings();
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut rng = rng_for(seed, 2000 + s as u64);
        let (fm, nz) = settings[s % settings.len()];
        let inst = random_instance(&mut rng, (4, 512), 16, 16, fm, nz, true);
        let oracle = naive_causal_oracle(&inst.q, &inst.k, &inst.v, &inst.cfg)?;
        let chunk = chunkwise_causal_forward(&inst.q, &inst.k, &inst.v, &inst.cfg)?;
        let mut state = stream_init(&inst.cfg, inst.q.cols())?;
        let mut streamed = DenseMatrix::zeros(inst.q.rows(), inst.q.cols());
        for t in 0..inst.q.rows() {
            let y = state.step(inst.q.row(t), inst.k.row(t), inst.v.row(t))?;
            streamed.row_mut(t).copy_from_slice(&y);
        }
        worst = worst
            .max(relative_max_error(&chunk, &oracle)?)
            .max(relative_max_error(&streamed, &oracle)?);
    }
    Ok(CheckResult::new("causal_equivalence", worst, 1e-10))
}

/// Zeroing every future token leaves earlier outputs bit-identical.
pub fn check_causality(seed: u64, seeds: usize) -> Result<CheckResult> {
    let mut changed = 0usize;
    for s in 0..seeds {
        let mut rng = rng_for(seed, 3000 + s as u64);
        let inst = random_instance(
            &mut rng,
            (16, 256),
            8,
            8,
            FeatureMap::EluPlusOne,
            true,
            true,
        );
        let n = inst.q.rows();
        let cut = rng.gen_range(1..n);
        let base = chunkwise_causal_forward(&inst.q, &inst.k, &inst.v, &inst.cfg)?;
        let (mut q, mut k, mut v) = (inst.q.clone(), inst.k.clone(), inst.v.clone());
        for m in [&mut q, &mut k, &mut v] {
            for t in cut..n {
                m.row_mut(t).fill(0.0);
            }
        }
        let cut_out = chunkwise_causal_forward(&q, &k, &v, &inst.cfg)?;
        for t in 0..cut {
            let same = base
                .row(t)
                .iter()
                .zip(cut_out.row(t))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            changed += usize::from(!same);
        }
    }
    Ok(CheckResult::new("causality", changed as f64, 0.0))
}

/// Tolerances for comparing analytic gradients with finite differences: an
/// entry agrees when it is within `rel` relative *or* `abs` absolute error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradTolerance {
    pub rel: f64,
    pub abs: f64,
}

pub const GRAD_TOLERANCE: GradTolerance = GradTolerance {
    rel: 1e-4,
    abs: 1e-7,
};

/// Worst per-entry `|analytic - fd| / max(rel |fd|, abs)`; at most 1 means
/// every entry agrees.
pub fn gradient_error(analytic: &[f64], fd: &[f64], tol: GradTolerance) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / (tol.rel * f.abs()).max(tol.abs))
        .fold(0.0, f64::max)
}

/// Largest gradient error over q, k, v and the coefficients for one instance
/// under the loss `Σ ⟨upstream, Y⟩`.
pub fn instance_gradient_error(
    inst: &Instance,
    upstream: &DenseMatrix,
    h: f64,
    tol: GradTolerance,
) -> Result<f64> {
    let grads = mhla_backward(&inst.q, &inst.k, &inst.v, &inst.cfg, upstream)?;
    let loss = |y: Result<DenseMatrix>| -> f64 {
        y.map(|y| {
            y.data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        })
        .unwrap_or(f64::NAN)
    };
    let (n, d) = inst.q.shape();
    let rebuild = |x: &[f64]| DenseMatrix::from_vec(n, d, x.to_vec()).expect("same shape");
    let fd_q = finite_diff_grad(
        |x| loss(mhla_apply(&rebuild(x), &inst.k, &inst.v, &inst.cfg)),
        inst.q.data(),
        h,
    );
    let fd_k = finite_diff_grad(
        |x| loss(mhla_apply(&inst.q, &rebuild(x), &inst.v, &inst.cfg)),
        inst.k.data(),
        h,
    );
    let fd_v = finite_diff_grad(
        |x| loss(mhla_apply(&inst.q, &inst.k, &rebuild(x), &inst.cfg)),
        inst.v.data(),
        h,
    );
    let c = inst.cfg.coefficients.as_ref().expect("mhla instance");
    let m = c.num_blocks();
    let causal = c.is_causal();
    let fd_c = finite_diff_grad(
        |x| {
            let mut vals = DenseMatrix::from_vec(m, m, x.to_vec()).expect("square");
            if causal {
                for i in 0..m {
                    for j in i + 1..m {
                        vals.set(i, j, 0.0);
                    }
                }
            }
            let cfg =
                CoefficientMatrix::new(vals, causal).and_then(|c| inst.cfg.with_coefficients(c));
            match cfg {
                Ok(cfg) => loss(mhla_apply(&inst.q, &inst.k, &inst.v, &cfg)),
                Err(_) => f64::NAN,
            }
        },
        c.values().data(),
        h,
    );
    let errs = [
        gradient_error(grads.d_q.data(), &fd_q, tol),
        gradient_error(grads.d_k.data(), &fd_k, tol),
        gradient_error(grads.d_v.data(), &fd_v, tol),
        gradient_error(grads.d_coefficients.data(), &fd_c, tol),
    ];
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Analytic gradients against central finite differences.
pub fn check_gradients(seed: u64, configs: usize) -> Result<CheckResult> {
    let settings = valid_settings();
    let mut worst = 0.0f64;
    for s in 0..configs {
        let mut rng = rng_for(seed, 4000 + s as u64);
        let (fm, nz) = settings[s % settings.len()];
        let inst = random_instance(&mut rng, (4, 24), 4, 4, fm, nz, s % 2 == 1);
        let upstream = DenseMatrix::gaussian(&mut rng, inst.q.rows(), inst.q.cols());
        worst = worst.max(instance_gradient_error(
            &inst,
            &upstream,
            1e-5,
            GRAD_TOLERANCE,
        )?);
    }
    Ok(CheckResult::new("gradients", worst, 1.0))
}

/// Random tensor sets survive encode/decode bitwise.
pub fn check_fixture_round_trip(seed: u64, tensors: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 5);
    let mut fx = Fixture::new();
    for i in 0..tensors {
        let (r, c) = (rng.gen_range(0..12), rng.gen_range(0..12));
        let data = (0..r * c)
            .map(|_| {
                f64::from_bits(rng.gen::<u64>() & !(0x7ff << 52) | (rng.gen_range(1..0x7ff) << 52))
            })
            .collect();
        fx.insert(format!("t{i}"), DenseMatrix::from_vec(r, c, data)?);
    }
    let back = decode_fixture(&encode_fixture(&fx)?)?;
    let mismatches = fx
        .iter()
        .filter(|(name, m)| {
            back.get(*name)
                .is_none_or(|b| b.shape() != m.shape() || b.le_bytes() != m.le_bytes())
        })
        .count()
        + back.len().abs_diff(fx.len());
    Ok(CheckResult::new(
        "fixture_round_trip",
        mismatches as f64,
        0.0,
    ))
}

type Check = fn(u64) -> Result<CheckResult>;

const CHECKS: [Check; 6] = [
    |s| check_oracle_equivalence(s, 24),
    |s| check_reduction_identity(s, 10),
    |s| check_causal_equivalence(s, 20),
    |s| check_causality(s, 20),
    |s| check_gradients(s, 10),
    |s| check_fixture_round_trip(s, 100),
];

/// Runs every check; `parallel` spreads them over the rayon pool.
pub fn run_verify(seed: u64, parallel: bool) -> Result<Vec<CheckResult>> {
    if parallel {
        CHECKS.par_iter().map(|c| c(seed)).collect()
    } else {
        CHECKS.iter().map(|c| c(seed)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_and_parallel_matches_serial() {
        let serial = run_verify(0, false).unwrap();
        for r in &serial {
            assert!(r.passed, "{}", r.line());
        }
        assert_eq!(run_verify(0, true).unwrap(), serial);
    }

    #[test]
    fn gradient_error_is_relative_or_absolute() {
        // Zero gradient: only the absolute allowance applies.
        assert_eq!(gradient_error(&[1e-9], &[0.0], GRAD_TOLERANCE), 1e-2);
        // Large entries: 1e-4 relative.
        assert!((gradient_error(&[2.0002], &[2.0], GRAD_TOLERANCE) - 1.0).abs() < 1e-9);
        assert!(gradient_error(&[2.0, 1.0], &[2.0, 1.5], GRAD_TOLERANCE) > 1.0);
    }

    #[test]
    fn identity_is_never_normalized() {
        let s = valid_settings();
        assert_eq!(s.len(), 5);
        assert!(!s.contains(&(FeatureMap::Identity, true)));
    }

    #[test]
    fn report_line_format() {
        let r = CheckResult::new("x", 1.5e-13, 1e-11);
        assert_eq!(r.line(), "PASS x max_err=1.500e-13 tol=1e-11");
    }
}
