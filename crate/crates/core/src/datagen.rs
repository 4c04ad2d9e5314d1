//! Training pairs `(λ, p)` of standardized maximum-entropy densities, the
//! moment-box filter, feature/target scaling and the on-disk dataset format.
//!
//! A pair is produced by drawing `λ̃` uniformly from a box, measuring the mean
//! and standard deviation of `f_λ̃`, and repeatedly applying
//! [`rescale_multipliers`] until the density has zero mean and unit variance
//! on the (fixed) velocity domain. Pairs whose moments leave the box `Ω_p` are
//! discarded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::med::{rescale_multipliers, LagrangeVector, MaxEntDensity, MomentVector};
use crate::quadrature::{QuadratureRule, VelocityDomain, DEFAULT_ORDER};

/// Moment box for `N = 8`; shorter moment vectors use its leading components.
/// The first two rows are widened by `ε` when the box is built.
const OMEGA_P_TAIL: [[f64; 2]; 6] = [
    [-1.0, 1.0],
    [1.0, 4.0],
    [-4.0, 4.0],
    [1.0, 15.0],
    [-25.0, 1.0],
    [1.0, 110.0],
];

/// `|μ|` and `σ` limits at the first measurement of a trial density.
const FIRST_PASS_MAX_MEAN: f64 = 5.0;
const FIRST_PASS_MAX_STD: f64 = 3.0;

/// The default `Ω_p` truncated to `n` components.
pub fn default_moment_box(n: usize, epsilon: f64) -> Vec<[f64; 2]> {
    let mut out = vec![[-epsilon, epsilon], [1.0 - epsilon, 1.0 + epsilon]];
    out.extend_from_slice(&OMEGA_P_TAIL);
    out.truncate(n);
    out
}

/// Whether standardized moments lie in the default `Ω_p` (with `ε = 1e-8`,
/// the standardized-flag tolerance).
pub fn in_default_moment_box(p: &[f64]) -> bool {
    p.len() <= 8
        && p
            .iter()
            .zip(default_moment_box(p.len(), crate::med::STANDARDIZED_TOL))
            .all(|(x, [lo, hi])| *x >= lo && *x <= hi)
}

/// Like [`in_default_moment_box`] but points on a face of the `p_3..p_N` box
/// count as outside.
pub fn strictly_inside_default_moment_box(p: &[f64]) -> bool {
    in_default_moment_box(p)
        && p.iter()
            .zip(default_moment_box(p.len(), 0.0))
            .skip(2)
            .all(|(x, [lo, hi])| *x > lo && *x < hi)
}

/// Parameters of the pair sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n_moments: usize,
    /// Half-width of the uniform box for `λ̃`.
    pub b: f64,
    /// Per-component `[lo, hi]` replacing `[-b, b]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_box: Option<Vec<[f64; 2]>>,
    pub omega_p: Vec<[f64; 2]>,
    pub epsilon: f64,
    pub max_inner_iters: usize,
    /// Draws allowed per accepted pair before giving up.
    pub max_rejections: usize,
}

impl SamplingSpec {
    pub fn new(n_moments: usize) -> Self {
        let epsilon = 1e-10;
        Self {
            n_moments,
            b: 10.0,
            lambda_box: None,
            omega_p: default_moment_box(n_moments, epsilon),
            epsilon,
            max_inner_iters: 100,
            max_rejections: 1_000_000,
        }
    }

    /// Sets `ε` and rebuilds the first two rows of `Ω_p` accordingly.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        if self.omega_p.len() >= 2 {
            self.omega_p[0] = [-epsilon, epsilon];
            self.omega_p[1] = [1.0 - epsilon, 1.0 + epsilon];
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_moments;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("n_moments must be at least 2, got {n}")));
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda box half-width b = {} must be positive", self.b)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if self.omega_p.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: self.omega_p.len(),
            });
        }
        let boxes = self.omega_p.iter().chain(self.lambda_box.iter().flatten());
        for [lo, hi] in boxes {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("empty interval [{lo}, {hi}]")));
            }
        }
        if let Some(lb) = &self.lambda_box {
            if lb.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: lb.len(),
                });
            }
        }
        if self.max_inner_iters == 0 || self.max_rejections == 0 {
            return Err(Error::InvalidArgument("iteration and rejection limits must be positive".into()));
        }
        Ok(())
    }

    fn lambda_interval(&self, j: usize) -> [f64; 2] {
        match &self.lambda_box {
            Some(lb) => lb[j],
            None => [-self.b, self.b],
        }
    }

    fn in_moment_box(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.omega_p).all(|(x, [lo, hi])| *x >= *lo && *x <= *hi)
    }
}

/// Why a trial density was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// `|μ| > 5` or `σ > 3` at the first measurement, or the density is degenerate.
    Boundary,
    /// The standardization loop did not reach `ε` in `max_inner_iters` passes.
    NoContraction,
    /// The standardized moments fall outside `Ω_p`.
    OutsideBox,
}

/// Tally of discarded draws.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub boundary: usize,
    pub no_contraction: usize,
    pub outside_box: usize,
}

impl RejectionCounts {
    pub fn total(&self) -> usize {
        self.boundary + self.no_contraction + self.outside_box
    }

    fn record(&mut self, r: Rejection) {
        match r {
            Rejection::Boundary => self.boundary += 1,
            Rejection::NoContraction => self.no_contraction += 1,
            Rejection::OutsideBox => self.outside_box += 1,
        }
    }

    fn merge(&mut self, other: &Self) {
        self.boundary += other.boundary;
        self.no_contraction += other.no_contraction;
        self.outside_box += other.outside_box;
    }
}

/// One draw of Algorithm 2: `Ok` with the standardized pair or the reason it was discarded.
pub fn try_standardized_pair(
    spec: &SamplingSpec,
    rule: &Arc<QuadratureRule<f64>>,
    rng: &mut impl Rng,
) -> std::result::Result<(LagrangeVector<f64>, MomentVector<f64>), Rejection> {
    let n = spec.n_moments;
    let draw: Vec<f64> = (0..n)
        .map(|j| {
            let [lo, hi] = spec.lambda_interval(j);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        })
        .collect();
    let mut lambda = LagrangeVector::new(draw).map_err(|_| Rejection::Boundary)?;
    let d = MaxEntDensity::new(lambda.clone(), rule.clone()).map_err(|_| Rejection::Boundary)?;
    let (mut mu, mut sigma) = d.mean_std().map_err(|_| Rejection::Boundary)?;
    if !(mu.abs() <= FIRST_PASS_MAX_MEAN && sigma <= FIRST_PASS_MAX_STD && sigma > 0.0) {
        return Err(Rejection::Boundary);
    }
    for _ in 0..spec.max_inner_iters {
        lambda = rescale_multipliers(&lambda, mu, sigma).map_err(|_| Rejection::NoContraction)?;
        let d = MaxEntDensity::new(lambda.clone(), rule.clone()).map_err(|_| Rejection::NoContraction)?;
        let p = d.moments(n).map_err(|_| Rejection::NoContraction)?;
        let (p1, p2) = (p.get(1), p.get(2));
        if p1.abs() <= spec.epsilon && (p2 - 1.0).abs() <= spec.epsilon {
            if !spec.in_moment_box(p.values()) {
                return Err(Rejection::OutsideBox);
            }
            return Ok((lambda, p));
        }
        let var = p2 - p1 * p1;
        if !(var > 0.0) || !var.is_finite() {
            return Err(Rejection::NoContraction);
        }
        mu = p1;
        sigma = var.sqrt();
    }
    Err(Rejection::NoContraction)
}

/// Draws until a pair is accepted; fails after `max_rejections` discarded draws.
pub fn sample_standardized_pair(
    spec: &SamplingSpec,
    rule: &Arc<QuadratureRule<f64>>,
    rng: &mut impl Rng,
) -> Result<(LagrangeVector<f64>, MomentVector<f64>, RejectionCounts)> {
    let mut counts = RejectionCounts::default();
    loop {
        match try_standardized_pair(spec, rule, rng) {
            Ok((l, p)) => return Ok((l, p, counts)),
            Err(r) => {
                counts.record(r);
                if counts.total() >= spec.max_rejections {
                    return Err(Error::GenerationExhausted {
                        rejections: counts.total(),
                        acceptance_rate: 0.0,
                    });
                }
            }
        }
    }
}

/// RNG for sample `index` of a dataset: one ChaCha stream per sample, so the
/// output does not depend on how samples are spread over threads.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A `(λ, p)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub p: MomentVector<f64>,
    pub lambda: LagrangeVector<f64>,
}

/// Everything needed to regenerate or re-verify a dataset; stored as the
/// `.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_moments: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub quad_order: usize,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_box: Option<Vec<[f64; 2]>>,
    pub omega_p: Vec<[f64; 2]>,
    pub epsilon: f64,
    pub max_inner_iters: usize,
    pub max_rejections: usize,
    pub seed: u64,
    pub count: usize,
}

impl DatasetMeta {
    pub fn domain(&self) -> Result<VelocityDomain<f64>> {
        VelocityDomain::new(self.v_min, self.v_max)
    }

    pub fn rule(&self) -> Result<QuadratureRule<f64>> {
        QuadratureRule::new(self.domain()?, self.quad_order)
    }

    pub fn sampling_spec(&self) -> SamplingSpec {
        SamplingSpec {
            n_moments: self.n_moments,
            b: self.b,
            lambda_box: self.lambda_box.clone(),
            omega_p: self.omega_p.clone(),
            epsilon: self.epsilon,
            max_inner_iters: self.max_inner_iters,
            max_rejections: self.max_rejections,
        }
    }
}

/// Generated pairs with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub pairs: Vec<Pair>,
    /// Wall-clock seconds per accepted pair (empty for loaded datasets).
    pub timings: Vec<f64>,
    pub rejections: RejectionCounts,
}

/// Generates `count` pairs deterministically from `seed`, in parallel on the
/// current rayon pool.
pub fn generate_dataset(
    count: usize,
    spec: &SamplingSpec,
    rule: &Arc<QuadratureRule<f64>>,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let results: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| {
            let start = Instant::now();
            let mut rng = sample_rng(seed, i);
            sample_standardized_pair(spec, rule, &mut rng).map(|r| (r, start.elapsed().as_secs_f64()))
        })
        .collect();

    let mut pairs = Vec::with_capacity(count);
    let mut timings = Vec::with_capacity(count);
    let mut rejections = RejectionCounts::default();
    let mut exhausted = 0;
    for r in results {
        match r {
            Ok(((lambda, p, rej), dt)) => {
                rejections.merge(&rej);
                pairs.push(Pair { p, lambda });
                timings.push(dt);
            }
            Err(Error::GenerationExhausted { rejections: r, .. }) => exhausted += r,
            Err(e) => return Err(e),
        }
    }
    if exhausted > 0 {
        let rejected = rejections.total() + exhausted;
        return Err(Error::GenerationExhausted {
            rejections: rejected,
            acceptance_rate: pairs.len() as f64 / (pairs.len() + rejected) as f64,
        });
    }
    log::info!(
        "generated {count} pairs: {} rejected (boundary {}, no contraction {}, outside box {})",
        rejections.total(),
        rejections.boundary,
        rejections.no_contraction,
        rejections.outside_box
    );
    let domain = rule.domain();
    Ok(Dataset {
        meta: DatasetMeta {
            n_moments: spec.n_moments,
            v_min: domain.v_min,
            v_max: domain.v_max,
            quad_order: rule.order(),
            b: spec.b,
            lambda_box: spec.lambda_box.clone(),
            omega_p: spec.omega_p.clone(),
            epsilon: spec.epsilon,
            max_inner_iters: spec.max_inner_iters,
            max_rejections: spec.max_rejections,
            seed,
            count,
        },
        pairs,
        timings,
        rejections,
    })
}

/// Default quadrature rule used for datasets when none is configured.
pub fn default_rule() -> Arc<QuadratureRule<f64>> {
    Arc::new(QuadratureRule::new(VelocityDomain::default(), DEFAULT_ORDER).expect("default rule"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_moments(&self) -> usize {
        self.meta.n_moments
    }

    /// The first `m` pairs, for training-size sweeps.
    pub fn truncated(&self, m: usize) -> Dataset {
        let m = m.min(self.len());
        let mut meta = self.meta.clone();
        meta.count = m;
        Dataset {
            meta,
            pairs: self.pairs[..m].to_vec(),
            timings: self.timings.iter().take(m).copied().collect(),
            rejections: self.rejections,
        }
    }

    /// Largest `‖moments_of(λ) − p‖_∞` over all pairs, re-evaluated with the
    /// stored quadrature settings.
    pub fn max_moment_residual(&self) -> Result<f64> {
        let rule = Arc::new(self.meta.rule()?);
        let mut worst = 0.0f64;
        for pair in &self.pairs {
            let d = MaxEntDensity::new(pair.lambda.clone(), rule.clone())?;
            let p = d.moments(self.n_moments())?;
            worst = worst.max(p.max_abs_diff(&pair.p));
        }
        Ok(worst)
    }

    /// CSV text: header `p1..pN,lambda1..lambdaN`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.n_moments();
        let mut out = String::new();
        let header: Vec<String> = (1..=n)
            .map(|j| format!("p{j}"))
            .chain((1..=n).map(|j| format!("lambda{j}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for pair in &self.pairs {
            let mut first = true;
            for x in pair.p.values().iter().chain(pair.lambda.values()) {
                if !first {
                    out.push(',');
                }
                first = false;
                write!(out, "{x:.16e}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the CSV text, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}

/// Path of the metadata sidecar for a dataset CSV.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes `contents` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Writes the CSV and its `.meta.json` sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    write_atomic(path, ds.to_csv().as_bytes())?;
    write_atomic(&meta_path(path), meta.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = meta_path(path);
    let meta_text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::parse(&mpath, e.line(), e.to_string()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let n = meta.n_moments;
    let mut lines = text.lines().enumerate();
    let expected_header: Vec<String> = (1..=n)
        .map(|j| format!("p{j}"))
        .chain((1..=n).map(|j| format!("lambda{j}")))
        .collect();
    match lines.next() {
        Some((_, h)) if h.split(',').map(str::trim).eq(expected_header.iter().map(String::as_str)) => {}
        Some((_, h)) => {
            return Err(Error::parse(
                path,
                1,
                format!(
                    "header `{h}` does not match {} columns p1..p{n},lambda1..lambda{n} (N = {n})",
                    2 * n
                ),
            ))
        }
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 * n {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} columns (N = {n}), found {}", 2 * n, fields.len()),
            ));
        }
        let values = fields
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let p = MomentVector::new(values[..n].to_vec()).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let lambda =
            LagrangeVector::new(values[n..].to_vec()).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        pairs.push(Pair { p, lambda });
    }
    if pairs.len() != meta.count {
        return Err(Error::parse(
            path,
            text.lines().count(),
            format!("metadata declares {} pairs, file has {}", meta.count, pairs.len()),
        ));
    }
    Ok(Dataset {
        meta,
        pairs,
        timings: Vec::new(),
        rejections: RejectionCounts::default(),
    })
}

/// Per-column mean and population standard deviation of the GP inputs
/// `p_3..p_N` and targets `λ_1..λ_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub input_means: Vec<f64>,
    pub input_stds: Vec<f64>,
    pub target_means: Vec<f64>,
    pub target_stds: Vec<f64>,
}

fn mean_std(column: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = column.clone().count() as f64;
    let mean = column.clone().sum::<f64>() / n;
    let var = column.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A constant column still shows a rounding-level spread around its computed mean.
fn is_degenerate(mean: f64, std: f64) -> bool {
    !(std > 1e-12 * mean.abs().max(1.0))
}

pub fn compute_scaling(ds: &Dataset) -> Result<ScalingStats> {
    if ds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "scaling needs at least 2 pairs, dataset has {}",
            ds.len()
        )));
    }
    let n = ds.n_moments();
    let mut stats = ScalingStats {
        input_means: Vec::new(),
        input_stds: Vec::new(),
        target_means: Vec::new(),
        target_stds: Vec::new(),
    };
    for j in 2..n {
        let (m, s) = mean_std(ds.pairs.iter().map(|pr| pr.p.values()[j]));
        if is_degenerate(m, s) {
            return Err(Error::DegenerateDataset {
                column: format!("p{}", j + 1),
            });
        }
        stats.input_means.push(m);
        stats.input_stds.push(s);
    }
    for j in 0..n {
        let (m, s) = mean_std(ds.pairs.iter().map(|pr| pr.lambda.values()[j]));
        if is_degenerate(m, s) {
            return Err(Error::DegenerateDataset {
                column: format!("lambda{}", j + 1),
            });
        }
        stats.target_means.push(m);
        stats.target_stds.push(s);
    }
    Ok(stats)
}

impl ScalingStats {
    pub fn n_moments(&self) -> usize {
        self.target_means.len()
    }

    /// Scaled GP input `(p_j − mean) / std` for `j = 3..N`.
    pub fn scale_input(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.n_moments() {
            return Err(Error::Dimension {
                expected: self.n_moments(),
                found: p.len(),
            });
        }
        Ok(p[2..]
            .iter()
            .zip(self.input_means.iter().zip(&self.input_stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn unscale_input(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0, 1.0];
        p.extend(
            x.iter()
                .zip(self.input_means.iter().zip(&self.input_stds))
                .map(|(x, (m, s))| x * s + m),
        );
        p
    }

    pub fn scale_target(&self, i: usize, lambda_i: f64) -> f64 {
        (lambda_i - self.target_means[i]) / self.target_stds[i]
    }

    pub fn unscale_target(&self, i: usize, y: f64) -> f64 {
        y * self.target_stds[i] + self.target_means[i]
    }
}
