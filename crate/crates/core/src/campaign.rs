//! Monte Carlo fault-injection campaigns, tolerance calibration and the
//! detection-versus-dimension sweep.
//!
//! All randomness comes from one master seed. Each consumer gets its own
//! ChaCha8 stream, `stream = (domain << 32) | index`, so a campaign's
//! faults depend only on `(master_seed, campaign index)` and never on how
//! work is spread over threads.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abft::{actual_checksum, fused_kernel, Category};
use crate::attention::KernelConfig;
use crate::error::{Error, Result};
use crate::fault::{build_inventory, sample_fault, FaultSpec, Injector, RegisterInventory};
use crate::io::{read_matrix, InputDigests, RunManifest};
use crate::matrix::{Matrix, Role};
use crate::numerics::PrecisionPolicy;

pub const SCHEMA_VERSION: u32 = 1;

pub const SEED_SCHEME: &str = "chacha8: seed_from_u64(master_seed), set_stream((domain << 32) | index); \
domain 0 = synthetic inputs, 1 = campaign index, 2 = calibration trial";

/// Threshold used by the reference design.
pub const REFERENCE_TOLERANCE: f64 = 1e-6;

pub const CALIBRATION_SAFETY_FACTOR: f64 = 10.0;

pub const DOMAIN_INPUTS: u64 = 0;
pub const DOMAIN_CAMPAIGN: u64 = 1;
pub const DOMAIN_CALIBRATION: u64 = 2;

pub fn child_rng(master_seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    assert!(index < 1 << 32, "stream index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((domain << 32) | index);
    rng
}

/// Faults injected per campaign. `Fixed(0)` is the fault-free control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCount {
    Fixed(usize),
    /// Uniform over `min..=max`.
    Range { min: usize, max: usize },
}

impl FaultCount {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> usize {
        match self {
            FaultCount::Fixed(n) => n,
            FaultCount::Range { min, max } => rng.random_range(min..=max),
        }
    }
}

impl fmt::Display for FaultCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultCount::Fixed(n) => write!(f, "{n}"),
            FaultCount::Range { min, max } => write!(f, "{min}..{max}"),
        }
    }
}

/// `3`, or an inclusive range `1..5`.
impl FromStr for FaultCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad fault count `{s}`, expected N or MIN..MAX"));
        match s.split_once("..") {
            Some((a, b)) => {
                let min = a.trim().parse().map_err(|_| bad())?;
                let max = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
                Ok(FaultCount::Range { min, max })
            }
            None => Ok(FaultCount::Fixed(s.trim().parse().map_err(|_| bad())?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// i.i.d. N(0,1) rounded to the datapath format.
    SyntheticGaussian,
    File { q: PathBuf, k: PathBuf, v: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub num_campaigns: usize,
    pub faults_per_campaign: FaultCount,
    pub seq_len: usize,
    pub num_queries: usize,
    pub hidden_dim: usize,
    pub block_size: usize,
    pub precision: PrecisionPolicy,
    #[serde(default)]
    pub scale_scores: bool,
    pub tolerance: f64,
    pub nan_aware: bool,
    pub master_seed: u64,
    pub input_source: InputSource,
    /// Keep one record per campaign in the report.
    #[serde(default)]
    pub keep_records: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            num_campaigns: 10_000,
            faults_per_campaign: FaultCount::Fixed(1),
            seq_len: 256,
            num_queries: 256,
            hidden_dim: 64,
            block_size: 16,
            precision: PrecisionPolicy::bf16(),
            scale_scores: false,
            tolerance: REFERENCE_TOLERANCE,
            nan_aware: false,
            master_seed: 0,
            input_source: InputSource::SyntheticGaussian,
            keep_records: false,
        }
    }
}

impl CampaignConfig {
    /// Square problem: `num_queries = seq_len`.
    pub fn new(num_campaigns: usize, seq_len: usize, hidden_dim: usize) -> Self {
        CampaignConfig {
            num_campaigns,
            seq_len,
            num_queries: seq_len,
            hidden_dim,
            ..Default::default()
        }
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig::new(self.num_queries, self.seq_len, self.hidden_dim)
            .with_block_size(self.block_size)
            .with_precision(self.precision)
            .with_scaled_scores(self.scale_scores)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_campaigns == 0 {
            return Err(Error::Config("num_campaigns must be at least 1".into()));
        }
        if let FaultCount::Range { min, max } = self.faults_per_campaign {
            if min == 0 || min > max {
                return Err(Error::Config(format!(
                    "fault range {min}..{max} must satisfy 1 <= min <= max"
                )));
            }
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance {} must be >= 0", self.tolerance)));
        }
        self.kernel_config().validate()
    }

    pub fn is_control(&self) -> bool {
        self.faults_per_campaign == FaultCount::Fixed(0)
    }
}

/// Q, K, V drawn from the input stream of `master_seed`.
pub fn synthetic_inputs(cfg: &CampaignConfig) -> (Matrix, Matrix, Matrix) {
    let mut rng = child_rng(cfg.master_seed, DOMAIN_INPUTS, 0);
    let fmt = cfg.precision.datapath;
    let q = Matrix::random_gaussian(cfg.num_queries, cfg.hidden_dim, Role::Q, fmt, &mut rng);
    let k = Matrix::random_gaussian(cfg.seq_len, cfg.hidden_dim, Role::K, fmt, &mut rng);
    let v = Matrix::random_gaussian(cfg.seq_len, cfg.hidden_dim, Role::V, fmt, &mut rng);
    (q, k, v)
}

pub fn load_inputs(cfg: &CampaignConfig) -> Result<(Matrix, Matrix, Matrix)> {
    match &cfg.input_source {
        InputSource::SyntheticGaussian => Ok(synthetic_inputs(cfg)),
        InputSource::File { q, k, v } => {
            let (q, _) = read_matrix(q, Role::Q)?;
            let (k, _) = read_matrix(k, Role::K)?;
            let (v, _) = read_matrix(v, Role::V)?;
            cfg.kernel_config().validate_inputs(&q, &k, &v)?;
            Ok((q, k, v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub index: usize,
    pub faults: Vec<FaultSpec>,
    pub category: Category,
    #[serde(with = "any_f64")]
    pub predicted: f64,
    #[serde(with = "any_f64")]
    pub actual: f64,
    #[serde(with = "any_f64")]
    pub abs_diff: f64,
}

/// JSON has no NaN or infinity; those are written as the strings `"NaN"`,
/// `"inf"` and `"-inf"`.
mod any_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("NaN")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(de::Error::invalid_value(de::Unexpected::Str(&t), &"a number, NaN, inf or -inf")),
            },
        }
    }
}

impl CampaignRecord {
    /// Some fault landed in a checker register or in state that is never
    /// read again.
    pub fn hit_checker_or_dead_state(&self, cfg: &KernelConfig) -> bool {
        self.faults
            .iter()
            .any(|f| f.register.is_checker() || !f.is_live(cfg))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub detected: u64,
    pub false_positive: u64,
    pub silent: u64,
    pub masked: u64,
}

impl CategoryCounts {
    pub fn add(&mut self, c: Category) {
        *self.slot(c) += 1;
    }

    fn slot(&mut self, c: Category) -> &mut u64 {
        match c {
            Category::Detected => &mut self.detected,
            Category::FalsePositive => &mut self.false_positive,
            Category::Silent => &mut self.silent,
            Category::Masked => &mut self.masked,
        }
    }

    pub fn get(&self, c: Category) -> u64 {
        match c {
            Category::Detected => self.detected,
            Category::FalsePositive => self.false_positive,
            Category::Silent => self.silent,
            Category::Masked => self.masked,
        }
    }

    pub fn total(&self) -> u64 {
        self.detected + self.false_positive + self.silent + self.masked
    }

    /// Fractions of all campaigns.
    pub fn rates(&self) -> CategoryRates {
        let n = self.total() as f64;
        CategoryRates {
            detected: self.detected as f64 / n,
            false_positive: self.false_positive as f64 / n,
            silent: self.silent as f64 / n,
            masked: self.masked as f64 / n,
        }
    }

    /// Fractions over Detected + FalsePositive + Silent; `None` when every
    /// campaign was masked.
    pub fn unmasked_rates(&self) -> Option<UnmaskedRates> {
        let n = self.detected + self.false_positive + self.silent;
        if n == 0 {
            return None;
        }
        let n = n as f64;
        Some(UnmaskedRates {
            detected: self.detected as f64 / n,
            false_positive: self.false_positive as f64 / n,
            silent: self.silent as f64 / n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub detected: f64,
    pub false_positive: f64,
    pub silent: f64,
    pub masked: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmaskedRates {
    pub detected: f64,
    pub false_positive: f64,
    pub silent: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub trials: usize,
    pub max_discrepancy: f64,
    pub safety_factor: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub manifest: RunManifest<CampaignConfig>,
    pub counts: CategoryCounts,
    pub rates: CategoryRates,
    pub unmasked: Option<UnmaskedRates>,
    pub tolerance: f64,
    pub reference_tolerance: f64,
    pub calibration: Option<Calibration>,
    pub schedule_cycles: usize,
    pub register_bits: u64,
    pub checker_bits: u64,
    pub checker_bit_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<CampaignRecord>>,
}

impl CampaignReport {
    pub fn config(&self) -> &CampaignConfig {
        &self.manifest.config
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        table_csv(std::slice::from_ref(self))
    }
}

fn run_one(
    injector: &Injector<'_>,
    inventory: &RegisterInventory,
    cfg: &CampaignConfig,
    index: usize,
) -> Result<CampaignRecord> {
    let cycles = injector.config().total_cycles();
    let mut rng = child_rng(cfg.master_seed, DOMAIN_CAMPAIGN, index as u64);
    let n = cfg.faults_per_campaign.sample(&mut rng);
    let faults: Vec<FaultSpec> = (0..n)
        .map(|_| sample_fault(&mut rng, inventory, cycles))
        .collect();
    let outcome = injector.evaluate(&faults, cfg.tolerance, cfg.nan_aware)?;
    Ok(CampaignRecord {
        index,
        faults,
        category: outcome.verdict.category,
        predicted: outcome.verdict.predicted,
        actual: outcome.verdict.actual,
        abs_diff: outcome.verdict.abs_diff,
    })
}

/// Runs `cfg.num_campaigns` independent campaigns on the current rayon
/// pool. The golden run is computed once.
pub fn run_campaigns(cfg: &CampaignConfig, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<CampaignReport> {
    cfg.validate()?;
    let kcfg = cfg.kernel_config();
    kcfg.validate_inputs(q, k, v)?;
    let injector = Injector::new(q, k, v, &kcfg)?;
    let inventory = build_inventory(&kcfg);
    let records = (0..cfg.num_campaigns)
        .into_par_iter()
        .map(|i| run_one(&injector, &inventory, cfg, i))
        .collect::<Result<Vec<_>>>()?;

    let mut counts = CategoryCounts::default();
    for r in &records {
        counts.add(r.category);
    }
    Ok(CampaignReport {
        schema_version: SCHEMA_VERSION,
        manifest: RunManifest::new(cfg.clone(), cfg.master_seed, InputDigests::of(q, k, v)),
        counts,
        rates: counts.rates(),
        unmasked: counts.unmasked_rates(),
        tolerance: cfg.tolerance,
        reference_tolerance: REFERENCE_TOLERANCE,
        calibration: None,
        schedule_cycles: kcfg.total_cycles(),
        register_bits: inventory.total_bits(),
        checker_bits: inventory.checker_bits(),
        checker_bit_fraction: inventory.checker_fraction(),
        records: cfg.keep_records.then_some(records),
    })
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the current
/// pool when `threads` is `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Largest fault-free `|predicted - actual|` over `num_trials` random input
/// sets, times the safety factor. Never below the smallest positive normal.
pub fn calibrate_tolerance(cfg: &CampaignConfig, num_trials: usize) -> Result<Calibration> {
    if num_trials < 100 {
        return Err(Error::Config(format!(
            "calibration needs at least 100 trials, got {num_trials}"
        )));
    }
    let kcfg = cfg.kernel_config();
    kcfg.validate()?;
    let fmt = cfg.precision.datapath;
    let discrepancies = (0..num_trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = child_rng(cfg.master_seed, DOMAIN_CALIBRATION, j as u64);
            let q = Matrix::random_gaussian(cfg.num_queries, cfg.hidden_dim, Role::Q, fmt, &mut rng);
            let k = Matrix::random_gaussian(cfg.seq_len, cfg.hidden_dim, Role::K, fmt, &mut rng);
            let v = Matrix::random_gaussian(cfg.seq_len, cfg.hidden_dim, Role::V, fmt, &mut rng);
            let run = fused_kernel(&q, &k, &v, &kcfg, None)?;
            Ok((run.predicted - actual_checksum(&run.output)).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = discrepancies.iter().copied().fold(0.0f64, f64::max);
    Ok(Calibration {
        trials: num_trials,
        max_discrepancy: max,
        safety_factor: CALIBRATION_SAFETY_FACTOR,
        tolerance: (max * CALIBRATION_SAFETY_FACTOR).max(f64::MIN_POSITIVE),
    })
}

/// Campaign reports for several hidden dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionSweep {
    pub reports: Vec<CampaignReport>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SweepOptions {
    /// Calibrate a tolerance per dimension instead of using the base one.
    pub calibration_trials: Option<usize>,
    /// Fail unless FalsePositive strictly decreases with `d`.
    pub require_decreasing_false_positive: bool,
}

pub fn detection_vs_dimension_sweep(
    dims: &[usize],
    base: &CampaignConfig,
    options: SweepOptions,
) -> Result<DimensionSweep> {
    if dims.is_empty() {
        return Err(Error::Config("dimension sweep needs at least one d".into()));
    }
    if base.input_source != InputSource::SyntheticGaussian {
        return Err(Error::Config("dimension sweeps use synthetic inputs".into()));
    }
    let mut reports = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut cfg = base.clone();
        cfg.hidden_dim = d;
        let calibration = match options.calibration_trials {
            Some(trials) => {
                let cal = calibrate_tolerance(&cfg, trials)?;
                cfg.tolerance = cal.tolerance;
                Some(cal)
            }
            None => None,
        };
        let (q, k, v) = synthetic_inputs(&cfg);
        let mut report = run_campaigns(&cfg, &q, &k, &v)?;
        report.calibration = calibration;
        reports.push(report);
    }
    let sweep = DimensionSweep { reports };
    if options.require_decreasing_false_positive && !sweep.false_positive_decreasing() {
        return Err(Error::Config(format!(
            "FalsePositive rate does not decrease with d: {:?}",
            sweep.false_positive_rates()
        )));
    }
    Ok(sweep)
}

impl DimensionSweep {
    pub fn dims(&self) -> Vec<usize> {
        self.reports.iter().map(|r| r.config().hidden_dim).collect()
    }

    /// FalsePositive rate over unmasked campaigns, per dimension.
    pub fn false_positive_rates(&self) -> Vec<f64> {
        self.reports
            .iter()
            .map(|r| r.unmasked.map_or(0.0, |p| p.false_positive))
            .collect()
    }

    pub fn false_positive_decreasing(&self) -> bool {
        self.false_positive_rates().windows(2).all(|w| w[1] < w[0])
    }

    pub fn checker_fraction_decreasing(&self) -> bool {
        self.reports
            .windows(2)
            .all(|w| w[1].checker_bit_fraction < w[0].checker_bit_fraction)
    }

    pub fn to_csv(&self) -> String {
        table_csv(&self.reports)
    }
}

/// One column per report. Detected, False Positive and Silent are percent
/// of non-masked campaigns; Masked is percent of all campaigns.
fn table_csv(reports: &[CampaignReport]) -> String {
    let mut out = String::from("category");
    for r in reports {
        write!(out, ",d={}", r.config().hidden_dim).unwrap();
    }
    out.push('\n');
    for cat in Category::ALL {
        out.push_str(cat.label());
        for r in reports {
            let rate = match (cat, r.unmasked) {
                (Category::Masked, _) => r.rates.masked,
                (_, None) => 0.0,
                (Category::Detected, Some(p)) => p.detected,
                (Category::FalsePositive, Some(p)) => p.false_positive,
                (Category::Silent, Some(p)) => p.silent,
            };
            write!(out, ",{:.2}", 100.0 * rate).unwrap();
        }
        out.push('\n');
    }
    out
}
