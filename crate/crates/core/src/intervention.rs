//! Intervention effect on a daily proportion series.
//!
//! Interrupted time series: an OLS model of the treated series (optionally on
//! a control series and weekday dummies) is fitted before the intervention and
//! projected after it. Significance comes from re-running the same pipeline at
//! placebo dates inside the pre-period. This is a frequentist stand-in for a
//! Bayesian structural time-series model, and output says so.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analytics::{Metric, ProportionPoint};
use crate::org::Group;
use crate::threat_intel::Class;
use crate::traffic_synth::{self, Intervention, Scenario, SynthProfile};

pub const METHOD: &str = "ols-its+placebo (frequentist surrogate for Bayesian structural time series)";
pub const MIN_PRE_WINDOW: usize = 14;
pub const MIN_POST_WINDOW: usize = 7;
pub const MIN_PERMUTATIONS: usize = 100;
pub const MIN_POWER_TRIALS: usize = 20;
/// Below this many distinct placebo dates the null distribution is coarse.
pub const FEW_PLACEBO_DATES: usize = 100;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ItsError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no placebo date fits: need {needed} defined pre-period days before each placebo plus a {post}-day post window")]
    TooFewPlacebos { needed: usize, post: usize },
}

impl ItsError {
    pub fn code(&self) -> &'static str {
        match self {
            ItsError::InvalidConfig(_) => "INVALID_CONFIG",
            ItsError::InsufficientData(_) => "INSUFFICIENT_DATA",
            ItsError::TooFewPlacebos { .. } => "TOO_FEW_PLACEBOS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItsConfig {
    pub metric: Metric,
    pub pre_window: usize,
    pub post_window: usize,
    pub use_control_covariate: bool,
    pub weekday_dummies: bool,
    pub n_permutations: usize,
    pub alpha: f64,
    pub rng_seed: u64,
}

impl Default for ItsConfig {
    fn default() -> Self {
        ItsConfig {
            metric: Metric::GreyProportion,
            pre_window: 90,
            post_window: 60,
            use_control_covariate: true,
            weekday_dummies: true,
            n_permutations: 1000,
            alpha: 0.05,
            rng_seed: 0,
        }
    }
}

impl ItsConfig {
    pub fn validate(&self) -> Result<(), ItsError> {
        let bad = |m: String| Err(ItsError::InvalidConfig(m));
        if !matches!(self.metric, Metric::MaliciousProportion | Metric::GreyProportion) {
            return bad(format!("metric must be a proportion, got {}", self.metric));
        }
        if self.pre_window < MIN_PRE_WINDOW {
            return bad(format!("pre_window must be >= {MIN_PRE_WINDOW}"));
        }
        if self.post_window < MIN_POST_WINDOW {
            return bad(format!("post_window must be >= {MIN_POST_WINDOW}"));
        }
        if self.n_permutations < MIN_PERMUTATIONS {
            return bad(format!("n_permutations must be >= {MIN_PERMUTATIONS}"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn class(&self) -> Class {
        match self.metric {
            Metric::MaliciousProportion => Class::Malicious,
            _ => Class::Grey,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PostPoint {
    pub date: NaiveDate,
    pub actual: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedModel {
    pub coefficients: Vec<Coefficient>,
    /// True when no regressor had any variance and the pre-window mean was used.
    pub degenerate: bool,
    pub n_fit: usize,
    pub predictions: Vec<PostPoint>,
}

impl FittedModel {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.iter().find(|c| c.name == name).map(|c| c.estimate)
    }

    fn effect(&self) -> f64 {
        let n = self.predictions.len() as f64;
        self.predictions.iter().map(|p| p.actual - p.predicted).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub intervention_date: NaiveDate,
    pub effect: f64,
    /// Undefined when the counterfactual mean is zero.
    pub relative_effect: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub n_defined_days_pre: usize,
    pub n_defined_days_post: usize,
    pub n_placebo_dates: usize,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl EffectEstimate {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Days defined in the treated series (and the control one, when used).
fn paired(treated: &[ProportionPoint], control: &[ProportionPoint], use_control: bool) -> Vec<(NaiveDate, f64, f64)> {
    let ctl: HashMap<NaiveDate, Option<f64>> = control.iter().map(|p| (p.date, p.value)).collect();
    let mut out: Vec<(NaiveDate, f64, f64)> = treated
        .iter()
        .filter_map(|p| {
            let y = p.value?;
            if use_control {
                let c = (*ctl.get(&p.date)?)?;
                Some((p.date, y, c))
            } else {
                Some((p.date, y, 0.0))
            }
        })
        .collect();
    out.sort_by_key(|p| p.0);
    out.dedup_by_key(|p| p.0);
    out
}

const WEEKDAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

fn regressors(date: NaiveDate, control: f64, cfg: &ItsConfig) -> Vec<f64> {
    let mut row = vec![1.0];
    if cfg.use_control_covariate {
        row.push(control);
    }
    if cfg.weekday_dummies {
        let wd = date.weekday().num_days_from_monday() as usize;
        row.extend((1..7).map(|k| if wd == k { 1.0 } else { 0.0 }));
    }
    row
}

fn regressor_names(cfg: &ItsConfig) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    if cfg.use_control_covariate {
        names.push("control".into());
    }
    if cfg.weekday_dummies {
        names.extend(WEEKDAYS[1..].iter().map(|d| d.to_string()));
    }
    names
}

fn fit_on(data: &[(NaiveDate, f64, f64)], split: usize, post_end: usize, cfg: &ItsConfig) -> FittedModel {
    let pre = &data[split - cfg.pre_window..split];
    let post = &data[split..post_end];
    let names = regressor_names(cfg);
    let rows: Vec<Vec<f64>> = pre.iter().map(|(d, _, c)| regressors(*d, *c, cfg)).collect();
    // Keep the intercept and every regressor that varies over the fit window.
    let keep: Vec<usize> = (0..names.len())
        .filter(|&j| j == 0 || rows.iter().any(|r| (r[j] - rows[0][j]).abs() > 0.0))
        .collect();
    let degenerate = keep.len() == 1 && names.len() > 1;
    let n = pre.len();
    let x = DMatrix::from_fn(n, keep.len(), |i, j| rows[i][keep[j]]);
    let y = DVector::from_iterator(n, pre.iter().map(|p| p.1));
    let beta = solve_least_squares(&x, &y);
    let resid = &y - &x * &beta;
    let dof = n as f64 - keep.len() as f64;
    let std_errors: Vec<Option<f64>> = if dof > 0.0 {
        let sigma2 = resid.norm_squared() / dof;
        match (x.transpose() * &x).try_inverse() {
            Some(inv) => (0..keep.len()).map(|j| Some((sigma2 * inv[(j, j)]).max(0.0).sqrt())).collect(),
            None => vec![None; keep.len()],
        }
    } else {
        vec![None; keep.len()]
    };
    let mut full_beta = vec![0.0; names.len()];
    for (j, &k) in keep.iter().enumerate() {
        full_beta[k] = beta[j];
    }
    let predictions = post
        .iter()
        .map(|(d, y, c)| {
            let r = regressors(*d, *c, cfg);
            PostPoint { date: *d, actual: *y, predicted: r.iter().zip(&full_beta).map(|(a, b)| a * b).sum() }
        })
        .collect();
    let coefficients = keep
        .iter()
        .enumerate()
        .map(|(j, &k)| Coefficient { name: names[k].clone(), estimate: beta[j], std_error: std_errors[j] })
        .collect();
    FittedModel { coefficients, degenerate, n_fit: n, predictions }
}

fn solve_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    // SVD tolerates the collinearity a short window can produce.
    let svd = x.clone().svd(true, true);
    svd.solve(y, 1e-12).unwrap_or_else(|_| DVector::zeros(x.ncols()))
}

/// Index of the first defined day at or after `date`, and the end of its post window.
fn windows(data: &[(NaiveDate, f64, f64)], date: NaiveDate, post_window: usize) -> (usize, usize) {
    let split = data.partition_point(|p| p.0 < date);
    let end_date = date + chrono::Duration::days(post_window as i64);
    let post_end = data.partition_point(|p| p.0 < end_date);
    (split, post_end)
}

pub fn fit_counterfactual(
    treated: &[ProportionPoint],
    control: &[ProportionPoint],
    intervention_date: NaiveDate,
    cfg: &ItsConfig,
) -> Result<FittedModel, ItsError> {
    cfg.validate()?;
    let data = paired(treated, control, cfg.use_control_covariate);
    let (split, post_end) = windows(&data, intervention_date, cfg.post_window);
    if split < cfg.pre_window {
        return Err(ItsError::InsufficientData(format!(
            "{split} defined days before {intervention_date}, need {}",
            cfg.pre_window
        )));
    }
    if post_end == split {
        return Err(ItsError::InsufficientData(format!(
            "no defined days in the {}-day post window from {intervention_date}",
            cfg.post_window
        )));
    }
    Ok(fit_on(&data, split, post_end, cfg))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn estimate_effect(
    treated: &[ProportionPoint],
    control: &[ProportionPoint],
    intervention_date: NaiveDate,
    cfg: &ItsConfig,
) -> Result<EffectEstimate, ItsError> {
    let model = fit_counterfactual(treated, control, intervention_date, cfg)?;
    let effect = model.effect();
    let cf_mean = model.predictions.iter().map(|p| p.predicted).sum::<f64>() / model.predictions.len() as f64;

    // Placebos only ever see pre-intervention data.
    let data = paired(treated, control, cfg.use_control_covariate);
    let pre_data = &data[..data.partition_point(|p| p.0 < intervention_date)];
    let first = pre_data.first().map(|p| p.0).unwrap_or(intervention_date);
    let candidates: Vec<NaiveDate> = first
        .iter_days()
        .take_while(|d| *d + chrono::Duration::days(cfg.post_window as i64) <= intervention_date)
        .filter(|d| {
            let (split, end) = windows(pre_data, *d, cfg.post_window);
            split >= cfg.pre_window && end > split
        })
        .collect();
    if candidates.is_empty() {
        return Err(ItsError::TooFewPlacebos { needed: cfg.pre_window, post: cfg.post_window });
    }
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let draws: Vec<NaiveDate> = if candidates.len() >= cfg.n_permutations {
        index::sample(&mut rng, candidates.len(), cfg.n_permutations).into_iter().map(|i| candidates[i]).collect()
    } else {
        (0..cfg.n_permutations).map(|_| candidates[rng.random_range(0..candidates.len())]).collect()
    };
    if candidates.len() < FEW_PLACEBO_DATES {
        warnings.push(format!(
            "only {} distinct placebo dates; placebo dates sampled with replacement",
            candidates.len()
        ));
    }
    let mut memo: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    let mut placebo: Vec<f64> = draws
        .iter()
        .map(|d| {
            *memo.entry(*d).or_insert_with(|| {
                let (split, end) = windows(pre_data, *d, cfg.post_window);
                fit_on(pre_data, split, end, cfg).effect()
            })
        })
        .collect();
    placebo.sort_by(f64::total_cmp);
    // Effects within roundoff of each other tie; otherwise an exact fit's ~1e-17 noise decides p.
    let scale = data.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let eps = 1e-9 * scale;
    let exceed = placebo.iter().filter(|p| p.abs() >= effect.abs() - eps).count();
    let p_value = exceed as f64 / placebo.len() as f64;
    let half = cfg.alpha / 2.0;
    let mut ci_low = effect - quantile(&placebo, 1.0 - half);
    let mut ci_high = effect - quantile(&placebo, half);
    if ci_low > effect || ci_high < effect {
        warnings.push("placebo distribution does not straddle zero; interval widened to contain the effect".into());
        ci_low = ci_low.min(effect);
        ci_high = ci_high.max(effect);
    }
    if model.degenerate {
        warnings.push("regressors had no variance; pre-window mean model used".into());
    }
    Ok(EffectEstimate {
        intervention_date,
        effect,
        relative_effect: (cf_mean != 0.0).then(|| effect / cf_mean),
        ci_low,
        ci_high,
        p_value,
        n_defined_days_pre: model.n_fit,
        n_defined_days_post: model.predictions.len(),
        n_placebo_dates: memo.len(),
        degenerate: model.degenerate,
        warnings,
    })
}

/// Synthetic setting for power experiments: one treated org, the control
/// orgs it is compared against, and the timeline.
#[derive(Debug, Clone)]
pub struct PowerSetup {
    pub treated: SynthProfile,
    pub controls: Vec<SynthProfile>,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub intervention_date: NaiveDate,
    pub seed: u64,
}

impl PowerSetup {
    /// Green against the two control orgs from 2016-01-01 to 2018-11-30, with
    /// the intervention on 2018-10-01. Placebo effects at neighbouring dates
    /// share almost all their data, so a long pre-period is what gives the
    /// null distribution enough independent information to be calibrated.
    pub fn default_setup(seed: u64) -> Self {
        let profiles = traffic_synth::default_profiles();
        let treated = profiles.iter().find(|p| p.org_id == "green").cloned().expect("green profile");
        let controls = profiles.into_iter().filter(|p| p.group == Group::Control).collect();
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid literal date");
        PowerSetup { treated, controls, start: d(2016, 1, 1), end: d(2018, 11, 30), intervention_date: d(2018, 10, 1), seed }
    }

    fn scenario(&self, multiplier: f64, class: Class) -> Scenario {
        let mut treated = self.treated.clone();
        // Episodes are a one-off of the observed org, not part of the experiment.
        treated.episodes.clear();
        treated.intervention = Some(Intervention {
            date: self.intervention_date,
            grey_multiplier: if class == Class::Grey { multiplier } else { 1.0 },
            malicious_multiplier: if class == Class::Malicious { multiplier } else { 1.0 },
        });
        let mut profiles = vec![treated];
        profiles.extend(self.controls.iter().cloned().map(|mut p| {
            p.group = Group::Control;
            p
        }));
        Scenario { start: self.start, end: self.end, profiles, peak: None }
    }

    /// Expected effect in proportion units: mean over the post window of the
    /// difference between treated and untreated expected proportions.
    pub fn true_effect(&self, multiplier: f64, cfg: &ItsConfig) -> f64 {
        let class = cfg.class();
        let scen = self.scenario(multiplier, class);
        let treated = &scen.profiles[0];
        let mut untreated = treated.clone();
        untreated.intervention = None;
        let prop = |p: &SynthProfile, d| {
            let r = p.expected_class_rates(d);
            r[class as usize] / r.iter().sum::<f64>()
        };
        let days: Vec<NaiveDate> = self
            .intervention_date
            .iter_days()
            .take(cfg.post_window)
            .take_while(|d| *d <= self.end)
            .collect();
        days.iter().map(|d| prop(treated, *d) - prop(&untreated, *d)).sum::<f64>() / days.len() as f64
    }

    /// One simulated estimate at `multiplier`; trial `t` uses the same traffic
    /// seed for every multiplier.
    pub fn trial(&self, multiplier: f64, t: usize, cfg: &ItsConfig) -> Result<EffectEstimate, ItsError> {
        let class = cfg.class();
        let scen = self.scenario(multiplier, class);
        let seed = self.seed.wrapping_add(t as u64);
        let plan = traffic_synth::plan(&scen, seed).map_err(|e| ItsError::InvalidConfig(e.to_string()))?;
        let treated = plan.proportion_series(&self.treated.org_id, class);
        let control = plan.group_proportion_series(Group::Control, class);
        let cfg = ItsConfig { rng_seed: cfg.rng_seed.wrapping_add(t as u64), ..cfg.clone() };
        estimate_effect(&treated, &control, self.intervention_date, &cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub multiplier: f64,
    pub n_trials: usize,
    pub detection_rate: f64,
    pub mean_effect: f64,
    pub true_effect: f64,
    pub bias: f64,
    /// Bias over the true effect; undefined for a zero true effect.
    pub relative_bias: Option<f64>,
    pub failed_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerReport {
    pub rows: Vec<PowerRow>,
}

/// Full factorial over `effect_grid` × `n_trials`, run in parallel and reduced in trial order.
pub fn power_analysis(
    setup: &PowerSetup,
    effect_grid: &[f64],
    n_trials: usize,
    cfg: &ItsConfig,
) -> Result<PowerReport, ItsError> {
    cfg.validate()?;
    if n_trials < MIN_POWER_TRIALS {
        return Err(ItsError::InvalidConfig(format!("n_trials must be >= {MIN_POWER_TRIALS}")));
    }
    if effect_grid.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        return Err(ItsError::InvalidConfig("effect multipliers must be positive".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..effect_grid.len()).flat_map(|g| (0..n_trials).map(move |t| (g, t))).collect();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len());
    let mut results: Vec<Option<Result<EffectEstimate, ItsError>>> = vec![None; jobs.len()];
    std::thread::scope(|s| {
        for (w, chunk) in results.chunks_mut(jobs.len().div_ceil(threads)).enumerate() {
            let base = w * jobs.len().div_ceil(threads);
            let jobs = &jobs;
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let (g, t) = jobs[base + i];
                    *slot = Some(setup.trial(effect_grid[g], t, cfg));
                }
            });
        }
    });
    let mut rows = Vec::new();
    for (g, &m) in effect_grid.iter().enumerate() {
        let mut detected = 0usize;
        let mut effects = Vec::new();
        let mut failed = 0usize;
        for r in &results[g * n_trials..(g + 1) * n_trials] {
            match r.as_ref().expect("every job ran") {
                Ok(e) => {
                    detected += usize::from(e.significant(cfg.alpha));
                    effects.push(e.effect);
                }
                Err(_) => failed += 1,
            }
        }
        let ok = effects.len().max(1) as f64;
        let mean_effect = effects.iter().sum::<f64>() / ok;
        let true_effect = setup.true_effect(m, cfg);
        let bias = mean_effect - true_effect;
        rows.push(PowerRow {
            multiplier: m,
            n_trials,
            detection_rate: detected as f64 / ok,
            mean_effect,
            true_effect,
            bias,
            relative_bias: (true_effect != 0.0).then(|| bias / true_effect),
            failed_trials: failed,
        });
    }
    Ok(PowerReport { rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_effect_csv<W: Write>(out: W, scope: &str, cfg: &ItsConfig, estimates: &[EffectEstimate]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scope",
        "metric",
        "intervention_date",
        "effect",
        "relative_effect",
        "ci_low",
        "ci_high",
        "p_value",
        "n_defined_days_pre",
        "n_defined_days_post",
        "n_placebo_dates",
        "degenerate",
        "method",
        "warnings",
    ])?;
    for e in estimates {
        w.write_record([
            scope.to_string(),
            cfg.metric.to_string(),
            e.intervention_date.to_string(),
            e.effect.to_string(),
            opt(e.relative_effect),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
            e.p_value.to_string(),
            e.n_defined_days_pre.to_string(),
            e.n_defined_days_post.to_string(),
            e.n_placebo_dates.to_string(),
            e.degenerate.to_string(),
            METHOD.to_string(),
            e.warnings.join("; "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_power_csv<W: Write>(out: W, report: &PowerReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "multiplier",
        "n_trials",
        "detection_rate",
        "mean_effect",
        "true_effect",
        "bias",
        "relative_bias",
        "failed_trials",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.multiplier.to_string(),
            r.n_trials.to_string(),
            r.detection_rate.to_string(),
            r.mean_effect.to_string(),
            r.true_effect.to_string(),
            r.bias.to_string(),
            opt(r.relative_bias),
            r.failed_trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
