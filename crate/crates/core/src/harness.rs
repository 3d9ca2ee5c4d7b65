//! Experiment runners behind the CLI: synthetic-data generation, the
//! collocation and noise sweeps, crosstalk identification, and the
//! single-qubit mode. Everything here is deterministic given the base seed;
//! per-job seeds are derived with a splitmix step so that a single row can
//! be reproduced in isolation.
//!
//! Sweeps use common random numbers across grid points: realization `r`
//! draws the same ground truth and noise stream at every grid value, which
//! is what makes per-realization trends comparable.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{fit, reconstruct, FitConfig, FitReport, RecoveredParams};
use crate::lindblad::{
    add_gaussian_noise, equally_spaced_times, evolve, plus_plus_state, sample_random_parameters,
    ChannelSet, ParameterSet, TrainableMask, Trajectory,
};
use crate::metrics::{ae_mae, mape_with_excluded, trajectory_mape, MetricSet};
use crate::pauli::ObservableBasis;

/// Splitmix64 mix of a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed streams of one realization: ground truth, noise, fit restarts.
fn realization_seeds(base: u64, realization: usize) -> (u64, u64, u64) {
    let r = realization as u64;
    (
        derive_seed(base, 3 * r),
        derive_seed(base, 3 * r + 1),
        derive_seed(base, 3 * r + 2),
    )
}

/// Synthetic two-qubit ground truth plus its clean and noisy trajectories.
pub fn make_two_qubit_run(
    truth_seed: u64,
    noise_seed: u64,
    mask: &TrainableMask,
    n_c: usize,
    sigma: f64,
    t_final: f64,
) -> Result<(ParameterSet<f64>, Trajectory<f64>, Trajectory<f64>)> {
    let omega0 = std::f64::consts::TAU / t_final;
    let truth = sample_random_parameters(2, truth_seed, mask, omega0);
    let channels = ChannelSet::two_qubit_standard();
    let times = equally_spaced_times(n_c, t_final);
    let clean = evolve(&plus_plus_state(2), &truth, &channels, &times)?;
    let noisy = add_gaussian_noise(&clean, sigma, noise_seed);
    Ok((truth, clean, noisy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub grid_value: f64,
    pub realization: usize,
    pub seed: u64,
    pub group: String,
    pub mape: Option<f64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub grid_value: f64,
    pub group: String,
    pub n_ok: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<SweepSummary>,
    pub reports: Vec<(String, FitReport)>,
}

#[derive(Debug, Clone)]
pub struct CollocationSweepConfig {
    pub nc_grid: Vec<usize>,
    pub realizations: usize,
    pub sigma: f64,
    pub seed: u64,
    pub fit: FitConfig<f64>,
}

impl CollocationSweepConfig {
    pub fn new(seed: u64) -> Self {
        let mut fit = FitConfig::two_qubit();
        fit.restarts = 2;
        Self { nc_grid: vec![5, 10, 20, 40], realizations: 8, sigma: 0.0, seed, fit }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSweepConfig {
    pub sigma_grid: Vec<f64>,
    pub n_c: usize,
    pub realizations: usize,
    pub seed: u64,
    pub fit: FitConfig<f64>,
}

impl NoiseSweepConfig {
    pub fn new(seed: u64) -> Self {
        let mut fit = FitConfig::two_qubit();
        fit.restarts = 2;
        Self { sigma_grid: vec![0.0, 0.005, 0.01, 0.02], n_c: 50, realizations: 8, seed, fit }
    }
}

fn group_mape(truth: &RecoveredParams, recovered: &RecoveredParams, group: &str) -> Option<f64> {
    match group {
        "J_mean" => mape_with_excluded(&truth.j[1..], &recovered.j[1..]).0,
        "gamma_mean" => mape_with_excluded(&truth.gamma, &recovered.gamma).0,
        other => {
            let k: usize = other
                .strip_prefix("gamma_")
                .and_then(|s| s.parse().ok())
                .unwrap_or_else(|| panic!("unknown metric group '{other}'"));
            mape_with_excluded(&truth.gamma[k - 1..k], &recovered.gamma[k - 1..k]).0
        }
    }
}

struct JobOutput {
    rows: Vec<SweepRow>,
    report: Option<(String, FitReport)>,
}

/// One sweep cell: realization `r` at a given grid value. Re-running this
/// with the same config and seed reproduces the rows bit-exactly.
pub fn collocation_job(cfg: &CollocationSweepConfig, n_c: usize, realization: usize) -> JobResult {
    let groups = ["J_mean", "gamma_1", "gamma_2", "gamma_3", "gamma_4"];
    run_two_qubit_job(
        &cfg.fit,
        cfg.seed,
        realization,
        n_c,
        cfg.sigma,
        n_c as f64,
        &groups,
        &format!("nc{n_c}_r{realization}"),
    )
}

/// One noise-sweep cell.
pub fn noise_job(cfg: &NoiseSweepConfig, sigma: f64, realization: usize) -> JobResult {
    let groups = ["J_mean", "gamma_mean"];
    run_two_qubit_job(
        &cfg.fit,
        cfg.seed,
        realization,
        cfg.n_c,
        sigma,
        sigma,
        &groups,
        &format!("sigma{sigma}_r{realization}"),
    )
}

pub struct JobResult {
    pub rows: Vec<SweepRow>,
    pub label: String,
    pub report: Option<FitReport>,
}

#[allow(clippy::too_many_arguments)]
fn run_two_qubit_job(
    fit_base: &FitConfig<f64>,
    base_seed: u64,
    realization: usize,
    n_c: usize,
    sigma: f64,
    grid_value: f64,
    groups: &[&str],
    label: &str,
) -> JobResult {
    let (truth_seed, noise_seed, fit_seed) = realization_seeds(base_seed, realization);
    let outcome = make_two_qubit_run(
        truth_seed,
        noise_seed,
        &fit_base.mask,
        n_c,
        sigma,
        fit_base.t_final.to_f64(),
    )
    .and_then(|(truth, _clean, noisy)| {
        let mut config = fit_base.clone();
        config.seed = fit_seed;
        let mut report = fit(&noisy, &ChannelSet::two_qubit_standard(), &config)?;
        report.attach_truth(&RecoveredParams::from_parameter_set(&truth));
        Ok(report)
    });

    match outcome {
        Ok(report) => {
            let truth = report.truth.clone().expect("attached above");
            let rows = groups
                .iter()
                .map(|g| SweepRow {
                    grid_value,
                    realization,
                    seed: fit_seed,
                    group: g.to_string(),
                    mape: group_mape(&truth, &report.recovered, g),
                    ok: true,
                })
                .collect();
            JobResult { rows, label: label.to_string(), report: Some(report) }
        }
        Err(_) => {
            let rows = groups
                .iter()
                .map(|g| SweepRow {
                    grid_value,
                    realization,
                    seed: fit_seed,
                    group: g.to_string(),
                    mape: None,
                    ok: false,
                })
                .collect();
            JobResult { rows, label: label.to_string(), report: None }
        }
    }
}

fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for row in rows {
        let key = (row.grid_value, row.group.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(grid_value, group)| {
            let ok_values: Vec<f64> = rows
                .iter()
                .filter(|r| r.ok && r.grid_value == grid_value && r.group == group)
                .filter_map(|r| r.mape)
                .collect();
            if ok_values.is_empty() {
                SweepSummary { grid_value, group, n_ok: 0, mean: None, min: None, max: None }
            } else {
                let n = ok_values.len();
                SweepSummary {
                    grid_value,
                    group,
                    n_ok: n,
                    mean: Some(ok_values.iter().sum::<f64>() / n as f64),
                    min: ok_values.iter().copied().reduce(f64::min),
                    max: ok_values.iter().copied().reduce(f64::max),
                }
            }
        })
        .collect()
}

pub fn run_sweep_collocation(cfg: &CollocationSweepConfig) -> Result<SweepResult> {
    if cfg.nc_grid.is_empty() || cfg.realizations == 0 {
        return Err(Error::InvalidConfig("empty sweep grid".to_string()));
    }
    let jobs: Vec<(usize, usize)> = cfg
        .nc_grid
        .iter()
        .flat_map(|&n_c| (0..cfg.realizations).map(move |r| (n_c, r)))
        .collect();
    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|&(n_c, r)| {
            let out = collocation_job(cfg, n_c, r);
            JobOutput { rows: out.rows, report: out.report.map(|rep| (out.label, rep)) }
        })
        .collect();
    Ok(assemble_sweep(outputs))
}

pub fn run_sweep_noise(cfg: &NoiseSweepConfig) -> Result<SweepResult> {
    if cfg.sigma_grid.is_empty() || cfg.realizations == 0 {
        return Err(Error::InvalidConfig("empty sweep grid".to_string()));
    }
    let jobs: Vec<(f64, usize)> = cfg
        .sigma_grid
        .iter()
        .flat_map(|&s| (0..cfg.realizations).map(move |r| (s, r)))
        .collect();
    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|&(sigma, r)| {
            let out = noise_job(cfg, sigma, r);
            JobOutput { rows: out.rows, report: out.report.map(|rep| (out.label, rep)) }
        })
        .collect();
    Ok(assemble_sweep(outputs))
}

fn assemble_sweep(outputs: Vec<JobOutput>) -> SweepResult {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for out in outputs {
        rows.extend(out.rows);
        if let Some(r) = out.report {
            reports.push(r);
        }
    }
    let summaries = summarize(&rows);
    SweepResult { rows, summaries, reports }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Rows CSV: `<axis>,realization,seed,group,mape,ok` (mape empty on failed
/// runs).
pub fn sweep_rows_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{axis},realization,seed,group,mape,ok\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.grid_value,
            r.realization,
            r.seed,
            r.group,
            fmt_opt(r.mape),
            r.ok
        ));
    }
    out
}

/// Summary CSV: `<axis>,group,n_ok,mean,min,max`.
pub fn sweep_summary_csv(axis: &str, summaries: &[SweepSummary]) -> String {
    let mut out = format!("{axis},group,n_ok,mean,min,max\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.grid_value,
            s.group,
            s.n_ok,
            fmt_opt(s.mean),
            fmt_opt(s.min),
            fmt_opt(s.max)
        ));
    }
    out
}

/// Per-parameter MAPE across restarts (mean with min/max bars).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMapeRow {
    pub name: String,
    pub n_ok: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

pub fn param_rows_csv(rows: &[ParamMapeRow]) -> String {
    let mut out = String::from("parameter,n_ok,mean,min,max\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            r.n_ok,
            fmt_opt(r.mean),
            fmt_opt(r.min),
            fmt_opt(r.max)
        ));
    }
    out
}

fn param_mape_rows(
    names: &[String],
    truth_values: &[f64],
    per_restart: &[Vec<f64>],
) -> Vec<ParamMapeRow> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if truth_values[i] == 0.0 {
                return ParamMapeRow {
                    name: name.clone(),
                    n_ok: 0,
                    mean: None,
                    min: None,
                    max: None,
                };
            }
            let errs: Vec<f64> = per_restart
                .iter()
                .map(|rec| ((rec[i] - truth_values[i]) / truth_values[i]).abs())
                .collect();
            let n = errs.len();
            ParamMapeRow {
                name: name.clone(),
                n_ok: n,
                mean: Some(errs.iter().sum::<f64>() / n as f64),
                min: errs.iter().copied().reduce(f64::min),
                max: errs.iter().copied().reduce(f64::max),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CrosstalkConfig {
    pub seed: u64,
    pub n_c: usize,
    pub sigma: f64,
    pub fit: FitConfig<f64>,
}

impl CrosstalkConfig {
    pub fn new(seed: u64) -> Self {
        let mut fit = FitConfig::two_qubit();
        fit.restarts = 4;
        Self { seed, n_c: 50, sigma: 0.02, fit }
    }
}

#[derive(Debug)]
pub struct CrosstalkResult {
    pub truth: RecoveredParams,
    pub report: FitReport,
    pub gamma_rows: Vec<ParamMapeRow>,
    pub j_rows: Vec<ParamMapeRow>,
    /// Mean MAPE over the nine two-body couplings (both labels nonzero),
    /// best restart.
    pub two_body_mean_mape: Option<f64>,
    /// Best-restart reconstruction against the clean ground-truth
    /// trajectory on the data grid.
    pub reconstruction_mape: Option<f64>,
    /// AE / MAE of the reconstruction against the (noisy) training data.
    pub metrics_vs_data: MetricSet,
}

pub fn run_crosstalk(cfg: &CrosstalkConfig) -> Result<CrosstalkResult> {
    let (truth_seed, noise_seed, fit_seed) = realization_seeds(cfg.seed, 0);
    let (truth, clean, noisy) = make_two_qubit_run(
        truth_seed,
        noise_seed,
        &cfg.fit.mask,
        cfg.n_c,
        cfg.sigma,
        cfg.fit.t_final.to_f64(),
    )?;
    let channels = ChannelSet::two_qubit_standard();
    let mut config = cfg.fit.clone();
    config.seed = fit_seed;
    let mut report = fit(&noisy, &channels, &config)?;
    let truth_rec = RecoveredParams::from_parameter_set(&truth);
    report.attach_truth(&truth_rec);

    let per_restart_gamma: Vec<Vec<f64>> = report
        .restarts
        .iter()
        .filter(|r| r.ok)
        .map(|r| r.recovered.gamma.clone())
        .collect();
    let per_restart_j: Vec<Vec<f64>> = report
        .restarts
        .iter()
        .filter(|r| r.ok)
        .map(|r| r.recovered.j[1..].to_vec())
        .collect();

    let gamma_names: Vec<String> =
        (1..=truth_rec.gamma.len()).map(|k| format!("gamma_{k}")).collect();
    let gamma_rows = param_mape_rows(&gamma_names, &truth_rec.gamma, &per_restart_gamma);

    let basis = ObservableBasis::<f64>::new(2);
    let j_names: Vec<String> = basis
        .strings()
        .iter()
        .map(|s| format!("J_{}_{}", s.labels()[0], s.labels()[1]))
        .collect();
    let j_rows = param_mape_rows(&j_names, &truth_rec.j[1..], &per_restart_j);

    // Two-body couplings: both labels nonzero.
    let two_body: Vec<usize> = basis
        .strings()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.labels().iter().all(|&l| l != 0))
        .map(|(i, _)| i)
        .collect();
    let two_body_errs: Vec<f64> = two_body
        .iter()
        .filter(|&&i| truth_rec.j[1 + i] != 0.0)
        .map(|&i| ((report.recovered.j[1 + i] - truth_rec.j[1 + i]) / truth_rec.j[1 + i]).abs())
        .collect();
    let two_body_mean_mape = (!two_body_errs.is_empty())
        .then(|| two_body_errs.iter().sum::<f64>() / two_body_errs.len() as f64);

    let recovered = report.recovered.to_parameter_set::<f64>(2)?;
    let recon = reconstruct(&recovered, &channels, clean.times())?;
    let reconstruction_mape = trajectory_mape(&clean, &recon).ok();
    let metrics_vs_data = ae_mae(&noisy, &recon)?;

    Ok(CrosstalkResult {
        truth: truth_rec,
        report,
        gamma_rows,
        j_rows,
        two_body_mean_mape,
        reconstruction_mape,
        metrics_vs_data,
    })
}

/// Parameters recovered for the bundled single-qubit scenario (couplings
/// and rates in angular MHz = rad/us; see the README unit note).
pub fn nominal_single_qubit_params() -> RecoveredParams {
    RecoveredParams {
        j: vec![0.0, 0.024, -1.52, -0.0108],
        gamma: vec![0.126, 0.0789, 4.39e-5],
    }
}

/// The corresponding experimental fitting values, printed alongside as
/// anchors when requested.
pub fn experimental_single_qubit_params() -> RecoveredParams {
    RecoveredParams {
        j: vec![0.0, 0.0, -1.57, 0.0],
        gamma: vec![0.128, 0.065, 1.33e-4],
    }
}

#[derive(Debug, Clone)]
pub struct SingleQubitRunConfig {
    pub fit: FitConfig<f64>,
    pub reference: Option<RecoveredParams>,
}

impl SingleQubitRunConfig {
    pub fn new(seed: u64, t_final: f64) -> Self {
        let mut fit = FitConfig::new(1, 3, t_final);
        fit.seed = seed;
        fit.restarts = 4;
        Self { fit, reference: None }
    }
}

#[derive(Debug)]
pub struct SingleQubitResult {
    pub report: FitReport,
    /// AE / MAE of the reconstruction against the supplied data.
    pub metrics: MetricSet,
    pub reference: Option<RecoveredParams>,
}

pub fn run_single_qubit(
    data: &Trajectory<f64>,
    cfg: &SingleQubitRunConfig,
) -> Result<SingleQubitResult> {
    if data.n_obs() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "single-qubit mode expects 3 observables, got {}",
            data.n_obs()
        )));
    }
    let channels = ChannelSet::one_qubit_finite_t();
    let report = fit(data, &channels, &cfg.fit)?;
    let recovered = report.recovered.to_parameter_set::<f64>(1)?;
    let recon = reconstruct(&recovered, &channels, data.times())?;
    let metrics = ae_mae(data, &recon)?;
    Ok(SingleQubitResult { report, metrics, reference: cfg.reference.clone() })
}
