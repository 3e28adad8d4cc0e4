use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Gap};
use super::gradcheck::{self, GradCheckCase};
use super::{failure_overlap, plot, summarize};
use crate::datagen::{build_domains, sample_episode, sample_test_set, shift_domain, Episode};
use crate::error::{Error, Result};
use crate::surgery::{Branch, UpdateRule};
use crate::trainer::{self, predict_labels, zero_shot_labels, RunRecord};
use crate::vlm::FrozenVlm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fewshot,
    Base2new,
    Domainshift,
    LambdaSweep,
    Angles,
    Gradcheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fewshot => "fewshot",
            Command::Base2new => "base2new",
            Command::Domainshift => "domainshift",
            Command::LambdaSweep => "lambda-sweep",
            Command::Angles => "angles",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub threads: usize,
    pub plot: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out"), threads: 1, plot: false }
    }
}

/// One trained run, as written to the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub rule: String,
    pub lambda: f64,
    pub alpha: f64,
    pub shots: usize,
    pub gap_rotation_deg: f64,
    pub gap_shift: f64,
    pub seed: u64,
    pub acc_overall: f64,
    pub acc_base: f64,
    pub acc_new: f64,
    pub harmonic_mean: f64,
    pub acc_zero_shot: f64,
    pub mean_late_angle: f64,
    pub wallclock_ms: u64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
}

impl ResultRow {
    fn sort_key(&self, other: &Self) -> Ordering {
        self.rule
            .cmp(&other.rule)
            .then(self.lambda.total_cmp(&other.lambda))
            .then(self.alpha.total_cmp(&other.alpha))
            .then(self.shots.cmp(&other.shots))
            .then(self.gap_rotation_deg.total_cmp(&other.gap_rotation_deg))
            .then(self.gap_shift.total_cmp(&other.gap_shift))
            .then(self.seed.cmp(&other.seed))
    }

    fn group_key(&self) -> (String, u64, u64, usize, u64, u64) {
        (
            self.rule.clone(),
            self.lambda.to_bits(),
            self.alpha.to_bits(),
            self.shots,
            self.gap_rotation_deg.to_bits(),
            self.gap_shift.to_bits(),
        )
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Numeric columns only, for comparing runs of different rules.
    pub fn metrics(&self) -> [f64; 6] {
        [self.acc_overall, self.acc_base, self.acc_new, self.harmonic_mean, self.acc_zero_shot, self.mean_late_angle]
    }
}

/// Mean and 95% half-width per `(rule, λ, α, shots, gap)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub rule: String,
    pub lambda: f64,
    pub alpha: f64,
    pub shots: usize,
    pub gap_rotation_deg: f64,
    pub gap_shift: f64,
    pub n: usize,
    pub acc_overall_mean: f64,
    pub acc_overall_ci95: f64,
    pub acc_base_mean: f64,
    pub acc_base_ci95: f64,
    pub acc_new_mean: f64,
    pub acc_new_ci95: f64,
    pub harmonic_mean_mean: f64,
    pub harmonic_mean_ci95: f64,
    pub acc_zero_shot_mean: f64,
    pub mean_late_angle_mean: f64,
}

/// Per-step trace row of the angle protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub rule: String,
    pub lambda: f64,
    pub shots: usize,
    pub seed: u64,
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub dot_ce_kl: f64,
    pub angle_deg: f64,
    pub branch: Branch,
}

/// Failures of `rule` that the CE run gets right, and how many of them the
/// zero-shot teacher also misses. `overlap` is empty when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureOverlapRow {
    pub rule: String,
    pub lambda: f64,
    pub shots: usize,
    pub seed: u64,
    pub failures: usize,
    pub overlap: Option<f64>,
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct CommandReport {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
    pub gradcheck: Vec<GradCheckCase>,
    pub files: Vec<PathBuf>,
    /// Runs that errored, plus violated protocol checks.
    pub failures: Vec<String>,
}

impl CommandReport {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Shared state for the runs of one command.
struct Context {
    cfg: ExperimentConfig,
    vlm: FrozenVlm,
    downstream: Vec<Vec<f64>>,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let vlm = FrozenVlm::random(cfg.vlm)?;
        let (_, downstream) = build_domains(&vlm, &cfg.domain)?;
        Ok(Self { cfg: cfg.clone(), vlm, downstream })
    }

    fn episode(&self, shots: usize, label: u64) -> Result<Episode> {
        sample_episode(&self.downstream, &self.cfg.domain, shots, self.cfg.run_seed(label))
    }
}

#[derive(Debug, Clone, Copy)]
struct RunSpec {
    rule: UpdateRule,
    shots: usize,
    seed: u64,
}

struct RunOutput {
    row: ResultRow,
    record: Option<RunRecord>,
    predictions: Option<(Vec<usize>, Vec<usize>, Vec<usize>)>,
}

fn blank_row(cfg: &ExperimentConfig, spec: &RunSpec, gap: Gap) -> ResultRow {
    ResultRow {
        experiment: cfg.experiment.clone(),
        rule: spec.rule.tag().to_string(),
        lambda: spec.rule.lambda(),
        alpha: spec.rule.alpha(),
        shots: spec.shots,
        gap_rotation_deg: gap.rotation_deg,
        gap_shift: gap.shift,
        seed: spec.seed,
        acc_overall: 0.0,
        acc_base: 0.0,
        acc_new: 0.0,
        harmonic_mean: 0.0,
        acc_zero_shot: 0.0,
        mean_late_angle: 0.0,
        wallclock_ms: 0,
        status: "ok".into(),
    }
}

const NO_GAP: Gap = Gap { rotation_deg: 0.0, shift: 0.0 };

fn run_one(ctx: &Context, spec: &RunSpec, keep_predictions: bool) -> RunOutput {
    let started = Instant::now();
    let mut row = blank_row(&ctx.cfg, spec, NO_GAP);
    let result = (|| -> Result<(RunRecord, Option<(Vec<usize>, Vec<usize>, Vec<usize>)>)> {
        let episode = ctx.episode(spec.shots, spec.seed)?;
        let tc = ctx.cfg.train_config(spec.rule, spec.shots, ctx.cfg.run_seed(spec.seed));
        let (params, record) = trainer::train(&ctx.vlm, &episode, &tc)?;
        let preds = if keep_predictions {
            Some((
                predict_labels(&ctx.vlm, &params, &episode.test)?,
                zero_shot_labels(&ctx.vlm, &episode.test)?,
                episode.test.labels.clone(),
            ))
        } else {
            None
        };
        Ok((record, preds))
    })();
    match result {
        Ok((record, predictions)) => {
            let f = record.final_metrics;
            row.acc_overall = f.acc_overall;
            row.acc_base = f.acc_base;
            row.acc_new = f.acc_new;
            row.harmonic_mean = f.harmonic_mean;
            row.acc_zero_shot = f.acc_zero_shot;
            row.mean_late_angle = record.mean_late_angle();
            if ctx.cfg.record_wallclock {
                row.wallclock_ms = started.elapsed().as_millis() as u64;
            }
            RunOutput { row, record: Some(record), predictions }
        }
        Err(e) => {
            row.status = e.to_string();
            RunOutput { row, record: None, predictions: None }
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn run_all(ctx: &Context, specs: &[RunSpec], threads: usize, keep_predictions: bool) -> Result<Vec<RunOutput>> {
    Ok(pool(threads)?.install(|| specs.par_iter().map(|s| run_one(ctx, s, keep_predictions)).collect()))
}

fn grid(cfg: &ExperimentConfig, rules: &[UpdateRule], shots: &[usize]) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &rule in rules {
        for &s in shots {
            for &seed in &cfg.seeds {
                specs.push(RunSpec { rule, shots: s, seed });
            }
        }
    }
    specs
}

fn sorted_rows(outputs: &[RunOutput]) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = outputs.iter().map(|o| o.row.clone()).collect();
    rows.sort_by(ResultRow::sort_key);
    rows
}

pub(crate) fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<_, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        groups.entry(r.group_key()).or_default().push(r);
    }
    let mut out: Vec<AggregateRow> = groups
        .values()
        .map(|g| {
            let col = |f: fn(&ResultRow) -> f64| summarize(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let first = g[0];
            let (overall, base, new, hm) =
                (col(|r| r.acc_overall), col(|r| r.acc_base), col(|r| r.acc_new), col(|r| r.harmonic_mean));
            AggregateRow {
                experiment: first.experiment.clone(),
                rule: first.rule.clone(),
                lambda: first.lambda,
                alpha: first.alpha,
                shots: first.shots,
                gap_rotation_deg: first.gap_rotation_deg,
                gap_shift: first.gap_shift,
                n: g.len(),
                acc_overall_mean: overall.mean,
                acc_overall_ci95: overall.ci95,
                acc_base_mean: base.mean,
                acc_base_ci95: base.ci95,
                acc_new_mean: new.mean,
                acc_new_ci95: new.ci95,
                harmonic_mean_mean: hm.mean,
                harmonic_mean_ci95: hm.ci95,
                acc_zero_shot_mean: col(|r| r.acc_zero_shot).mean,
                mean_late_angle_mean: col(|r| r.mean_late_angle).mean,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.rule
            .cmp(&b.rule)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.shots.cmp(&b.shots))
            .then(a.gap_rotation_deg.total_cmp(&b.gap_rotation_deg))
            .then(a.gap_shift.total_cmp(&b.gap_shift))
    });
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Run(format!("csv: {other:?}")),
    }
}

fn prepare_out(opts: &RunOptions) -> Result<()> {
    std::fs::create_dir_all(&opts.out_dir)?;
    Ok(())
}

fn emit<T: Serialize>(files: &mut Vec<PathBuf>, opts: &RunOptions, name: &str, rows: &[T]) -> Result<()> {
    let path = opts.out_dir.join(name);
    write_csv(&path, rows)?;
    files.push(path);
    Ok(())
}

#[derive(Serialize)]
struct RunEntry<'a> {
    rule: &'a str,
    lambda: f64,
    alpha: f64,
    shots: usize,
    seed: u64,
    record: &'a RunRecord,
}

fn emit_runs_json(report: &mut CommandReport, opts: &RunOptions, name: &str, outputs: &[RunOutput]) -> Result<()> {
    let mut entries: Vec<(&ResultRow, &RunRecord)> =
        outputs.iter().filter_map(|o| o.record.as_ref().map(|r| (&o.row, r))).collect();
    entries.sort_by(|a, b| a.0.sort_key(b.0));
    let docs: Vec<RunEntry> = entries
        .iter()
        .map(|(row, rec)| RunEntry {
            rule: &row.rule,
            lambda: row.lambda,
            alpha: row.alpha,
            shots: row.shots,
            seed: row.seed,
            record: rec,
        })
        .collect();
    let path = opts.out_dir.join(name);
    std::fs::write(&path, serde_json::to_string(&docs)?)?;
    report.files.push(path);
    Ok(())
}

fn run_failures(rows: &[ResultRow]) -> Vec<String> {
    rows.iter()
        .filter(|r| !r.is_ok())
        .map(|r| format!("{} λ={} shots={} seed={}: {}", r.rule, r.lambda, r.shots, r.seed, r.status))
        .collect()
}

fn shots_rows_report(
    name: &str,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    keep_predictions: bool,
) -> Result<(CommandReport, Vec<RunOutput>)> {
    prepare_out(opts)?;
    let ctx = Context::new(cfg)?;
    let specs = grid(cfg, &cfg.rules, &cfg.shots);
    let outputs = run_all(&ctx, &specs, opts.threads, keep_predictions)?;
    let mut report = CommandReport { rows: sorted_rows(&outputs), ..Default::default() };
    report.aggregates = aggregate(&report.rows);
    report.failures = run_failures(&report.rows);
    emit(&mut report.files, opts, &format!("{name}.csv"), &report.rows)?;
    emit(&mut report.files, opts, &format!("{name}_aggregate.csv"), &report.aggregates)?;
    Ok((report, outputs))
}

/// Few-shot protocol: every `(rule, shots, seed)` trained and evaluated.
pub fn cmd_fewshot(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    let (mut report, outputs) = shots_rows_report("fewshot", cfg, opts, false)?;
    emit_runs_json(&mut report, opts, "fewshot_runs.json", &outputs)?;
    if opts.plot {
        let path = opts.out_dir.join("fewshot.svg");
        std::fs::write(&path, plot::fewshot_svg(&report.aggregates))?;
        report.files.push(path);
    }
    Ok(report)
}

/// Base-to-new protocol, plus the failure-overlap analysis of each non-CE
/// rule against CE on matching `(shots, seed)` runs.
pub fn cmd_base2new(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    let (mut report, outputs) = shots_rows_report("base2new", cfg, opts, true)?;
    let ce: BTreeMap<(usize, u64), &RunOutput> = outputs
        .iter()
        .filter(|o| o.row.rule == "CE" && o.predictions.is_some())
        .map(|o| ((o.row.shots, o.row.seed), o))
        .collect();
    let mut overlap = Vec::new();
    for o in outputs.iter().filter(|o| o.row.rule != "CE") {
        let (Some((pred, zs, truth)), Some(base)) = (&o.predictions, ce.get(&(o.row.shots, o.row.seed))) else {
            continue;
        };
        let ce_pred = &base.predictions.as_ref().expect("filtered").0;
        let failures = pred.iter().zip(ce_pred).zip(truth).filter(|((a, b), t)| a != t && b == t).count();
        overlap.push(FailureOverlapRow {
            rule: o.row.rule.clone(),
            lambda: o.row.lambda,
            shots: o.row.shots,
            seed: o.row.seed,
            failures,
            overlap: failure_overlap(pred, ce_pred, zs, truth)?,
        });
    }
    if !overlap.is_empty() {
        overlap.sort_by(|a, b| {
            a.rule.cmp(&b.rule).then(a.lambda.total_cmp(&b.lambda)).then(a.shots.cmp(&b.shots)).then(a.seed.cmp(&b.seed))
        });
        emit(&mut report.files, opts, "base2new_failure_overlap.csv", &overlap)?;
    }
    Ok(report)
}

/// Trains on the downstream domain and evaluates the same parameters on
/// test sets drawn from each target gap.
pub fn cmd_domainshift(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    prepare_out(opts)?;
    if cfg.gaps.is_empty() {
        return Err(Error::Config("domainshift needs at least one gap".into()));
    }
    let ctx = Context::new(cfg)?;
    let targets: Vec<Vec<Vec<f64>>> = cfg
        .gaps
        .iter()
        .map(|g| shift_domain(&ctx.downstream, &cfg.domain.with_gap(g.rotation_deg, g.shift)))
        .collect::<Result<_>>()?;
    let specs = grid(cfg, &cfg.rules, &cfg.shots);
    let per_run: Vec<Vec<ResultRow>> = pool(opts.threads)?.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let started = Instant::now();
                let result = (|| -> Result<Vec<ResultRow>> {
                    let episode = ctx.episode(spec.shots, spec.seed)?;
                    let run_seed = cfg.run_seed(spec.seed);
                    let tc = cfg.train_config(spec.rule, spec.shots, run_seed);
                    let (params, record) = trainer::train(&ctx.vlm, &episode, &tc)?;
                    let elapsed = started.elapsed().as_millis() as u64;
                    cfg.gaps
                        .iter()
                        .zip(&targets)
                        .map(|(gap, protos)| {
                            let test = sample_test_set(protos, &cfg.domain, run_seed)?;
                            let shifted = Episode { test, ..episode.clone() };
                            let f = trainer::final_metrics(&ctx.vlm, &params, &shifted)?;
                            let mut row = blank_row(cfg, spec, *gap);
                            row.acc_overall = f.acc_overall;
                            row.acc_base = f.acc_base;
                            row.acc_new = f.acc_new;
                            row.harmonic_mean = f.harmonic_mean;
                            row.acc_zero_shot = f.acc_zero_shot;
                            row.mean_late_angle = record.mean_late_angle();
                            if cfg.record_wallclock {
                                row.wallclock_ms = elapsed;
                            }
                            Ok(row)
                        })
                        .collect()
                })();
                result.unwrap_or_else(|e| {
                    cfg.gaps
                        .iter()
                        .map(|g| ResultRow { status: e.to_string(), ..blank_row(cfg, spec, *g) })
                        .collect()
                })
            })
            .collect()
    });
    let mut rows: Vec<ResultRow> = per_run.into_iter().flatten().collect();
    rows.sort_by(ResultRow::sort_key);
    let mut report = CommandReport { aggregates: aggregate(&rows), rows, ..Default::default() };
    report.failures = run_failures(&report.rows);
    emit(&mut report.files, opts, "domainshift.csv", &report.rows)?;
    emit(&mut report.files, opts, "domainshift_aggregate.csv", &report.aggregates)?;
    Ok(report)
}

/// ProGrad across the λ grid next to CE. Rows with λ = 0 must reproduce the
/// CE rows of the same seed exactly; a mismatch is reported as a failure.
pub fn cmd_lambda_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    prepare_out(opts)?;
    let ctx = Context::new(cfg)?;
    let mut rules = vec![UpdateRule::Ce];
    rules.extend(cfg.lambdas.iter().map(|&lambda| UpdateRule::Prograd { lambda }));
    let specs = grid(cfg, &rules, &cfg.shots);
    let outputs = run_all(&ctx, &specs, opts.threads, false)?;
    let mut report = CommandReport { rows: sorted_rows(&outputs), ..Default::default() };
    report.aggregates = aggregate(&report.rows);
    report.failures = run_failures(&report.rows);

    let ce: BTreeMap<(usize, u64), &ResultRow> =
        report.rows.iter().filter(|r| r.rule == "CE").map(|r| ((r.shots, r.seed), r)).collect();
    for r in report.rows.iter().filter(|r| r.rule == "PROGRAD" && r.lambda == 0.0) {
        let same = ce.get(&(r.shots, r.seed)).is_some_and(|c| c.metrics().map(f64::to_bits) == r.metrics().map(f64::to_bits));
        if !same {
            report.failures.push(format!("PROGRAD(λ=0) differs from CE at shots={} seed={}", r.shots, r.seed));
        }
    }
    emit(&mut report.files, opts, "lambda_sweep.csv", &report.rows)?;
    emit(&mut report.files, opts, "lambda_sweep_aggregate.csv", &report.aggregates)?;
    Ok(report)
}

/// Full per-step angle traces for each rule at each of `angle_shots`.
pub fn cmd_angles(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    prepare_out(opts)?;
    let ctx = Context::new(cfg)?;
    let shots = if cfg.angle_shots.is_empty() { cfg.shots.clone() } else { cfg.angle_shots.clone() };
    let specs = grid(cfg, &cfg.rules, &shots);
    let outputs = run_all(&ctx, &specs, opts.threads, false)?;
    let mut report = CommandReport { rows: sorted_rows(&outputs), ..Default::default() };
    report.aggregates = aggregate(&report.rows);
    report.failures = run_failures(&report.rows);

    let mut traced: Vec<&RunOutput> = outputs.iter().filter(|o| o.record.is_some()).collect();
    traced.sort_by(|a, b| a.row.sort_key(&b.row));
    let trace: Vec<AngleRow> = traced
        .iter()
        .flat_map(|o| {
            o.record.as_ref().expect("filtered").steps.iter().map(|s| AngleRow {
                rule: o.row.rule.clone(),
                lambda: o.row.lambda,
                shots: o.row.shots,
                seed: o.row.seed,
                step: s.step,
                lr: s.lr,
                loss_ce: s.loss_ce,
                loss_kl: s.loss_kl,
                dot_ce_kl: s.dot_ce_kl,
                angle_deg: s.angle_deg,
                branch: s.branch,
            })
        })
        .collect();
    emit(&mut report.files, opts, "angles.csv", &trace)?;
    emit(&mut report.files, opts, "angles_summary.csv", &report.rows)?;
    if opts.plot {
        let path = opts.out_dir.join("angles.svg");
        std::fs::write(&path, plot::angles_svg(&trace))?;
        report.files.push(path);
    }
    Ok(report)
}

/// Finite-difference check of every analytic gradient.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    prepare_out(opts)?;
    let cases = gradcheck::run_gradcheck(cfg.master_seed, cfg.gradcheck_cases, gradcheck::DEFAULT_TOLERANCE)?;
    let mut report = CommandReport::default();
    for c in cases.iter().filter(|c| !c.passed) {
        report.failures.push(format!("case {} {}: relative error {:e}", c.case, c.kind, c.rel_err));
    }
    emit(&mut report.files, opts, "gradcheck.csv", &cases)?;
    report.gradcheck = cases;
    Ok(report)
}

pub fn run_command(cmd: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandReport> {
    match cmd {
        Command::Fewshot => cmd_fewshot(cfg, opts),
        Command::Base2new => cmd_base2new(cfg, opts),
        Command::Domainshift => cmd_domainshift(cfg, opts),
        Command::LambdaSweep => cmd_lambda_sweep(cfg, opts),
        Command::Angles => cmd_angles(cfg, opts),
        Command::Gradcheck => cmd_gradcheck(cfg, opts),
    }
}
