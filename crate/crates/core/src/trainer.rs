//! Plain SGD over the prompt (or a cosine classifier) with a warm-up epoch,
//! cosine annealing and per-step gradient surgery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::harmonic_mean;
use crate::losses::{self, grad_l2reg, Batch, LossEval};
use crate::numerics::{all_finite, l2_norm, ProbVector, RngStream};
use crate::surgery::{apply_rule, Branch, UpdateRule};
use crate::vlm::{self, init_prompt, CosineClassifier, FrozenVlm, PromptState};
use crate::datagen::Episode;

/// Updates whose norm exceeds this abort the run.
pub const MAX_UPDATE_NORM: f64 = 1e6;

pub const RUN_RECORD_SCHEMA: &str = "run_record.v1";

const STREAM_MINIBATCH: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Target {
    Prompt,
    CosineClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: UpdateRule,
    pub lr0: f64,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub target: Target,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::Prograd { lambda: 1.0 },
            lr0: 0.002,
            warmup_lr: 1e-5,
            epochs: 50,
            batch_size: 32,
            target: Target::Prompt,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if !(self.lr0 >= 0.0) || !(self.warmup_lr >= 0.0) || !self.lr0.is_finite() || !self.warmup_lr.is_finite() {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Epoch budget by shot count: 50 for one shot, 100 up to four, 200 beyond.
pub fn default_epochs(shots: usize) -> usize {
    match shots {
        0 | 1 => 50,
        2..=4 => 100,
        _ => 200,
    }
}

/// Learning rate at `step`: `warmup_lr` throughout the first epoch, then
/// `lr0 · ½(1 + cos(π t / T))` where `t` counts post-warm-up steps and
/// `T` is the index of the last one, so the final step has rate zero.
pub fn lr_schedule(cfg: &TrainConfig, step: usize, total_steps: usize, steps_per_epoch: usize) -> f64 {
    debug_assert!(step < total_steps);
    if step < steps_per_epoch {
        return cfg.warmup_lr;
    }
    let t = step - steps_per_epoch;
    let last = total_steps.saturating_sub(steps_per_epoch + 1);
    if last == 0 {
        return cfg.lr0;
    }
    let frac = t.min(last) as f64 / last as f64;
    cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Params {
    Prompt(PromptState),
    CosineClassifier(CosineClassifier),
}

impl Params {
    pub fn init(vlm: &FrozenVlm, target: Target) -> Self {
        match target {
            Target::Prompt => Params::Prompt(init_prompt(vlm)),
            Target::CosineClassifier => Params::CosineClassifier(CosineClassifier::from_teacher(vlm)),
        }
    }

    pub fn as_flat(&self) -> &[f64] {
        match self {
            Params::Prompt(p) => p.as_flat(),
            Params::CosineClassifier(c) => c.as_flat(),
        }
    }

    fn as_flat_mut(&mut self) -> &mut [f64] {
        match self {
            Params::Prompt(p) => p.as_flat_mut(),
            Params::CosineClassifier(c) => c.as_flat_mut(),
        }
    }

    pub fn probs(&self, vlm: &FrozenVlm, x: &[f64]) -> Result<ProbVector> {
        match self {
            Params::Prompt(p) => vlm::predict_probs(vlm, p, x),
            Params::CosineClassifier(c) => vlm::cosine_classifier_probs(c, x, vlm.tau()),
        }
    }

    /// Losses and gradient pair on `batch`, with precomputed teacher probabilities.
    pub fn loss_eval(&self, vlm: &FrozenVlm, batch: &Batch, teacher: &[ProbVector]) -> Result<LossEval> {
        match self {
            Params::Prompt(p) => losses::prompt_loss_eval(vlm, p, batch, teacher),
            Params::CosineClassifier(c) => losses::classifier_loss_eval(c, vlm.tau(), batch, teacher),
        }
    }
}

/// Argmax labels for every row of `batch` (ties to the lowest index).
pub fn predict_labels(vlm: &FrozenVlm, params: &Params, batch: &Batch) -> Result<Vec<usize>> {
    match params {
        Params::Prompt(p) => {
            let feats = vlm::class_features(vlm, p)?;
            batch
                .features
                .iter()
                .map(|x| Ok(vlm::probs_from_features(&feats, x, vlm.tau())?.argmax()))
                .collect()
        }
        Params::CosineClassifier(_) => batch.features.iter().map(|x| Ok(params.probs(vlm, x)?.argmax())).collect(),
    }
}

pub fn zero_shot_labels(vlm: &FrozenVlm, batch: &Batch) -> Result<Vec<usize>> {
    batch.features.iter().map(|x| Ok(vlm::zero_shot_probs(vlm, x)?.argmax())).collect()
}

/// Fraction of `labels` whose prediction is correct, optionally only over
/// rows whose label is in `classes`. An empty selection scores zero.
pub fn accuracy(pred: &[usize], labels: &[usize], classes: Option<&[usize]>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, y) in pred.iter().zip(labels) {
        if classes.is_some_and(|c| !c.contains(y)) {
            continue;
        }
        n += 1;
        hit += usize::from(p == y);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Top-1 accuracy of `params` on `batch`.
pub fn evaluate(vlm: &FrozenVlm, params: &Params, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty batch".into()));
    }
    Ok(accuracy(&predict_labels(vlm, params, batch)?, &batch.labels, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub dot_ce_kl: f64,
    pub angle_deg: f64,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub acc_overall: f64,
    pub acc_base: f64,
    pub acc_new: f64,
    pub harmonic_mean: f64,
    pub acc_zero_shot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub steps: Vec<StepRecord>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
}

impl RunRecord {
    /// Mean angle over the final quarter of the steps (at least one step).
    pub fn mean_late_angle(&self) -> f64 {
        let n = self.steps.len();
        if n == 0 {
            return 90.0;
        }
        let start = n - (n / 4).max(1);
        let late = &self.steps[start..];
        late.iter().map(|s| s.angle_deg).sum::<f64>() / late.len() as f64
    }
}

/// Final metrics of `params` on an episode's test split.
pub fn final_metrics(vlm: &FrozenVlm, params: &Params, episode: &Episode) -> Result<FinalMetrics> {
    let pred = predict_labels(vlm, params, &episode.test)?;
    let zs = zero_shot_labels(vlm, &episode.test)?;
    let labels = &episode.test.labels;
    let acc_base = accuracy(&pred, labels, Some(&episode.base_classes));
    let acc_new = accuracy(&pred, labels, Some(&episode.new_classes));
    Ok(FinalMetrics {
        acc_overall: accuracy(&pred, labels, None),
        acc_base,
        acc_new,
        harmonic_mean: harmonic_mean(acc_base, acc_new),
        acc_zero_shot: accuracy(&zs, labels, None),
    })
}

/// A training run advanced one optimizer step at a time.
pub struct TrainSession<'a> {
    vlm: &'a FrozenVlm,
    train: &'a Batch,
    teacher: Vec<ProbVector>,
    cfg: TrainConfig,
    params: Params,
    init_flat: Vec<f64>,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    trace: Vec<StepRecord>,
}

impl<'a> TrainSession<'a> {
    pub fn new(vlm: &'a FrozenVlm, train: &'a Batch, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        train.validate(vlm.k(), vlm.feat_dim())?;
        let params = Params::init(vlm, cfg.target);
        let teacher = losses::teacher_probs(vlm, train)?;
        let bs = cfg.batch_size.min(train.len());
        let steps_per_epoch = train.len().div_ceil(bs);
        Ok(Self {
            vlm,
            train,
            teacher,
            cfg,
            init_flat: params.as_flat().to_vec(),
            params,
            rng: RngStream::derive(cfg.seed, STREAM_MINIBATCH),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
            trace: Vec::new(),
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        lr_schedule(&self.cfg, self.step.min(self.total_steps - 1), self.total_steps, self.steps_per_epoch)
    }

    fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.train.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let bs = self.cfg.batch_size.min(self.train.len());
        let end = (self.cursor + bs).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }

    /// Runs one optimizer step and returns its trace entry.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Run("training already finished".into()));
        }
        let lr = self.current_lr();
        let idx = self.next_indices();
        let batch = self.train.select(&idx);
        let teacher: Vec<ProbVector> = idx.iter().map(|&i| self.teacher[i].clone()).collect();
        let eval = self.params.loss_eval(self.vlm, &batch, &teacher)?;
        let g_reg = match self.cfg.rule {
            UpdateRule::L2reg { alpha } => Some(grad_l2reg(self.params.as_flat(), &self.init_flat, alpha)?),
            _ => None,
        };
        let outcome = apply_rule(&self.cfg.rule, &eval.grads, g_reg.as_deref(), self.step)?;
        let norm = l2_norm(&outcome.direction);
        if !all_finite(&outcome.direction) || norm > MAX_UPDATE_NORM {
            return Err(Error::Numerical(format!(
                "update norm {norm:e} at step {} (loss_ce {}, loss_kl {})",
                self.step, eval.loss_ce, eval.loss_kl
            )));
        }
        if lr != 0.0 {
            for (p, d) in self.params.as_flat_mut().iter_mut().zip(&outcome.direction) {
                *p -= lr * d;
            }
        }
        let rec = StepRecord {
            step: self.step,
            lr,
            loss_ce: eval.loss_ce,
            loss_kl: eval.loss_kl,
            dot_ce_kl: outcome.dot_ce_kl,
            angle_deg: outcome.angle_deg,
            branch: outcome.branch,
        };
        self.trace.push(rec.clone());
        self.step += 1;
        Ok(rec)
    }

    pub fn into_parts(self) -> (Params, Vec<StepRecord>) {
        (self.params, self.trace)
    }
}

/// Trains on `episode.train` and evaluates on `episode.test`.
pub fn train(vlm: &FrozenVlm, episode: &Episode, cfg: &TrainConfig) -> Result<(Params, RunRecord)> {
    let mut session = TrainSession::new(vlm, &episode.train, *cfg)?;
    while !session.is_done() {
        session.step()?;
    }
    let (params, steps) = session.into_parts();
    let final_metrics = final_metrics(vlm, &params, episode)?;
    Ok((params, RunRecord { schema: RUN_RECORD_SCHEMA.to_string(), steps, final_metrics }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_domains, sample_episode, DomainSpec};
    use crate::vlm::VlmSpec;

    fn setup(shots: usize, seed: u64) -> (FrozenVlm, Episode) {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec::default();
        let (_, downstream) = build_domains(&vlm, &spec).unwrap();
        let ep = sample_episode(&downstream, &spec, shots, seed).unwrap();
        (vlm, ep)
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        let (total, spe) = (101, 1);
        assert_eq!(lr_schedule(&cfg, 0, total, spe), 1e-5);
        assert_eq!(lr_schedule(&cfg, 1, total, spe), 0.002);
        assert!(lr_schedule(&cfg, 100, total, spe).abs() < 1e-15);
        let oracle = 0.001 * (1.0 + (std::f64::consts::PI * 50.0 / 99.0).cos());
        assert!((lr_schedule(&cfg, 51, total, spe) - oracle).abs() < 1e-15);
        for s in 0..3 {
            assert_eq!(lr_schedule(&cfg, s, 30, 3), 1e-5);
        }
        for s in 1..total {
            assert!(lr_schedule(&cfg, s, total, spe) <= lr_schedule(&cfg, s - 1, total, spe) || s == 1);
        }
        // One post-warm-up step runs at the base rate.
        assert_eq!(lr_schedule(&cfg, 1, 2, 1), 0.002);
    }

    #[test]
    fn epoch_defaults() {
        assert_eq!([1, 2, 4, 8, 16].map(default_epochs), [50, 100, 100, 200, 200]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (vlm, ep) = setup(2, 3);
        let cfg = TrainConfig { lr0: 0.0, warmup_lr: 0.0, epochs: 5, ..Default::default() };
        let (params, rec) = train(&vlm, &ep, &cfg).unwrap();
        assert_eq!(params, Params::init(&vlm, Target::Prompt));
        assert_eq!(rec.final_metrics.acc_overall, rec.final_metrics.acc_zero_shot);
        assert_eq!(rec.steps.len(), 5);
    }

    #[test]
    fn runs_are_deterministic() {
        let (vlm, ep) = setup(4, 1);
        let cfg = TrainConfig { epochs: 20, ..Default::default() };
        let a = train(&vlm, &ep, &cfg).unwrap();
        let b = train(&vlm, &ep, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a.1).unwrap(), serde_json::to_string(&b.1).unwrap());
    }

    #[test]
    fn prograd_at_zero_lambda_is_ce() {
        let (vlm, ep) = setup(2, 4);
        let ce = TrainConfig { rule: UpdateRule::Ce, epochs: 30, ..Default::default() };
        let pg = TrainConfig { rule: UpdateRule::Prograd { lambda: 0.0 }, ..ce };
        assert_eq!(train(&vlm, &ep, &ce).unwrap(), train(&vlm, &ep, &pg).unwrap());
    }

    #[test]
    fn warmup_and_trace_invariants() {
        let (vlm, ep) = setup(8, 2);
        let cfg = TrainConfig { epochs: 6, batch_size: 16, ..Default::default() };
        let (_, rec) = train(&vlm, &ep, &cfg).unwrap();
        // 40 training images in batches of 16: 3 steps per epoch.
        assert_eq!(rec.steps.len(), 18);
        for s in &rec.steps[..3] {
            assert_eq!(s.lr, 1e-5);
        }
        for s in &rec.steps {
            assert!((0.0..=180.0).contains(&s.angle_deg));
            match s.branch {
                Branch::Aligned => assert!(s.dot_ce_kl >= 0.0),
                _ => assert!(s.dot_ce_kl < 0.0),
            }
        }
        // The prompt starts at the teacher, so the first KL gradient vanishes.
        assert_eq!(rec.steps[0].loss_kl, 0.0);
    }

    #[test]
    fn cosine_classifier_mode_trains() {
        let (vlm, ep) = setup(4, 5);
        let cfg = TrainConfig { target: Target::CosineClassifier, epochs: 30, ..Default::default() };
        let (params, rec) = train(&vlm, &ep, &cfg).unwrap();
        assert!(matches!(params, Params::CosineClassifier(_)));
        assert_eq!(rec.steps.len(), 30);
        assert!(rec.steps.last().unwrap().loss_ce < rec.steps[0].loss_ce);
    }

    #[test]
    fn l2reg_and_gm_and_kd_run() {
        let (vlm, ep) = setup(1, 6);
        for rule in [UpdateRule::L2reg { alpha: 0.01 }, UpdateRule::Gm, UpdateRule::Kd] {
            let cfg = TrainConfig { rule, epochs: 10, ..Default::default() };
            let (_, rec) = train(&vlm, &ep, &cfg).unwrap();
            assert_eq!(rec.steps.len(), 10);
        }
    }

    #[test]
    fn evaluate_basics() {
        let (vlm, ep) = setup(1, 7);
        let params = Params::init(&vlm, Target::Prompt);
        let acc = evaluate(&vlm, &params, &ep.test).unwrap();
        let mut rev = ep.test.clone();
        rev.features.reverse();
        rev.labels.reverse();
        assert_eq!(acc, evaluate(&vlm, &params, &rev).unwrap());

        let pred = predict_labels(&vlm, &params, &ep.test).unwrap();
        let perfect = Batch::new(ep.test.features.clone(), pred).unwrap();
        assert_eq!(evaluate(&vlm, &params, &perfect).unwrap(), 1.0);
        assert!(evaluate(&vlm, &params, &Batch { features: vec![], labels: vec![] }).is_err());
    }

    #[test]
    fn record_json_round_trips() {
        let (vlm, ep) = setup(1, 8);
        let (_, rec) = train(&vlm, &ep, &TrainConfig { epochs: 4, ..Default::default() }).unwrap();
        let text = serde_json::to_string(&rec).unwrap();
        assert!(text.contains("\"schema\":\"run_record.v1\"") && text.contains("\"final\":"));
        let back: RunRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
