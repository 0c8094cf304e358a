//! Training loop, evaluation and the repeated cross-validation runner.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{drop_instance, BaselineKind};
use crate::data::{kfold_split, Bag, BagDataset, Standardizer};
use crate::error::{MilError, Result};
use crate::metrics::{accuracy, auc, mean_std};
use crate::model::{backward, bce_from_logit, forward, LayerHook, ModelConfig, ModelParams};
use crate::numerics::Rng;
use crate::pdl::{apba, progressive_schedule, Interpolation, InterpolationKind, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// L2 penalty folded into the gradient.
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(MilError::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// How the global PDL rate evolves over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// `P(t)` rises from 0 to `P_max` along the schedule interpolation.
    Progressive,
    /// `P(t) = P_max` from the first epoch on.
    Fixed,
}

impl FromStr for ScheduleMode {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "progressive" => Ok(Self::Progressive),
            "fixed" => Ok(Self::Fixed),
            other => Err(MilError::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdlConfig {
    pub p_max: f64,
    /// Shapes the per-instance rate vector within a bag.
    pub rate_interp: Interpolation,
    /// Shapes the epoch schedule `P(t)`.
    pub schedule_interp: Interpolation,
    pub schedule: ScheduleMode,
}

impl Default for PdlConfig {
    fn default() -> Self {
        Self {
            p_max: 0.45,
            rate_interp: Interpolation::default(),
            schedule_interp: Interpolation::default(),
            schedule: ScheduleMode::Progressive,
        }
    }
}

impl PdlConfig {
    pub fn with_kinds(rate: InterpolationKind, schedule: InterpolationKind) -> Self {
        Self {
            rate_interp: Interpolation {
                kind: rate,
                ..Interpolation::default()
            },
            schedule_interp: Interpolation {
                kind: schedule,
                ..Interpolation::default()
            },
            ..Self::default()
        }
    }

    /// Global rate for every epoch of a `horizon`-epoch run.
    pub fn global_rates(&self, horizon: usize) -> Result<Vec<f64>> {
        match self.schedule {
            ScheduleMode::Progressive => {
                progressive_schedule(self.schedule_interp, self.p_max, horizon)
            }
            ScheduleMode::Fixed => Ok(vec![self.p_max; horizon]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Regularizer {
    None,
    Pdl(PdlConfig),
    Baseline(BaselineKind),
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Pdl(c) => {
                if !(0.0..1.0).contains(&c.p_max) {
                    return Err(MilError::Rate {
                        what: "P_max",
                        value: c.p_max,
                    });
                }
                c.rate_interp.validate()?;
                c.schedule_interp.validate()
            }
            Self::Baseline(b) => b.validate(),
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Pdl(c) => write!(
                f,
                "pdl(p_max={}, rate={}, schedule={}:{})",
                c.p_max,
                c.rate_interp.kind,
                match c.schedule {
                    ScheduleMode::Progressive => "progressive",
                    ScheduleMode::Fixed => "fixed",
                },
                c.schedule_interp.kind
            ),
            Self::Baseline(b) => b.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
    pub regularizer: Regularizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            optimizer: OptimizerKind::AdamW,
            regularizer: Regularizer::Pdl(PdlConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 {
            return Err(MilError::Config(format!(
                "need at least 2 epochs, got {}",
                self.epochs
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MilError::Config(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MilError::Config(format!(
                "bad weight decay {}",
                self.weight_decay
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(MilError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(MilError::Config("Adam epsilon must be positive".into()));
        }
        self.regularizer.validate()
    }

    /// Global PDL rate per epoch, or all zeros without PDL.
    pub fn epoch_rates(&self) -> Result<Vec<f64>> {
        match &self.regularizer {
            Regularizer::Pdl(c) => c.global_rates(self.epochs),
            _ => Ok(vec![0.0; self.epochs]),
        }
    }
}

/// Adam / AdamW state for one parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    first: ModelParams,
    second: ModelParams,
    steps: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps);
        let lr = cfg.learning_rate;
        let wd = cfg.weight_decay;
        let decoupled = cfg.optimizer == OptimizerKind::AdamW;
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.slices_mut())
            .zip(self.second.slices_mut())
        {
            for i in 0..p.len() {
                let grad = if decoupled { g[i] } else { g[i] + wd * p[i] };
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
                if decoupled {
                    p[i] -= lr * (update + wd * p[i]);
                } else {
                    p[i] -= lr * update;
                }
            }
        }
    }
}

fn layer_hooks(reg: &Regularizer, global_rate: f64, layers: usize) -> Vec<LayerHook> {
    let hook = match reg {
        Regularizer::None => LayerHook::Identity,
        Regularizer::Pdl(c) => LayerHook::Pdl {
            global_rate,
            interp: c.rate_interp,
        },
        Regularizer::Baseline(b) => match *b {
            BaselineKind::Vanilla { rate } => LayerHook::Vanilla { rate },
            BaselineKind::Spatial { rate } => LayerHook::Spatial { rate },
            BaselineKind::AttentionDrop { threshold } => LayerHook::AttentionDrop { threshold },
            BaselineKind::DropInstance { .. } => LayerHook::Identity,
        },
    };
    vec![hook; layers]
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Global PDL rate `P(t)` used in each epoch (0 without PDL).
    pub epoch_rate: Vec<f64>,
}

/// Trains `params` in place with per-bag updates.
///
/// Each epoch shuffles the bags, runs a train-mode forward pass with the
/// regularizer's hooks (PDL hooks receive that epoch's `P(t)`), and takes
/// one optimizer step per bag. Bag order and dropout draws come from
/// separate streams derived from `config.seed`, so runs that differ only
/// in their regularizer see identical bag orders.
pub fn train(params: &mut ModelParams, bags: &[Bag], config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    if bags.is_empty() {
        return Err(MilError::Empty("training set"));
    }
    params.validate()?;
    let root = Rng::new(config.seed);
    let mut order_rng = root.fork("order");
    let mut drop_rng = root.fork("dropout");
    let rates = config.epoch_rates()?;
    let n_layers = params.projector.layers.len();
    let mut optimizer = Adam::new(params);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..bags.len()).collect();

    for (epoch, &rate) in rates.iter().enumerate() {
        order_rng.shuffle(&mut order);
        let hooks = layer_hooks(&config.regularizer, rate, n_layers);
        let mut total = 0.0;
        for &i in &order {
            let bag = match config.regularizer {
                Regularizer::Baseline(BaselineKind::DropInstance { rate }) => {
                    drop_instance(&bags[i], rate, &mut drop_rng)?
                }
                _ => bags[i].clone(),
            };
            let trace = forward(&bag, params, &hooks, Mode::Train, &mut drop_rng)?;
            let loss = bce_from_logit(trace.logit, bag.label);
            if !loss.is_finite() {
                return Err(MilError::Diverged {
                    epoch,
                    bag_id: bag.id.clone(),
                    loss,
                });
            }
            total += loss;
            let grads = backward(&trace, params, bag.label)?;
            optimizer.step(params, &grads, config);
        }
        history.epoch_loss.push(total / bags.len() as f64);
        history.epoch_rate.push(rate);
    }
    Ok(history)
}

/// Evaluation-mode summary over a set of bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// `None` when the bags contain a single class.
    pub auc: Option<f64>,
    pub loss: f64,
    pub bags: usize,
}

pub fn predict(params: &ModelParams, bag: &Bag) -> Result<f64> {
    let mut rng = Rng::new(0);
    Ok(forward(bag, params, &[], Mode::Eval, &mut rng)?.probability)
}

/// Accuracy at threshold 0.5, rank AUC and mean loss with all dropout off.
pub fn evaluate(params: &ModelParams, bags: &[Bag]) -> Result<EvalMetrics> {
    if bags.is_empty() {
        return Err(MilError::Empty("evaluation set"));
    }
    let mut rng = Rng::new(0);
    let mut probs = Vec::with_capacity(bags.len());
    let mut loss = 0.0;
    for bag in bags {
        let t = forward(bag, params, &[], Mode::Eval, &mut rng)?;
        loss += bce_from_logit(t.logit, bag.label);
        probs.push(t.probability);
    }
    let labels: Vec<bool> = bags.iter().map(|b| b.label).collect();
    Ok(EvalMetrics {
        accuracy: accuracy(&probs, &labels, 0.5),
        auc: auc(&probs, &labels),
        loss: loss / bags.len() as f64,
        bags: bags.len(),
    })
}

/// Final-aggregator attention per instance, in eval mode.
pub fn attention_weights(params: &ModelParams, bag: &Bag) -> Result<Vec<f64>> {
    let mut rng = Rng::new(0);
    Ok(forward(bag, params, &[], Mode::Eval, &mut rng)?
        .alpha
        .into_vec())
}

/// Per-instance attention of one bag: the aggregator's weights and the
/// parameter-free APBA weights of every projector layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BagAttention {
    pub aggregator: Vec<f64>,
    pub layers: Vec<Vec<f64>>,
}

pub fn bag_attention(params: &ModelParams, bag: &Bag) -> Result<BagAttention> {
    let mut rng = Rng::new(0);
    let trace = forward(bag, params, &[], Mode::Eval, &mut rng)?;
    let layers = trace
        .layers
        .iter()
        .map(|l| apba(&l.output).map(|a| a.into_vec()))
        .collect::<Result<_>>()?;
    Ok(BagAttention {
        aggregator: trace.alpha.into_vec(),
        layers,
    })
}

/// AUC of the aggregator's attention against instance labels, pooled over
/// the instances of all positive bags. `None` when that pool lacks either
/// positive or negative instances.
pub fn localization_score(params: &ModelParams, bags: &[Bag]) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in bags.iter().filter(|b| b.label) {
        let inst = bag
            .instance_labels
            .as_ref()
            .ok_or_else(|| MilError::Config(format!("bag {} has no instance labels", bag.id)))?;
        scores.extend(attention_weights(params, bag)?);
        labels.extend_from_slice(inst);
    }
    Ok(auc(&scores, &labels))
}

/// Everything that defines one experiment besides the data split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fit per-feature standardization on each training split.
    pub standardize: bool,
}

/// One scheduled train/test run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub run_id: String,
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `repeats × k` runs. Repeat `r` uses its own stratified split; every run
/// gets a seed derived from `(seed, r, fold)` only, so different
/// regularizers share splits, initializations and bag orders.
pub fn plan_cv(dataset: &BagDataset, k: usize, repeats: usize, seed: u64) -> Result<Vec<RunPlan>> {
    if repeats == 0 {
        return Err(MilError::Config("repeats must be at least 1".into()));
    }
    let root = Rng::new(seed);
    let mut plans = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let split_seed = root.fork_index("split", repeat as u64).seed();
        for (fold, f) in kfold_split(dataset, k, split_seed)?.into_iter().enumerate() {
            plans.push(RunPlan {
                run_id: format!("r{repeat}-f{fold}"),
                repeat,
                fold,
                seed: root.fork_index("run", (repeat * k + fold) as u64).seed(),
                train: f.train,
                test: f.test,
            });
        }
    }
    Ok(plans)
}

/// Result of one train/test run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub method: String,
    pub epoch_loss: Vec<f64>,
    pub epoch_rate: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_auc: Option<f64>,
    pub test_localization: Option<f64>,
}

/// Trains on the plan's training bags and returns the fitted model along
/// with its record.
pub fn fit_run(
    dataset: &BagDataset,
    plan: &RunPlan,
    experiment: &ExperimentConfig,
) -> Result<(ModelParams, Standardizer, RunRecord)> {
    let raw_train = dataset.select(&plan.train);
    let standardizer = if experiment.standardize {
        Standardizer::fit(&raw_train)?
    } else {
        Standardizer::identity(dataset.feature_dim)
    };
    let train_bags: Vec<Bag> = raw_train.iter().map(|b| standardizer.apply(b)).collect();
    let test_bags: Vec<Bag> = plan
        .test
        .iter()
        .map(|&i| standardizer.apply(&dataset.bags[i]))
        .collect();

    let mut model_cfg = experiment.model.clone();
    model_cfg.input_dim = dataset.feature_dim;
    let run_rng = Rng::new(plan.seed);
    let mut params = ModelParams::init(&model_cfg, &mut run_rng.fork("init"))?;
    let train_cfg = TrainConfig {
        seed: run_rng.fork("train").seed(),
        ..experiment.train.clone()
    };
    let history = train(&mut params, &train_bags, &train_cfg)?;

    let train_eval = evaluate(&params, &train_bags)?;
    let (test_accuracy, test_auc) = if test_bags.is_empty() {
        (f64::NAN, None)
    } else {
        let e = evaluate(&params, &test_bags)?;
        (e.accuracy, e.auc)
    };
    let labelled = test_bags
        .iter()
        .filter(|b| b.label)
        .all(|b| b.instance_labels.is_some());
    let test_localization = if labelled {
        localization_score(&params, &test_bags)?
    } else {
        None
    };
    let record = RunRecord {
        run_id: plan.run_id.clone(),
        repeat: plan.repeat,
        fold: plan.fold,
        seed: plan.seed,
        method: experiment.train.regularizer.to_string(),
        epoch_loss: history.epoch_loss,
        epoch_rate: history.epoch_rate,
        train_accuracy: train_eval.accuracy,
        test_accuracy,
        test_auc,
        test_localization,
    };
    Ok((params, standardizer, record))
}

pub fn execute_run(
    dataset: &BagDataset,
    plan: &RunPlan,
    experiment: &ExperimentConfig,
) -> Result<RunRecord> {
    fit_run(dataset, plan, experiment).map(|(_, _, r)| r)
}

/// Mean ± standard deviation of a metric, computed over all runs jointly
/// and over per-repeat means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std_all_runs: f64,
    pub std_repeat_means: f64,
    pub count: usize,
}

impl Spread {
    fn from_runs(runs: &[RunRecord], metric: impl Fn(&RunRecord) -> Option<f64>) -> Option<Self> {
        let values: Vec<(usize, f64)> = runs
            .iter()
            .filter_map(|r| metric(r).filter(|v| v.is_finite()).map(|v| (r.repeat, v)))
            .collect();
        if values.is_empty() {
            return None;
        }
        let all: Vec<f64> = values.iter().map(|&(_, v)| v).collect();
        let (mean, std_all_runs) = mean_std(&all);
        let mut repeats: Vec<usize> = values.iter().map(|&(r, _)| r).collect();
        repeats.sort_unstable();
        repeats.dedup();
        let repeat_means: Vec<f64> = repeats
            .iter()
            .map(|&rep| {
                let vs: Vec<f64> = values
                    .iter()
                    .filter(|&&(r, _)| r == rep)
                    .map(|&(_, v)| v)
                    .collect();
                mean_std(&vs).0
            })
            .collect();
        Some(Self {
            mean,
            std_all_runs,
            std_repeat_means: mean_std(&repeat_means).1,
            count: all.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub method: String,
    pub runs: usize,
    pub accuracy: Option<Spread>,
    pub auc: Option<Spread>,
    pub localization: Option<Spread>,
}

pub fn summarize(method: &str, runs: &[RunRecord]) -> CvSummary {
    CvSummary {
        method: method.to_string(),
        runs: runs.len(),
        accuracy: Spread::from_runs(runs, |r| Some(r.test_accuracy)),
        auc: Spread::from_runs(runs, |r| r.test_auc),
        localization: Spread::from_runs(runs, |r| r.test_localization),
    }
}

/// Runs `repeats` rounds of `k`-fold cross-validation sequentially.
pub fn run_cv_experiment(
    dataset: &BagDataset,
    experiment: &ExperimentConfig,
    k: usize,
    repeats: usize,
) -> Result<(Vec<RunRecord>, CvSummary)> {
    let plans = plan_cv(dataset, k, repeats, experiment.train.seed)?;
    let runs = plans
        .iter()
        .map(|p| execute_run(dataset, p, experiment))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&experiment.train.regularizer.to_string(), &runs);
    Ok((runs, summary))
}
