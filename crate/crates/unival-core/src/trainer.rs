//! Multitask training: task-balanced batch assembly, the label-smoothed
//! next-token objective with prompt masking, freeze policies, and the
//! multi-stage modality curriculum.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_on, Modality, ModelConfig, UnifiedModel};
use crate::optim::{AdamConfig, EmaState, LrSchedule, OptimState};
use crate::params::{ParamStore, Session};
use crate::rng::{hash_seed, CounterRng};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tasks::{build_indexed_sample, DataManifest, TaskKind};
use crate::vocab::{Vocabulary, PAD};

const STREAM_MIXTURE: u64 = 16;
const STREAM_DROPOUT: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// Per-task counts differ by at most one; remainder goes round-robin in
    /// task-id order.
    Balanced,
    /// Per-task counts drawn with probability proportional to dataset size.
    Proportional,
}

/// The datasets a stage trains on and how they share each batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMixture {
    pub manifests: Vec<DataManifest>,
    pub mode: BalanceMode,
}

impl TaskMixture {
    pub fn validate(&self) -> Result<()> {
        if self.manifests.is_empty() {
            return Err(Error::Config("mixture needs at least one task".into()));
        }
        for m in &self.manifests {
            m.validate()?;
        }
        Ok(())
    }

    /// How many samples each entry contributes to one batch.
    pub fn batch_counts(&self, batch_size: usize, rng: &mut CounterRng) -> Result<Vec<usize>> {
        let n = self.manifests.len();
        match self.mode {
            BalanceMode::Balanced => {
                if batch_size < n {
                    return Err(Error::Config(format!(
                        "balanced batch of {batch_size} cannot cover {n} tasks"
                    )));
                }
                let mut counts = vec![batch_size / n; n];
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by_key(|&i| (self.manifests[i].task.id(), i));
                for &i in order.iter().take(batch_size % n) {
                    counts[i] += 1;
                }
                Ok(counts)
            }
            BalanceMode::Proportional => {
                let total: usize = self.manifests.iter().map(|m| m.count).sum();
                let mut counts = vec![0usize; n];
                for _ in 0..batch_size {
                    let mut u = rng.next_f64() * total as f64;
                    let mut pick = n - 1;
                    for (i, m) in self.manifests.iter().enumerate() {
                        u -= m.count as f64;
                        if u < 0.0 {
                            pick = i;
                            break;
                        }
                    }
                    counts[pick] += 1;
                }
                Ok(counts)
            }
        }
    }
}

/// Uniform without-replacement order over one dataset, reshuffled per epoch.
#[derive(Debug, Clone)]
struct EpochState {
    order: Vec<usize>,
    next: usize,
}

impl EpochState {
    fn new(size: usize) -> Self {
        EpochState {
            order: (0..size).collect(),
            next: size,
        }
    }

    fn draw(&mut self, rng: &mut CounterRng) -> usize {
        if self.next >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.next = 0;
        }
        let i = self.order[self.next];
        self.next += 1;
        i
    }
}

/// Stateful batch assembler over a task mixture.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    mixture: TaskMixture,
    epochs: Vec<EpochState>,
    rng: CounterRng,
}

impl MixtureSampler {
    pub fn new(mixture: TaskMixture, seed: u64) -> Result<Self> {
        mixture.validate()?;
        let epochs = mixture
            .manifests
            .iter()
            .map(|m| EpochState::new(m.count))
            .collect();
        Ok(MixtureSampler {
            mixture,
            epochs,
            rng: CounterRng::new(seed, STREAM_MIXTURE),
        })
    }

    /// One batch of (mixture entry, sample index) pairs.
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<(usize, usize)>> {
        let counts = self.mixture.batch_counts(batch_size, &mut self.rng)?;
        let mut picks = Vec::with_capacity(batch_size);
        for (entry, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                picks.push((entry, self.epochs[entry].draw(&mut self.rng)));
            }
        }
        Ok(picks)
    }

    pub fn mixture(&self) -> &TaskMixture {
        &self.mixture
    }
}

/// Which parameters the optimizer may touch, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    Full,
    /// Token and modality embeddings stay fixed.
    FreezeEmbeddings,
    /// Only the modality projection layers train.
    LinearOnly,
}

impl FreezePolicy {
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            FreezePolicy::Full => true,
            FreezePolicy::FreezeEmbeddings => !name.starts_with("embed."),
            FreezePolicy::LinearOnly => name.starts_with("proj."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub label_smoothing: f32,
    pub weight_decay: f64,
    /// Shadow-average decay; `None` disables EMA tracking.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub freeze: FreezePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            ema_decay: None,
            seed: 0,
            batch_size: 8,
            steps: 0,
            log_every: 10,
            freeze: FreezePolicy::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive: {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1): {}",
                self.label_smoothing
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// One logged metrics row; rendered as CSV by [`metrics_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,task,loss,lr,tokens_seen\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            r.task.id(),
            r.loss,
            r.lr,
            r.tokens_seen
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub tokens_seen: u64,
    pub final_loss: Option<f64>,
    /// EMA shadow of the parameters, when tracking was enabled.
    pub ema: Option<ParamStore<f32>>,
}

/// Runs one stage's step budget on `model` in place.
///
/// The loss is label-smoothed next-token cross-entropy over target positions
/// only (prompt and PAD positions masked), averaged over every target token
/// in the batch. A non-finite batch loss aborts, naming the batch seed.
pub fn train_stage(
    model: &mut UnifiedModel<f32>,
    mixture: &TaskMixture,
    config: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<TrainReport> {
    config.validate()?;
    mixture.validate()?;
    for m in &mixture.manifests {
        if let Some(modality) = m.task.payload_modality() {
            if !model.config.modalities.contains(&modality) {
                return Err(Error::Capability(format!(
                    "task {} needs the {} modality, absent from the model",
                    m.task, modality
                )));
            }
        }
    }

    let mut sampler = MixtureSampler::new(mixture.clone(), config.seed)?;
    let mut opt = OptimState::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    })?;
    let schedule = LrSchedule::LinearDecay {
        base: config.lr,
        total_steps: config.steps.max(1) as u64,
    };
    let mut ema = match config.ema_decay {
        Some(d) => Some(EmaState::new(d)?),
        None => None,
    };

    let mut rows = Vec::new();
    let mut tokens_seen = 0u64;
    let mut final_loss = None;
    let policy = config.freeze;

    for step in 0..config.steps as u64 {
        let batch_seed = hash_seed(&[config.seed, step]);
        let picks = sampler.sample_batch(config.batch_size)?;
        let mut batch = Vec::with_capacity(picks.len());
        for (entry, index) in picks {
            batch.push(build_indexed_sample(&mixture.manifests[entry], index, vocab)?);
        }

        let mut dropout_rng = Some(CounterRng::new(batch_seed, STREAM_DROPOUT));
        let mut sess = Session::with_policy(&model.store, move |n| policy.trainable(n));
        let eps = config.label_smoothing;
        let mut weighted: Option<Var> = None;
        let mut total_tokens = 0usize;
        let mut per_task: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
        for sample in &batch {
            let (dec_input, labels) = sample.teacher_forcing();
            let input = sample.encoder_input()?;
            let logits = forward_on(&mut sess, &model.config, &input, &dec_input, &mut dropout_rng)?;
            let (loss, n) = sess.tape.ce_label_smoothed(logits, &labels, PAD, eps)?;
            let value = sess.tape.value(loss).item()?.to_f64_lossy();
            let slot = per_task.entry(sample.task).or_insert((0.0, 0));
            slot.0 += value * n as f64;
            slot.1 += n;
            total_tokens += n;
            let scaled = sess.tape.scale(loss, n as f32)?;
            weighted = Some(match weighted {
                Some(acc) => sess.tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        let sum = weighted.expect("batch is never empty");
        let batch_loss = sess.tape.scale(sum, 1.0 / total_tokens as f32)?;
        let loss_value = sess.tape.value(batch_loss).item()?.to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::TrainAbort { step, batch_seed });
        }
        sess.tape.backward(batch_loss)?;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (name, var) in sess.bound() {
            if let Some(g) = sess.tape.grad(var) {
                grads.insert(name.to_string(), g.to_vec());
            }
        }
        drop(sess);

        let lr = schedule.lr(step);
        opt.step(&mut model.store, &grads, lr)?;
        if let Some(e) = ema.as_mut() {
            e.update(&model.store);
        }
        tokens_seen += total_tokens as u64;
        final_loss = Some(loss_value);

        if step % config.log_every as u64 == 0 || step + 1 == config.steps as u64 {
            for (task, (loss_sum, n)) in &per_task {
                rows.push(MetricRow {
                    step,
                    task: *task,
                    loss: loss_sum / *n as f64,
                    lr,
                    tokens_seen,
                });
            }
        }
    }

    let ema_store = match &ema {
        Some(e) => Some(e.snapshot(&model.store)?),
        None => None,
    };
    Ok(TrainReport {
        rows,
        tokens_seen,
        final_loss,
        ema: ema_store,
    })
}

/// One curriculum stage: the modalities the model may consume, the data it
/// trains on, and its share of the step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub modalities: BTreeSet<Modality>,
    pub mixture: TaskMixture,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<CurriculumStage>,
}

impl CurriculumPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Plan("curriculum needs at least one stage".into()));
        }
        for (k, stage) in self.stages.iter().enumerate() {
            stage.mixture.validate()?;
            if !stage.modalities.contains(&Modality::Text) {
                return Err(Error::Plan(format!("stage {k} must include text")));
            }
            if k > 0 && !stage.modalities.is_superset(&self.stages[k - 1].modalities) {
                return Err(Error::Plan(format!(
                    "stage {k} drops modalities from stage {}",
                    k - 1
                )));
            }
            for m in &stage.mixture.manifests {
                if let Some(modality) = m.task.payload_modality() {
                    if !stage.modalities.contains(&modality) {
                        return Err(Error::Plan(format!(
                            "stage {k} trains {} without the {} modality",
                            m.task, modality
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome {
    /// Final parameters per stage, in order; the last entry is the result.
    pub stage_stores: Vec<ParamStore<f32>>,
    pub stage_configs: Vec<ModelConfig>,
    pub reports: Vec<TrainReport>,
}

impl CurriculumOutcome {
    pub fn final_store(&self) -> &ParamStore<f32> {
        self.stage_stores.last().expect("plans have at least one stage")
    }

    pub fn final_config(&self) -> &ModelConfig {
        self.stage_configs.last().expect("plans have at least one stage")
    }
}

/// Trains the plan stage by stage. Stage n+1 starts from a fresh
/// initialization for its modality set, then copies every shared parameter
/// bit-exactly from stage n's final weights, so only the newly added
/// encoders keep their run-seed initialization.
pub fn run_curriculum(
    base: &ModelConfig,
    plan: &CurriculumPlan,
    config: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<CurriculumOutcome> {
    plan.validate()?;
    config.validate()?;
    let mut outcome = CurriculumOutcome {
        stage_stores: Vec::new(),
        stage_configs: Vec::new(),
        reports: Vec::new(),
    };
    let mut prev: Option<ParamStore<f32>> = None;
    for (k, stage) in plan.stages.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.modalities = stage.modalities.clone();
        let mut model = UnifiedModel::<f32>::init(cfg.clone(), vocab.len(), config.seed)?;
        if let Some(p) = &prev {
            model.store.overwrite_shared(p)?;
        }
        let stage_config = TrainConfig {
            steps: stage.steps,
            seed: config.seed + k as u64,
            ..config.clone()
        };
        let report = train_stage(&mut model, &stage.mixture, &stage_config, vocab)?;
        prev = Some(model.store.clone());
        outcome.stage_stores.push(model.store);
        outcome.stage_configs.push(cfg);
        outcome.reports.push(report);
    }
    Ok(outcome)
}
