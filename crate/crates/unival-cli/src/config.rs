//! The run configuration file.
//!
//! One TOML document drives every command. Each section is fully defaulted,
//! unknown keys are rejected, and the resolved document (after flag
//! overrides) is echoed into the artifact directory so a run can be
//! reproduced from its outputs alone.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use unival_core::error::{Error, Result};
use unival_core::eval::{EvalSuite, EvalTask, MetricId};
use unival_core::generate::GenConfig;
use unival_core::model::{Modality, ModelConfig};
use unival_core::tasks::{task_vocabulary, DataManifest, TaskKind};
use unival_core::trainer::{
    BalanceMode, CurriculumPlan, CurriculumStage, FreezePolicy, TaskMixture, TrainConfig,
};
use unival_core::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub curriculum: CurriculumSection,
    pub merge: MergeSection,
    pub eval: EvalSection,
}

/// Synthetic data: the shared vocabulary segments plus one manifest per
/// training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub location_bins: usize,
    pub visual_codes: usize,
    pub manifests: Vec<ManifestSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            location_bins: 50,
            visual_codes: 64,
            manifests: vec![ManifestSection::default()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestSection {
    pub task: String,
    pub seed_start: u64,
    pub count: usize,
    pub canvas: usize,
    pub bins: usize,
}

impl Default for ManifestSection {
    fn default() -> Self {
        ManifestSection {
            task: "caption".into(),
            seed_start: 0,
            count: 16,
            canvas: 32,
            bins: 50,
        }
    }
}

impl ManifestSection {
    pub fn to_manifest(&self) -> Result<DataManifest> {
        let m = DataManifest {
            task: self.task.parse()?,
            seed_start: self.seed_start,
            count: self.count,
            canvas: self.canvas,
            bins: self.bins,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Optimizer settings plus the two driver-level knobs: the mixture balance
/// mode and an optional checkpoint to start from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub label_smoothing: f32,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub freeze: FreezePolicy,
    pub mode: BalanceMode,
    pub init: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            label_smoothing: t.label_smoothing,
            weight_decay: t.weight_decay,
            ema_decay: t.ema_decay,
            seed: t.seed,
            batch_size: t.batch_size,
            steps: t.steps,
            log_every: t.log_every,
            freeze: t.freeze,
            mode: BalanceMode::Balanced,
            init: String::new(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            label_smoothing: self.label_smoothing,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            seed: self.seed,
            batch_size: self.batch_size,
            steps: self.steps,
            log_every: self.log_every,
            freeze: self.freeze,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub stages: Vec<StageSection>,
}

/// One curriculum stage: which modalities the model may consume, which data
/// manifests (by task id) it trains on, and its share of the step budget.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub modalities: Vec<Modality>,
    pub tasks: Vec<String>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub op: String,
    pub inputs: Vec<String>,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub exclude: Vec<String>,
    pub include_direct: bool,
    pub aux_tasks: Vec<String>,
    pub target_tasks: Vec<String>,
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection {
            op: "uniform".into(),
            inputs: Vec::new(),
            lambda: 0.5,
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            exclude: Vec::new(),
            include_direct: true,
            aux_tasks: Vec::new(),
            target_tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: String,
    pub run_id: String,
    pub tasks: Vec<EvalTaskSection>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: String::new(),
            run_id: "eval".into(),
            tasks: vec![EvalTaskSection::default()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalTaskSection {
    pub task: String,
    pub metric: String,
    pub seed_start: u64,
    pub count: usize,
    pub canvas: usize,
    pub bins: usize,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for EvalTaskSection {
    fn default() -> Self {
        let g = GenConfig::default();
        EvalTaskSection {
            task: "caption".into(),
            metric: "caption_exact".into(),
            seed_start: 100_000,
            count: 16,
            canvas: 32,
            bins: 50,
            beam: g.beam,
            max_len: g.max_len,
        }
    }
}

impl EvalTaskSection {
    pub fn to_eval_task(&self) -> Result<EvalTask> {
        Ok(EvalTask {
            manifest: DataManifest {
                task: self.task.parse()?,
                seed_start: self.seed_start,
                count: self.count,
                canvas: self.canvas,
                bins: self.bins,
            },
            metric: self.metric.parse::<MetricId>()?,
            gen: GenConfig {
                beam: self.beam,
                max_len: self.max_len,
                ..GenConfig::default()
            },
        })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("run config: {e}")))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        for m in &self.data.manifests {
            if m.bins > self.data.location_bins {
                return Err(Error::Config(format!(
                    "manifest for {} quantizes into {} bins but the vocabulary only has {} location tokens",
                    m.task, m.bins, self.data.location_bins
                )));
            }
        }
        task_vocabulary(self.data.location_bins, self.data.visual_codes)
    }

    pub fn manifests(&self) -> Result<Vec<DataManifest>> {
        if self.data.manifests.is_empty() {
            return Err(Error::Config("no data manifests configured".into()));
        }
        self.data.manifests.iter().map(|m| m.to_manifest()).collect()
    }

    /// The training mixture over every configured manifest.
    pub fn mixture(&self) -> Result<TaskMixture> {
        let mixture = TaskMixture {
            manifests: self.manifests()?,
            mode: self.train.mode,
        };
        mixture.validate()?;
        Ok(mixture)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config()
    }

    /// Builds the staged plan; stage task lists select manifests by task id.
    pub fn curriculum_plan(&self) -> Result<CurriculumPlan> {
        let manifests = self.manifests()?;
        let mut stages = Vec::with_capacity(self.curriculum.stages.len());
        for (k, s) in self.curriculum.stages.iter().enumerate() {
            let mut modalities: BTreeSet<Modality> = s.modalities.iter().copied().collect();
            modalities.insert(Modality::Text);
            let mut picked = Vec::new();
            for id in &s.tasks {
                let task: TaskKind = id.parse()?;
                let before = picked.len();
                picked.extend(manifests.iter().filter(|m| m.task == task).cloned());
                if picked.len() == before {
                    return Err(Error::Config(format!(
                        "curriculum stage {k} references task {id} but no data manifest provides it"
                    )));
                }
            }
            stages.push(CurriculumStage {
                modalities,
                mixture: TaskMixture {
                    manifests: picked,
                    mode: self.train.mode,
                },
                steps: s.steps,
            });
        }
        let plan = CurriculumPlan { stages };
        plan.validate()?;
        Ok(plan)
    }

    pub fn eval_suite(&self) -> Result<EvalSuite> {
        let suite = EvalSuite {
            run_id: self.eval.run_id.clone(),
            tasks: self
                .eval
                .tasks
                .iter()
                .map(|t| t.to_eval_task())
                .collect::<Result<_>>()?,
        };
        suite.validate()?;
        Ok(suite)
    }
}
