//! Metrics and suite evaluation over frozen checkpoints.
//!
//! Every metric lands in [0,1]. Grounding uses Acc@0.5 with a ≥ rule and
//! scores malformed generations as zero rather than erroring; question tasks
//! with closed answer sets always decode under their answer trie. Suites are
//! deterministic given a checkpoint and fixed manifests.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::generate::{generate, generate_constrained, AnswerTrie, GenConfig};
use crate::merge::CheckpointMap;
use crate::model::{config_hash, ModelConfig, UnifiedModel};
use crate::tasks::{build_dataset, DataManifest, Sample, TaskKind};
use crate::vocab::{BBox, Vocabulary, EOS, PAD};

pub use crate::vocab::iou;

/// Identifier of one scalar metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum MetricId {
    ExactMatch,
    TokenAccuracy,
    AccAtHalf,
    CaptionExact,
    CodeExact,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [
        MetricId::ExactMatch,
        MetricId::TokenAccuracy,
        MetricId::AccAtHalf,
        MetricId::CaptionExact,
        MetricId::CodeExact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::ExactMatch => "exact_match",
            MetricId::TokenAccuracy => "token_accuracy",
            MetricId::AccAtHalf => "acc_at_0.5",
            MetricId::CaptionExact => "caption_exact",
            MetricId::CodeExact => "code_exact",
        }
    }

    /// Whether the metric is defined for the task's target structure.
    pub fn applies_to(self, task: TaskKind) -> bool {
        match self {
            MetricId::ExactMatch | MetricId::TokenAccuracy => true,
            MetricId::AccAtHalf => task == TaskKind::VisualGrounding,
            MetricId::CaptionExact => matches!(
                task,
                TaskKind::Caption | TaskKind::VideoCaption | TaskKind::AudioCaption
            ),
            MetricId::CodeExact => task == TaskKind::TextToImage,
        }
    }
}

impl std::fmt::Display for MetricId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown metric id {s:?}")))
    }
}

/// Prefix up to (not including) the first EOS.
fn content(ids: &[u32]) -> &[u32] {
    match ids.iter().position(|&t| t == EOS) {
        Some(i) => &ids[..i],
        None => ids,
    }
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of predictions whose content equals the gold content exactly.
pub fn exact_match_rate(preds: &[Vec<u32>], golds: &[Vec<u32>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| content(p) == content(g))
        .count();
    Ok(rate(hits, preds.len()))
}

/// Exact string match after decoding both sides as text; undecodable
/// predictions count as misses.
pub fn caption_exact_rate(preds: &[Vec<u32>], golds: &[Vec<u32>], vocab: &Vocabulary) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut hits = 0;
    for (p, g) in preds.iter().zip(golds) {
        let gold = vocab.decode_text(content(g))?;
        if let Ok(pred) = vocab.decode_text(content(p)) {
            if pred == gold {
                hits += 1;
            }
        }
    }
    Ok(rate(hits, preds.len()))
}

/// Exact match over visual-code target sequences.
pub fn code_exact_rate(preds: &[Vec<u32>], golds: &[Vec<u32>]) -> Result<f64> {
    exact_match_rate(preds, golds)
}

/// Acc@0.5: fraction of predictions that decode to a box with
/// IoU(decoded, gold) ≥ 0.5. Malformed predictions score zero.
pub fn acc_at_half(
    preds: &[Vec<u32>],
    golds: &[BBox],
    vocab: &Vocabulary,
    width: f64,
    height: f64,
) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut hits = 0;
    for (p, gold) in preds.iter().zip(golds) {
        let body = content(p);
        if body.len() != 4 {
            continue;
        }
        if let Ok(decoded) = vocab.tokens_to_box(body, width, height) {
            if iou(&decoded, gold) >= 0.5 {
                hits += 1;
            }
        }
    }
    Ok(rate(hits, preds.len()))
}

/// Teacher-forced argmax accuracy over non-PAD label positions.
pub fn token_accuracy(model: &UnifiedModel<f32>, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let (dec_input, labels) = sample.teacher_forcing();
        let logits = model.forward(&sample.encoder_input()?, &dec_input)?;
        let (_, v) = logits.dims2()?;
        for (row, &label) in labels.iter().enumerate() {
            if label == PAD {
                continue;
            }
            let data = &logits.data()[row * v..(row + 1) * v];
            let argmax = data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i as u32)
                .unwrap_or(PAD);
            total += 1;
            if argmax == label {
                hits += 1;
            }
        }
    }
    Ok(rate(hits, total))
}

/// One evaluated dataset: a manifest, the metric to score it with, and the
/// generation settings used when the metric needs free decoding.
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub manifest: DataManifest,
    pub metric: MetricId,
    pub gen: GenConfig,
}

/// A named bundle of evaluation tasks.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub run_id: String,
    pub tasks: Vec<EvalTask>,
}

impl EvalSuite {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(',') || self.run_id.contains('\n') {
            return Err(Error::Config(format!(
                "run id must be non-empty and CSV-safe, got {:?}",
                self.run_id
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("evaluation suite has no tasks".into()));
        }
        for t in &self.tasks {
            t.manifest.validate()?;
            t.gen.validate()?;
            if !t.metric.applies_to(t.manifest.task) {
                return Err(Error::Config(format!(
                    "metric {} does not apply to task {}",
                    t.metric,
                    t.manifest.task
                )));
            }
        }
        Ok(())
    }

    /// Rejects suites whose manifests share seeds with any training manifest
    /// of the same task.
    pub fn check_disjoint(&self, training: &[DataManifest]) -> Result<()> {
        for t in &self.tasks {
            let (lo, hi) = t.manifest.seed_range();
            for m in training {
                if m.task != t.manifest.task {
                    continue;
                }
                let (tlo, thi) = m.seed_range();
                if lo < thi && tlo < hi {
                    return Err(Error::Validity(format!(
                        "evaluation manifest for {} (seeds {lo}..{hi}) overlaps a training manifest (seeds {tlo}..{thi})",
                        t.manifest.task
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One scored row of a suite run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub run_id: String,
    pub task: TaskKind,
    pub metric: MetricId,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    /// Set when the task family never appears in the checkpoint's training
    /// provenance.
    pub zero_shot: bool,
}

/// Suite results in (task, metric) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<EvalRow>,
}

impl SuiteReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,task,metric,value,n,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.run_id,
                r.task.id(),
                r.metric.name(),
                r.value,
                r.n,
                r.seed
            ));
        }
        out
    }

    /// Value of the first row matching (task, metric).
    pub fn value(&self, task: TaskKind, metric: MetricId) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Generates one prediction per sample; tasks with a closed answer set
/// always decode constrained to their answer trie.
pub fn predict(
    model: &UnifiedModel<f32>,
    vocab: &Vocabulary,
    samples: &[Sample],
    gen: &GenConfig,
) -> Result<Vec<Vec<u32>>> {
    let trie = match samples.first().map(|s| s.task.answer_set()) {
        Some(Some(answers)) => {
            let encoded: Vec<Vec<u32>> = answers.iter().map(|a| vocab.encode_text(a)).collect();
            Some(AnswerTrie::from_answers(encoded.iter().map(Vec::as_slice))?)
        }
        _ => None,
    };
    let mut preds = Vec::with_capacity(samples.len());
    for sample in samples {
        let input = sample.encoder_input()?;
        let out = match &trie {
            Some(trie) => generate_constrained(model, &input, &sample.decoder_prompt, trie, gen)?,
            None => generate(model, &input, &sample.decoder_prompt, gen)?,
        };
        preds.push(out.output);
    }
    Ok(preds)
}

fn gold_box(sample: &Sample, canvas: f64, vocab: &Vocabulary) -> Result<BBox> {
    if sample.target.len() < 4 {
        return Err(Error::Decode(format!(
            "grounding target of {} tokens cannot hold a box",
            sample.target.len()
        )));
    }
    vocab.tokens_to_box(&sample.target[..4], canvas, canvas)
}

fn eval_one(
    model: &UnifiedModel<f32>,
    vocab: &Vocabulary,
    spec: &EvalTask,
    run_id: &str,
    trained: &BTreeSet<String>,
) -> Result<EvalRow> {
    let task = spec.manifest.task;
    if let Some(m) = task.payload_modality() {
        if !model.config.modalities.contains(&m) {
            return Err(Error::Capability(format!(
                "task {task} needs the {} modality, which this checkpoint lacks",
                m.name()
            )));
        }
    }
    let samples = build_dataset(&spec.manifest, vocab)?;
    let value = match spec.metric {
        MetricId::TokenAccuracy => token_accuracy(model, &samples)?,
        MetricId::ExactMatch => {
            let preds = predict(model, vocab, &samples, &spec.gen)?;
            let golds: Vec<Vec<u32>> = samples.iter().map(|s| s.target.clone()).collect();
            exact_match_rate(&preds, &golds)?
        }
        MetricId::CaptionExact => {
            let preds = predict(model, vocab, &samples, &spec.gen)?;
            let golds: Vec<Vec<u32>> = samples.iter().map(|s| s.target.clone()).collect();
            caption_exact_rate(&preds, &golds, vocab)?
        }
        MetricId::CodeExact => {
            let preds = predict(model, vocab, &samples, &spec.gen)?;
            let golds: Vec<Vec<u32>> = samples.iter().map(|s| s.target.clone()).collect();
            code_exact_rate(&preds, &golds)?
        }
        MetricId::AccAtHalf => {
            let preds = predict(model, vocab, &samples, &spec.gen)?;
            let canvas = spec.manifest.canvas as f64;
            let golds: Vec<BBox> = samples
                .iter()
                .map(|s| gold_box(s, canvas, vocab))
                .collect::<Result<_>>()?;
            acc_at_half(&preds, &golds, vocab, canvas, canvas)?
        }
    };
    Ok(EvalRow {
        run_id: run_id.to_string(),
        task,
        metric: spec.metric,
        value,
        n: samples.len(),
        seed: spec.manifest.seed_start,
        zero_shot: !trained.contains(task.id()),
    })
}

/// Runs every task of the suite against a frozen checkpoint.
pub fn run_suite(
    checkpoint: &CheckpointMap,
    config: &ModelConfig,
    vocab: &Vocabulary,
    suite: &EvalSuite,
) -> Result<SuiteReport> {
    suite.validate()?;
    let expected = config_hash(config, vocab)?;
    if checkpoint.header().config_hash != expected {
        return Err(Error::Compatibility(
            "checkpoint config hash does not match the evaluation config".into(),
        ));
    }
    let model = UnifiedModel {
        config: config.clone(),
        store: checkpoint.to_store(),
    };
    let trained = checkpoint.trained_tasks();
    let mut rows = Vec::with_capacity(suite.tasks.len());
    for spec in &suite.tasks {
        rows.push(eval_one(&model, vocab, spec, &suite.run_id, &trained)?);
    }
    rows.sort_by(|a, b| (a.task.id(), a.metric.name()).cmp(&(b.task.id(), b.metric.name())));
    Ok(SuiteReport { rows })
}
