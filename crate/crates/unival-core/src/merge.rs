//! Weight-space operations over checkpoints: linear interpolation, uniform
//! averaging, the fusing and ratatouille multi-finetune recipes, and grid
//! sweeps that evaluate interpolated models.
//!
//! All operations are pure: inputs are never mutated and outputs are freshly
//! allocated. Compatibility between checkpoints is decided solely by config
//! hash, name set and shapes, never by values. Averages accumulate in f64
//! and round once to storage precision.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{run_suite, EvalSuite, MetricId};
use crate::model::{config_hash, ModelConfig, UnifiedModel};
use crate::params::ParamStore;
use crate::tasks::TaskKind;
use crate::tensor::Tensor;
use crate::trainer::{train_stage, TaskMixture, TrainConfig};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Only encoding currently written: 32-bit little-endian floats.
pub const DTYPE_F32: u8 = 0;

/// Identity of a checkpoint: format version, the hash of the
/// (config, vocabulary) pair that shaped it, the seed of the run that
/// produced it, and a provenance log.
///
/// Provenance is a list of lines. The first line of a merged artifact names
/// the recipe (`lerp`, `uniform`, `fusing`, `ratatouille`); training runs
/// contribute `train tasks=a+b steps=.. seed=..` lines; member histories are
/// nested under `| ` prefixes. The log carries every seed and member, so a
/// merged artifact is reproducible from its header alone.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: [u8; 8],
    pub seed: u64,
    pub provenance: Vec<String>,
}

/// Ordered parameter-name → tensor map, the unit of merging.
///
/// Names are kept sorted lexicographically; construction from a store
/// verifies the closed-form parameter census of the config and that every
/// value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMap {
    header: CheckpointHeader,
    params: BTreeMap<String, Tensor<f32>>,
}

/// One `train tasks=..` provenance line for a finetune or pretrain stage.
pub fn train_provenance(mixture: &TaskMixture, config: &TrainConfig) -> String {
    let mut ids: Vec<&str> = mixture.manifests.iter().map(|m| m.task.id()).collect();
    ids.sort_unstable();
    ids.dedup();
    format!(
        "train tasks={} steps={} seed={}",
        ids.join("+"),
        config.steps,
        config.seed
    )
}

fn hash_hex(hash: &[u8; 8]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

impl CheckpointMap {
    /// Snapshots `store` under the census of `config`, verifying that names,
    /// shapes and finiteness all hold.
    pub fn from_store(
        config: &ModelConfig,
        vocab: &Vocabulary,
        seed: u64,
        provenance: Vec<String>,
        store: &ParamStore<f32>,
    ) -> Result<Self> {
        let census: BTreeMap<String, Vec<usize>> =
            config.parameter_census(vocab.len()).into_iter().collect();
        if store.len() != census.len() {
            return Err(Error::Compatibility(format!(
                "store has {} parameters, census expects {}",
                store.len(),
                census.len()
            )));
        }
        let mut params = BTreeMap::new();
        for (name, shape) in &census {
            let tensor = store.get(name).map_err(|_| {
                Error::Compatibility(format!("store is missing parameter {name}"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "parameter {name}: store shape {:?}, census shape {shape:?}",
                    tensor.shape()
                )));
            }
            if let Some(i) = tensor.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Validity(format!(
                    "parameter {name} has non-finite value at flat index {i}"
                )));
            }
            params.insert(name.clone(), tensor.clone());
        }
        Ok(CheckpointMap {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config_hash: config_hash(config, vocab)?,
                seed,
                provenance,
            },
            params,
        })
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameter names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    /// Copies the parameters back into a store usable by the model.
    pub fn to_store(&self) -> ParamStore<f32> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Task ids mentioned by any `tasks=a+b` field anywhere in the
    /// provenance log, including nested member histories.
    pub fn trained_tasks(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for line in &self.header.provenance {
            for field in line.split_whitespace() {
                if let Some(list) = field.strip_prefix("tasks=") {
                    out.extend(list.split('+').filter(|s| !s.is_empty()).map(String::from));
                }
            }
        }
        out
    }

    /// Bitwise equality of the parameter values, ignoring headers.
    pub fn values_equal(&self, other: &CheckpointMap) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((an, at), (bn, bt))| {
                    an == bn
                        && at.shape() == bt.shape()
                        && at
                            .data()
                            .iter()
                            .zip(bt.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    /// Writes the binary checkpoint plus a `<path>.meta.json` sidecar with
    /// the seed and provenance (the binary layout has no room for them).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.header.version.to_le_bytes());
        buf.extend_from_slice(&self.header.config_hash);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.shape().len() as u8);
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            buf.push(DTYPE_F32);
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        let meta = serde_json::to_string_pretty(&self.header)
            .map_err(|e| Error::Parse(format!("header serialization failed: {e}")))?;
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`CheckpointMap::save`], verifying the
    /// format invariants (magic, version, sorted names, finiteness, no
    /// trailing bytes) and that the sidecar header matches the binary.
    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let mut pos = 0usize;
        let magic = take(&buf, &mut pos, 4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&buf, &mut pos, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(take(&buf, &mut pos, 8, "config hash")?);
        let count = read_u32(&buf, &mut pos, "entry count")? as usize;
        let mut params = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name_len = read_u16(&buf, &mut pos, "name length")? as usize;
            let name = String::from_utf8(take(&buf, &mut pos, name_len, "name")?.to_vec())
                .map_err(|e| Error::Parse(format!("parameter name is not UTF-8: {e}")))?;
            if let Some(p) = &prev {
                if *p >= name {
                    return Err(Error::Parse(format!(
                        "entries out of order: {p:?} precedes {name:?}"
                    )));
                }
            }
            let ndim = take(&buf, &mut pos, 1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let dim = read_u32(&buf, &mut pos, "dimension")? as usize;
                numel = numel
                    .checked_mul(dim)
                    .ok_or_else(|| Error::Parse(format!("dims of {name} overflow")))?;
                shape.push(dim);
            }
            let dtype = take(&buf, &mut pos, 1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Parse(format!(
                    "parameter {name}: unknown dtype byte {dtype}"
                )));
            }
            let raw = take(&buf, &mut pos, numel * 4, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validity(format!(
                    "parameter {name} has non-finite value at flat index {i}"
                )));
            }
            params.insert(name, Tensor::new(shape, data)?);
            prev = params.keys().next_back().cloned();
        }
        if pos != buf.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after the last entry",
                buf.len() - pos
            )));
        }
        let meta = std::fs::read_to_string(sidecar_path(path))?;
        let header: CheckpointHeader = serde_json::from_str(&meta)
            .map_err(|e| Error::Parse(format!("sidecar header does not parse: {e}")))?;
        if header.version != version || header.config_hash != config_hash {
            return Err(Error::Parse(
                "sidecar header disagrees with the binary checkpoint".into(),
            ));
        }
        Ok(CheckpointMap { header, params })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() - *pos < n {
        return Err(Error::Parse(format!("truncated checkpoint while reading {what}")));
    }
    let out = &buf[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u16(buf: &[u8], pos: &mut usize, what: &str) -> Result<u16> {
    let b = take(buf, pos, 2, what)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = take(buf, pos, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// First divergence (config hash, then name set, then shapes) as a
/// compatibility error; `Ok` when the maps can be merged.
fn ensure_compatible(a: &CheckpointMap, b: &CheckpointMap) -> Result<()> {
    if a.header.config_hash != b.header.config_hash {
        return Err(Error::Compatibility(format!(
            "config hash {} vs {}",
            hash_hex(&a.header.config_hash),
            hash_hex(&b.header.config_hash)
        )));
    }
    let mut left = a.params.iter();
    let mut right = b.params.iter();
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ok(()),
            (Some((n, _)), None) | (None, Some((n, _))) => {
                return Err(Error::Compatibility(format!(
                    "parameter {n} present in only one checkpoint"
                )));
            }
            (Some((an, at)), Some((bn, bt))) => {
                if an != bn {
                    let first = an.min(bn);
                    return Err(Error::Compatibility(format!(
                        "parameter {first} present in only one checkpoint"
                    )));
                }
                if at.shape() != bt.shape() {
                    return Err(Error::Compatibility(format!(
                        "parameter {an}: shape {:?} vs {:?}",
                        at.shape(),
                        bt.shape()
                    )));
                }
            }
        }
    }
}

fn recipe_header(kind_line: String, seed: u64, hash: [u8; 8], members: &[&CheckpointMap]) -> CheckpointHeader {
    let mut provenance = vec![kind_line];
    for (i, m) in members.iter().enumerate() {
        provenance.push(format!("member {i} seed={}", m.header.seed));
        provenance.extend(m.header.provenance.iter().map(|l| format!("| {l}")));
    }
    CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config_hash: hash,
        seed,
        provenance,
    }
}

/// λ·w1 + (1−λ)·w2 over every float parameter.
///
/// λ = 1 returns w1 and λ = 0 returns w2 bit-exactly; interior values are
/// computed in f64 as `b + λ·(a−b)`, which is exact on equal inputs.
pub fn lerp(w1: &CheckpointMap, w2: &CheckpointMap, lambda: f64) -> Result<CheckpointMap> {
    lerp_excluding(w1, w2, lambda, &[])
}

/// [`lerp`] with an ablation escape hatch: any parameter whose name contains
/// one of `exclude` is copied from w1 unchanged at every λ.
pub fn lerp_excluding(
    w1: &CheckpointMap,
    w2: &CheckpointMap,
    lambda: f64,
    exclude: &[String],
) -> Result<CheckpointMap> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "interpolation coefficient must lie in [0,1], got {lambda}"
        )));
    }
    ensure_compatible(w1, w2)?;
    let keep = |name: &str| exclude.iter().any(|pat| name.contains(pat.as_str()));
    let params: BTreeMap<String, Tensor<f32>> = if lambda == 1.0 {
        w1.params.clone()
    } else if lambda == 0.0 && exclude.is_empty() {
        w2.params.clone()
    } else {
        w1.params
            .iter()
            .zip(w2.params.iter())
            .map(|((name, a), (_, b))| {
                if keep(name) {
                    return Ok((name.clone(), a.clone()));
                }
                let data: Vec<f32> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| {
                        let (x, y) = (x as f64, y as f64);
                        (y + lambda * (x - y)) as f32
                    })
                    .collect();
                Ok((name.clone(), Tensor::new(a.shape().to_vec(), data)?))
            })
            .collect::<Result<_>>()?
    };
    let kind_line = if exclude.is_empty() {
        format!("lerp lambda={lambda}")
    } else {
        format!("lerp lambda={lambda} exclude={}", exclude.join(";"))
    };
    Ok(CheckpointMap {
        header: recipe_header(kind_line, w1.header.seed, w1.header.config_hash, &[w1, w2]),
        params,
    })
}

/// Elementwise mean of ≥ 2 compatible checkpoints; f64 accumulation with a
/// single rounding, so the result is permutation-invariant within one ulp.
pub fn uniform_avg(ws: &[CheckpointMap]) -> Result<CheckpointMap> {
    if ws.len() < 2 {
        return Err(Error::Config(format!(
            "uniform average needs at least 2 checkpoints, got {}",
            ws.len()
        )));
    }
    for w in &ws[1..] {
        ensure_compatible(&ws[0], w)?;
    }
    let n = ws.len() as f64;
    let params: BTreeMap<String, Tensor<f32>> = ws[0]
        .params
        .iter()
        .map(|(name, first)| {
            let mut acc: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
            for w in &ws[1..] {
                for (s, &v) in acc.iter_mut().zip(w.params[name].data()) {
                    *s += v as f64;
                }
            }
            let data: Vec<f32> = acc.into_iter().map(|s| (s / n) as f32).collect();
            Ok((name.clone(), Tensor::new(first.shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    let members: Vec<&CheckpointMap> = ws.iter().collect();
    Ok(CheckpointMap {
        header: recipe_header(
            format!("uniform n={}", ws.len()),
            ws[0].header.seed,
            ws[0].header.config_hash,
            &members,
        ),
        params,
    })
}

/// A finetuning stage: what to train on and how.
#[derive(Debug, Clone)]
pub struct FinetuneSpec {
    pub mixture: TaskMixture,
    pub train: TrainConfig,
}

fn ensure_hash_matches(w: &CheckpointMap, hash: &[u8; 8], what: &str) -> Result<()> {
    if w.header.config_hash != *hash {
        return Err(Error::Compatibility(format!(
            "{what} checkpoint hash {} does not match config hash {}",
            hash_hex(&w.header.config_hash),
            hash_hex(hash)
        )));
    }
    Ok(())
}

/// Finetunes a model initialized from `init`, returning a checkpoint whose
/// provenance nests the full history of its initialization.
pub fn finetune_from(
    init: &CheckpointMap,
    spec: &FinetuneSpec,
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<CheckpointMap> {
    ensure_hash_matches(init, &config_hash(config, vocab)?, "init")?;
    let mut model = UnifiedModel {
        config: config.clone(),
        store: init.to_store(),
    };
    train_stage(&mut model, &spec.mixture, &spec.train, vocab)?;
    let mut provenance = vec![train_provenance(&spec.mixture, &spec.train)];
    provenance.extend(init.header.provenance.iter().map(|l| format!("| {l}")));
    CheckpointMap::from_store(config, vocab, spec.train.seed, provenance, &model.store)
}

/// Fusing: average the auxiliary checkpoints once, then finetune that single
/// initialization on each target; multiple targets are averaged again into
/// the multi-task variant.
pub fn fusing_pipeline(
    aux: &[CheckpointMap],
    targets: &[FinetuneSpec],
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<CheckpointMap> {
    if aux.is_empty() {
        return Err(Error::Config("fusing needs at least one auxiliary checkpoint".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("fusing needs at least one target finetune".into()));
    }
    let hash = config_hash(config, vocab)?;
    for w in aux {
        ensure_hash_matches(w, &hash, "auxiliary")?;
    }
    let init = if aux.len() == 1 {
        aux[0].clone()
    } else {
        uniform_avg(aux)?
    };
    let mut finetuned = Vec::with_capacity(targets.len());
    for spec in targets {
        finetuned.push(finetune_from(&init, spec, config, vocab)?);
    }
    let merged = if finetuned.len() == 1 {
        finetuned.into_iter().next().unwrap()
    } else {
        uniform_avg(&finetuned)?
    };
    let members: Vec<&CheckpointMap> = aux.iter().collect();
    let mut header = recipe_header(
        format!("fusing aux={} targets={}", aux.len(), targets.len()),
        targets[0].train.seed,
        hash,
        &members,
    );
    header
        .provenance
        .extend(merged.header.provenance.iter().map(|l| format!("| {l}")));
    Ok(CheckpointMap {
        header,
        params: merged.params,
    })
}

/// Ratatouille: every auxiliary task gets its own branch
/// (pretrain → auxiliary → target); the branch endpoints are averaged.
/// `include_direct` adds the plain pretrain → target branch (the default
/// choice in the driver).
pub fn ratatouille_pipeline(
    pretrain: &CheckpointMap,
    aux: &[FinetuneSpec],
    target: &FinetuneSpec,
    include_direct: bool,
    config: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<CheckpointMap> {
    ensure_hash_matches(pretrain, &config_hash(config, vocab)?, "pretrain")?;
    if aux.is_empty() && !include_direct {
        return Err(Error::Config(
            "ratatouille needs at least one branch: add auxiliary tasks or the direct branch".into(),
        ));
    }
    let mut branches = Vec::with_capacity(aux.len() + 1);
    for spec in aux {
        let on_aux = finetune_from(pretrain, spec, config, vocab)?;
        branches.push(finetune_from(&on_aux, target, config, vocab)?);
    }
    if include_direct {
        branches.push(finetune_from(pretrain, target, config, vocab)?);
    }
    let member_count = branches.len();
    let merged = if branches.len() == 1 {
        branches.into_iter().next().unwrap()
    } else {
        uniform_avg(&branches)?
    };
    let mut header = recipe_header(
        format!("ratatouille members={member_count} direct={include_direct}"),
        target.train.seed,
        pretrain.header.config_hash,
        &[pretrain],
    );
    header
        .provenance
        .extend(merged.header.provenance.iter().map(|l| format!("| {l}")));
    Ok(CheckpointMap {
        header,
        params: merged.params,
    })
}

/// One evaluated point of an interpolation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub task: TaskKind,
    pub metric: MetricId,
    pub value: f64,
    pub seed: u64,
}

/// Result table of [`sweep`], in (λ, task, metric) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,task,metric,value,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lambda,
                r.task.id(),
                r.metric.name(),
                r.value,
                r.seed
            ));
        }
        out
    }

    /// Rows at one grid point, in suite order.
    pub fn at(&self, lambda: f64) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.lambda == lambda).collect()
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
        return Err(Error::Config(format!(
            "sweep grid must start at 0 and end at 1, got {grid:?}"
        )));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "sweep grid must be strictly increasing, got {grid:?}"
        )));
    }
    Ok(())
}

/// Evaluates the interpolation λ·w1 + (1−λ)·w2 on every grid point.
///
/// `threads` > 1 fans grid points out across scoped threads; results are
/// merged back in grid order, so the table is identical for any thread
/// count. Endpoint rows evaluate the untouched endpoint weights.
pub fn sweep(
    w1: &CheckpointMap,
    w2: &CheckpointMap,
    grid: &[f64],
    suite: &EvalSuite,
    config: &ModelConfig,
    vocab: &Vocabulary,
    threads: usize,
) -> Result<SweepTable> {
    validate_grid(grid)?;
    ensure_compatible(w1, w2)?;
    ensure_hash_matches(w1, &config_hash(config, vocab)?, "endpoint")?;
    let eval_point = |lambda: f64| -> Result<Vec<SweepRow>> {
        let point = lerp(w1, w2, lambda)?;
        let report = run_suite(&point, config, vocab, suite)?;
        Ok(report
            .rows
            .into_iter()
            .map(|r| SweepRow {
                lambda,
                task: r.task,
                metric: r.metric,
                value: r.value,
                seed: r.seed,
            })
            .collect())
    };
    let workers = threads.max(1).min(grid.len());
    let mut per_point: Vec<Option<Result<Vec<SweepRow>>>> = (0..grid.len()).map(|_| None).collect();
    if workers <= 1 {
        for (i, &lambda) in grid.iter().enumerate() {
            per_point[i] = Some(eval_point(lambda));
        }
    } else {
        let results = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for worker in 0..workers {
                let eval_point = &eval_point;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    for i in (worker..grid.len()).step_by(workers) {
                        out.push((i, eval_point(grid[i])));
                    }
                    out
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, res) in results {
            per_point[i] = Some(res);
        }
    }
    let mut rows = Vec::new();
    for slot in per_point {
        rows.extend(slot.expect("every grid point evaluated")?);
    }
    Ok(SweepTable { rows })
}
