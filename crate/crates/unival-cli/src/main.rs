//! Command line driver tying data generation, training, merging, evaluation
//! and reporting into reproducible pipelines.
//!
//! All behavior flows from one TOML run configuration plus a handful of
//! flags; flags override config and every override is logged. Each command
//! writes its artifacts into one output directory together with the fully
//! resolved config and a run-info file (command, seed, input hashes), which
//! is enough to re-run it bit-exactly. Errors print a single
//! `error[kind]: message` line and exit nonzero.

mod config;
mod plot;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use unival_core::error::{Error, Result};
use unival_core::merge::{
    fusing_pipeline, lerp_excluding, ratatouille_pipeline, sweep, train_provenance, uniform_avg,
    CheckpointMap, FinetuneSpec,
};
use unival_core::model::{config_hash, Modality, ModelConfig, UnifiedModel};
use unival_core::tasks::{build_dataset, write_shard, DataManifest, TaskKind};
use unival_core::trainer::{
    metrics_csv, run_curriculum, train_stage, TaskMixture, TrainConfig, TrainReport,
};
use unival_core::vocab::Vocabulary;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "unival", version, about = "unified multimodal seq2seq experiments")]
struct Cli {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; beats UNIVAL_OUT, which beats ./out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides merge.lambda_grid.
    #[arg(long = "lambda-grid", global = true, value_name = "A,B,..", value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Keeps only the data manifests for these task ids.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Keeps only these curriculum stage indices.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    stages: Option<Vec<usize>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Materializes every data manifest into a shard file.
    GenData,
    /// Trains from scratch (or curriculum stages) and saves a checkpoint.
    Pretrain,
    /// Continues training from the train.init checkpoint.
    Finetune,
    /// Scores the eval.checkpoint on the configured suite.
    Eval,
    /// Combines checkpoints: lerp, uniform, fusing or ratatouille.
    Merge,
    /// Evaluates the interpolation between two checkpoints on a lambda grid.
    Sweep,
    /// Trains task-subset mixtures and emits a transfer table.
    Ablate,
    /// Renders every csv in the output directory to svg.
    Report,
    /// Prints the parameter-name census and the total count.
    Describe,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Merge => "merge",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::Report => "report",
            Command::Describe => "describe",
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("error[cli]: {}", one_line(&e.to_string()));
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
        std::process::exit(1);
    }
}

fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn run(cli: Cli) -> Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("config {}: {e}", path.display()),
                ))
            })?;
            inputs.push(path.clone());
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    for line in apply_overrides(&mut cfg, &cli)? {
        println!("{line}");
    }
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("UNIVAL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    match cli.command {
        Command::Describe => describe(&cfg),
        Command::GenData => gen_data(&cfg, &out, &inputs, cli.command),
        Command::Pretrain => pretrain(&cfg, &out, inputs, cli.command),
        Command::Finetune => finetune(&cfg, &out, inputs, cli.command),
        Command::Eval => eval(&cfg, &out, inputs, cli.command),
        Command::Merge => merge(&cfg, &out, inputs, cli.command),
        Command::Sweep => run_sweep(&cfg, &out, inputs, cli.command),
        Command::Ablate => ablate(&cfg, &out, &inputs, cli.command),
        Command::Report => report(&cfg, &out, inputs, cli.command),
    }
}

/// Applies flag overrides into the config so the echoed document reflects
/// them; returns one log line per override.
fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<Vec<String>> {
    let mut log = Vec::new();
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        log.push(format!("override: train.seed = {seed} (--seed)"));
    }
    if let Some(grid) = &cli.lambda_grid {
        cfg.merge.lambda_grid = grid.clone();
        log.push(format!("override: merge.lambda_grid = {grid:?} (--lambda-grid)"));
    }
    if let Some(tasks) = &cli.tasks {
        for id in tasks {
            id.parse::<TaskKind>()?;
        }
        cfg.data.manifests.retain(|m| tasks.contains(&m.task));
        if cfg.data.manifests.is_empty() {
            return Err(Error::Config(format!(
                "--tasks {} matches no data manifest",
                tasks.join(",")
            )));
        }
        log.push(format!("override: data.manifests filtered to {} (--tasks)", tasks.join(",")));
    }
    if let Some(stages) = &cli.stages {
        let total = cfg.curriculum.stages.len();
        for &k in stages {
            if k >= total {
                return Err(Error::Config(format!(
                    "--stages index {k} out of range, config has {total} stages"
                )));
            }
        }
        let keep: Vec<_> = cfg
            .curriculum
            .stages
            .iter()
            .enumerate()
            .filter(|(k, _)| stages.contains(k))
            .map(|(_, s)| s.clone())
            .collect();
        cfg.curriculum.stages = keep;
        log.push(format!("override: curriculum.stages filtered to {stages:?} (--stages)"));
    }
    Ok(log)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(serde::Serialize)]
struct RunInfo {
    command: String,
    seed: u64,
    inputs: Vec<InputHash>,
}

#[derive(serde::Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

/// Creates the artifact directory and drops the resolved config plus the
/// run-info record (command, seed, input hashes) into it.
fn write_artifacts(out: &Path, cfg: &RunConfig, command: Command, inputs: &[PathBuf]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved-config.toml"), cfg.to_toml()?)?;
    let info = RunInfo {
        command: command.name().to_string(),
        seed: cfg.train.seed,
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: sha256_hex(p)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let text = toml::to_string_pretty(&info)
        .map_err(|e| Error::Parse(format!("run info: {e}")))?;
    fs::write(out.join("run-info.toml"), text)?;
    Ok(())
}

fn load_checkpoint(path: &str, what: &str) -> Result<CheckpointMap> {
    if path.is_empty() {
        return Err(Error::Config(format!("{what} checkpoint path is empty")));
    }
    let p = Path::new(path);
    if !p.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} checkpoint {path} not found"),
        )));
    }
    CheckpointMap::load(p)
}

fn ensure_checkpoint_matches(
    w: &CheckpointMap,
    config: &ModelConfig,
    vocab: &Vocabulary,
    what: &str,
) -> Result<()> {
    if w.header().config_hash != config_hash(config, vocab)? {
        return Err(Error::Compatibility(format!(
            "{what} checkpoint was built under a different model config or vocabulary"
        )));
    }
    Ok(())
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("UNIVAL_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("UNIVAL_THREADS must be a positive integer, got {v:?}")))?;
            if n == 0 {
                return Err(Error::Config("UNIVAL_THREADS must be positive".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn describe(cfg: &RunConfig) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let census = cfg.model.parameter_census(vocab.len());
    let widest = census.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, shape) in &census {
        let numel: usize = shape.iter().product();
        println!("{name:widest$}  {shape:?}  {numel}");
    }
    let hash = config_hash(&cfg.model, &vocab)?;
    println!("tensors: {}", census.len());
    println!("vocabulary: {} tokens", vocab.len());
    println!(
        "config hash: {}",
        hash.iter().map(|b| format!("{b:02x}")).collect::<String>()
    );
    println!("total parameters: {}", cfg.model.parameter_count(vocab.len()));
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path, inputs: &[PathBuf], command: Command) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let manifests = cfg.manifests()?;
    write_artifacts(out, cfg, command, inputs)?;
    let vocab_path = out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    println!("gen-data: wrote {}", vocab_path.display());
    for m in &manifests {
        let samples = build_dataset(m, &vocab)?;
        let path = out.join(format!("{}-{}-{}.shard", m.task.id(), m.seed_start, m.count));
        write_shard(&path, &samples)?;
        println!("gen-data: wrote {} ({} samples)", path.display(), samples.len());
    }
    Ok(())
}

/// Loads the optional warm-start checkpoint named by train.init.
fn warm_start(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    inputs: &mut Vec<PathBuf>,
) -> Result<Option<CheckpointMap>> {
    if cfg.train.init.is_empty() {
        return Ok(None);
    }
    let w = load_checkpoint(&cfg.train.init, "init")?;
    ensure_checkpoint_matches(&w, &cfg.model, vocab, "init")?;
    inputs.push(PathBuf::from(&cfg.train.init));
    Ok(Some(w))
}

fn report_loss(report: &TrainReport) -> String {
    match report.final_loss {
        Some(l) => format!("final loss {l:.4}"),
        None => "no steps taken".to_string(),
    }
}

/// One non-curriculum training run: fresh or warm-started, then saved with
/// full provenance and a metrics csv.
fn train_single(
    cfg: &RunConfig,
    out: &Path,
    init: Option<&CheckpointMap>,
    command: Command,
) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let mixture = cfg.mixture()?;
    let tconf = cfg.train_config();
    let mut model = match init {
        Some(w) => UnifiedModel {
            config: cfg.model.clone(),
            store: w.to_store(),
        },
        None => UnifiedModel::<f32>::init(cfg.model.clone(), vocab.len(), tconf.seed)?,
    };
    let report = train_stage(&mut model, &mixture, &tconf, &vocab)?;
    let mut provenance = vec![train_provenance(&mixture, &tconf)];
    if let Some(w) = init {
        provenance.extend(w.header().provenance.iter().map(|l| format!("| {l}")));
    }
    let ckpt = CheckpointMap::from_store(&cfg.model, &vocab, tconf.seed, provenance, &model.store)?;
    let path = out.join("model.uvck");
    ckpt.save(&path)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&report.rows))?;
    println!(
        "{}: saved {} after {} steps, {}",
        command.name(),
        path.display(),
        tconf.steps,
        report_loss(&report)
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path, mut inputs: Vec<PathBuf>, command: Command) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    if cfg.curriculum.stages.is_empty() {
        let init = warm_start(cfg, &vocab, &mut inputs)?;
        write_artifacts(out, cfg, command, &inputs)?;
        return train_single(cfg, out, init.as_ref(), command);
    }
    write_artifacts(out, cfg, command, &inputs)?;
    let plan = cfg.curriculum_plan()?;
    let tconf = cfg.train_config();
    let outcome = run_curriculum(&cfg.model, &plan, &tconf, &vocab)?;
    let mut provenance: Vec<String> = Vec::new();
    let mut last: Option<CheckpointMap> = None;
    for (k, stage) in plan.stages.iter().enumerate() {
        let stage_conf = TrainConfig {
            steps: stage.steps,
            seed: tconf.seed + k as u64,
            ..tconf.clone()
        };
        provenance = std::iter::once(train_provenance(&stage.mixture, &stage_conf))
            .chain(provenance.iter().map(|l| format!("| {l}")))
            .collect();
        let ckpt = CheckpointMap::from_store(
            &outcome.stage_configs[k],
            &vocab,
            stage_conf.seed,
            provenance.clone(),
            &outcome.stage_stores[k],
        )?;
        let path = out.join(format!("stage{k}.uvck"));
        ckpt.save(&path)?;
        fs::write(
            out.join(format!("metrics-stage{k}.csv")),
            metrics_csv(&outcome.reports[k].rows),
        )?;
        println!(
            "pretrain: stage {k} saved {} after {} steps, {}",
            path.display(),
            stage.steps,
            report_loss(&outcome.reports[k])
        );
        last = Some(ckpt);
    }
    let ckpt = last.expect("plans have at least one stage");
    let path = out.join("model.uvck");
    ckpt.save(&path)?;
    println!("pretrain: saved {}", path.display());
    Ok(())
}

fn finetune(cfg: &RunConfig, out: &Path, mut inputs: Vec<PathBuf>, command: Command) -> Result<()> {
    if cfg.train.init.is_empty() {
        return Err(Error::Config(
            "finetune requires train.init to name the starting checkpoint".into(),
        ));
    }
    let vocab = cfg.vocabulary()?;
    let init = warm_start(cfg, &vocab, &mut inputs)?;
    write_artifacts(out, cfg, command, &inputs)?;
    train_single(cfg, out, init.as_ref(), command)
}

fn eval(cfg: &RunConfig, out: &Path, mut inputs: Vec<PathBuf>, command: Command) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let suite = cfg.eval_suite()?;
    let w = load_checkpoint(&cfg.eval.checkpoint, "eval")?;
    ensure_checkpoint_matches(&w, &cfg.model, &vocab, "eval")?;
    inputs.push(PathBuf::from(&cfg.eval.checkpoint));
    if !cfg.data.manifests.is_empty() {
        suite.check_disjoint(&cfg.manifests()?)?;
    }
    write_artifacts(out, cfg, command, &inputs)?;
    let report = unival_core::eval::run_suite(&w, &cfg.model, &vocab, &suite)?;
    let path = out.join("eval.csv");
    fs::write(&path, report.to_csv())?;
    for r in &report.rows {
        let tag = if r.zero_shot { " (zero-shot)" } else { "" };
        println!("eval: {} {} = {} over {} samples{tag}", r.task.id(), r.metric.name(), r.value, r.n);
    }
    println!("eval: wrote {}", path.display());
    Ok(())
}

/// Builds the finetune spec for the given task ids from the data manifests.
fn spec_for_tasks(cfg: &RunConfig, ids: &[String]) -> Result<FinetuneSpec> {
    let manifests = cfg.manifests()?;
    let mut picked: Vec<DataManifest> = Vec::new();
    for id in ids {
        let task: TaskKind = id.parse()?;
        let before = picked.len();
        picked.extend(manifests.iter().filter(|m| m.task == task).cloned());
        if picked.len() == before {
            return Err(Error::Config(format!(
                "no data manifest provides task {id}"
            )));
        }
    }
    Ok(FinetuneSpec {
        mixture: TaskMixture {
            manifests: picked,
            mode: cfg.train.mode,
        },
        train: cfg.train_config(),
    })
}

fn merge(cfg: &RunConfig, out: &Path, mut inputs: Vec<PathBuf>, command: Command) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let loaded: Vec<CheckpointMap> = cfg
        .merge
        .inputs
        .iter()
        .map(|p| load_checkpoint(p, "merge input"))
        .collect::<Result<_>>()?;
    inputs.extend(cfg.merge.inputs.iter().map(PathBuf::from));
    write_artifacts(out, cfg, command, &inputs)?;
    let merged = match cfg.merge.op.as_str() {
        "lerp" => {
            if loaded.len() != 2 {
                return Err(Error::Config(format!(
                    "lerp needs exactly 2 merge inputs, got {}",
                    loaded.len()
                )));
            }
            lerp_excluding(&loaded[0], &loaded[1], cfg.merge.lambda, &cfg.merge.exclude)?
        }
        "uniform" => uniform_avg(&loaded)?,
        "fusing" => {
            if cfg.merge.target_tasks.is_empty() {
                return Err(Error::Config("fusing needs merge.target_tasks".into()));
            }
            let targets: Vec<FinetuneSpec> = cfg
                .merge
                .target_tasks
                .iter()
                .map(|id| spec_for_tasks(cfg, std::slice::from_ref(id)))
                .collect::<Result<_>>()?;
            fusing_pipeline(&loaded, &targets, &cfg.model, &vocab)?
        }
        "ratatouille" => {
            if loaded.len() != 1 {
                return Err(Error::Config(format!(
                    "ratatouille needs exactly 1 merge input (the pretrain checkpoint), got {}",
                    loaded.len()
                )));
            }
            if cfg.merge.target_tasks.is_empty() {
                return Err(Error::Config("ratatouille needs merge.target_tasks".into()));
            }
            let aux: Vec<FinetuneSpec> = cfg
                .merge
                .aux_tasks
                .iter()
                .map(|id| spec_for_tasks(cfg, std::slice::from_ref(id)))
                .collect::<Result<_>>()?;
            let target = spec_for_tasks(cfg, &cfg.merge.target_tasks)?;
            ratatouille_pipeline(
                &loaded[0],
                &aux,
                &target,
                cfg.merge.include_direct,
                &cfg.model,
                &vocab,
            )?
        }
        op => {
            return Err(Error::Config(format!(
                "unknown merge op {op:?}: expected lerp, uniform, fusing or ratatouille"
            )))
        }
    };
    let path = out.join("merged.uvck");
    merged.save(&path)?;
    println!("merge: {}", merged.header().provenance[0]);
    println!("merge: saved {}", path.display());
    Ok(())
}

fn run_sweep(cfg: &RunConfig, out: &Path, mut inputs: Vec<PathBuf>, command: Command) -> Result<()> {
    if cfg.merge.inputs.len() != 2 {
        return Err(Error::Config(format!(
            "sweep needs exactly 2 merge inputs, got {}",
            cfg.merge.inputs.len()
        )));
    }
    let vocab = cfg.vocabulary()?;
    let suite = cfg.eval_suite()?;
    let w1 = load_checkpoint(&cfg.merge.inputs[0], "sweep input")?;
    let w2 = load_checkpoint(&cfg.merge.inputs[1], "sweep input")?;
    inputs.extend(cfg.merge.inputs.iter().map(PathBuf::from));
    if !cfg.data.manifests.is_empty() {
        suite.check_disjoint(&cfg.manifests()?)?;
    }
    write_artifacts(out, cfg, command, &inputs)?;
    let threads = threads_from_env()?;
    let table = sweep(&w1, &w2, &cfg.merge.lambda_grid, &suite, &cfg.model, &vocab, threads)?;
    let path = out.join("sweep.csv");
    fs::write(&path, table.to_csv())?;
    println!(
        "sweep: {} rows over {} lambdas ({} threads), wrote {}",
        table.rows.len(),
        cfg.merge.lambda_grid.len(),
        threads,
        path.display()
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, inputs: &[PathBuf], command: Command) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let manifests = cfg.manifests()?;
    let suite = cfg.eval_suite()?;
    suite.check_disjoint(&manifests)?;
    write_artifacts(out, cfg, command, inputs)?;

    let mut row_tasks: Vec<TaskKind> = Vec::new();
    for m in &manifests {
        if !row_tasks.contains(&m.task) {
            row_tasks.push(m.task);
        }
    }
    let mut rows: Vec<Vec<TaskKind>> = row_tasks.iter().map(|&t| vec![t]).collect();
    if row_tasks.len() > 1 {
        rows.push(row_tasks.clone());
    }

    let mut needed: BTreeSet<Modality> = [Modality::Text].into();
    for t in &suite.tasks {
        needed.extend(t.manifest.task.payload_modality());
    }

    let tconf = cfg.train_config();
    let mut table = String::new();
    let mut wrote_header = false;
    for row in &rows {
        let label = row.iter().map(|t| t.id()).collect::<Vec<_>>().join("+");
        let mixture = TaskMixture {
            manifests: manifests.iter().filter(|m| row.contains(&m.task)).cloned().collect(),
            mode: cfg.train.mode,
        };
        let mut model_cfg = cfg.model.clone();
        model_cfg.modalities = needed.clone();
        for t in row {
            model_cfg.modalities.extend(t.payload_modality());
        }
        let mut model = UnifiedModel::<f32>::init(model_cfg.clone(), vocab.len(), tconf.seed)?;
        let report = train_stage(&mut model, &mixture, &tconf, &vocab)?;
        let ckpt = CheckpointMap::from_store(
            &model_cfg,
            &vocab,
            tconf.seed,
            vec![train_provenance(&mixture, &tconf)],
            &model.store,
        )?;
        let scored = unival_core::eval::run_suite(&ckpt, &model_cfg, &vocab, &suite)?;
        if !wrote_header {
            let cols: Vec<String> = scored
                .rows
                .iter()
                .map(|r| format!("{}:{}", r.task.id(), r.metric.name()))
                .collect();
            table.push_str(&format!("mixture,{}\n", cols.join(",")));
            wrote_header = true;
        }
        let cells: Vec<String> = scored.rows.iter().map(|r| r.value.to_string()).collect();
        table.push_str(&format!("{label},{}\n", cells.join(",")));
        println!(
            "ablate: {label} after {} steps, {} -> {}",
            tconf.steps,
            report_loss(&report),
            cells.join(" ")
        );
    }
    let path = out.join("ablate.csv");
    fs::write(&path, table)?;
    println!("ablate: wrote {}", path.display());
    Ok(())
}

fn report(cfg: &RunConfig, out: &Path, mut inputs: Vec<PathBuf>, command: Command) -> Result<()> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("report directory {}: {e}", out.display()),
            ))
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "csv"))
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no csv files to report in {}", out.display()),
        )));
    }
    inputs.extend(csvs.iter().cloned());
    write_artifacts(out, cfg, command, &inputs)?;
    let mut written = 0;
    for path in &csvs {
        let text = fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        match harvest(&text) {
            Some((x_label, y_label, series)) => {
                let svg = plot::line_plot(stem, &x_label, &y_label, &series);
                let target = path.with_extension("svg");
                fs::write(&target, svg)?;
                println!("report: wrote {}", target.display());
                written += 1;
            }
            None => println!("report: skipped {} (nothing to plot)", path.display()),
        }
    }
    println!("report: rendered {written} of {} csv files", csvs.len());
    Ok(())
}

/// Turns a csv into plot series, recognizing the drivers' own layouts and
/// falling back to plotting every numeric column over the row index.
fn harvest(text: &str) -> Option<(String, String, Vec<plot::Series>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|r| r.len() == header.len())
        .collect();
    if rows.is_empty() {
        return None;
    }
    let grouped = |key: fn(&[&str]) -> String, x: usize, y: usize| -> Vec<plot::Series> {
        let mut series: Vec<plot::Series> = Vec::new();
        for r in &rows {
            let (Ok(xv), Ok(yv)) = (r[x].parse::<f64>(), r[y].parse::<f64>()) else {
                continue;
            };
            let label = key(r);
            match series.iter_mut().find(|s| s.label == label) {
                Some(s) => s.points.push((xv, yv)),
                None => series.push(plot::Series {
                    label,
                    points: vec![(xv, yv)],
                }),
            }
        }
        series
    };
    match header.as_slice() {
        ["lambda", "task", "metric", "value", "seed"] => Some((
            "lambda".into(),
            "value".into(),
            grouped(|r| format!("{}:{}", r[1], r[2]), 0, 3),
        )),
        ["step", "task", "loss", "lr", "tokens_seen"] => {
            Some(("step".into(), "loss".into(), grouped(|r| r[1].to_string(), 0, 2)))
        }
        ["run_id", "task", "metric", "value", "n", "seed"] => {
            let mut series: Vec<plot::Series> = Vec::new();
            for (i, r) in rows.iter().enumerate() {
                let Ok(v) = r[3].parse::<f64>() else { continue };
                let label = r[2].to_string();
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.points.push((i as f64, v)),
                    None => series.push(plot::Series {
                        label,
                        points: vec![(i as f64, v)],
                    }),
                }
            }
            Some(("row".into(), "value".into(), series))
        }
        _ => {
            let numeric: Vec<usize> = (0..header.len())
                .filter(|&j| rows.iter().all(|r| r[j].parse::<f64>().is_ok()))
                .collect();
            if numeric.is_empty() {
                return None;
            }
            let series = numeric
                .iter()
                .map(|&j| plot::Series {
                    label: header[j].to_string(),
                    points: rows
                        .iter()
                        .enumerate()
                        .map(|(i, r)| (i as f64, r[j].parse::<f64>().expect("checked numeric")))
                        .collect(),
                })
                .collect();
            Some(("row".into(), "value".into(), series))
        }
    }
}
