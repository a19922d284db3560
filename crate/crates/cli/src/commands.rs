use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use match_core::datamodel::{load_dataset, make_splits, write_dataset, Dataset};
use match_core::evaluation::{
    build_report, dataset_baselines, split_scores, CorrelationReport, EvalError, ScoreTable, BASELINES,
};
use match_core::synthetic::{generate, SyntheticConfig};
use match_core::training::{history_jsonl, Checkpoint, ExperimentResult, MatchModel, Trainer};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::convert::{self, SourceFormat};

/// Exit status 2 for usage or configuration problems, 1 for everything else.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait UsageExt<T> {
    fn usage(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn refuse_overwrite(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// Clears the named artifacts inside `dir`, refusing without `force`.
fn prepare_output_dir(dir: &Path, force: bool, artifacts: &[&str]) -> Outcome {
    let present: Vec<PathBuf> = artifacts.iter().map(|a| dir.join(a)).filter(|p| p.exists()).collect();
    if !present.is_empty() {
        if !force {
            return Err(usage(format!(
                "{} already holds run outputs; pass --force to overwrite",
                dir.display()
            )));
        }
        for p in present {
            if p.is_dir() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            }
            .with_context(|| format!("removing {}", p.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

const REPORT_ARTIFACTS: [&str; 3] = ["report.json", "report.csv", "report.txt"];
const TRAIN_ARTIFACTS: [&str; 8] = [
    "config.toml",
    "report.json",
    "report.csv",
    "report.txt",
    "splits",
    "checkpoints",
    "history",
    "scores",
];

fn write_report(dir: &Path, report: &CorrelationReport) -> Outcome {
    let text = report.to_text();
    write_file(&dir.join("report.json"), report.to_json())?;
    write_file(&dir.join("report.csv"), report.to_csv())?;
    write_file(&dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn convert(format: SourceFormat, input: &Path, output: &Path, force: bool) -> Outcome {
    require_file(input, "input")?;
    refuse_overwrite(output, force)?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let dataset = convert::convert(format, &text)?;
    write_dataset(&dataset, output)?;
    log::info!("wrote {} pairs to {}", dataset.len(), output.display());
    Ok(())
}

pub fn synth(output: &Path, pairs: usize, seed: u64, binary: bool, force: bool) -> Outcome {
    refuse_overwrite(output, force)?;
    let base = if binary {
        SyntheticConfig::binary()
    } else {
        SyntheticConfig::default()
    };
    let dataset = generate(&SyntheticConfig { pairs, ..base }, seed).usage()?;
    write_dataset(&dataset, output)?;
    log::info!("wrote {} synthetic pairs to {}", dataset.len(), output.display());
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRecord {
    id: String,
    score: Option<f64>,
    error: Option<String>,
}

/// Reads `{id, score}` lines in file order.
fn read_scores(path: &Path) -> Outcome<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ScoreRecord = serde_json::from_str(line)
            .with_context(|| format!("{} line {}: expected {{id, score}}", path.display(), i + 1))?;
        match (rec.score, rec.error) {
            (Some(s), _) if s.is_finite() => out.push((rec.id, s)),
            (_, Some(e)) => return Err(anyhow!("{}: record {} has no score: {e}", path.display(), rec.id).into()),
            _ => return Err(anyhow!("{}: record {} has no finite score", path.display(), rec.id).into()),
        }
    }
    Ok(out)
}

fn read_table(name: &str, path: &Path) -> Outcome<(String, ScoreTable)> {
    let table: ScoreTable = read_scores(path)?.into_iter().collect();
    Ok((name.to_string(), table))
}

/// Correlation report for `results`, with lexical baselines when every test
/// pair has a reference, then any external tables.
fn report_for(
    dataset: &Dataset,
    results: &[ExperimentResult],
    metric_name: &str,
    lexical: bool,
    external: Vec<(String, ScoreTable)>,
) -> Outcome<CorrelationReport> {
    let mut extra: Vec<(String, ScoreTable)> = Vec::new();
    if lexical {
        let uncovered = results
            .iter()
            .flat_map(|r| &r.test_ids)
            .filter(|id| dataset.get(id).is_some_and(|p| p.reference.is_none()))
            .count();
        if uncovered > 0 {
            log::warn!("{uncovered} test pair(s) lack a reference; lexical baselines left out");
        } else {
            let mut tables = dataset_baselines(dataset)?;
            for name in BASELINES {
                extra.push((name.to_string(), tables.remove(name).unwrap_or_default()));
            }
        }
    }
    extra.extend(external);
    let splits = split_scores(results, metric_name, &extra)?;
    Ok(build_report(&splits)?)
}

pub struct TrainRequest {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub experiments: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub force: bool,
}

fn timestamped_dir() -> PathBuf {
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    let base = Path::new("runs");
    let mut dir = base.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{n}"));
        n += 1;
    }
    dir
}

pub fn train(req: TrainRequest) -> Outcome {
    if let Some(path) = &req.config {
        require_file(path, "config")?;
    }
    let mut cfg = RunConfig::load(req.config.as_deref(), &req.sets).usage()?;
    if let Some(d) = req.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(o) = req.output {
        cfg.output_dir = Some(o);
    }
    if let Some(n) = req.experiments {
        cfg.experiments = n;
    }
    if let Some(s) = req.seed {
        cfg.training.seed = s;
    }
    if let Some(j) = req.jobs {
        cfg.jobs = j;
    }
    cfg.validate().usage()?;
    let dataset_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| usage("no dataset given; pass --dataset or set `dataset` in the config"))?;
    require_file(&dataset_path, "dataset")?;
    for ext in &cfg.report.external {
        require_file(&ext.path, "external scores")?;
    }
    let out = cfg.output_dir.clone().unwrap_or_else(timestamped_dir);
    cfg.output_dir = Some(out.clone());
    prepare_output_dir(&out, req.force, &TRAIN_ARTIFACTS)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;

    let dataset = load_dataset(&dataset_path, None)?;
    let external = cfg
        .report
        .external
        .iter()
        .map(|e| read_table(&e.name, &e.path))
        .collect::<Outcome<Vec<_>>>()?;
    let trainer = Trainer::new(&dataset, cfg.training.clone())?;
    log::info!(
        "training {} on {} pairs, {} experiment(s), output {}",
        cfg.training.variant_name(),
        dataset.len(),
        cfg.experiments,
        out.display()
    );
    let experiments = trainer.run_protocol(cfg.experiments, cfg.jobs)?;
    let plans = make_splits(&dataset, cfg.training.seed, cfg.training.ratios, cfg.experiments)?;

    let mut results = Vec::with_capacity(experiments.len());
    for (ex, plan) in experiments.into_iter().zip(&plans) {
        let i = ex.result.split_index;
        write_file(&out.join(format!("splits/split-{i}.json")), plan.to_json())?;
        fs::create_dir_all(out.join("checkpoints")).context("creating checkpoints directory")?;
        ex.checkpoint.save(&out.join(format!("checkpoints/split-{i}.ckpt")))?;
        write_file(
            &out.join(format!("history/split-{i}.jsonl")),
            history_jsonl(&ex.result.history),
        )?;
        let mut scores = String::new();
        for ((id, s), y) in ex.result.test_ids.iter().zip(&ex.result.scores).zip(&ex.result.labels) {
            scores.push_str(&json!({"id": id, "score": s, "label": y}).to_string());
            scores.push('\n');
        }
        write_file(&out.join(format!("scores/split-{i}.jsonl")), scores)?;
        log::info!(
            "split {i}: {} epoch(s), best epoch {}, best validation loss {:.6}",
            ex.checkpoint.meta.epochs_run,
            ex.checkpoint.meta.best_epoch,
            ex.checkpoint.meta.best_validation_loss
        );
        results.push(ex.result);
    }
    let metric = cfg
        .report
        .metric_name
        .clone()
        .unwrap_or_else(|| cfg.training.variant_name());
    let report = report_for(&dataset, &results, &metric, cfg.report.baselines, external)?;
    write_report(&out, &report)
}

#[derive(Deserialize)]
struct ScoreInput {
    id: Option<Value>,
    task: String,
    code: String,
}

fn score_line(model: &MatchModel, line_no: usize, line: &str) -> (Value, bool) {
    let parsed: Result<ScoreInput, _> = serde_json::from_str(line);
    let fallback_id = Value::String(line_no.to_string());
    match parsed {
        Err(e) => (
            json!({"id": fallback_id, "error": format!("malformed record: {e}")}),
            false,
        ),
        Ok(rec) => {
            let id = rec.id.unwrap_or(fallback_id);
            match model.score(&rec.task, &rec.code) {
                Ok(s) => (json!({"id": id, "score": s.value()}), true),
                Err(e) => (json!({"id": id, "error": e.to_string()}), false),
            }
        }
    }
}

const SCORE_CHUNK: usize = 256;

pub fn score(checkpoint: &Path, input: Option<&Path>, output: Option<&Path>, jobs: usize) -> Outcome {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    require_file(checkpoint, "checkpoint")?;
    if let Some(p) = input {
        require_file(p, "input")?;
    }
    let model = Checkpoint::load(checkpoint)?.model;
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(BufReader::new(
            fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(BufReader::new(io::stdin())),
    };
    let mut writer: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let (mut ok, mut failed) = (0usize, 0usize);
    let mut lines = reader.lines().enumerate();
    loop {
        let mut chunk = Vec::with_capacity(SCORE_CHUNK);
        for (i, line) in lines.by_ref() {
            let line = line.context("reading input")?;
            if !line.trim().is_empty() {
                chunk.push((i + 1, line));
                if chunk.len() == SCORE_CHUNK {
                    break;
                }
            }
        }
        if chunk.is_empty() {
            break;
        }
        let scored: Vec<(Value, bool)> =
            pool.install(|| chunk.par_iter().map(|(n, l)| score_line(&model, *n, l)).collect());
        for (record, good) in scored {
            writeln!(writer, "{record}")?;
            if good {
                ok += 1;
            } else {
                failed += 1;
            }
        }
    }
    writer.flush()?;
    if ok + failed == 0 {
        log::warn!("input holds no records");
    }
    log::info!("scored {ok} record(s), {failed} failed");
    if failed > 0 {
        return Err(anyhow!("{failed} of {} record(s) could not be scored", ok + failed).into());
    }
    Ok(())
}

pub struct EvaluateRequest {
    pub dataset: PathBuf,
    pub scores: Vec<PathBuf>,
    pub output: PathBuf,
    pub metric_name: String,
    pub baselines: Vec<String>,
    pub lexical: bool,
    pub force: bool,
}

pub fn evaluate(req: EvaluateRequest) -> Outcome {
    require_file(&req.dataset, "dataset")?;
    for p in &req.scores {
        require_file(p, "scores")?;
    }
    let mut named = Vec::new();
    for b in &req.baselines {
        let (name, path) = b
            .split_once('=')
            .ok_or_else(|| usage(format!("--baseline expects NAME=PATH, got {b:?}")))?;
        let path = PathBuf::from(path);
        require_file(&path, "baseline")?;
        named.push((name.to_string(), path));
    }
    prepare_output_dir(&req.output, req.force, &REPORT_ARTIFACTS)?;

    let dataset = load_dataset(&req.dataset, None)?;
    let mut results = Vec::with_capacity(req.scores.len());
    for (i, path) in req.scores.iter().enumerate() {
        let rows = read_scores(path)?;
        let extra: Vec<String> = rows
            .iter()
            .filter(|(id, _)| dataset.get(id).is_none())
            .map(|(id, _)| id.clone())
            .collect();
        if !extra.is_empty() {
            return Err(EvalError::IdMismatch { missing: vec![], extra }.into());
        }
        let (test_ids, scores): (Vec<String>, Vec<f64>) = rows.into_iter().unzip();
        let labels = test_ids
            .iter()
            .map(|id| dataset.get(id).expect("checked").label.value())
            .collect();
        results.push(ExperimentResult {
            split_index: i,
            split_seed: 0,
            variant_name: req.metric_name.clone(),
            test_ids,
            scores,
            labels,
            history: Vec::new(),
            best_epoch: 0,
            gradient_ids: Default::default(),
        });
    }
    let external = named
        .iter()
        .map(|(n, p)| read_table(n, p))
        .collect::<Outcome<Vec<_>>>()?;
    let report = report_for(&dataset, &results, &req.metric_name, req.lexical, external)?;
    write_report(&req.output, &report)
}

pub fn compare(reports: &[PathBuf], output: Option<&Path>) -> Outcome {
    for p in reports {
        require_file(p, "report")?;
    }
    let mut merged: Option<CorrelationReport> = None;
    let mut seen = BTreeMap::new();
    for path in reports {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: CorrelationReport =
            serde_json::from_str(&text).with_context(|| format!("{} is not a report", path.display()))?;
        let base = merged.get_or_insert_with(|| CorrelationReport {
            metrics: Vec::new(),
            ..report.clone()
        });
        if report.experiments != base.experiments {
            log::warn!(
                "{} covers {} experiment(s), the first report {}",
                path.display(),
                report.experiments,
                base.experiments
            );
        }
        for row in report.metrics {
            if let Some(first) = seen.get(&row.metric) {
                log::warn!("metric {} already taken from {}; skipping", row.metric, first);
                continue;
            }
            seen.insert(row.metric.clone(), path.display().to_string());
            base.metrics.push(row);
        }
    }
    let merged = merged.expect("at least one report");
    print!("{}", merged.to_text());
    if let Some(out) = output {
        write_file(out, merged.to_json())?;
    }
    Ok(())
}
