use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{config_hash, evaluate_stage, load_checkpoint, restore_checkpoint, save_checkpoint, train_task, Checkpoint};
use crate::backbone::MultimodalSample;
use crate::benchmarks::{self, load_stage, validate_task_ids, write_if_changed, BenchmarkContext, BenchmarkSpec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{AccuracyMatrix, MetricsReport, Prediction};
use crate::methods::MethodContext;
use crate::registry::FrozenRegistry;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Train,
    Infer,
}

/// Everything a run needs besides the task ids.
pub struct RunContext<'r, T: Scalar> {
    pub registry: &'r FrozenRegistry<T>,
    pub config: &'r RunConfig,
    pub provenance: &'r BTreeMap<String, String>,
    pub config_dir: &'r Path,
    pub benchmark: &'r str,
    pub method: &'r str,
}

/// Progress of one `(benchmark, method)` run directory.
#[derive(Clone, Debug)]
pub struct RunState {
    pub run_dir: PathBuf,
    pub benchmark: String,
    pub method: String,
    pub completed: Vec<usize>,
    pub checkpoints: BTreeMap<usize, PathBuf>,
    pub matrix: AccuracyMatrix,
}

impl RunState {
    pub fn new(out_dir: &Path, benchmark: &str, method: &str, num_tasks: usize) -> Self {
        Self {
            run_dir: out_dir.join(benchmark).join(method),
            benchmark: benchmark.to_owned(),
            method: method.to_owned(),
            completed: Vec::new(),
            checkpoints: BTreeMap::new(),
            matrix: AccuracyMatrix::new(num_tasks),
        }
    }

    pub fn task_dir(&self, stage: usize) -> PathBuf {
        self.run_dir.join(format!("task_{stage}"))
    }

    pub fn checkpoint_path(&self, stage: usize) -> PathBuf {
        self.task_dir(stage).join("checkpoint.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("metrics.json")
    }

    fn write_stage(&self, stage: usize, row: &[f64], predictions: &[Vec<Prediction>]) -> Result<()> {
        let dir = self.task_dir(stage);
        for (t, preds) in predictions.iter().enumerate() {
            let mut text = String::new();
            for p in preds {
                text.push_str(&serde_json::to_string(p)?);
                text.push('\n');
            }
            write_if_changed(&dir.join(format!("predictions_task_{t}.jsonl")), text.as_bytes())?;
        }
        let doc = serde_json::json!({ "stage": stage, "row": row });
        write_if_changed(&dir.join("row.json"), serde_json::to_string_pretty(&doc)?.as_bytes())
    }

    fn read_row(&self, stage: usize) -> Option<Vec<f64>> {
        let text = std::fs::read_to_string(self.task_dir(stage).join("row.json")).ok()?;
        let doc: serde_json::Value = serde_json::from_str(&text).ok()?;
        serde_json::from_value(doc.get("row")?.clone()).ok()
    }
}

pub struct RunOutcome {
    pub state: RunState,
    pub report: MetricsReport,
}

#[derive(Serialize)]
struct ResolvedManifest<'a> {
    benchmark: &'a str,
    method: &'a str,
    mode: RunMode,
    task_ids: &'a [usize],
    config_hash: &'a str,
    config: &'a RunConfig,
    provenance: &'a BTreeMap<String, String>,
}

/// Training samples of tasks `0..=upto`, keyed by id, for replay restoration.
fn train_index(spec: &BenchmarkSpec, upto: usize) -> Result<HashMap<String, MultimodalSample>> {
    let mut index = HashMap::new();
    for m in &spec.tasks[..=upto.min(spec.num_tasks() - 1)] {
        for s in benchmarks::load_samples(m, &m.train_path, false)? {
            index.insert(s.sample_id.clone(), s);
        }
    }
    Ok(index)
}

/// Trains and evaluates (or only evaluates) the requested stages and writes
/// the metrics report.
pub fn execute<T: Scalar>(ctx: &RunContext<'_, T>, mode: RunMode, task_ids: &[usize]) -> Result<RunOutcome> {
    let cfg = ctx.config;
    if task_ids.is_empty() {
        return Err(Error::BadTaskIds("no task ids given".into()));
    }
    let benchmark = ctx.benchmark.to_lowercase();
    let method_name = ctx.method.to_lowercase();
    let method_factory = ctx.registry.method(&method_name)?;
    let benchmark_factory = ctx.registry.benchmark(&benchmark)?;
    let backbone_factory = ctx.registry.backbone(&cfg.backbone_name)?;
    cfg.train.validate()?;

    let mut backbone = backbone_factory(&cfg.backbone)?;
    let spec = benchmark_factory(&BenchmarkContext {
        name: benchmark.clone(),
        config_dir: ctx.config_dir.to_path_buf(),
        data_root: cfg.paths.data_root.clone(),
        settings: cfg.benchmark.clone(),
        plugin_dir: None,
    })?;
    validate_task_ids(task_ids, spec.num_tasks())?;
    let mut method = method_factory(&MethodContext {
        name: &method_name,
        backbone: &backbone,
        config: &cfg.method,
        num_tasks: spec.num_tasks(),
        seed: cfg.seed,
    })?;

    let mut state = RunState::new(&cfg.paths.out_dir, &benchmark, &method_name, spec.num_tasks());
    let hash = config_hash(cfg)?;
    let manifest = ResolvedManifest {
        benchmark: &benchmark,
        method: &method_name,
        mode,
        task_ids,
        config_hash: &hash,
        config: cfg,
        provenance: ctx.provenance,
    };
    write_if_changed(&state.run_dir.join("resolved_config.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    match mode {
        RunMode::Train => {
            if !method.supports_training() {
                return Err(Error::MethodRefusesTraining(method_name));
            }
            let first = task_ids[0];
            if first > 0 {
                let prev = state.checkpoint_path(first - 1);
                if prev.is_file() {
                    let ckpt = load_checkpoint(&prev, first - 1, backbone.config())?;
                    let index = train_index(&spec, first - 1)?;
                    restore_checkpoint(&ckpt, method.as_mut(), &mut backbone, &|id| index.get(id).cloned())?;
                    for l in 0..first {
                        if let Some(row) = state.read_row(l) {
                            state.matrix.set_row(l, row)?;
                        }
                    }
                } else {
                    log::warn!("no checkpoint for stage {}; starting stage {first} from the initial state", first - 1);
                }
            }
            for &id in task_ids {
                let stage = load_stage(&spec, id, cfg.seed, cfg.train.batch_size)?;
                log::info!("training {method_name} on task {id} ({})", stage.manifest.task_name);
                let log = train_task(method.as_mut(), &mut backbone, &stage, spec.num_tasks(), &cfg.train, cfg.seed)?;
                let mut text = String::new();
                for record in &log {
                    text.push_str(&serde_json::to_string(record)?);
                    text.push('\n');
                }
                write_if_changed(&state.task_dir(id).join("train_log.jsonl"), text.as_bytes())?;
                let ckpt = Checkpoint::capture(id, method.as_ref(), &backbone, cfg.seed, hash.clone())?;
                let path = state.checkpoint_path(id);
                save_checkpoint(&path, &ckpt)?;
                if let Some(buffer) = method.replay_buffer() {
                    benchmarks::write_replay_sidecar(buffer, &state.task_dir(id).join("replay_sidecar.json"))?;
                }
                let (row, predictions) = evaluate_stage(method.as_ref(), &backbone, &spec, id, &cfg.eval)?;
                log::info!("stage {id} row: {row:?}");
                state.write_stage(id, &row, &predictions)?;
                state.matrix.set_row(id, row)?;
                state.completed.push(id);
                state.checkpoints.insert(id, path);
            }
        }
        RunMode::Infer => {
            for &id in task_ids {
                if method.supports_training() {
                    let path = state.checkpoint_path(id);
                    let ckpt = load_checkpoint(&path, id, backbone.config())?;
                    let index = train_index(&spec, id)?;
                    restore_checkpoint(&ckpt, method.as_mut(), &mut backbone, &|sid| index.get(sid).cloned())?;
                    state.checkpoints.insert(id, path);
                }
                let (row, predictions) = evaluate_stage(method.as_ref(), &backbone, &spec, id, &cfg.eval)?;
                state.write_stage(id, &row, &predictions)?;
                state.matrix.set_row(id, row)?;
                state.completed.push(id);
            }
        }
    }

    let k = task_ids.iter().max().map_or(0, |m| m + 1);
    let mut matrix = AccuracyMatrix::new(k);
    for l in 0..k {
        if let Some(row) = state.matrix.row(l) {
            matrix.set_row(l, row.to_vec())?;
        }
    }
    let names = spec.tasks[..k].iter().map(|t| t.task_name.clone()).collect();
    let report = MetricsReport::from_matrix(&benchmark, &method_name, cfg.seed, names, &matrix);
    write_if_changed(&state.metrics_path(), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(RunOutcome { state, report })
}
