//! Ordered task streams: manifests, sample ingestion and the synthetic generator.

mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::MultimodalSample;
use crate::error::{Error, Result};
use crate::methods::{ReplayBuffer, ReplaySidecar};

pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Benchmarks described by a manifest of user-supplied data files.
pub const MANIFEST_BENCHMARKS: [&str; 3] = ["coin", "trigap", "ucit"];
/// Benchmarks generated on the fly.
pub const SYNTHETIC_BENCHMARKS: [&str; 2] = ["synthetic", "synthetic6"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalType {
    Vqa,
    Exact,
    Caption,
}

fn default_template() -> String {
    "{instruction}".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub task_name: String,
    pub order_index: usize,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub eval_type: EvalType,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_test: Option<usize>,
}

impl TaskManifest {
    pub fn render(&self, instruction: &str) -> String {
        self.prompt_template.replace("{instruction}", instruction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub tasks: Vec<TaskManifest>,
}

impl BenchmarkSpec {
    /// Sorts tasks by order index and checks the stream shape.
    pub fn new(name: &str, mut tasks: Vec<TaskManifest>, source: &Path) -> Result<Self> {
        let malformed = |message: String| Error::MalformedManifest { path: source.to_path_buf(), message };
        if tasks.is_empty() {
            return Err(malformed("no tasks".into()));
        }
        tasks.sort_by_key(|t| t.order_index);
        for (i, t) in tasks.iter().enumerate() {
            if t.order_index != i {
                return Err(malformed(format!("order indices must be 0..{} without gaps or repeats", tasks.len())));
            }
            if !t.prompt_template.contains("{instruction}") {
                return Err(malformed(format!("task `{}`: prompt_template lacks {{instruction}}", t.task_name)));
            }
        }
        Ok(Self { name: name.to_owned(), tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Fails on the first task whose data files are absent.
    pub fn check_paths(&self) -> Result<()> {
        for t in &self.tasks {
            for p in [&t.train_path, &t.test_path] {
                if !p.is_file() {
                    return Err(Error::MissingDataPath { task: t.task_name.clone(), path: p.clone() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
    #[serde(default)]
    tasks: Vec<TaskManifest>,
    // Run overrides may share the file; they are read by the config tree.
    #[serde(default)]
    #[allow(dead_code)]
    train: Option<toml::Table>,
    #[serde(default)]
    #[allow(dead_code)]
    method: Option<toml::Table>,
    #[serde(default)]
    #[allow(dead_code)]
    benchmark: Option<toml::Table>,
    #[serde(default)]
    #[allow(dead_code)]
    eval: Option<toml::Table>,
}

/// Parses a manifest file, resolving relative data paths against `data_root`.
/// Does not touch the data files.
pub fn parse_manifest(name: &str, path: &Path, data_root: &Path) -> Result<BenchmarkSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = toml::from_str(&text)
        .map_err(|e| Error::MalformedManifest { path: path.to_path_buf(), message: e.message().to_owned() })?;
    let tasks = doc
        .tasks
        .into_iter()
        .map(|mut t| {
            t.train_path = data_root.join(&t.train_path);
            t.test_path = data_root.join(&t.test_path);
            t
        })
        .collect();
    BenchmarkSpec::new(name, tasks, path)
}

/// Loads `config_dir/benchmarks/<name>.toml` and checks every data path.
pub fn load_benchmark(name: &str, config_dir: &Path, data_root: &Path) -> Result<BenchmarkSpec> {
    let name = name.to_lowercase();
    let path = config_dir.join("benchmarks").join(format!("{name}.toml"));
    if !path.is_file() {
        return Err(Error::UnknownBenchmark(name));
    }
    let spec = parse_manifest(&name, &path, data_root)?;
    spec.check_paths()?;
    Ok(spec)
}

/// What a benchmark factory receives.
#[derive(Clone, Debug)]
pub struct BenchmarkContext {
    /// Registered benchmark name.
    pub name: String,
    pub config_dir: PathBuf,
    pub data_root: PathBuf,
    /// The merged `[benchmark]` configuration table.
    pub settings: toml::Table,
    /// Directory of the plugin that registered the benchmark, if any.
    pub plugin_dir: Option<PathBuf>,
}

pub(crate) fn manifest_factory(ctx: &BenchmarkContext) -> Result<BenchmarkSpec> {
    let path = match ctx.settings.get("manifest").and_then(|v| v.as_str()) {
        Some(rel) => ctx.plugin_dir.as_deref().unwrap_or(&ctx.config_dir).join(rel),
        None => {
            let p = ctx.config_dir.join("benchmarks").join(format!("{}.toml", ctx.name));
            if !p.is_file() {
                return Err(Error::UnknownBenchmark(ctx.name.clone()));
            }
            p
        }
    };
    let spec = parse_manifest(&ctx.name, &path, &ctx.data_root)?;
    spec.check_paths()?;
    Ok(spec)
}

pub(crate) fn synthetic_factory(ctx: &BenchmarkContext) -> Result<BenchmarkSpec> {
    let spec = match ctx.settings.get("synthetic") {
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::InvalidConfig {
            field: "benchmark.synthetic",
            reason: e.message().to_owned(),
        })?,
        None => SyntheticSpec::default(),
    };
    let mut out = generate_synthetic(&spec, &ctx.data_root.join(&ctx.name))?;
    out.name = ctx.name.clone();
    Ok(out)
}

/// Reads one JSONL split and applies the task's prompt template.
pub fn load_samples(manifest: &TaskManifest, path: &Path, require_answer: bool) -> Result<Vec<MultimodalSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: MultimodalSample = serde_json::from_str(line).map_err(|e| {
            Error::data(None, format!("{}:{}: {e}", path.display(), line_no + 1))
        })?;
        if require_answer && sample.answer.is_empty() {
            return Err(Error::data(Some(&sample.sample_id), "training sample has an empty answer"));
        }
        sample.instruction = manifest.render(&sample.instruction);
        out.push(sample);
    }
    Ok(out)
}

/// Shuffling batch source over one task's training split.
#[derive(Clone, Debug)]
pub struct TaskLoader {
    samples: Vec<MultimodalSample>,
    batch_size: usize,
    seed: u64,
    task: usize,
}

impl TaskLoader {
    pub fn new(samples: Vec<MultimodalSample>, batch_size: usize, seed: u64, task: usize) -> Self {
        Self { samples, batch_size: batch_size.max(1), seed, task }
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Batches of one epoch in a seeded order.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<MultimodalSample>> {
        let mut rng = crate::methods::derived_rng(self.seed, ((self.task as u64) << 32) | epoch as u64);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(|c| c.iter().map(|&i| self.samples[i].clone()).collect()).collect()
    }
}

/// One step of the task stream.
#[derive(Clone, Debug)]
pub struct Stage {
    pub task_index: usize,
    pub manifest: TaskManifest,
    pub train: TaskLoader,
    pub test: Vec<MultimodalSample>,
}

/// Checks that `task_ids` are strictly increasing and in range.
pub fn validate_task_ids(task_ids: &[usize], num_tasks: usize) -> Result<()> {
    if let Some(&bad) = task_ids.iter().find(|&&t| t >= num_tasks) {
        return Err(Error::BadTaskIds(format!("task id {bad} is out of range 0..{num_tasks}")));
    }
    if task_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BadTaskIds(format!("{task_ids:?} is not strictly increasing")));
    }
    Ok(())
}

/// Lazily loads the requested tasks in order.
pub fn iterate_stream<'s>(
    spec: &'s BenchmarkSpec,
    task_ids: &[usize],
    seed: u64,
    batch_size: usize,
) -> Result<impl Iterator<Item = Result<Stage>> + 's> {
    validate_task_ids(task_ids, spec.num_tasks())?;
    Ok(task_ids.to_vec().into_iter().map(move |t| load_stage(spec, t, seed, batch_size)))
}

pub fn load_stage(spec: &BenchmarkSpec, task_index: usize, seed: u64, batch_size: usize) -> Result<Stage> {
    let manifest = spec
        .tasks
        .get(task_index)
        .ok_or_else(|| Error::BadTaskIds(format!("task id {task_index} is out of range 0..{}", spec.num_tasks())))?
        .clone();
    let train = load_samples(&manifest, &manifest.train_path, true)?;
    let test = load_samples(&manifest, &manifest.test_path, false)?;
    for (split, n, expected) in [("train", train.len(), manifest.num_train), ("test", test.len(), manifest.num_test)] {
        if expected.is_some_and(|e| e != n) {
            log::warn!("task `{}`: {split} split has {n} samples, manifest says {}", manifest.task_name, expected.unwrap());
        }
    }
    Ok(Stage { task_index, train: TaskLoader::new(train, batch_size, seed, task_index), test, manifest })
}

pub fn write_replay_sidecar(buffer: &ReplayBuffer, path: &Path) -> Result<ReplaySidecar> {
    let sidecar = buffer.sidecar();
    let text = serde_json::to_string_pretty(&sidecar)?;
    write_if_changed(path, text.as_bytes())?;
    Ok(sidecar)
}

pub fn read_replay_sidecar(path: &Path, resolve: &dyn Fn(&str) -> Option<MultimodalSample>) -> Result<ReplayBuffer> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: ReplaySidecar = serde_json::from_str(&text)?;
    ReplayBuffer::from_sidecar(&sidecar, resolve)
}

/// Writes through a temporary file and skips the write if the content is unchanged.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
