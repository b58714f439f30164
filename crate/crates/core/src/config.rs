//! Layered declarative configuration.
//!
//! Precedence, lowest first: built-in defaults, `paths/*.toml`,
//! `backbone/<name>.toml`, `benchmarks/<name>.toml`, `methods/<name>.toml`,
//! command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::methods::MethodConfig;
use crate::trainer::TrainConfig;

pub const PLUGIN_PATH_ENV: &str = "PRISM_PLUGIN_PATH";
pub const DATA_ROOT_ENV: &str = "PRISM_DATA_ROOT";

/// Keys that may be absent from the serialized defaults.
const OPTIONAL_KEYS: [(&str, &str); 1] = [("train.max_grad_norm", "float")];
/// Free-form sections passed through to plugins without type checks.
const FREEFORM_PREFIXES: [&str; 1] = ["benchmark."];
/// Top-level keys of a benchmark file that describe the task stream itself.
const MANIFEST_KEYS: [&str; 2] = ["tasks", "description"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score VQA answers by gold-in-prediction containment instead of equality.
    pub containment: bool,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { containment: false, max_new_tokens: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_root: PathBuf::from("data"), out_dir: PathBuf::from("runs") }
    }
}

/// Fully merged run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub plugin_roots: Vec<PathBuf>,
    pub backbone_name: String,
    pub paths: PathsConfig,
    pub backbone: BackboneConfig,
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Settings handed to the benchmark factory.
    pub benchmark: toml::Table,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plugin_roots: Vec::new(),
            backbone_name: "surrogate".into(),
            paths: PathsConfig::default(),
            backbone: BackboneConfig::default(),
            method: MethodConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            benchmark: toml::Table::new(),
        }
    }
}

/// Leaf `(dotted.key, value)` pairs of a table. Arrays are leaves.
pub fn flatten_table(table: &toml::Table) -> Vec<(String, toml::Value)> {
    fn walk(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(t) => walk(&key, t, out),
                other => out.push((key, other.clone())),
            }
        }
    }
    let mut out = Vec::new();
    walk("", table, &mut out);
    out
}

pub fn get_path<'t>(table: &'t toml::Table, key: &str) -> Option<&'t toml::Value> {
    let mut parts = key.split('.');
    let mut value = table.get(parts.next()?)?;
    for part in parts {
        value = value.as_table()?.get(part)?;
    }
    Some(value)
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_owned()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        cur = entry.as_table_mut().expect("just ensured a table");
    }
    cur.insert(last.to_owned(), value);
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

/// One configuration layer with a label used in diagnostics.
#[derive(Clone, Debug)]
pub struct Layer {
    pub source: String,
    pub table: toml::Table,
}

impl Layer {
    pub fn new(source: impl Into<String>, table: toml::Table) -> Self {
        Self { source: source.into(), table }
    }

    /// Parses `key=value` overrides; values are TOML literals, falling back to a bare string.
    pub fn from_assignments(source: &str, assignments: &[String]) -> Result<Self> {
        let mut table = toml::Table::new();
        for a in assignments {
            let (key, raw) =
                a.split_once('=').ok_or_else(|| Error::Usage(format!("override `{a}` is not of the form key=value")))?;
            let key = key.trim();
            if key.is_empty() || key.split('.').any(str::is_empty) {
                return Err(Error::Usage(format!("override `{a}` has an empty key")));
            }
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
            set_path(&mut table, key, value);
        }
        Ok(Self::new(source, table))
    }

    fn read(path: &Path, label: String) -> Result<Option<Self>> {
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::ConfigType {
            key: e.span().map(|s| format!("byte {}", s.start)).unwrap_or_else(|| "?".into()),
            expected: "valid TOML",
            file: label.clone(),
        })?;
        Ok(Some(Self::new(label, table)))
    }
}

/// Merged configuration together with the source of every explicitly set key.
#[derive(Clone, Debug)]
pub struct ConfigTree {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

/// Which files to read from a configuration directory.
#[derive(Clone, Debug, Default)]
pub struct ConfigRequest {
    pub benchmark: String,
    pub method: String,
    /// Highest-precedence overrides, applied in order.
    pub cli: Vec<Layer>,
}

pub fn load_config_tree(config_dir: &Path, request: &ConfigRequest) -> Result<ConfigTree> {
    if !config_dir.is_dir() {
        return Err(Error::MissingConfigDir(config_dir.to_path_buf()));
    }
    if config_dir.join("deepspeed").is_dir() {
        log::info!("config/deepspeed is present; distributed-training settings are ignored at desk scale");
    }
    let mut paths_layers = Vec::new();
    let paths_dir = config_dir.join("paths");
    if paths_dir.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&paths_dir)
            .map_err(|e| Error::io(&paths_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        for f in files {
            let label = format!("paths/{}", f.file_name().unwrap_or_default().to_string_lossy());
            paths_layers.extend(Layer::read(&f, label)?);
        }
    }
    let file_layer = |sub: &str, name: &str| -> Result<Option<Layer>> {
        Layer::read(&config_dir.join(sub).join(format!("{name}.toml")), format!("{sub}/{name}.toml"))
    };
    let mut benchmark_layer = file_layer("benchmarks", &request.benchmark.to_lowercase())?;
    if let Some(layer) = benchmark_layer.as_mut() {
        for key in MANIFEST_KEYS {
            layer.table.remove(key);
        }
    }
    let method_layer = file_layer("methods", &request.method.to_lowercase())?;

    let mut layers: Vec<&Layer> = paths_layers.iter().collect();
    layers.extend(benchmark_layer.iter().chain(method_layer.iter()).chain(request.cli.iter()));
    let backbone_name = merge_layers(&layers)?.config.backbone_name;
    let backbone_layer = file_layer("backbone", &backbone_name.to_lowercase())?;
    layers.splice(paths_layers.len()..paths_layers.len(), backbone_layer.iter());
    let mut tree = merge_layers(&layers)?;

    let base = config_dir.parent().unwrap_or(Path::new("."));
    let anchor = |p: &mut PathBuf, key: &str, tree: &ConfigTree| {
        let from_cli = tree.provenance.get(key).is_some_and(|s| s.starts_with("cli") || s.starts_with("env"));
        if p.is_relative() && !from_cli {
            *p = base.join(&*p);
        }
    };
    let mut cfg = tree.config.clone();
    anchor(&mut cfg.paths.data_root, "paths.data_root", &tree);
    anchor(&mut cfg.paths.out_dir, "paths.out_dir", &tree);
    for root in &mut cfg.plugin_roots {
        if root.is_relative() && tree.provenance.get("plugin_roots").is_some_and(|s| !s.starts_with("cli")) {
            *root = base.join(&*root);
        }
    }
    tree.config = cfg;
    Ok(tree)
}

/// Merges layers in increasing precedence over the built-in defaults.
pub fn merge_layers(layers: &[&Layer]) -> Result<ConfigTree> {
    let defaults = toml::Table::try_from(RunConfig::default())
        .map_err(|e| Error::Internal(format!("default config serialization: {e}")))?;
    let known: BTreeMap<String, toml::Value> = flatten_table(&defaults).into_iter().collect();
    let mut merged = defaults.clone();
    let mut provenance = BTreeMap::new();
    let mut warnings = Vec::new();
    for layer in layers {
        for (key, mut value) in flatten_table(&layer.table) {
            let expected = known
                .get(&key)
                .map(type_name)
                .or_else(|| OPTIONAL_KEYS.iter().find(|(k, _)| *k == key).map(|(_, t)| *t));
            match expected {
                Some(expected) => {
                    let got = type_name(&value);
                    if expected == "float" && got == "integer" {
                        value = toml::Value::Float(value.as_integer().expect("integer") as f64);
                    } else if expected != got {
                        return Err(Error::ConfigType { key, expected, file: layer.source.clone() });
                    }
                }
                None if FREEFORM_PREFIXES.iter().any(|p| key.starts_with(p)) => {}
                None => {
                    let msg = format!("unknown config key `{key}` in {} ignored", layer.source);
                    log::warn!("{msg}");
                    warnings.push(msg);
                    continue;
                }
            }
            set_path(&mut merged, &key, value);
            provenance.insert(key, layer.source.clone());
        }
    }
    let config: RunConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
        let file = e
            .message()
            .split('`')
            .nth(1)
            .and_then(|k| provenance.get(k).cloned())
            .unwrap_or_else(|| "merged config".into());
        Error::ConfigType { key: e.message().to_owned(), expected: "a value of the declared range", file }
    })?;
    if config.train.bf16 || config.train.gradient_checkpointing {
        log::info!("bf16 and gradient_checkpointing are accepted but have no effect at desk scale");
    }
    Ok(ConfigTree { config, provenance, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(source: &str, text: &str) -> Layer {
        Layer::new(source, toml::from_str(text).unwrap())
    }

    #[test]
    fn cli_beats_method_file() {
        let method = layer("methods/ftlora.toml", "seed = 1");
        let cli = layer("cli", "seed = 5");
        let tree = merge_layers(&[&method, &cli]).unwrap();
        assert_eq!(tree.config.seed, 5);
        assert_eq!(tree.provenance["seed"], "cli");
    }

    #[test]
    fn type_errors_name_key_and_file() {
        let bad = layer("methods/x.toml", "[train]\nepochs = \"four\"");
        match merge_layers(&[&bad]) {
            Err(Error::ConfigType { key, expected, file }) => {
                assert_eq!(key, "train.epochs");
                assert_eq!(expected, "integer");
                assert_eq!(file, "methods/x.toml");
            }
            other => panic!("expected ConfigType, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_warn_and_integers_widen() {
        let l = layer("paths/default.toml", "mystery = 3\n[train]\nlr = 1\nmax_grad_norm = 2");
        let tree = merge_layers(&[&l]).unwrap();
        assert_eq!(tree.warnings.len(), 1);
        assert_eq!(tree.config.train.lr, 1.0);
        assert_eq!(tree.config.train.max_grad_norm, Some(2.0));
    }

    #[test]
    fn assignments_parse_literals() {
        let l = Layer::from_assignments("cli", &["train.epochs=3".into(), "paths.data_root=/tmp/x".into()]).unwrap();
        assert_eq!(get_path(&l.table, "train.epochs"), Some(&toml::Value::Integer(3)));
        assert_eq!(get_path(&l.table, "paths.data_root").and_then(|v| v.as_str()), Some("/tmp/x"));
        assert!(Layer::from_assignments("cli", &["novalue".into()]).is_err());
    }
}
