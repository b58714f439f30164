//! Name → factory registries for methods, benchmarks and backbones.
//!
//! Plugins are directories holding an `integration.toml` whose
//! `[[register]]` entries bind a name to a built-in implementation plus
//! optional configuration defaults. The built-in methods ship the same
//! way and go through the same [`Registry::register`] call.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::benchmarks::{self, BenchmarkContext, BenchmarkSpec};
use crate::config::{flatten_table, get_path, set_path};
use crate::error::{Error, Result};
use crate::methods::{self, Method, MethodConfig, MethodContext};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Method,
    Benchmark,
    Backbone,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Method => "method",
            Kind::Benchmark => "benchmark",
            Kind::Backbone => "backbone",
        })
    }
}

pub type MethodFactory<T> = Arc<dyn Fn(&MethodContext<'_, T>) -> Result<Box<dyn Method<T>>> + Send + Sync>;
pub type BenchmarkFactory = Arc<dyn Fn(&BenchmarkContext) -> Result<BenchmarkSpec> + Send + Sync>;
pub type BackboneFactory<T> = Arc<dyn Fn(&BackboneConfig) -> Result<Backbone<T>> + Send + Sync>;

pub enum Factory<T: Scalar> {
    Method(MethodFactory<T>),
    Benchmark(BenchmarkFactory),
    Backbone(BackboneFactory<T>),
}

impl<T: Scalar> Clone for Factory<T> {
    fn clone(&self) -> Self {
        match self {
            Factory::Method(f) => Factory::Method(Arc::clone(f)),
            Factory::Benchmark(f) => Factory::Benchmark(Arc::clone(f)),
            Factory::Backbone(f) => Factory::Backbone(Arc::clone(f)),
        }
    }
}

impl<T: Scalar> Factory<T> {
    pub fn kind(&self) -> Kind {
        match self {
            Factory::Method(_) => Kind::Method,
            Factory::Benchmark(_) => Kind::Benchmark,
            Factory::Backbone(_) => Kind::Backbone,
        }
    }

    /// Whether both handles point at the same factory object.
    pub fn same_as(&self, other: &Self) -> bool {
        match (self, other) {
            (Factory::Method(a), Factory::Method(b)) => Arc::ptr_eq(a, b),
            (Factory::Benchmark(a), Factory::Benchmark(b)) => Arc::ptr_eq(a, b),
            (Factory::Backbone(a), Factory::Backbone(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl<T: Scalar> fmt::Debug for Factory<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Factory({})", self.kind())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub kind: Kind,
    pub name: String,
}

fn fold_name(name: &str) -> Result<String> {
    let folded = name.to_lowercase();
    let valid = !folded.is_empty()
        && folded.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
    if valid {
        Ok(folded)
    } else {
        Err(Error::InvalidName(name.to_owned()))
    }
}

/// Mutable registry used during startup. Call [`Registry::freeze`] once
/// discovery is complete.
pub struct Registry<T: Scalar> {
    entries: BTreeMap<Kind, BTreeMap<String, Factory<T>>>,
}

impl<T: Scalar> Default for Registry<T> {
    fn default() -> Self {
        Self::new()
    }
}

const BUILTIN_METHODS: [(&str, &str); 9] = [
    ("clmoe", include_str!("../plugins/method/clmoe/integration.toml")),
    ("disco", include_str!("../plugins/method/disco/integration.toml")),
    ("ftlora", include_str!("../plugins/method/ftlora/integration.toml")),
    ("hide", include_str!("../plugins/method/hide/integration.toml")),
    ("modalprompt", include_str!("../plugins/method/modalprompt/integration.toml")),
    ("moelora", include_str!("../plugins/method/moelora/integration.toml")),
    ("replay", include_str!("../plugins/method/replay/integration.toml")),
    ("same", include_str!("../plugins/method/same/integration.toml")),
    ("zeroshot", include_str!("../plugins/method/zeroshot/integration.toml")),
];

impl<T: Scalar> Registry<T> {
    pub fn new() -> Self {
        Self { entries: [Kind::Method, Kind::Benchmark, Kind::Backbone].into_iter().map(|k| (k, BTreeMap::new())).collect() }
    }

    /// Registry holding the nine built-in methods, the shipped benchmarks
    /// and the surrogate backbone.
    pub fn builtin() -> Result<Self> {
        let mut reg = Self::new();
        for (plugin, text) in BUILTIN_METHODS {
            reg.register_integration(plugin, None, text)?;
        }
        for name in benchmarks::MANIFEST_BENCHMARKS {
            reg.register(Kind::Benchmark, name, Factory::Benchmark(Arc::new(benchmarks::manifest_factory)))?;
        }
        for name in benchmarks::SYNTHETIC_BENCHMARKS {
            reg.register(Kind::Benchmark, name, Factory::Benchmark(Arc::new(benchmarks::synthetic_factory)))?;
        }
        reg.register(Kind::Backbone, "surrogate", Factory::Backbone(Arc::new(|c: &BackboneConfig| Backbone::build(c.clone()))))?;
        Ok(reg)
    }

    pub fn register(&mut self, kind: Kind, name: &str, factory: Factory<T>) -> Result<Receipt> {
        let name = fold_name(name)?;
        if factory.kind() != kind {
            return Err(Error::PluginLoad {
                plugin: name,
                message: format!("a {} factory cannot be registered as a {kind}", factory.kind()),
            });
        }
        let table = self.entries.get_mut(&kind).expect("all kinds present");
        if table.contains_key(&name) {
            return Err(Error::DuplicateName { kind, name });
        }
        table.insert(name.clone(), factory);
        Ok(Receipt { kind, name })
    }

    pub fn resolve(&self, kind: Kind, name: &str) -> Result<Factory<T>> {
        resolve_in(&self.entries, kind, name)
    }

    pub fn names(&self, kind: Kind) -> Vec<String> {
        self.entries[&kind].keys().cloned().collect()
    }

    /// Loads every `<root>/<plugin>/integration.toml` and returns the number
    /// of new registrations.
    pub fn discover_plugins(&mut self, roots: &[PathBuf]) -> Result<usize> {
        let mut count = 0;
        for root in roots {
            let read = std::fs::read_dir(root).map_err(|e| Error::PluginLoad {
                plugin: root.display().to_string(),
                message: format!("cannot read plugin root: {e}"),
            })?;
            let mut dirs: Vec<PathBuf> = read.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            dirs.sort();
            for dir in dirs {
                let entry = dir.join("integration.toml");
                let plugin = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if !entry.is_file() {
                    log::warn!("plugin directory {} has no integration.toml, skipping", dir.display());
                    continue;
                }
                let text = std::fs::read_to_string(&entry)
                    .map_err(|e| Error::PluginLoad { plugin: plugin.clone(), message: e.to_string() })?;
                count += self.register_integration(&plugin, Some(&dir), &text)?;
            }
        }
        Ok(count)
    }

    /// Parses one integration document and registers each of its entries.
    pub fn register_integration(&mut self, plugin: &str, dir: Option<&Path>, text: &str) -> Result<usize> {
        let load_err = |message: String| Error::PluginLoad { plugin: plugin.to_owned(), message };
        let doc: IntegrationFile = toml::from_str(text).map_err(|e| load_err(e.to_string()))?;
        let mut n = 0;
        for entry in doc.register {
            let factory = entry.factory::<T>(dir).map_err(|e| match e {
                Error::PluginLoad { .. } => e,
                other => load_err(other.to_string()),
            })?;
            self.register(entry.kind, &entry.name, factory)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn freeze(self) -> FrozenRegistry<T> {
        FrozenRegistry { entries: Arc::new(self.entries) }
    }
}

fn resolve_in<T: Scalar>(
    entries: &BTreeMap<Kind, BTreeMap<String, Factory<T>>>,
    kind: Kind,
    name: &str,
) -> Result<Factory<T>> {
    let table = &entries[&kind];
    let folded = name.to_lowercase();
    table.get(&folded).cloned().ok_or_else(|| Error::UnknownName {
        kind,
        name: name.to_owned(),
        available: table.keys().cloned().collect(),
    })
}

/// Read-only registry, cheap to clone and safe to share across threads.
pub struct FrozenRegistry<T: Scalar> {
    entries: Arc<BTreeMap<Kind, BTreeMap<String, Factory<T>>>>,
}

impl<T: Scalar> Clone for FrozenRegistry<T> {
    fn clone(&self) -> Self {
        Self { entries: Arc::clone(&self.entries) }
    }
}

impl<T: Scalar> FrozenRegistry<T> {
    pub fn resolve(&self, kind: Kind, name: &str) -> Result<Factory<T>> {
        resolve_in(&self.entries, kind, name)
    }

    pub fn method(&self, name: &str) -> Result<MethodFactory<T>> {
        match self.resolve(Kind::Method, name)? {
            Factory::Method(f) => Ok(f),
            _ => unreachable!("kind-checked at registration"),
        }
    }

    pub fn benchmark(&self, name: &str) -> Result<BenchmarkFactory> {
        match self.resolve(Kind::Benchmark, name)? {
            Factory::Benchmark(f) => Ok(f),
            _ => unreachable!("kind-checked at registration"),
        }
    }

    pub fn backbone(&self, name: &str) -> Result<BackboneFactory<T>> {
        match self.resolve(Kind::Backbone, name)? {
            Factory::Backbone(f) => Ok(f),
            _ => unreachable!("kind-checked at registration"),
        }
    }

    /// Sorted registered names of one kind.
    pub fn names(&self, kind: Kind) -> Vec<String> {
        self.entries[&kind].keys().cloned().collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntegrationFile {
    #[serde(default)]
    register: Vec<IntegrationEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntegrationEntry {
    kind: Kind,
    name: String,
    implementation: String,
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
    #[serde(default)]
    config: toml::Table,
}

/// Overwrites keys of `target` that are still at their value in `defaults`
/// with the plugin's values.
fn apply_defaults<C>(target: &C, plugin_defaults: &toml::Table) -> Result<C>
where
    C: Serialize + serde::de::DeserializeOwned + Default,
{
    let as_table = |c: &C| -> Result<toml::Table> {
        toml::Table::try_from(c).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    };
    let mut current = as_table(target)?;
    let builtin = as_table(&C::default())?;
    for (key, value) in flatten_table(plugin_defaults) {
        if get_path(&current, &key) == get_path(&builtin, &key) {
            set_path(&mut current, &key, value);
        }
    }
    toml::Value::Table(current)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig { field: "plugin config", reason: e.message().to_owned() })
}

impl IntegrationEntry {
    fn factory<T: Scalar>(&self, dir: Option<&Path>) -> Result<Factory<T>> {
        let defaults = self.config.clone();
        let implementation = self.implementation.clone();
        match self.kind {
            Kind::Method => {
                if !methods::CATALOG.contains(&implementation.as_str()) {
                    return Err(Error::PluginLoad {
                        plugin: self.name.clone(),
                        message: format!(
                            "unknown implementation `{implementation}`; available: {}",
                            methods::CATALOG.join(", ")
                        ),
                    });
                }
                apply_defaults(&MethodConfig::default(), &defaults)?;
                Ok(Factory::Method(Arc::new(move |ctx: &MethodContext<'_, T>| {
                    let config = apply_defaults(ctx.config, &defaults)?;
                    let ctx = MethodContext { config: &config, ..*ctx };
                    methods::build_method(&implementation, &ctx)
                })))
            }
            Kind::Benchmark => {
                let factory: fn(&BenchmarkContext) -> Result<BenchmarkSpec> = match implementation.as_str() {
                    "manifest" => benchmarks::manifest_factory,
                    "synthetic" => benchmarks::synthetic_factory,
                    other => {
                        return Err(Error::PluginLoad {
                            plugin: self.name.clone(),
                            message: format!("unknown benchmark implementation `{other}`; available: manifest, synthetic"),
                        })
                    }
                };
                let dir = dir.map(Path::to_path_buf);
                Ok(Factory::Benchmark(Arc::new(move |ctx: &BenchmarkContext| {
                    let mut ctx = ctx.clone();
                    ctx.plugin_dir = dir.clone();
                    for (key, value) in flatten_table(&defaults) {
                        if get_path(&ctx.settings, &key).is_none() {
                            set_path(&mut ctx.settings, &key, value);
                        }
                    }
                    factory(&ctx)
                })))
            }
            Kind::Backbone => {
                if implementation != "surrogate" {
                    return Err(Error::PluginLoad {
                        plugin: self.name.clone(),
                        message: format!("unknown backbone implementation `{implementation}`; available: surrogate"),
                    });
                }
                apply_defaults(&BackboneConfig::default(), &defaults)?;
                Ok(Factory::Backbone(Arc::new(move |c: &BackboneConfig| {
                    Backbone::build(apply_defaults(c, &defaults)?)
                })))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy() -> Factory<f64> {
        Factory::Backbone(Arc::new(|c: &BackboneConfig| Backbone::build(c.clone())))
    }

    #[test]
    fn register_resolve_round_trip() {
        let mut reg = Registry::<f64>::new();
        let f = dummy();
        let receipt = reg.register(Kind::Backbone, "Tiny", f.clone()).unwrap();
        assert_eq!(receipt, Receipt { kind: Kind::Backbone, name: "tiny".into() });
        assert!(reg.resolve(Kind::Backbone, "TINY").unwrap().same_as(&f));
        assert!(matches!(reg.register(Kind::Backbone, "tiny", dummy()), Err(Error::DuplicateName { .. })));
        assert!(matches!(reg.register(Kind::Backbone, "FT LoRA", dummy()), Err(Error::InvalidName(_))));
        assert!(matches!(reg.register(Kind::Backbone, "", dummy()), Err(Error::InvalidName(_))));
        assert!(matches!(reg.register(Kind::Method, "x", dummy()), Err(Error::PluginLoad { .. })));
    }

    #[test]
    fn unknown_name_lists_sorted_methods() {
        let reg = Registry::<f64>::builtin().unwrap().freeze();
        match reg.resolve(Kind::Method, "nonexistent") {
            Err(Error::UnknownName { available, .. }) => assert_eq!(
                available,
                ["clmoe", "disco", "ftlora", "hide", "modalprompt", "moelora", "replay", "same", "zeroshot"]
            ),
            other => panic!("expected UnknownName, got {other:?}"),
        }
        assert!(reg.benchmark("synthetic").is_ok());
        assert!(reg.backbone("surrogate").is_ok());
    }

    #[test]
    fn malformed_integration_reports_plugin() {
        let mut reg = Registry::<f64>::new();
        let err = reg.register_integration("broken", None, "[[register]]\nkind = \"method\"\n").unwrap_err();
        assert!(matches!(err, Error::PluginLoad { ref plugin, .. } if plugin == "broken"));
        let err = reg
            .register_integration("odd", None, "[[register]]\nkind = \"method\"\nname = \"x\"\nimplementation = \"nope\"\n")
            .unwrap_err();
        assert!(matches!(err, Error::PluginLoad { .. }));
    }

    #[test]
    fn plugin_defaults_fill_only_untouched_keys() {
        let defaults: toml::Table = toml::from_str("lora.r = 4\nnum_experts = 2").unwrap();
        let mut user = MethodConfig::default();
        user.num_experts = 8;
        let merged = apply_defaults(&user, &defaults).unwrap();
        assert_eq!(merged.lora.r, 4);
        assert_eq!(merged.num_experts, 8);
    }
}
