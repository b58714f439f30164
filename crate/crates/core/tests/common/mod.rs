#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

pub fn repo_config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

/// Runs the `mcit` binary against the repository config with its own data
/// root and output directory, and returns the parsed metrics report.
pub fn run_cli(argv: &[String], data_root: &Path, out_dir: &Path) -> Result<serde_json::Value, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_mcit"))
        .args(argv)
        .arg("--config-dir")
        .arg(repo_config_dir())
        .arg("--out-dir")
        .arg(out_dir)
        .arg("--set")
        .arg(format!("paths.data_root={}", toml::Value::String(data_root.display().to_string())))
        .env_remove("PRISM_DATA_ROOT")
        .env_remove("PRISM_PLUGIN_PATH")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&output.stdout);
    if !output.status.success() {
        return Err(format!(
            "exit {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr).trim()
        ));
    }
    let line = stdout.lines().last().unwrap_or_default();
    let path = line.rsplit_once('(').and_then(|(_, p)| p.strip_suffix(')')).ok_or("no metrics path in output")?;
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// SHA-256 over every core source file, by relative path and content.
pub fn source_hash() -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, out);
            } else {
                out.push(path);
            }
        }
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    walk(&root, &mut files);
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.strip_prefix(&root).unwrap().to_string_lossy().as_bytes());
        hasher.update(std::fs::read(&f).unwrap());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
