//! Writing and checking run artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::Command;

use anyhow::{ensure, Context, Result};
use fit_core::backbone::FilmParams;
use fit_core::data::{save_run_manifest, RunManifest};
use fit_core::head::ClassifierCache;
use fit_core::FitError;
use serde::Serialize;

/// Marks errors caused by bad invocation rather than bad data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return "usage";
        }
        if let Some(f) = cause.downcast_ref::<FitError>() {
            return match f {
                FitError::Config(_) => "config",
                FitError::Io(_) => "io",
                FitError::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => "io",
                FitError::Parse { .. } | FitError::RaggedRows { .. } | FitError::Csv(_) => "parse",
                FitError::Json(_) => "json",
                _ => "runtime",
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "runtime"
}

pub fn report_error(kind: &str, message: &str) {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{v}");
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn write_manifest<T: Serialize>(out_dir: &Path, cmd: &str, seed: u64, config: &T) -> Result<()> {
    let m = RunManifest::new(seed, config, git_describe())?;
    let path = out_dir.join(format!("manifest-{cmd}.json"));
    save_run_manifest(&m, &path)?;
    let back = fit_core::data::load_run_manifest(&path)?;
    ensure!(back == m, "manifest {} did not read back", path.display());
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<serde_json::Value>(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))?;
    Ok(())
}

pub fn save_psi(path: &Path, psi: &FilmParams) -> Result<()> {
    psi.save(path)?;
    let back = FilmParams::load(path)?;
    ensure!(back.flatten() == psi.flatten(), "{} did not read back", path.display());
    Ok(())
}

pub fn save_cache(path: &Path, cache: &ClassifierCache) -> Result<()> {
    cache.save(path)?;
    let back = ClassifierCache::load(path)?;
    ensure!(&back == cache, "{} did not read back", path.display());
    Ok(())
}

/// Checks that every line of a JSON-lines file parses.
pub fn check_jsonl(path: &Path, expected_rows: usize) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        serde_json::from_str::<serde_json::Value>(line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        n += 1;
    }
    ensure!(n == expected_rows, "{}: {n} rows, expected {expected_rows}", path.display());
    Ok(())
}

pub fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
