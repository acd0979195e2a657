//! Reading upstream artifacts with diagnostics that name what is missing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;

/// Fail with a message naming the artifact and the command that makes it.
pub fn require(path: &Path, what: &str, producer: &str) -> Result<PathBuf> {
    if !path.is_file() {
        bail!("missing {what} at {}; run `evidistill {producer}` first", path.display());
    }
    Ok(path.to_path_buf())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1)))
        .collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Shortest round-trip rendering; empty for `None`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "1\n\n2\nnope\n").unwrap();
        let err = read_jsonl::<i32>(&p).unwrap_err();
        assert!(format!("{err:#}").contains(":4:"));
        fs::write(&p, "1\n2\n").unwrap();
        assert_eq!(read_jsonl::<i32>(&p).unwrap(), vec![1, 2]);
    }

    #[test]
    fn missing_artifacts_are_named() {
        let err = require(Path::new("/nonexistent/model.json"), "target checkpoint", "train-target").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("target checkpoint") && msg.contains("train-target"));
    }
}
