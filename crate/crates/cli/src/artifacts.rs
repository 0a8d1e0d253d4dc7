//! Run artifacts and their manifest.
//!
//! Every file a run writes gets one manifest line with its row count, the
//! SHA-256 of its bytes, the hash of the resolved configuration and the run
//! seed. `--check` re-reads the files and compares.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mal_core::experiment::{ExperimentData, RunOutcome};
use mal_core::meta_engine::weights_to_csv;
use mal_core::synthdata;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "file,rows,config_hash,seed,sha256";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub rows: usize,
    pub config_hash: String,
    /// The run seed, or `;`-joined seeds for a multi-run summary.
    pub seed: String,
    pub sha256: String,
}

/// Data rows of a CSV (lines after the header) or tensors of a checkpoint.
pub fn count_rows(file: &str, text: &str) -> usize {
    if file.ends_with(".csv") {
        text.lines().count().saturating_sub(1)
    } else {
        text.lines().filter(|l| l.starts_with("tensor ")).count()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Accumulates manifest lines for one output directory.
pub struct Manifest<'a> {
    dir: &'a Path,
    config_hash: String,
    seed: String,
    entries: Vec<ManifestEntry>,
}

impl<'a> Manifest<'a> {
    pub fn new(dir: &'a Path, config_hash: String, seed: String) -> Self {
        Self { dir, config_hash, seed, entries: Vec::new() }
    }

    pub fn write(&mut self, file: &str, text: &str) -> Result<()> {
        let path = self.dir.join(file);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.entries.push(ManifestEntry {
            file: file.to_string(),
            rows: count_rows(file, text),
            config_hash: self.config_hash.clone(),
            seed: self.seed.clone(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(())
    }

    /// Writes `manifest.csv`.
    pub fn finish(self) -> Result<Vec<ManifestEntry>> {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{},{}\n", e.file, e.rows, e.config_hash, e.seed, e.sha256));
        }
        let path = self.dir.join(MANIFEST);
        fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.entries)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        bail!("{}: unexpected header", path.display());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || anyhow::anyhow!("{}:{}: malformed manifest line {l:?}", path.display(), i + 2);
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                file: f[0].to_string(),
                rows: f[1].parse().map_err(|_| bad())?,
                config_hash: f[2].to_string(),
                seed: f[3].to_string(),
                sha256: f[4].to_string(),
            })
        })
        .collect()
}

/// Compares the files in `dir` against its manifest. Returns one message
/// per mismatch; an empty list means everything matches.
pub fn check_manifest(dir: &Path, config_hash: &str, seed: &str) -> Result<Vec<String>> {
    let entries = read_manifest(dir)?;
    let mut problems = Vec::new();
    if entries.is_empty() {
        problems.push("manifest lists no files".to_string());
    }
    for e in &entries {
        if e.config_hash != config_hash {
            problems.push(format!("{}: config hash {} differs from the current config {config_hash}", e.file, e.config_hash));
        }
        if e.seed != seed {
            problems.push(format!("{}: recorded seed {} differs from {seed}", e.file, e.seed));
        }
        let path = dir.join(&e.file);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(err) => {
                problems.push(format!("{}: {err}", path.display()));
                continue;
            }
        };
        let rows = count_rows(&e.file, &text);
        if rows != e.rows {
            problems.push(format!("{}: {rows} rows, manifest says {}", e.file, e.rows));
        }
        if sha256_hex(text.as_bytes()) != e.sha256 {
            problems.push(format!("{}: contents changed", e.file));
        }
    }
    Ok(problems)
}

/// Writes every artifact of a finished run plus its manifest.
pub fn write_run(
    dir: &Path,
    config_toml: &str,
    config_hash: &str,
    outcome: &RunOutcome,
    data: &ExperimentData,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut m = Manifest::new(dir, config_hash.to_string(), outcome.seed.to_string());
    m.write("config.toml", config_toml)?;
    m.write("runlog.csv", &outcome.log.to_csv())?;
    m.write("f1_report.csv", &outcome.report.to_csv())?;
    m.write("weights.csv", &weights_to_csv(&outcome.weights))?;
    m.write("checkpoint.txt", &outcome.checkpoint.to_text())?;
    let dump = dir.join("dataset.csv");
    synthdata::write_csv(&dump, &[&data.train, &data.val, &data.aux, &data.test])?;
    let text = fs::read_to_string(&dump).with_context(|| format!("reading back {}", dump.display()))?;
    m.entries.push(ManifestEntry {
        file: "dataset.csv".into(),
        rows: count_rows("dataset.csv", &text),
        config_hash: config_hash.to_string(),
        seed: outcome.seed.to_string(),
        sha256: sha256_hex(text.as_bytes()),
    });
    m.finish()
}
