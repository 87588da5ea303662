//! CSV and manifest emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use drainsim::agents::LatencySample;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// A plain CSV table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// Column `name` of every row.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Spy samples of one simulation run.
#[derive(Debug, Clone)]
pub struct RawRun {
    pub run_id: String,
    pub samples: Vec<LatencySample>,
}

#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub raw: Vec<RawRun>,
    pub summary: Table,
    /// Additional files: (name, contents).
    pub extra: Vec<(String, String)>,
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Manifest {
    pub experiment: String,
    pub figure: String,
    pub seed: u64,
    pub scale: String,
    pub repetitions: usize,
    pub config_sha256: String,
    pub status: String,
    pub failure: Option<String>,
    pub files: Vec<FileEntry>,
    pub metrics: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn raw_csv(runs: &[RawRun], cap: usize) -> String {
    let mut s = String::from("run_id,sample_index,issue_ps,latency_cycles,addr_hex\n");
    for r in runs {
        for (i, x) in r.samples.iter().take(cap).enumerate() {
            let _ = writeln!(s, "{},{},{},{},{:#x}", r.run_id, i, x.issue.ps(), x.latency_cycles, x.addr().0);
        }
    }
    s
}

/// Header fields of a manifest that do not depend on the outcome.
#[derive(Debug, Clone)]
pub struct RunHeader {
    pub experiment: String,
    pub figure: String,
    pub seed: u64,
    pub scale: String,
    pub repetitions: usize,
    pub config_text: String,
    pub max_raw_samples: usize,
}

/// Writes the artifacts (or, on failure, only a manifest with the reason)
/// into `dir`; returns the manifest and every path written.
pub fn write_outputs(
    dir: &Path,
    h: &RunHeader,
    result: Result<&Artifacts, &str>,
) -> std::io::Result<(Manifest, Vec<PathBuf>)> {
    fs::create_dir_all(dir)?;
    let mut files = vec![];
    let mut paths = vec![];
    let mut emit = |name: &str, body: &[u8]| -> std::io::Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(body),
            bytes: body.len() as u64,
        });
        paths.push(p);
        Ok(())
    };
    emit("config.conf", h.config_text.as_bytes())?;
    let (status, failure, metrics) = match result {
        Ok(a) => {
            emit("raw.csv", raw_csv(&a.raw, h.max_raw_samples).as_bytes())?;
            emit("summary.csv", a.summary.to_csv().as_bytes())?;
            for (n, body) in &a.extra {
                emit(n, body.as_bytes())?;
            }
            ("ok", None, a.metrics.clone())
        }
        Err(why) => ("failed", Some(why.to_string()), serde_json::Value::Null),
    };
    let m = Manifest {
        experiment: h.experiment.clone(),
        figure: h.figure.clone(),
        seed: h.seed,
        scale: h.scale.clone(),
        repetitions: h.repetitions,
        config_sha256: sha256_hex(h.config_text.as_bytes()),
        status: status.into(),
        failure,
        files,
        metrics,
    };
    let p = dir.join("manifest.json");
    let mut body = serde_json::to_string_pretty(&m).expect("manifest serializes");
    body.push('\n');
    fs::write(&p, body)?;
    paths.push(p);
    Ok((m, paths))
}
