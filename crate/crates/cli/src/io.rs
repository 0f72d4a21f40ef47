//! Plain-text artifact formats.
//!
//! Record files are JSON Lines: a header line
//! `{"format": .., "version": .., "seed": .., "config": ..}` followed by one
//! record per line. Tables are CSV preceded by `#` comment lines carrying the
//! same header. Floats are written in shortest round-trip form, so a file
//! re-read and re-written is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

impl Header {
    /// Header of a per-seed artifact. The echoed config has `seeds = [seed]`
    /// so that stages run with different seed lists agree.
    pub fn for_seed(format: &str, config: &ExperimentConfig, seed: u64) -> Self {
        let echo = ExperimentConfig { seeds: vec![seed], ..config.clone() }.echo();
        Self { format: format.to_string(), version: FORMAT_VERSION, seed: Some(seed), config: echo }
    }

    /// Header of an artifact spanning all seeds of `config`.
    pub fn for_all(format: &str, config: &ExperimentConfig) -> Self {
        Self { format: format.to_string(), version: FORMAT_VERSION, seed: None, config: config.echo() }
    }

    fn check(&self, expected: &Header, path: &Path) -> Result<()> {
        if self.format != expected.format {
            return Err(CliError::format(path, format!("expected format '{}', found '{}'", expected.format, self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(CliError::format(path, format!("unsupported version {} (this build reads {FORMAT_VERSION})", self.version)));
        }
        if self.seed != expected.seed || without_methods(&self.config) != without_methods(&expected.config) {
            return Err(CliError::format(path, "produced with a different config or seed; rerun the upstream stage"));
        }
        Ok(())
    }
}

/// The method list selects which stages run; it does not change any
/// artifact, so it is ignored when matching headers.
fn without_methods(config: &serde_json::Value) -> serde_json::Value {
    let mut c = config.clone();
    if let Some(map) = c.as_object_mut() {
        map.remove("methods");
    }
    c
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("artifact records serialize")
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    let mut text = to_line(header);
    text.push('\n');
    for r in records {
        text.push_str(&to_line(r));
        text.push('\n');
    }
    write_text(path, &text)
}

/// Reads a record file and checks its header against `expected`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, expected: &Header) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| CliError::format(path, "empty file"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| CliError::format(path, format!("bad header: {e}")))?;
    header.check(expected, path)?;
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// A CSV table with a comment header.
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path, header: &Header) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "# format: {}", header.format).unwrap();
        writeln!(text, "# version: {}", header.version).unwrap();
        if let Some(seed) = header.seed {
            writeln!(text, "# seed: {seed}").unwrap();
        }
        writeln!(text, "# config: {}", to_line(&header.config)).unwrap();
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.columns).and_then(|_| self.rows.iter().try_for_each(|r| w.write_record(r))).map_err(|e| CliError::format(path, e))?;
        let body = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
        text.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        write_text(path, &text)
    }

    /// Reads a table written by [`Table::write`]; comment lines are skipped
    /// and the column header must equal `columns`.
    pub fn read(path: &Path, columns: &[&'static str]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let found: Vec<String> = r.headers().map_err(|e| CliError::format(path, e))?.iter().map(String::from).collect();
        if found != columns {
            return Err(CliError::format(path, format!("expected columns {columns:?}, found {found:?}")));
        }
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(|e| CliError::format(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { columns: columns.to_vec(), rows })
    }
}

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(String::from).unwrap_or(s)
}

/// Where a run's artifacts live under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn distribution(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data").join("distribution.jsonl")
    }

    pub fn task(&self, seed: u64, split: &str, id: usize) -> PathBuf {
        self.seed_dir(seed).join("data").join(format!("{split}-{id:03}.jsonl"))
    }

    pub fn meta_run(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("train").join("ours.jsonl")
    }

    pub fn pooled_rm(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("train").join("mtrm.jsonl")
    }

    pub fn policies(&self, seed: u64, method: &str) -> PathBuf {
        self.seed_dir(seed).join("policies").join(format!("{method}.jsonl"))
    }

    pub fn seed_results(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("results.csv")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn sweep(&self, axis: &str) -> PathBuf {
        self.root.join(format!("sweep-{axis}.csv"))
    }

    pub fn checkgrad(&self, seed: u64) -> PathBuf {
        self.root.join(format!("checkgrad-{seed}.csv"))
    }
}
