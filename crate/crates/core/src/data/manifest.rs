//! Benchmark manifest: one `id<TAB>domain<TAB>split<TAB>path<TAB>L` line per
//! video, paths relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Malformed(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub path: String,
    pub len: usize,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id, self.domain, self.split, self.path, self.len
        )
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Malformed(format!("manifest line {}: {msg}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, domain, split, path, len] = fields[..] else {
            return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
        };
        if [id, domain, path].iter().any(|f| f.is_empty()) {
            return Err(bad("empty field".into()));
        }
        let len: usize = len.parse().map_err(|_| bad(format!("invalid length {len:?}")))?;
        if len == 0 {
            return Err(bad("zero-length video".into()));
        }
        if entries.iter().any(|e| e.id == id) {
            return Err(bad(format!("duplicate id {id:?}")));
        }
        entries.push(ManifestEntry {
            id: id.into(),
            domain: domain.into(),
            split: split.parse().map_err(|e: Error| bad(e.to_string()))?,
            path: path.into(),
            len,
        });
    }
    Ok(entries)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, format_manifest(entries)).map_err(|e| Error::io(path, e))
}
