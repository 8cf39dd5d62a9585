//! Loading a generated benchmark directory back into memory.

use std::fs;
use std::path::{Path, PathBuf};

use super::generator::{BenchmarkSpec, MANIFEST_FILE, SPEC_FILE};
use super::manifest::{read_manifest, ManifestEntry, Split};
use super::sfm::read_sequence;
use super::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<FeatureSequence>,
    pub val: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
}

impl DomainData {
    pub fn split(&self, split: Split) -> &[FeatureSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub root: PathBuf,
    pub spec: BenchmarkSpec,
    pub manifest: Vec<ManifestEntry>,
    pub source: DomainData,
    pub targets: Vec<DomainData>,
}

impl Benchmark {
    /// Reads `spec.txt`, `manifest.tsv` and every listed `.sfm` file,
    /// checking that each file agrees with its manifest line.
    pub fn load(root: &Path) -> Result<Self> {
        let spec_path = root.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec = BenchmarkSpec::parse(&text)?;
        let manifest = read_manifest(&root.join(MANIFEST_FILE))?;
        let mut domains: Vec<DomainData> = spec
            .domains()
            .map(|d| DomainData {
                name: d.name.clone(),
                ..DomainData::default()
            })
            .collect();
        for entry in &manifest {
            let domain = domains
                .iter_mut()
                .find(|d| d.name == entry.domain)
                .ok_or_else(|| Error::Malformed(format!("manifest names unknown domain {:?}", entry.domain)))?;
            let seq = load_entry(root, entry)?;
            if seq.width() != spec.feature_dim {
                return Err(Error::Malformed(format!(
                    "{}: width {} but the benchmark has N = {}",
                    entry.path,
                    seq.width(),
                    spec.feature_dim
                )));
            }
            match entry.split {
                Split::Train => domain.train.push(seq),
                Split::Val => domain.val.push(seq),
                Split::Test => domain.test.push(seq),
            }
        }
        let source = domains.remove(0);
        Ok(Self {
            root: root.to_path_buf(),
            spec,
            manifest,
            source,
            targets: domains,
        })
    }

    pub fn domain(&self, name: &str) -> Result<&DomainData> {
        std::iter::once(&self.source)
            .chain(&self.targets)
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("benchmark has no domain {name:?}")))
    }

    /// Manifest paths of the videos a run on `domain` may read.
    pub fn paths_of(&self, domain: &str) -> Vec<&str> {
        self.manifest
            .iter()
            .filter(|e| e.domain == domain)
            .map(|e| e.path.as_str())
            .collect()
    }
}

fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<FeatureSequence> {
    let mut seq = read_sequence(&root.join(&entry.path))?;
    if seq.len() != entry.len {
        return Err(Error::Malformed(format!(
            "{}: manifest says L = {} but the file has {}",
            entry.path,
            entry.len,
            seq.len()
        )));
    }
    seq.id.clone_from(&entry.id);
    Ok(seq)
}
