//! Dataset manifests and on-disk datasets.
//!
//! A dataset directory holds `manifest.json` plus one 3-D tensor
//! (`samples × patches × channels`) per split and session. Each manifest
//! record points at its tensor file and row index.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, write_tensor, Tensor};
use crate::cka::FeatureMap;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::ClassId;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Tensor file, relative to the dataset directory.
    pub path: String,
    /// Row of the tensor's first axis.
    pub index: usize,
    pub label: ClassId,
    pub session: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: ClassId,
    pub session: u32,
}

/// Ground truth from the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    /// Tensor file holding the pool of true primitive vectors.
    pub pool_path: String,
    pub class_primitives: Vec<ClassPrimitives>,
    pub samples: Vec<SampleAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrimitives {
    pub class: ClassId,
    /// Pool rows forming the class's true primitive set.
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleAnnotation {
    pub id: String,
    /// Per patch: drawn from the class's own primitives.
    pub shared: Vec<bool>,
    /// Per patch: pool row it realizes, `None` for pure noise.
    pub source: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<SampleRecord>,
    pub classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Annotations>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut sessions = BTreeMap::new();
        for c in &self.classes {
            if sessions.insert(c.id, c.session).is_some() {
                return Err(Error::invalid(format!("class {} listed twice", c.id)));
            }
        }
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("sample id {} repeated", s.id)));
            }
            match sessions.get(&s.label) {
                None => {
                    return Err(Error::invalid(format!(
                        "sample {} has unlisted label {}",
                        s.id, s.label
                    )))
                }
                Some(&session) if session != s.session => {
                    return Err(Error::invalid(format!(
                        "sample {} is in session {} but class {} belongs to session {session}",
                        s.id, s.session, s.label
                    )))
                }
                _ => {}
            }
        }
        let n_sessions = self.n_sessions();
        if (0..n_sessions).any(|k| !self.classes.iter().any(|c| c.session == k)) {
            return Err(Error::invalid("sessions must be numbered 0.. without gaps"));
        }
        Ok(())
    }

    pub fn n_sessions(&self) -> u32 {
        self.classes
            .iter()
            .map(|c| c.session + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn classes_in(&self, session: u32) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.session == session)
            .map(|c| c.id)
            .collect()
    }

    /// Canonical tensor file for a split and session.
    pub fn tensor_path(split: Split, session: u32) -> String {
        format!("{}_s{session}.ckat", split.name())
    }
}

/// A manifest together with every sample's feature map, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub maps: Vec<FeatureMap>,
}

impl Dataset {
    pub fn new(manifest: Manifest, maps: Vec<FeatureMap>) -> Result<Self> {
        manifest.validate()?;
        if manifest.samples.len() != maps.len() {
            return Err(Error::invalid("manifest and feature maps differ in length"));
        }
        for (r, m) in manifest.samples.iter().zip(&maps) {
            if r.id != m.sample_id || r.label != m.label || r.session != m.session {
                return Err(Error::invalid(format!(
                    "feature map for {} does not match its manifest record",
                    r.id
                )));
            }
        }
        Ok(Self { manifest, maps })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let mut cache: BTreeMap<&str, Vec<Matrix>> = BTreeMap::new();
        let mut maps = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            if !cache.contains_key(r.path.as_str()) {
                let t = read_tensor(&dir.join(&r.path))?;
                cache.insert(&r.path, t.to_matrices()?);
            }
            let x = cache[r.path.as_str()].get(r.index).ok_or_else(|| {
                Error::invalid(format!("sample {} points past the end of {}", r.id, r.path))
            })?;
            maps.push(FeatureMap::new(
                r.id.clone(),
                r.label,
                r.session,
                x.clone(),
            )?);
        }
        Self::new(manifest, maps)
    }

    /// Writes the manifest and one tensor per referenced file. Every file's
    /// samples must share one shape and cover indices `0..n` exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: BTreeMap<&str, Vec<(usize, &Matrix)>> = BTreeMap::new();
        for (r, m) in self.manifest.samples.iter().zip(&self.maps) {
            files.entry(&r.path).or_default().push((r.index, m.x()));
        }
        for (path, mut rows) in files {
            rows.sort_by_key(|(i, _)| *i);
            if rows.iter().enumerate().any(|(k, (i, _))| k != *i) {
                return Err(Error::invalid(format!("indices in {path} are not 0..n")));
            }
            let (p, d) = (rows[0].1.rows(), rows[0].1.cols());
            if rows.iter().any(|(_, m)| m.rows() != p || m.cols() != d) {
                return Err(Error::invalid(format!("samples in {path} differ in shape")));
            }
            let data: Vec<f64> = rows
                .iter()
                .flat_map(|(_, m)| m.data().iter().copied())
                .collect();
            write_tensor(&dir.join(path), &Tensor::f64(vec![rows.len(), p, d], data)?)?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn select(&self, keep: impl Fn(&SampleRecord) -> bool) -> Vec<FeatureMap> {
        self.manifest
            .samples
            .iter()
            .zip(&self.maps)
            .filter(|(r, _)| keep(r))
            .map(|(_, m)| m.clone())
            .collect()
    }

    pub fn train(&self, session: u32) -> Vec<FeatureMap> {
        self.select(|r| r.split == Split::Train && r.session == session)
    }

    pub fn test(&self) -> Vec<FeatureMap> {
        self.select(|r| r.split == Split::Test)
    }

    /// Training sets of every session, in order.
    pub fn sessions(&self) -> Vec<Vec<FeatureMap>> {
        (0..self.manifest.n_sessions())
            .map(|k| self.train(k))
            .collect()
    }

    pub fn annotation(&self, id: &str) -> Option<&SampleAnnotation> {
        self.manifest
            .annotations
            .as_ref()?
            .samples
            .iter()
            .find(|a| a.id == id)
    }
}
