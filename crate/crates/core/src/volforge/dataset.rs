use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_volume, write_volume};
use super::{MultiPhaseSample, PhaseVolume, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub label: usize,
    pub split: Split,
    /// Phase name to VVOL path, relative to the manifest directory.
    pub phases: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub phase_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_phases(&self) -> usize {
        self.phase_names.len()
    }

    /// Structural checks. File existence is checked separately by [`Dataset::open`].
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() || self.phase_names.is_empty() {
            return Err(Error::Dataset("manifest needs at least one class and one phase".into()));
        }
        for e in &self.samples {
            if e.label >= self.num_classes() {
                return Err(Error::Dataset(format!(
                    "sample `{}` has label {} outside [0, {})",
                    e.sample_id,
                    e.label,
                    self.num_classes()
                )));
            }
            if e.phases.len() != self.num_phases() || !self.phase_names.iter().all(|p| e.phases.contains_key(p)) {
                return Err(Error::Dataset(format!(
                    "sample `{}` must list exactly the phases {:?}",
                    e.sample_id, self.phase_names
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// A manifest plus its volumes, either on disk or held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
    memory: Option<Vec<MultiPhaseSample>>,
    /// Indices into the manifest phase list, when restricted to a subset.
    phase_subset: Option<Vec<usize>>,
}

impl Dataset {
    /// Opens a manifest and checks that every referenced file exists.
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &manifest.samples {
            for rel in e.phases.values().chain(e.mask.iter()) {
                if !root.join(rel).is_file() {
                    return Err(Error::Dataset(format!(
                        "sample `{}` references missing file {}",
                        e.sample_id,
                        root.join(rel).display()
                    )));
                }
            }
        }
        Ok(Self {
            manifest,
            root,
            memory: None,
            phase_subset: None,
        })
    }

    /// Wraps samples that never touched disk. Manifest paths are left empty.
    pub fn in_memory(class_names: Vec<String>, phase_names: Vec<String>, samples: Vec<MultiPhaseSample>) -> Result<Self> {
        let entries = samples
            .iter()
            .map(|s| ManifestEntry {
                sample_id: s.sample_id.clone(),
                label: s.label,
                split: s.split,
                phases: phase_names.iter().map(|p| (p.clone(), String::new())).collect(),
                mask: None,
            })
            .collect();
        let manifest = DatasetManifest {
            class_names,
            phase_names,
            samples: entries,
        };
        manifest.validate()?;
        for s in &samples {
            s.validate()?;
            if s.n_phases() != manifest.num_phases() {
                return Err(Error::Dataset(format!("sample `{}` has {} phases", s.sample_id, s.n_phases())));
            }
        }
        Ok(Self {
            manifest,
            root: PathBuf::new(),
            memory: Some(samples),
            phase_subset: None,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    /// Phase names visible through the current subset.
    pub fn phase_names(&self) -> Vec<String> {
        match &self.phase_subset {
            Some(idx) => idx.iter().map(|&i| self.manifest.phase_names[i].clone()).collect(),
            None => self.manifest.phase_names.clone(),
        }
    }

    pub fn num_phases(&self) -> usize {
        self.phase_names().len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.samples[i].split == split).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.samples[i].label
    }

    /// Restricts every sample to the named phases, in the given order.
    pub fn with_phase_subset(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.manifest
                    .phase_names
                    .iter()
                    .position(|p| p == n)
                    .ok_or_else(|| Error::Dataset(format!("phase `{n}` not in {:?}", self.manifest.phase_names)))
            })
            .collect::<Result<Vec<_>>>()?;
        if idx.is_empty() {
            return Err(Error::Dataset("empty phase subset".into()));
        }
        Ok(Self {
            phase_subset: Some(idx),
            ..self.clone()
        })
    }

    fn load_full(&self, i: usize) -> Result<MultiPhaseSample> {
        if let Some(mem) = &self.memory {
            return Ok(mem[i].clone());
        }
        let e = &self.manifest.samples[i];
        let phases = self
            .manifest
            .phase_names
            .iter()
            .map(|name| {
                let mut v = read_volume(self.root.join(&e.phases[name]))?;
                v.phase_name = name.clone();
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = e
            .mask
            .as_ref()
            .map(|m| read_volume(self.root.join(m)).map(|v| v.voxels))
            .transpose()?;
        let s = MultiPhaseSample {
            sample_id: e.sample_id.clone(),
            phases,
            label: e.label,
            split: e.split,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn get(&self, i: usize) -> Result<MultiPhaseSample> {
        if i >= self.len() {
            return Err(Error::Dataset(format!("sample index {i} out of range ({})", self.len())));
        }
        let s = self.load_full(i)?;
        match &self.phase_subset {
            Some(idx) => s.select_phases(idx),
            None => Ok(s),
        }
    }

    /// Reads every sample into memory.
    pub fn preload(&mut self) -> Result<()> {
        if self.memory.is_none() {
            let all = (0..self.len()).map(|i| self.load_full(i)).collect::<Result<Vec<_>>>()?;
            self.memory = Some(all);
        }
        Ok(())
    }

    /// Writes volumes and `manifest.json` under `dir`; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let vol_dir = dir.join("volumes");
        fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let s = self.get(i)?;
            entries.push(write_sample(dir, &s)?);
        }
        let manifest = DatasetManifest {
            class_names: self.manifest.class_names.clone(),
            phase_names: self.phase_names(),
            samples: entries,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

/// Writes one sample's volumes under `dir/volumes` and returns its manifest entry.
pub(crate) fn write_sample(dir: &Path, s: &MultiPhaseSample) -> Result<ManifestEntry> {
    let mut phases = BTreeMap::new();
    for p in &s.phases {
        let rel = format!("volumes/{}_{}.vvol", s.sample_id, p.phase_name);
        write_volume(dir.join(&rel), p)?;
        phases.insert(p.phase_name.clone(), rel);
    }
    let mask = match &s.mask {
        Some(m) => {
            let rel = format!("volumes/{}_mask.vvol", s.sample_id);
            write_volume(dir.join(&rel), &PhaseVolume::new(m.clone(), "mask")?)?;
            Some(rel)
        }
        None => None,
    };
    Ok(ManifestEntry {
        sample_id: s.sample_id.clone(),
        label: s.label,
        split: s.split,
        phases,
        mask,
    })
}
