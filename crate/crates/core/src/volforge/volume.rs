use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One single-channel voxel grid for one imaging phase, axes `(D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolume {
    pub voxels: Array3<f32>,
    pub phase_name: String,
    /// Millimeters per voxel along `(D, H, W)`, when known.
    pub spacing: Option<[f32; 3]>,
}

impl PhaseVolume {
    pub fn new(voxels: Array3<f32>, phase_name: impl Into<String>) -> Result<Self> {
        let v = Self {
            voxels: voxels.as_standard_layout().into_owned(),
            phase_name: phase_name.into(),
            spacing: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.shape().contains(&0) {
            return Err(Error::Dataset(format!(
                "phase `{}` has an empty dimension {:?}",
                self.phase_name,
                self.dims()
            )));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(self.phase_name.clone()));
        }
        Ok(())
    }

    /// Per-volume z-score. Constant volumes become all zeros.
    pub fn normalized(&self) -> Self {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .voxels
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        let voxels = if sd <= f64::EPSILON * mean.abs().max(1.0) {
            Array3::zeros(self.voxels.raw_dim())
        } else {
            self.voxels.mapv(|v| ((v as f64 - mean) / sd) as f32)
        };
        Self {
            voxels,
            phase_name: self.phase_name.clone(),
            spacing: self.spacing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// N co-registered phase volumes of one lesion plus its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiPhaseSample {
    pub sample_id: String,
    pub phases: Vec<PhaseVolume>,
    pub label: usize,
    pub split: Split,
    /// Binary lesion mask (1 inside), available for synthetic data.
    pub mask: Option<Array3<f32>>,
}

impl MultiPhaseSample {
    pub fn dims(&self) -> [usize; 3] {
        self.phases.first().map_or([0; 3], PhaseVolume::dims)
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    /// All phases must share one grid.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.phases.is_empty() {
            return Err(Error::Dataset(format!("sample `{}` has no phases", self.sample_id)));
        }
        for p in &self.phases {
            p.validate()?;
            if p.dims() != dims {
                return Err(Error::Dataset(format!(
                    "sample `{}`: phase `{}` has dims {:?}, expected {dims:?}",
                    self.sample_id,
                    p.phase_name,
                    p.dims()
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the phases at `indices`, in that order.
    pub fn select_phases(&self, indices: &[usize]) -> Result<Self> {
        let phases = indices
            .iter()
            .map(|&i| {
                self.phases.get(i).cloned().ok_or_else(|| {
                    Error::Dataset(format!("phase index {i} out of range for `{}`", self.sample_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            phases,
            ..self.clone()
        })
    }

    pub fn normalized(&self) -> Self {
        Self {
            phases: self.phases.iter().map(PhaseVolume::normalized).collect(),
            ..self.clone()
        }
    }
}
