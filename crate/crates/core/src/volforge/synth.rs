//! Desk-scale multi-phase lesion generator.
//!
//! Every sample is a smooth random background with one ellipsoidal lesion.
//! Voxels inside the lesion are replaced by a per-phase level determined by
//! the class and the [`SignalLayout`], so with zero noise the mean lesion
//! intensity of phase `p` equals that level exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_sample, DatasetManifest};
use super::{MultiPhaseSample, PhaseVolume, Split};
use crate::error::{config_err, Error, Result};

/// How class information is spread over phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SignalLayout {
    /// Every phase carries class information: `contrast * cos(2 pi k / K + pi / (2K) + pi p / N)`.
    Distributed,
    /// Class `k` gets the k-th even-parity binary code over phases; each bit maps
    /// to `+/- contrast`. Any single phase separates the classes only in pairs.
    Split,
    /// Only `phase` carries the class level `+/- contrast` (K = 2 style codes);
    /// the other phases get a class-independent random level of the same magnitude.
    SinglePhase { phase: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_phases: usize,
    pub n_classes: usize,
    pub dims: [usize; 3],
    pub contrast: f64,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "default_layout")]
    pub layout: SignalLayout,
    /// Train, val, test fractions, applied per class.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    /// Lesion semi-axis range as a fraction of each dimension.
    #[serde(default = "default_radius")]
    pub radius_range: (f64, f64),
    /// Peak amplitude of the smooth background.
    #[serde(default = "default_background")]
    pub background_amplitude: f64,
}

fn default_layout() -> SignalLayout {
    SignalLayout::Distributed
}
fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}
fn default_radius() -> (f64, f64) {
    (0.2, 0.35)
}
fn default_background() -> f64 {
    0.3
}

impl SynthConfig {
    pub fn new(n_samples: usize, n_phases: usize, n_classes: usize, dims: [usize; 3], contrast: f64, noise_sd: f64, seed: u64) -> Self {
        Self {
            n_samples,
            n_phases,
            n_classes,
            dims,
            contrast,
            noise_sd,
            seed,
            layout: default_layout(),
            split_fractions: default_fractions(),
            radius_range: default_radius(),
            background_amplitude: default_background(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_phases < 1 {
            return Err(config_err!("need at least 1 phase"));
        }
        if self.dims.contains(&0) {
            return Err(config_err!("dims {:?} must be positive", self.dims));
        }
        if !(self.noise_sd >= 0.0 && self.contrast.is_finite()) {
            return Err(config_err!("noise_sd must be >= 0 and contrast finite"));
        }
        let f = self.split_fractions;
        if f.iter().any(|&x| x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions {f:?} must be nonnegative and sum to 1"));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(config_err!("radius range ({lo}, {hi}) must satisfy 0 < min <= max <= 0.5"));
        }
        match self.layout {
            SignalLayout::Split if self.n_classes > 1 << (self.n_phases - 1) => Err(config_err!(
                "split layout supports at most 2^(N-1) = {} classes",
                1usize << (self.n_phases - 1)
            )),
            SignalLayout::Split if self.n_phases < 2 => Err(config_err!("split layout needs N >= 2")),
            SignalLayout::SinglePhase { phase } if phase >= self.n_phases => {
                Err(config_err!("signal phase {phase} out of range for N = {}", self.n_phases))
            }
            _ => Ok(()),
        }
    }

    pub fn phase_names(&self) -> Vec<String> {
        (0..self.n_phases).map(|p| format!("phase{p}")).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|k| format!("class{k}")).collect()
    }

    /// Deterministic class signature for the structured layouts.
    /// `SinglePhase` returns the signal phase level and zeros elsewhere.
    pub fn signature(&self, class: usize) -> Vec<f64> {
        let (k, n, kk) = (class as f64, self.n_phases as f64, self.n_classes as f64);
        match self.layout {
            SignalLayout::Distributed => (0..self.n_phases)
                .map(|p| self.contrast * (2.0 * PI * k / kk + PI / (2.0 * kk) + PI * p as f64 / n).cos())
                .collect(),
            SignalLayout::Split => {
                let code = even_parity_codes(self.n_phases)[class];
                (0..self.n_phases)
                    .map(|p| if code >> p & 1 == 1 { self.contrast } else { -self.contrast })
                    .collect()
            }
            SignalLayout::SinglePhase { phase } => (0..self.n_phases)
                .map(|p| if p == phase { self.contrast * class_sign(class, self.n_classes) } else { 0.0 })
                .collect(),
        }
    }

    /// Per-phase lesion levels of one sample.
    fn levels(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut sig = self.signature(class);
        if let SignalLayout::SinglePhase { phase } = self.layout {
            for (p, v) in sig.iter_mut().enumerate() {
                if p != phase {
                    *v = self.contrast * rng.random_range(-1.0..=1.0);
                }
            }
        }
        sig
    }
}

/// Evenly spaced levels in [-1, 1] over classes.
fn class_sign(class: usize, n_classes: usize) -> f64 {
    -1.0 + 2.0 * class as f64 / (n_classes - 1) as f64
}

/// Binary words of length `n` with an even number of set bits, ascending.
fn even_parity_codes(n: usize) -> Vec<u32> {
    (0..1u32 << n).filter(|c| c.count_ones() % 2 == 0).collect()
}

/// Derives an independent stream seed for item `i`.
pub(crate) fn sub_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Class-balanced label and split assignment.
fn assign(cfg: &SynthConfig) -> Vec<(usize, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, u64::MAX));
    let mut out = vec![(0, Split::Train); cfg.n_samples];
    for k in 0..cfg.n_classes {
        let mut idx: Vec<usize> = (0..cfg.n_samples).filter(|i| i % cfg.n_classes == k).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * cfg.split_fractions[0]).round() as usize;
        let n_val = ((n * (cfg.split_fractions[0] + cfg.split_fractions[1])).round() as usize).max(n_train) - n_train;
        for (r, &i) in idx.iter().enumerate() {
            let split = if r < n_train {
                Split::Train
            } else if r < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out[i] = (k, split);
        }
    }
    out
}

fn smooth_background(dims: [usize; 3], amplitude: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let freq = [0, 1, 2].map(|_| rng.random_range(0.0..1.5));
            (freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.2).sum();
    Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(d, h, w)| {
        let x = [d as f64 / dims[0] as f64, h as f64 / dims[1] as f64, w as f64 / dims[2] as f64];
        amplitude
            * waves
                .iter()
                .map(|(f, ph, a)| a * (2.0 * PI * (f[0] * x[0] + f[1] * x[1] + f[2] * x[2]) + ph).sin())
                .sum::<f64>()
            / norm
    })
}

fn ellipsoid_mask(dims: [usize; 3], range: (f64, f64), rng: &mut ChaCha8Rng) -> Array3<f32> {
    let radii = [0, 1, 2].map(|i| (rng.random_range(range.0..=range.1) * dims[i] as f64).max(0.75));
    let centre = [0, 1, 2].map(|i| {
        let lo = radii[i].min(dims[i] as f64 / 2.0);
        let hi = (dims[i] as f64 - radii[i]).max(lo);
        rng.random_range(lo..=hi) - 0.5
    });
    let mut m = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(d, h, w)| {
        let r: f64 = [d, h, w]
            .iter()
            .enumerate()
            .map(|(i, &c)| ((c as f64 - centre[i]) / radii[i]).powi(2))
            .sum();
        if r <= 1.0 {
            1.0
        } else {
            0.0
        }
    });
    if m.iter().all(|&v| v == 0.0) {
        let c = centre.map(|c| c.round().max(0.0) as usize);
        m[[c[0].min(dims[0] - 1), c[1].min(dims[1] - 1), c[2].min(dims[2] - 1)]] = 1.0;
    }
    m
}

/// Generates sample `i` of the dataset described by `cfg`.
pub fn synth_sample(cfg: &SynthConfig, i: usize, label: usize, split: Split) -> Result<MultiPhaseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, i as u64));
    let background = smooth_background(cfg.dims, cfg.background_amplitude, &mut rng);
    let mask = ellipsoid_mask(cfg.dims, cfg.radius_range, &mut rng);
    let levels = cfg.levels(label, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("sd >= 0");
    let names = cfg.phase_names();
    let phases = (0..cfg.n_phases)
        .map(|p| {
            let shift = rng.random_range(-0.1..0.1) * cfg.background_amplitude;
            let mut v = Array3::zeros((cfg.dims[0], cfg.dims[1], cfg.dims[2]));
            for ((out, &bg), &m) in v.iter_mut().zip(background.iter()).zip(mask.iter()) {
                let base = if m > 0.5 { levels[p] } else { bg + shift };
                let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *out = (base + eps) as f32;
            }
            PhaseVolume::new(v, names[p].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiPhaseSample {
        sample_id: format!("syn{i:05}"),
        phases,
        label,
        split,
        mask: Some(mask),
    })
}

/// Generates all samples in memory.
pub fn synthesize_samples(cfg: &SynthConfig) -> Result<Vec<MultiPhaseSample>> {
    cfg.validate()?;
    assign(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, (label, split))| synth_sample(cfg, i, label, split))
        .collect()
}

/// Writes the dataset (VVOL volumes, lesion masks, `manifest.json`) under `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<(DatasetManifest, PathBuf)> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (i, (label, split)) in assign(cfg).into_iter().enumerate() {
        samples.push(write_sample(dir, &synth_sample(cfg, i, label, split)?)?);
    }
    let manifest = DatasetManifest {
        class_names: cfg.class_names(),
        phase_names: cfg.phase_names(),
        samples,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    let cfg_path = dir.join("synth_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok((manifest, path))
}

/// Per-phase mean intensity inside the lesion mask.
pub fn lesion_means(s: &MultiPhaseSample) -> Result<Vec<f64>> {
    let mask = s
        .mask
        .as_ref()
        .ok_or_else(|| Error::Dataset(format!("sample `{}` has no lesion mask", s.sample_id)))?;
    let n: f64 = mask.iter().map(|&m| m as f64).sum();
    Ok(s.phases
        .iter()
        .map(|p| p.voxels.iter().zip(mask.iter()).map(|(&v, &m)| v as f64 * m as f64).sum::<f64>() / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layout: SignalLayout, n_phases: usize, n_classes: usize, noise: f64) -> SynthConfig {
        SynthConfig {
            layout,
            ..SynthConfig::new(60, n_phases, n_classes, [4, 12, 12], 0.8, noise, 11)
        }
    }

    #[test]
    fn noiseless_lesion_means_equal_signature() {
        let c = cfg(SignalLayout::Distributed, 3, 2, 0.0);
        for s in synthesize_samples(&c).unwrap().iter().take(10) {
            let m = lesion_means(s).unwrap();
            let sig = c.signature(s.label);
            for (a, b) in m.iter().zip(sig.iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn split_codes_make_single_phases_pairwise_ambiguous() {
        let c = cfg(SignalLayout::Split, 3, 4, 0.0);
        let sigs: Vec<Vec<f64>> = (0..4).map(|k| c.signature(k)).collect();
        for p in 0..3 {
            let positives = sigs.iter().filter(|s| s[p] > 0.0).count();
            assert_eq!(positives, 2);
        }
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(sigs[a], sigs[b]);
            }
        }
        assert!(cfg(SignalLayout::Split, 3, 5, 0.0).validate().is_err());
    }

    #[test]
    fn class_balanced_splits() {
        let c = SynthConfig {
            split_fractions: [0.8, 0.2, 0.0],
            ..SynthConfig::new(250, 3, 2, [2, 4, 4], 0.8, 0.3, 5)
        };
        let a = assign(&c);
        let count = |k: usize, s: Split| a.iter().filter(|x| **x == (k, s)).count();
        assert_eq!(count(0, Split::Train) + count(1, Split::Train), 200);
        assert_eq!(count(0, Split::Val), 25);
        assert_eq!(count(1, Split::Val), 25);
    }

    #[test]
    fn generator_writes_reproducible_manifest() {
        let c = SynthConfig::new(12, 3, 2, [2, 6, 6], 0.8, 0.3, 3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m, path) = generate_synthetic_dataset(&c, d1.path()).unwrap();
        generate_synthetic_dataset(&c, d2.path()).unwrap();
        assert_eq!(m.samples.len(), 12);
        assert!(m.samples.iter().all(|e| e.phases.len() == 3));
        for e in &m.samples {
            for rel in e.phases.values() {
                assert_eq!(fs::read(d1.path().join(rel)).unwrap(), fs::read(d2.path().join(rel)).unwrap());
            }
        }
        assert_eq!(fs::read(&path).unwrap(), fs::read(d2.path().join("manifest.json")).unwrap());
    }

    /// Nearest class centroid over per-phase lesion means.
    fn nearest_centroid_accuracy(samples: &[MultiPhaseSample], k: usize) -> f64 {
        let feats: Vec<Vec<f64>> = samples.iter().map(|s| lesion_means(s).unwrap()).collect();
        let n = feats[0].len();
        let mut cent = vec![vec![0.0; n]; k];
        let mut cnt = vec![0.0; k];
        for (s, f) in samples.iter().zip(&feats) {
            if s.split == Split::Train {
                cnt[s.label] += 1.0;
                for j in 0..n {
                    cent[s.label][j] += f[j];
                }
            }
        }
        for c in 0..k {
            cent[c].iter_mut().for_each(|v| *v /= cnt[c]);
        }
        let held: Vec<_> = samples.iter().zip(&feats).filter(|(s, _)| s.split != Split::Train).collect();
        let correct = held
            .iter()
            .filter(|(s, f)| {
                let d = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..k).min_by(|&a, &b| d(&cent[a]).total_cmp(&d(&cent[b]))).unwrap();
                best == s.label
            })
            .count();
        correct as f64 / held.len() as f64
    }

    #[test]
    fn noiseless_nearest_centroid_is_perfect() {
        for (layout, n, k) in [
            (SignalLayout::Distributed, 3, 2),
            (SignalLayout::Distributed, 1, 4),
            (SignalLayout::Split, 3, 4),
            (SignalLayout::SinglePhase { phase: 1 }, 3, 2),
        ] {
            let c = cfg(layout.clone(), n, k, 0.0);
            let acc = nearest_centroid_accuracy(&synthesize_samples(&c).unwrap(), k);
            assert_eq!(acc, 1.0, "{layout:?}");
        }
    }
}
