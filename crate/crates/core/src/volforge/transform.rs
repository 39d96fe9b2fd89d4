use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MultiPhaseSample, PhaseVolume};
use crate::autograd::AxisMap;
use crate::error::{config_err, Error, Result};

/// Trilinear resampling with half-pixel centers. Equal dims return a bitwise copy.
pub fn resize_volume(v: &PhaseVolume, target: [usize; 3]) -> Result<PhaseVolume> {
    if target.contains(&0) {
        return Err(config_err!("resize target {target:?} has a zero dimension"));
    }
    let mut a = v.voxels.clone().into_dyn();
    for (axis, (&from, &to)) in v.dims().iter().zip(target.iter()).enumerate() {
        if from != to {
            a = AxisMap::<f32>::linear(from, to).apply(&a, axis);
        }
    }
    let voxels = a.into_dimensionality().expect("rank 3");
    let mut out = PhaseVolume::new(voxels, v.phase_name.clone())?;
    out.spacing = v.spacing.map(|sp| {
        let d = v.dims();
        [0, 1, 2].map(|i| sp[i] * d[i] as f32 / target[i] as f32)
    });
    Ok(out)
}

/// Trilinear resampling of a bare grid, half-pixel centers.
pub fn resize_grid(a: &Array3<f32>, target: [usize; 3]) -> Array3<f32> {
    let mut d = a.clone().into_dyn();
    for axis in 0..3 {
        if a.shape()[axis] != target[axis] {
            d = AxisMap::<f32>::linear(a.shape()[axis], target[axis]).apply(&d, axis);
        }
    }
    d.into_dimensionality().expect("rank 3")
}

/// Resizes every phase (and the mask, thresholded at 0.5) to `target`.
pub fn resize_sample(s: &MultiPhaseSample, target: [usize; 3]) -> Result<MultiPhaseSample> {
    Ok(MultiPhaseSample {
        phases: s.phases.iter().map(|p| resize_volume(p, target)).collect::<Result<_>>()?,
        mask: s
            .mask
            .as_ref()
            .map(|m| resize_grid(m, target).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })),
        ..s.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Random,
    Center,
}

/// Crop offsets for one sample. Center mode uses `floor((dim - size) / 2)`.
pub fn crop_offsets(dims: [usize; 3], size: [usize; 3], mode: CropMode, seed: u64) -> Result<[usize; 3]> {
    if (0..3).any(|i| size[i] > dims[i] || size[i] == 0) {
        return Err(config_err!("crop size {size:?} does not fit volume dims {dims:?}"));
    }
    Ok(match mode {
        CropMode::Center => [0, 1, 2].map(|i| (dims[i] - size[i]) / 2),
        CropMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            [0, 1, 2].map(|i| rng.random_range(0..=dims[i] - size[i]))
        }
    })
}

fn crop_grid(a: &Array3<f32>, off: [usize; 3], size: [usize; 3]) -> Array3<f32> {
    a.slice(s![
        off[0]..off[0] + size[0],
        off[1]..off[1] + size[1],
        off[2]..off[2] + size[2]
    ])
    .to_owned()
}

/// Crops all phases (and the mask) with one shared offset.
pub fn crop_sample(s: &MultiPhaseSample, size: [usize; 3], mode: CropMode, seed: u64) -> Result<MultiPhaseSample> {
    let off = crop_offsets(s.dims(), size, mode, seed)?;
    Ok(MultiPhaseSample {
        phases: s
            .phases
            .iter()
            .map(|p| PhaseVolume {
                voxels: crop_grid(&p.voxels, off, size),
                phase_name: p.phase_name.clone(),
                spacing: p.spacing,
            })
            .collect(),
        mask: s.mask.as_ref().map(|m| crop_grid(m, off, size)),
        ..s.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Flip probability along D, H, W.
    pub flip_prob: [f64; 3],
    /// Allowed quarter-turn counts in the H-W plane; odd counts are skipped when H != W.
    pub rotations: Vec<u8>,
    pub erase_prob: f64,
    pub erase_fraction_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: [0.5; 3],
            rotations: vec![0, 1, 2, 3],
            erase_prob: 0.25,
            erase_fraction_range: (0.02, 0.10),
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: [0.0; 3],
            rotations: vec![0],
            erase_prob: 0.0,
            erase_fraction_range: (0.02, 0.10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !self.flip_prob.iter().all(|&p| unit(p)) || !unit(self.erase_prob) {
            return Err(config_err!("augmentation probabilities must lie in [0, 1]"));
        }
        let (lo, hi) = self.erase_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(config_err!("erase fraction range ({lo}, {hi}) must satisfy 0 < min <= max < 1"));
        }
        Ok(())
    }
}

/// One spatial transform drawn for a whole sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialDraw {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
    /// `(offset, size)` of the zeroed cuboid.
    pub erase: Option<([usize; 3], [usize; 3])>,
}

impl SpatialDraw {
    pub fn sample(cfg: &AugmentationConfig, dims: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flips = cfg.flip_prob.map(|p| rng.random_bool(p));
        let allowed: Vec<u8> = cfg
            .rotations
            .iter()
            .map(|r| r % 4)
            .filter(|r| dims[1] == dims[2] || r % 2 == 0)
            .collect();
        let quarter_turns = allowed.choose(&mut rng).copied().unwrap_or(0);
        let erase = rng
            .random_bool(cfg.erase_prob)
            .then(|| erase_cuboid(&mut rng, dims, cfg.erase_fraction_range))
            .flatten();
        Self {
            flips,
            quarter_turns,
            erase,
        }
    }

    /// Applies flips then rotation. Erasing is separate because it follows normalization.
    pub fn apply_geometry(&self, a: &Array3<f32>) -> Array3<f32> {
        let mut v: ArrayView3<f32> = a.view();
        for (axis, &f) in self.flips.iter().enumerate() {
            if f {
                v.invert_axis(Axis(axis));
            }
        }
        let mut out = v.to_owned();
        for _ in 0..self.quarter_turns {
            out = rot90_hw(&out);
        }
        out
    }

    pub fn apply_erase(&self, a: &mut Array3<f32>) {
        if let Some((o, s)) = self.erase {
            a.slice_mut(s![o[0]..o[0] + s[0], o[1]..o[1] + s[1], o[2]..o[2] + s[2]])
                .fill(0.0);
        }
    }
}

/// `out[d, i, j] = in[d, j, W - 1 - i]`.
fn rot90_hw(a: &Array3<f32>) -> Array3<f32> {
    let mut v = a.view();
    v.invert_axis(Axis(2));
    v.permuted_axes([0, 2, 1]).as_standard_layout().into_owned()
}

/// Picks a cuboid whose voxel fraction lies inside `range`, if one exists.
fn erase_cuboid(rng: &mut ChaCha8Rng, dims: [usize; 3], range: (f64, f64)) -> Option<([usize; 3], [usize; 3])> {
    let total = dims.iter().product::<usize>() as f64;
    let fits = |sz: [usize; 3]| {
        let f = sz.iter().product::<usize>() as f64 / total;
        f >= range.0 && f <= range.1
    };
    let mut chosen = None;
    for _ in 0..64 {
        let target = rng.random_range(range.0..=range.1) * total;
        let d = rng.random_range(1..=dims[0]);
        let h_min = ((target / (d * dims[2]) as f64).ceil() as usize).clamp(1, dims[1]);
        let h = rng.random_range(h_min..=dims[1]);
        let w = ((target / (d * h) as f64).round() as usize).clamp(1, dims[2]);
        if fits([d, h, w]) {
            chosen = Some([d, h, w]);
            break;
        }
    }
    if chosen.is_none() {
        let mut all = Vec::new();
        for d in 1..=dims[0] {
            for h in 1..=dims[1] {
                for w in 1..=dims[2] {
                    if fits([d, h, w]) {
                        all.push([d, h, w]);
                    }
                }
            }
        }
        chosen = all.choose(rng).copied();
    }
    let size = chosen?;
    let off = [0, 1, 2].map(|i| rng.random_range(0..=dims[i] - size[i]));
    Some((off, size))
}

/// Draws one spatial transform and applies it to every phase and the mask.
///
/// Phases are expected to be normalized already, so erased voxels read as the mean.
pub fn augment_sample(s: &MultiPhaseSample, cfg: &AugmentationConfig, seed: u64) -> MultiPhaseSample {
    let draw = SpatialDraw::sample(cfg, s.dims(), seed);
    if draw.flips == [false; 3] && draw.quarter_turns == 0 && draw.erase.is_none() {
        return s.clone();
    }
    let phases = s
        .phases
        .iter()
        .map(|p| {
            let mut voxels = draw.apply_geometry(&p.voxels);
            draw.apply_erase(&mut voxels);
            PhaseVolume {
                voxels,
                phase_name: p.phase_name.clone(),
                spacing: p.spacing,
            }
        })
        .collect();
    MultiPhaseSample {
        phases,
        mask: s.mask.as_ref().map(|m| draw.apply_geometry(m)),
        ..s.clone()
    }
}

/// 2x2 average pooling in H and W, D kept. Requires even H and W.
pub fn low_resolution(a: &Array3<f32>) -> Result<Array3<f32>> {
    let [d, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("low-resolution pooling needs even H, W; got {h}x{w}")));
    }
    Ok(Array3::from_shape_fn((d, h / 2, w / 2), |(z, y, x)| {
        0.25 * (a[[z, 2 * y, 2 * x]] + a[[z, 2 * y + 1, 2 * x]] + a[[z, 2 * y, 2 * x + 1]] + a[[z, 2 * y + 1, 2 * x + 1]])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volforge::Split;
    use proptest::prelude::*;

    fn tagged(dims: [usize; 3], base: f32) -> Array3<f32> {
        Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(d, h, w)| {
            base + (d * 10_000 + h * 100 + w) as f32
        })
    }

    fn sample(dims: [usize; 3], n: usize) -> MultiPhaseSample {
        MultiPhaseSample {
            sample_id: "s".into(),
            phases: (0..n)
                .map(|p| PhaseVolume::new(tagged(dims, p as f32 * 1e6), format!("p{p}")).unwrap())
                .collect(),
            label: 0,
            split: Split::Train,
            mask: Some(tagged(dims, 0.0)),
        }
    }

    #[test]
    fn resize_constant_and_identity() {
        let v = PhaseVolume::new(Array3::from_elem((5, 9, 7), 7.0), "a").unwrap();
        let r = resize_volume(&v, [16, 128, 128]).unwrap();
        assert_eq!(r.dims(), [16, 128, 128]);
        assert!(r.voxels.iter().all(|&x| (x - 7.0).abs() < 1e-6));

        let t = PhaseVolume::new(tagged([2, 3, 4], 0.5), "a").unwrap();
        let same = resize_volume(&t, [2, 3, 4]).unwrap();
        assert!(same.voxels.iter().zip(t.voxels.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resize_ramp_matches_closed_form() {
        let w_in = 6;
        let v = PhaseVolume::new(Array3::from_shape_fn((1, 1, w_in), |(_, _, x)| x as f32), "a").unwrap();
        let r = resize_volume(&v, [1, 1, 2 * w_in]).unwrap();
        for j in 0..2 * w_in {
            // Half-pixel source coordinate, clamped at the borders.
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w_in - 1) as f64);
            assert!((r.voxels[[0, 0, j]] as f64 - src).abs() < 1e-5, "j={j}");
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let v = PhaseVolume::new(Array3::zeros((2, 2, 2)), "a").unwrap();
        assert!(resize_volume(&v, [0, 2, 2]).is_err());
    }

    #[test]
    fn center_crop_offsets() {
        assert_eq!(crop_offsets([16, 128, 128], [14, 112, 112], CropMode::Center, 0).unwrap(), [1, 8, 8]);
        assert!(crop_offsets([4, 4, 4], [5, 4, 4], CropMode::Center, 0).is_err());
    }

    #[test]
    fn random_crop_is_bounded_and_reproducible() {
        for seed in 0..50 {
            let o = crop_offsets([16, 128, 128], [14, 112, 112], CropMode::Random, seed).unwrap();
            assert!(o[0] <= 2 && o[1] <= 16 && o[2] <= 16);
            assert_eq!(o, crop_offsets([16, 128, 128], [14, 112, 112], CropMode::Random, seed).unwrap());
        }
    }

    #[test]
    fn crop_shares_offsets_across_phases() {
        let s = sample([6, 10, 10], 2);
        let c = crop_sample(&s, [4, 6, 6], CropMode::Random, 9).unwrap();
        let a = &c.phases[0].voxels;
        let b = &c.phases[1].voxels;
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (y - x - 1e6).abs() < 1.0));
        assert_eq!(c.mask.as_ref().unwrap(), a);
    }

    #[test]
    fn identity_config_is_noop() {
        let s = sample([4, 6, 6], 3);
        assert_eq!(augment_sample(&s, &AugmentationConfig::none(), 3), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let a = tagged([3, 4, 5], 0.0);
        let draw = SpatialDraw {
            flips: [false, false, true],
            quarter_turns: 0,
            erase: None,
        };
        assert_eq!(draw.apply_geometry(&draw.apply_geometry(&a)), a);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let a = tagged([2, 5, 5], 0.0);
        let mut r = a.clone();
        for _ in 0..4 {
            r = rot90_hw(&r);
        }
        assert_eq!(r, a);
        let once = rot90_hw(&a);
        assert_eq!(once[[1, 0, 0]], a[[1, 0, 4]]);
    }

    #[test]
    fn odd_turns_skipped_for_non_square_planes() {
        let cfg = AugmentationConfig {
            rotations: vec![1, 3],
            ..AugmentationConfig::none()
        };
        for seed in 0..20 {
            assert_eq!(SpatialDraw::sample(&cfg, [2, 4, 6], seed).quarter_turns, 0);
        }
    }

    #[test]
    fn low_resolution_pools_hw_only() {
        let a = Array3::from_shape_fn((3, 4, 4), |(d, h, w)| (d * 16 + h * 4 + w) as f32);
        let l = low_resolution(&a).unwrap();
        assert_eq!(l.shape(), &[3, 2, 2]);
        assert_eq!(l[[1, 0, 0]], (16.0 + 17.0 + 20.0 + 21.0) / 4.0);
        assert!(low_resolution(&Array3::zeros((1, 3, 4))).is_err());
    }

    proptest! {
        #[test]
        fn erase_fraction_within_range(seed in any::<u64>(), d in 2usize..8, h in 4usize..20, w in 4usize..20) {
            let cfg = AugmentationConfig { erase_prob: 1.0, ..AugmentationConfig::none() };
            let draw = SpatialDraw::sample(&cfg, [d, h, w], seed);
            if let Some((o, s)) = draw.erase {
                let f = s.iter().product::<usize>() as f64 / (d * h * w) as f64;
                prop_assert!((0.02..=0.10).contains(&f));
                prop_assert!((0..3).all(|i| o[i] + s[i] <= [d, h, w][i]));
                let mut a = Array3::from_elem((d, h, w), 1.0f32);
                draw.apply_erase(&mut a);
                let zeroed = a.iter().filter(|&&v| v == 0.0).count() as f64 / (d * h * w) as f64;
                prop_assert!((zeroed - f).abs() < 1e-12);
            }
        }

        #[test]
        fn phases_share_every_transform(seed in any::<u64>()) {
            let s = sample([4, 6, 6], 3);
            let cfg = AugmentationConfig { erase_prob: 0.0, ..AugmentationConfig::default() };
            let a = augment_sample(&s, &cfg, seed);
            for p in 1..3 {
                let off = p as f32 * 1e6;
                prop_assert!(a.phases[0].voxels.iter().zip(a.phases[p].voxels.iter()).all(|(x, y)| (y - x - off).abs() < 1.0));
            }
            prop_assert_eq!(a.mask.as_ref().unwrap(), &a.phases[0].voxels);
            prop_assert_eq!(&augment_sample(&s, &cfg, seed), &a);
        }
    }
}
