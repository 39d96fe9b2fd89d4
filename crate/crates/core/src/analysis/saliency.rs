use ndarray::{s, Array3, ArrayD, ArrayView4, Axis, IxDyn};

use crate::autograd::Var;
use crate::error::{config_err, Error, Result};
use crate::nn::{ParamStore, Session, Stream};
use crate::sdrformer::{stack_samples, SdrFormer};
use crate::volforge::{resize_grid, MultiPhaseSample};

/// Grad-CAM map of one phase, aligned to the input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume {
    /// In [0, 1]; the maximum is 1 unless the map is all zero.
    pub heat: Array3<f32>,
    pub target_class: usize,
    pub stream: Stream,
    /// 1-based stage index.
    pub stage: usize,
    pub phase: usize,
}

/// `relu(sum_c mean(grad_c) * act_c)` for one `(C, D, H, W)` feature map.
pub fn grad_cam_map(act: ArrayView4<'_, f64>, grad: ArrayView4<'_, f64>) -> Result<Array3<f64>> {
    if act.shape() != grad.shape() {
        return Err(config_err!("activation {:?} vs gradient {:?}", act.shape(), grad.shape()));
    }
    if grad.iter().chain(act.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Grad-CAM gradients".into()));
    }
    let sh = act.shape();
    let mut cam = Array3::<f64>::zeros((sh[1], sh[2], sh[3]));
    for (a, g) in act.outer_iter().zip(grad.outer_iter()) {
        let alpha = g.mean().unwrap_or(0.0);
        cam.scaled_add(alpha, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    Ok(cam)
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn max_normalize(a: &mut Array3<f32>) {
    let m = a.iter().cloned().fold(0.0f32, f32::max);
    if m > 0.0 {
        a.mapv_inplace(|v| (v / m).clamp(0.0, 1.0));
    } else {
        a.fill(0.0);
    }
}

fn target_seed(num_classes: usize, target: usize) -> ArrayD<f32> {
    let mut seed = ArrayD::zeros(IxDyn(&[1, num_classes]));
    seed[[0, target]] = 1.0;
    seed
}

/// Grad-CAM of `target_class` at the output of `stage` (1-based) in `stream`,
/// one volume per phase. `sample` must already be preprocessed.
pub fn gradcam3d(
    model: &SdrFormer,
    store: &ParamStore<f32>,
    sample: &MultiPhaseSample,
    target_class: usize,
    stream: Stream,
    stage: usize,
) -> Result<Vec<SaliencyVolume>> {
    let stages = model.cfg.backbone.num_stages();
    if stage == 0 || stage > stages {
        return Err(config_err!("stage {stage} out of range 1..={stages}"));
    }
    let key = match stream {
        Stream::High => format!("stage{stage}.high"),
        Stream::Low => format!("stage{stage}.low"),
        Stream::Merged => return Err(config_err!("Grad-CAM targets the high or low stream, not the merged one")),
    };
    if target_class >= model.cfg.num_classes {
        return Err(config_err!("target class {target_class} out of range for {} classes", model.cfg.num_classes));
    }
    let x = Var::leaf(stack_samples::<f32>(&[sample])?);
    let s = Session::eval(store);
    s.capture_features();
    let logits = model.forward(&s, &x)?;
    let feature = s.feature(&key).ok_or_else(|| config_err!("feature `{key}` was not recorded"))?;
    let grads = logits.backward_with(target_seed(model.cfg.num_classes, target_class));
    let g = grads.get_or_zeros(&feature).mapv(f64::from);
    let a = feature.value().mapv(f64::from);
    let dims = sample.dims();
    (0..model.cfg.n_phases)
        .map(|p| {
            let act = a.index_axis(Axis(0), p).into_dimensionality().map_err(|e| config_err!("feature map rank: {e}"))?;
            let grad = g.index_axis(Axis(0), p).into_dimensionality().map_err(|e| config_err!("feature map rank: {e}"))?;
            let cam = grad_cam_map(act, grad)?.mapv(|v| v as f32);
            let mut heat = resize_grid(&cam, dims);
            max_normalize(&mut heat);
            Ok(SaliencyVolume {
                heat,
                target_class,
                stream,
                stage,
                phase: p,
            })
        })
        .collect()
}

fn target_logits(model: &SdrFormer, store: &ParamStore<f32>, batch: &[MultiPhaseSample], target: usize) -> Result<Vec<f64>> {
    let refs: Vec<&MultiPhaseSample> = batch.iter().collect();
    let s = Session::eval(store);
    let logits = model.forward(&s, &Var::constant(stack_samples::<f32>(&refs)?))?;
    Ok(logits.value().index_axis(Axis(1), target).iter().map(|&v| f64::from(v)).collect())
}

/// Occlusion sensitivity: drop in the target-class logit (the quantity Grad-CAM
/// differentiates; probabilities of a confident model saturate) when a `cube`-sided
/// block is zeroed in every phase, placed every `stride` voxels. Each voxel gets
/// the mean drop of the blocks covering it.
pub fn occlusion_sensitivity(
    model: &SdrFormer,
    store: &ParamStore<f32>,
    sample: &MultiPhaseSample,
    target_class: usize,
    cube: usize,
    stride: usize,
) -> Result<Array3<f32>> {
    if cube == 0 || stride == 0 {
        return Err(config_err!("occluder size and stride must be positive"));
    }
    let dims = sample.dims();
    let starts = |n: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).step_by(stride).collect();
        v.retain(|&o| o < n);
        v
    };
    let mut origins = Vec::new();
    for z in starts(dims[0]) {
        for y in starts(dims[1]) {
            for x in starts(dims[2]) {
                origins.push([z, y, x]);
            }
        }
    }
    let base = target_logits(model, store, std::slice::from_ref(sample), target_class)?[0];
    let mut sum = Array3::<f64>::zeros(dims);
    let mut hits = Array3::<f64>::zeros(dims);
    for chunk in origins.chunks(8) {
        let batch: Vec<MultiPhaseSample> = chunk
            .iter()
            .map(|o| {
                let mut occ = sample.clone();
                for ph in &mut occ.phases {
                    ph.voxels
                        .slice_mut(s![o[0]..(o[0] + cube).min(dims[0]), o[1]..(o[1] + cube).min(dims[1]), o[2]..(o[2] + cube).min(dims[2])])
                        .fill(0.0);
                }
                occ
            })
            .collect();
        for (o, p) in chunk.iter().zip(target_logits(model, store, &batch, target_class)?) {
            let region = s![o[0]..(o[0] + cube).min(dims[0]), o[1]..(o[1] + cube).min(dims[1]), o[2]..(o[2] + cube).min(dims[2])];
            sum.slice_mut(region).mapv_inplace(|v| v + base - p);
            hits.slice_mut(region).mapv_inplace(|v| v + 1.0);
        }
    }
    Ok(ndarray::Zip::from(&sum).and(&hits).map_collect(|&s, &h| if h > 0.0 { (s / h) as f32 } else { 0.0 }))
}

/// Indices of the `frac` highest-valued voxels, ties broken by position.
fn top_set(a: &Array3<f32>, frac: f64) -> Vec<bool> {
    let n = a.len();
    let k = ((n as f64 * frac).round() as usize).clamp(1, n);
    let vals: Vec<f32> = a.iter().cloned().collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
    let mut keep = vec![false; n];
    for &i in &idx[..k] {
        keep[i] = true;
    }
    keep
}

/// Intersection over union of the top-`frac` voxel sets of two maps.
pub fn top_fraction_iou(a: &Array3<f32>, b: &Array3<f32>, frac: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(config_err!("maps {:?} and {:?} are not comparable", a.shape(), b.shape()));
    }
    let (ta, tb) = (top_set(a, frac), top_set(b, frac));
    let inter = ta.iter().zip(&tb).filter(|(x, y)| **x && **y).count();
    let union = ta.iter().zip(&tb).filter(|(x, y)| **x || **y).count();
    Ok(inter as f64 / union as f64)
}

/// Mean heat inside the mask over mean heat outside; `None` if either side is empty
/// or the outside mean is zero.
pub fn mask_heat_ratio(heat: &Array3<f32>, mask: &Array3<f32>) -> Option<f64> {
    if heat.shape() != mask.shape() {
        return None;
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&h, &m) in heat.iter().zip(mask.iter()) {
        if m > 0.5 {
            si += f64::from(h);
            ni += 1;
        } else {
            so += f64::from(h);
            no += 1;
        }
    }
    if ni == 0 || no == 0 || so == 0.0 {
        return None;
    }
    Some((si / ni as f64) / (so / no as f64))
}
