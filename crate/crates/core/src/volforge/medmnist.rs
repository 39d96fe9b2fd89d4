//! MedMNIST 3D `.npz` archives: `{train,val,test}_{images,labels}` arrays.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::Array3;

use super::dataset::Dataset;
use super::{MultiPhaseSample, PhaseVolume, Split};
use crate::error::{Error, Result};

/// Known collections and their class counts.
pub const KNOWN_COLLECTIONS: &[(&str, usize)] = &[
    ("nodulemnist3d", 2),
    ("organmnist3d", 11),
    ("adrenalmnist3d", 2),
    ("fracturemnist3d", 3),
    ("vesselmnist3d", 2),
    ("synapsemnist3d", 2),
];

/// A decoded `.npy` array, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    Some(rest)
}

/// Parses version 1-3 `.npy` bytes with C ordering and integer, bool or float dtype.
pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    let bad = |m: &str| Error::Archive(format!("npy: {m}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("bad magic"));
    }
    let (hlen, hstart) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(hstart..hstart + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not text"))?;
    let descr = header_field(header, "descr").ok_or_else(|| bad("missing descr"))?;
    let descr = descr.trim_start_matches(['\'', '"']);
    let descr = &descr[..descr.find(['\'', '"']).ok_or_else(|| bad("unterminated descr"))?];
    if header_field(header, "fortran_order").is_some_and(|v| v.starts_with("True")) {
        return Err(bad("fortran order is not supported"));
    }
    let shape_txt = header_field(header, "shape").ok_or_else(|| bad("missing shape"))?;
    let shape_txt = &shape_txt[1..shape_txt.find(')').ok_or_else(|| bad("bad shape"))?];
    let shape = shape_txt
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let payload = &bytes[hstart + hlen..];
    let (endian, code) = descr.split_at(1);
    if endian == ">" {
        return Err(bad("big-endian arrays are not supported"));
    }
    let width: usize = code[1..].parse().map_err(|_| bad("bad dtype"))?;
    if payload.len() < n * width {
        return Err(bad(&format!("payload holds {} bytes, need {}", payload.len(), n * width)));
    }
    let chunks = payload[..n * width].chunks_exact(width);
    let data: Vec<f64> = match (&code[..1], width) {
        ("u" | "b", 1) => chunks.map(|c| c[0] as f64).collect(),
        ("i", 1) => chunks.map(|c| c[0] as i8 as f64).collect(),
        ("u", 2) => chunks.map(|c| u16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        ("i", 2) => chunks.map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        ("u", 4) => chunks.map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        ("i", 4) => chunks.map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        ("u", 8) => chunks.map(|c| u64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        ("i", 8) => chunks.map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        ("f", 4) => chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        ("f", 8) => chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        _ => return Err(bad(&format!("unsupported dtype `{descr}`"))),
    };
    Ok(NpyArray { shape, data })
}

/// Class count for a collection, inferred from the archive file name.
pub fn known_num_classes(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_string_lossy().to_lowercase();
    KNOWN_COLLECTIONS
        .iter()
        .find(|(name, _)| stem.starts_with(name))
        .map(|&(_, k)| k)
}

/// Loads a MedMNIST 3D archive as single-phase samples with official splits.
///
/// Intensities are scaled to [0, 1]; z-scoring happens later in the pipeline.
pub fn load_medmnist3d(archive: impl AsRef<Path>) -> Result<Dataset> {
    let path = archive.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    let mut read = |name: &str| -> Result<NpyArray> {
        let mut entry = zip
            .by_name(&format!("{name}.npy"))
            .map_err(|_| Error::Archive(format!("{}: missing collection `{name}`", path.display())))?;
        let mut buf = Vec::new();
        entry
            .read_to_end(&mut buf)
            .map_err(|e| Error::Archive(format!("{name}: {e}")))?;
        parse_npy(&buf)
    };
    let mut parts = Vec::new();
    for (split, tag) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
        parts.push((split, tag, read(&format!("{tag}_images"))?, read(&format!("{tag}_labels"))?));
    }
    let max_label = parts
        .iter()
        .flat_map(|p| p.3.data.iter())
        .fold(0.0f64, |a, &b| a.max(b)) as usize;
    let k = known_num_classes(path).unwrap_or(max_label + 1).max(2);
    let mut samples = Vec::new();
    for (split, tag, images, labels) in parts {
        if images.shape.len() != 4 {
            return Err(Error::Archive(format!("{tag}_images has shape {:?}, expected (n, D, H, W)", images.shape)));
        }
        let [n, d, h, w] = [images.shape[0], images.shape[1], images.shape[2], images.shape[3]];
        if labels.data.len() != n {
            return Err(Error::Archive(format!("{tag}: {n} images but {} labels", labels.data.len())));
        }
        let vox = d * h * w;
        for i in 0..n {
            let label = labels.data[i];
            if label < 0.0 || label as usize >= k || label.fract() != 0.0 {
                return Err(Error::Dataset(format!("{tag}[{i}]: label {label} outside [0, {k})")));
            }
            let values: Vec<f32> = images.data[i * vox..(i + 1) * vox].iter().map(|&v| (v / 255.0) as f32).collect();
            let voxels = Array3::from_shape_vec((d, h, w), values).expect("size checked");
            samples.push(MultiPhaseSample {
                sample_id: format!("{tag}{i:05}"),
                phases: vec![PhaseVolume::new(voxels, "volume")?],
                label: label as usize,
                split,
                mask: None,
            });
        }
    }
    Dataset::in_memory((0..k).map(|c| c.to_string()).collect(), vec!["volume".into()], samples)
}
