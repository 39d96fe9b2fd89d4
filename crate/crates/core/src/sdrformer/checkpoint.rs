use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{SdrFormer, SdrFormerConfig};
use crate::autograd::Element;
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};

const FORMAT: &str = "sdrformer-checkpoint";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS_BLOB: &str = "params.bin";

/// Location of one little-endian row-major f32 tensor inside a blob file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: ParamKind,
    pub file: String,
    /// Byte offset into `file`.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: SdrFormerConfig,
    params: Vec<TensorEntry>,
}

/// Writes tensors back to back into `dir/file` and returns their entries.
pub fn write_tensors<'a>(
    dir: &Path,
    file: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a ArrayD<f32>, ParamKind)>,
) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, value, kind) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            dtype: "f32".into(),
            kind,
            file: file.to_string(),
            offset: bytes.len() as u64,
        });
        for v in value.as_standard_layout().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Reads the tensors listed in `entries`, checking every extent against the blob size.
pub fn read_tensors(dir: &Path, entries: &[TensorEntry]) -> Result<BTreeMap<String, (ArrayD<f32>, ParamKind)>> {
    let mut blobs: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
        }
        if !blobs.contains_key(e.file.as_str()) {
            let path = dir.join(&e.file);
            blobs.insert(&e.file, fs::read(&path).map_err(|err| Error::io(&path, err))?);
        }
        let blob = &blobs[e.file.as_str()];
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "corrupt checkpoint: tensor `{}` spans bytes {start}..{end} of a {}-byte blob `{}`",
                e.name,
                blob.len(),
                e.file
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("corrupt checkpoint: tensor `{}` has non-finite values", e.name)));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&e.shape), data).expect("length checked");
        if out.insert(e.name.clone(), (value, e.kind)).is_some() {
            return Err(Error::Checkpoint(format!("corrupt checkpoint: duplicate tensor `{}`", e.name)));
        }
    }
    Ok(out)
}

/// Model configuration plus every parameter and buffer, stored in f32.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: SdrFormerConfig,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_store<T: Element>(config: &SdrFormerConfig, store: &ParamStore<T>) -> Self {
        Self {
            config: config.clone(),
            params: store.cast(),
        }
    }

    /// Writes `dir/manifest.json` and `dir/params.bin`, creating `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = write_tensors(
            dir,
            PARAMS_BLOB,
            self.params.iter().map(|(n, p)| (n.as_str(), &p.value, p.kind)),
        )?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            params,
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads and checks that the stored tensors are exactly those the config implies.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint manifest {}: {e}", path.display())))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}` version {}",
                manifest.format, manifest.version
            )));
        }
        let mut params = ParamStore::new();
        for (name, (value, kind)) in read_tensors(dir, &manifest.params)? {
            params.insert(name, value, kind);
        }
        let ckpt = Self {
            config: manifest.config,
            params,
        };
        ckpt.check()?;
        Ok(ckpt)
    }

    /// Verifies names, shapes and kinds against a model built from the config.
    pub fn check(&self) -> Result<()> {
        let (_, reference) = SdrFormer::init::<f32>(&self.config, 0)?;
        for (name, p) in reference.iter() {
            let got = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("corrupt checkpoint: missing parameter `{name}`")))?;
            if got.value.shape() != p.value.shape() || got.kind != p.kind {
                return Err(Error::Checkpoint(format!(
                    "corrupt checkpoint: `{name}` is {:?} ({:?}), config implies {:?} ({:?})",
                    got.value.shape(),
                    got.kind,
                    p.value.shape(),
                    p.kind
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("corrupt checkpoint: unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// The model and its parameters in precision `T`.
    pub fn instantiate<T: Element>(&self) -> Result<(SdrFormer, ParamStore<T>)> {
        self.check()?;
        let (model, _) = SdrFormer::init::<f32>(&self.config, 0)?;
        Ok((model, self.params.cast()))
    }
}

/// Which parameters a transfer copied and which it initialized afresh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub from_phases: usize,
    pub to_phases: usize,
    pub from_classes: usize,
    pub to_classes: usize,
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
    /// Source parameters with no counterpart in the target model.
    pub dropped: Vec<String>,
}

impl SurgeryReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "phase-count surgery: {} -> {} phases, {} -> {} classes\ncopied: {}\nreinitialized: {}\ndropped: {}\n",
            self.from_phases,
            self.to_phases,
            self.from_classes,
            self.to_classes,
            self.copied.len(),
            self.reinitialized.len(),
            self.dropped.len()
        );
        for (tag, names) in [("copy", &self.copied), ("reinit", &self.reinitialized), ("drop", &self.dropped)] {
            for n in names {
                s.push_str(&format!("{tag} {n}\n"));
            }
        }
        s
    }
}

/// Phase fusion tensors whose shapes or meaning depend on the phase count.
fn depends_on_phase_count(name: &str) -> bool {
    name.starts_with("fusion.") && (name.contains(".apsm.") || name.contains(".w3.conv."))
}

/// Moves a checkpoint to another model config with the same backbone.
///
/// Backbone and BCIM parameters are copied bit-exactly. Phase-count dependent
/// fusion tensors are re-initialized when N changes, the head when K changes;
/// everything else with a matching name and shape is copied.
pub fn transfer(ckpt: &Checkpoint, target: &SdrFormerConfig, seed: u64) -> Result<(Checkpoint, SurgeryReport)> {
    ckpt.check()?;
    target.validate()?;
    let src = &ckpt.config;
    let mut a = src.backbone.clone();
    let mut b = target.backbone.clone();
    a.num_classes = None;
    b.num_classes = None;
    if a != b || src.bcim_enabled != target.bcim_enabled {
        return Err(Error::Config(
            "incompatible backbone config: transfer keeps the backbone and BCIM setting fixed".into(),
        ));
    }
    let n_changed = src.n_phases != target.n_phases;
    let k_changed = src.num_classes != target.num_classes;
    let (_, mut fresh) = SdrFormer::init::<f32>(target, seed)?;
    let mut copied = Vec::new();
    let mut reinitialized = Vec::new();
    let names: Vec<String> = fresh.names().cloned().collect();
    for name in names {
        let reinit = (n_changed && depends_on_phase_count(&name)) || (k_changed && name.starts_with("head."));
        match ckpt.params.get(&name) {
            Some(p) if !reinit && p.value.shape() == fresh.value(&name)?.shape() => {
                fresh.set_value(&name, p.value.clone())?;
                copied.push(name);
            }
            _ => reinitialized.push(name),
        }
    }
    let dropped = ckpt.params.names().filter(|n| fresh.get(n).is_none()).cloned().collect();
    let report = SurgeryReport {
        from_phases: src.n_phases,
        to_phases: target.n_phases,
        from_classes: src.num_classes,
        to_classes: target.num_classes,
        copied,
        reinitialized,
        dropped,
    };
    Ok((
        Checkpoint {
            config: target.clone(),
            params: fresh,
        },
        report,
    ))
}

/// [`transfer`] to the same config with `new_n` phases and optionally `new_k` classes.
pub fn adapt_phase_count(ckpt: &Checkpoint, new_n: usize, new_k: Option<usize>, seed: u64) -> Result<(Checkpoint, SurgeryReport)> {
    let mut target = ckpt.config.with_phases(new_n);
    if let Some(k) = new_k {
        target.num_classes = k;
    }
    transfer(ckpt, &target, seed)
}
