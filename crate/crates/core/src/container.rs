//! COBP model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"COBP"  u32 version  u64 manifest_len  manifest (UTF-8 JSON)
//! u32 array_count
//! per array: u32 name_len  name  u64 offset  u64 length     (offset/length in f32 elements)
//! blob: f32 values
//! ```
//!
//! The manifest names the arrays each layer uses. Rotation-plan matrices, when
//! present, are stored at `f32` like everything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cob::{LayerRotation, RotationBlock, RotationPlan};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{Layer, Model, SubspaceSplit, TsraParams};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"COBP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Dense { weight: String, bias: String },
    Conv2d { weight: String, bias: String },
    AvgPool2,
    GlobalAvgPool,
    RmsNorm,
    Relu,
    Radial,
    Tsra { dim: usize, split: usize, params: TsraParams },
}

#[derive(Serialize, Deserialize)]
struct BlockSpec {
    start: usize,
    end: usize,
    q: String,
    eigenvalues: String,
}

#[derive(Serialize, Deserialize)]
struct RotationSpec {
    layer: usize,
    split: Option<[usize; 2]>,
    blocks: Vec<BlockSpec>,
}

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    arrays: Vec<ArraySpec>,
    #[serde(default)]
    rotation: Option<Vec<RotationSpec>>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

/// A model plus free-form provenance and an optional rotation plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub model: Model,
    pub provenance: BTreeMap<String, String>,
    pub rotation: Option<RotationPlan>,
}

struct ArrayWriter {
    specs: Vec<ArraySpec>,
    data: Vec<Vec<f32>>,
}

impl ArrayWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> String {
        self.specs.push(ArraySpec {
            name: name.clone(),
            shape,
        });
        self.data.push(data);
        name
    }
}

impl ModelContainer {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            provenance: BTreeMap::new(),
            rotation: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = ArrayWriter {
            specs: Vec::new(),
            data: Vec::new(),
        };
        let mut layers = Vec::with_capacity(self.model.layers().len());
        for (i, layer) in self.model.layers().iter().enumerate() {
            layers.push(match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { kernel: weight, bias } => {
                    let w = arrays.push(format!("layer{i}.weight"), weight.shape().to_vec(), weight.data().to_vec());
                    let b = arrays.push(format!("layer{i}.bias"), bias.shape().to_vec(), bias.data().to_vec());
                    if matches!(layer, Layer::Dense { .. }) {
                        LayerSpec::Dense { weight: w, bias: b }
                    } else {
                        LayerSpec::Conv2d { weight: w, bias: b }
                    }
                }
                Layer::AvgPool2 => LayerSpec::AvgPool2,
                Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
                Layer::RmsNorm => LayerSpec::RmsNorm,
                Layer::Relu => LayerSpec::Relu,
                Layer::Radial => LayerSpec::Radial,
                Layer::Tsra { split, params } => LayerSpec::Tsra {
                    dim: split.dim(),
                    split: split.split(),
                    params: *params,
                },
            });
        }
        let rotation = self.rotation.as_ref().map(|plan| {
            plan.layers
                .iter()
                .map(|lr| RotationSpec {
                    layer: lr.layer,
                    split: lr.split.map(|s| [s.dim(), s.split()]),
                    blocks: lr
                        .blocks
                        .iter()
                        .enumerate()
                        .map(|(j, b)| {
                            let n = b.q.rows();
                            BlockSpec {
                                start: b.range.start,
                                end: b.range.end,
                                q: arrays.push(format!("rotation{}.{j}.q", lr.layer), vec![n, n], b.q.to_f32()),
                                eigenvalues: arrays.push(
                                    format!("rotation{}.{j}.eigenvalues", lr.layer),
                                    vec![b.eigenvalues.len()],
                                    b.eigenvalues.iter().map(|&v| v as f32).collect(),
                                ),
                            }
                        })
                        .collect(),
                })
                .collect()
        });
        let manifest = Manifest {
            input_shape: self.model.input_shape().to_vec(),
            layers,
            arrays: arrays.specs,
            rotation,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::format(format!("manifest: {e}")))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(manifest.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (spec, data) in manifest.arrays.iter().zip(&arrays.data) {
            out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            offset += data.len() as u64;
        }
        for data in &arrays.data {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("magic: not a COBP file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(format!("version: file has {version}, reader supports {VERSION}")));
        }
        let mlen = r.u64("manifest length")? as usize;
        let manifest: Manifest =
            serde_json::from_slice(r.take(mlen, "manifest")?).map_err(|e| Error::format(format!("manifest: {e}")))?;
        let count = r.u32("array count")? as usize;
        if count != manifest.arrays.len() {
            return Err(Error::format(format!(
                "array table: {count} entries, manifest lists {}",
                manifest.arrays.len()
            )));
        }
        let mut table = Vec::with_capacity(count);
        for spec in &manifest.arrays {
            let nlen = r.u32("array name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "array name")?)
                .map_err(|_| Error::format("array name: not UTF-8"))?
                .to_string();
            if name != spec.name {
                return Err(Error::format(format!("array table: entry {name:?}, manifest expects {:?}", spec.name)));
            }
            let offset = r.u64("array offset")? as usize;
            let len = r.u64("array length")? as usize;
            if len != numel(&spec.shape) {
                return Err(Error::format(format!(
                    "array {name}: length {len} does not match shape {:?}",
                    spec.shape
                )));
            }
            table.push((offset, len));
        }
        let blob = &bytes[r.pos..];
        let total = blob.len() / 4;
        let mut arrays: BTreeMap<&str, Tensor> = BTreeMap::new();
        for (spec, &(offset, len)) in manifest.arrays.iter().zip(&table) {
            if offset.checked_add(len).map_or(true, |end| end > total) {
                return Err(Error::format(format!(
                    "array {}: range {offset}+{len} exceeds blob of {total} values",
                    spec.name
                )));
            }
            let data: Vec<f32> = blob[offset * 4..(offset + len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(spec.shape.clone(), data).map_err(|e| Error::format(format!("array {}: {e}", spec.name)))?;
            arrays.insert(&spec.name, t);
        }
        let used = table.iter().map(|&(o, l)| o + l).max().unwrap_or(0);
        if blob.len() != used * 4 {
            return Err(Error::format(format!("blob: {} bytes, arrays cover {}", blob.len(), used * 4)));
        }
        let get = |name: &str| {
            arrays
                .get(name)
                .cloned()
                .ok_or_else(|| Error::format(format!("manifest references missing array {name:?}")))
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for spec in &manifest.layers {
            layers.push(match spec {
                LayerSpec::Dense { weight, bias } => Layer::Dense {
                    weight: get(weight)?,
                    bias: get(bias)?,
                },
                LayerSpec::Conv2d { weight, bias } => Layer::Conv2d {
                    kernel: get(weight)?,
                    bias: get(bias)?,
                },
                LayerSpec::AvgPool2 => Layer::AvgPool2,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::RmsNorm => Layer::RmsNorm,
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Radial => Layer::Radial,
                LayerSpec::Tsra { dim, split, params } => Layer::Tsra {
                    split: SubspaceSplit::new(*dim, *split).map_err(|e| Error::format(format!("tsra split: {e}")))?,
                    params: *params,
                },
            });
        }
        let model = Model::new(manifest.input_shape.clone(), layers).map_err(|e| Error::format(format!("layers: {e}")))?;
        let rotation = match &manifest.rotation {
            None => None,
            Some(specs) => {
                let mut lrs = Vec::with_capacity(specs.len());
                for s in specs {
                    let split = match s.split {
                        Some([d, k]) => Some(SubspaceSplit::new(d, k).map_err(|e| Error::format(format!("rotation split: {e}")))?),
                        None => None,
                    };
                    let mut blocks = Vec::with_capacity(s.blocks.len());
                    for b in &s.blocks {
                        let q = get(&b.q)?;
                        let n = b.end.checked_sub(b.start).ok_or_else(|| Error::format("rotation block: end < start"))?;
                        if q.shape() != [n, n] {
                            return Err(Error::format(format!("rotation block {}: shape {:?}", b.q, q.shape())));
                        }
                        blocks.push(RotationBlock {
                            range: b.start..b.end,
                            q: Mat::from_f32(n, n, q.data())?,
                            eigenvalues: get(&b.eigenvalues)?.data().iter().map(|&v| v as f64).collect(),
                        });
                    }
                    lrs.push(LayerRotation {
                        layer: s.layer,
                        split,
                        blocks,
                    });
                }
                Some(RotationPlan { layers: lrs })
            }
        };
        Ok(Self {
            model,
            provenance: manifest.provenance,
            rotation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!(
                "{field}: truncated ({n} bytes wanted at offset {}, file has {})",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    ModelContainer::new(m.clone()).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(ModelContainer::load(path)?.model)
}
