//! Change-of-basis importance concentration.
//!
//! For every prunable layer, activations captured on sample inputs are
//! decomposed by un-centered PCA separately inside each TSRA subspace. The
//! resulting block-orthogonal `R = diag(R_U, R_V)` is folded into the producing
//! layer (`W <- R W`, `b <- R b`) and its transpose into the consuming layer
//! (`W_next <- W_next R^T`). Because TSRA, RMSNorm and average pooling all commute
//! with such `R`, the network function is unchanged and no parameters are added.

use std::ops::Range;

use log::warn;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, Mat};
use crate::nn::{Layer, Model, SubspaceSplit};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest tolerated `max |R^T R - I|` for a rotation to be merged.
pub const ORTHOGONALITY_TOL: f64 = 1e-4;

/// Post-activation values of one prunable layer as a `dim x samples` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCapture {
    /// Index of the producing dense/conv layer in the model.
    pub layer: usize,
    pub dim: usize,
    pub samples: usize,
    /// Row-major `dim x samples`.
    pub data: Vec<f32>,
    pub split: Option<SubspaceSplit>,
}

impl ActivationCapture {
    pub fn new(layer: usize, dim: usize, data: Vec<f32>, split: Option<SubspaceSplit>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::dim(format!("capture of {} values is not {dim} rows", data.len())));
        }
        if let Some(s) = split {
            if s.dim() != dim {
                return Err(Error::contract(format!(
                    "capture split covers {} dims but layer {layer} has {dim}",
                    s.dim()
                )));
            }
        }
        Ok(Self {
            layer,
            dim,
            samples: data.len() / dim,
            data,
            split,
        })
    }

    /// Builds a capture from an `[N, C]` or `[N, C, H, W]` activation tensor.
    pub fn from_activations(layer: usize, act: &Tensor, split: Option<SubspaceSplit>) -> Result<Self> {
        let s = act.shape();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let cols = n * inner;
        let mut data = vec![0.0f32; c * cols];
        for b in 0..n {
            for ch in 0..c {
                let src = &act.data()[(b * c + ch) * inner..][..inner];
                data[ch * cols + b * inner..][..inner].copy_from_slice(src);
            }
        }
        Self::new(layer, c, data, split)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.samples..(i + 1) * self.samples]
    }

    /// Concatenates the samples of `other` (same layer) after ours.
    pub fn append(&mut self, other: ActivationCapture) -> Result<()> {
        if other.layer != self.layer || other.dim != self.dim {
            return Err(Error::contract("appending captures of different layers"));
        }
        let total = self.samples + other.samples;
        let mut data = Vec::with_capacity(self.dim * total);
        for i in 0..self.dim {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        self.data = data;
        self.samples = total;
        Ok(())
    }

    /// Coordinate ranges that are rotated/pruned independently.
    pub fn subspaces(&self) -> Vec<Range<usize>> {
        subspace_ranges(self.dim, self.split)
    }

    /// Rows `range` as a standalone matrix.
    pub fn block(&self, range: Range<usize>) -> Mat {
        Mat::from_f32(range.len(), self.samples, &self.data[range.start * self.samples..range.end * self.samples])
            .expect("block within capture")
    }
}

pub(crate) fn subspace_ranges(dim: usize, split: Option<SubspaceSplit>) -> Vec<Range<usize>> {
    match split {
        Some(s) => vec![s.u_range(), s.v_range()],
        None => vec![0..dim],
    }
}

/// Result of un-centered PCA.
#[derive(Clone, Debug)]
pub struct Pca {
    /// Rows are principal axes, ordered by descending eigenvalue.
    pub q: Mat,
    pub eigenvalues: Vec<f64>,
}

/// Un-centered PCA of a `d x n` matrix: eigendecomposition of `(1/n) X X^T`
/// without mean subtraction. `Q X` has non-increasing row norms.
pub fn uncentered_pca(x: &Mat) -> Result<Pca> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::dim("uncentered_pca needs a non-empty matrix"));
    }
    if let Some(bad) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite activation {bad}")));
    }
    let mut cov = x.gram();
    let inv_n = 1.0 / x.cols() as f64;
    for i in 0..cov.rows() {
        for j in 0..cov.cols() {
            cov[(i, j)] *= inv_n;
        }
    }
    let eig = sym_eigen(&cov)?;
    Ok(Pca {
        q: eig.vectors,
        eigenvalues: eig.values.into_iter().map(|v| v.max(0.0)).collect(),
    })
}

/// One orthogonal block of a layer's rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationBlock {
    pub range: Range<usize>,
    pub q: Mat,
    pub eigenvalues: Vec<f64>,
}

/// Block-orthogonal change of basis for one prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRotation {
    pub layer: usize,
    pub split: Option<SubspaceSplit>,
    pub blocks: Vec<RotationBlock>,
}

impl LayerRotation {
    pub fn dim(&self) -> usize {
        self.blocks.last().map(|b| b.range.end).unwrap_or(0)
    }

    pub fn r_u(&self) -> &Mat {
        &self.blocks[0].q
    }

    pub fn r_v(&self) -> Option<&Mat> {
        self.blocks.get(1).map(|b| &b.q)
    }

    /// The full `d x d` matrix `diag(R_U, R_V)`.
    pub fn matrix(&self) -> Mat {
        let qs: Vec<&Mat> = self.blocks.iter().map(|b| &b.q).collect();
        Mat::block_diag(&qs)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RotationPlan {
    pub layers: Vec<LayerRotation>,
}

/// Runs un-centered PCA separately on each subspace block of every capture.
pub fn build_rotation_plan(captures: &[ActivationCapture]) -> Result<RotationPlan> {
    let mut layers = Vec::with_capacity(captures.len());
    for cap in captures {
        if let Some(s) = cap.split {
            if s.dim() != cap.dim {
                return Err(Error::contract(format!(
                    "layer {}: split dim {} vs capture dim {}",
                    cap.layer,
                    s.dim(),
                    cap.dim
                )));
            }
        }
        if cap.samples < cap.dim {
            warn!(
                "layer {}: only {} capture samples for {} dims; trailing axes are arbitrary",
                cap.layer, cap.samples, cap.dim
            );
        }
        let blocks = cap
            .subspaces()
            .into_iter()
            .map(|range| {
                let pca = uncentered_pca(&cap.block(range.clone()))?;
                Ok(RotationBlock {
                    range,
                    q: pca.q,
                    eigenvalues: pca.eigenvalues,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerRotation {
            layer: cap.layer,
            split: cap.split,
            blocks,
        });
    }
    Ok(RotationPlan { layers })
}

/// Left-multiplies the output rows of a dense/conv layer by `r`.
fn rotate_outputs(layer: &mut Layer, r: &Mat) {
    let (w, b) = layer.params_mut().expect("linear layer");
    let d = w.shape()[0];
    let row_len = w.len() / d;
    let old = w.data().to_vec();
    let out = w.data_mut();
    for i in 0..d {
        let dst = &mut out[i * row_len..(i + 1) * row_len];
        let mut acc = vec![0.0f64; row_len];
        for j in 0..d {
            let rij = r[(i, j)];
            if rij == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(&old[j * row_len..(j + 1) * row_len]) {
                *a += rij * v as f64;
            }
        }
        for (o, a) in dst.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    let old_b = b.data().to_vec();
    for (i, o) in b.data_mut().iter_mut().enumerate() {
        *o = (0..d).map(|j| r[(i, j)] * old_b[j] as f64).sum::<f64>() as f32;
    }
}

/// Right-multiplies the input-channel axis of a dense/conv layer by `r^T`.
fn rotate_inputs(layer: &mut Layer, r: &Mat) {
    let (w, _) = layer.params_mut().expect("linear layer");
    let s = w.shape().to_vec();
    let (out, d) = (s[0], s[1]);
    let taps: usize = s[2..].iter().product();
    let old = w.data().to_vec();
    let data = w.data_mut();
    for o in 0..out {
        for c in 0..d {
            for t in 0..taps {
                let mut acc = 0.0f64;
                for c2 in 0..d {
                    acc += old[(o * d + c2) * taps + t] as f64 * r[(c, c2)];
                }
                data[(o * d + c) * taps + t] = acc as f32;
            }
        }
    }
}

fn check_block_structure(r: &Mat, split: Option<SubspaceSplit>) -> Result<()> {
    if let Some(s) = split {
        let k = s.split();
        for i in 0..r.rows() {
            for j in 0..r.cols() {
                if (i < k) != (j < k) && r[(i, j)] != 0.0 {
                    return Err(Error::contract(format!(
                        "rotation mixes TSRA subspaces at ({i}, {j}); it must be diag(R_U, R_V)"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Folds `r` into the prunable layer whose dense/conv index is `layer`.
pub fn merge_rotation(m: &Model, layer: usize, r: &Mat) -> Result<Model> {
    let mut out = m.clone();
    merge_rotation_in_place(&mut out, layer, r)?;
    Ok(out)
}

fn merge_rotation_in_place(m: &mut Model, layer: usize, r: &Mat) -> Result<()> {
    let Some(p) = m.prunable_layers().into_iter().find(|p| p.linear == layer) else {
        let kind = m.layers().get(layer).map(Layer::kind).unwrap_or("out of range");
        return Err(Error::contract(format!(
            "layer {layer} ({kind}) is not followed by an activation and a rotation-commuting path to a successor"
        )));
    };
    match &m.layers()[p.activation] {
        Layer::Tsra { .. } | Layer::Radial => {}
        other => {
            return Err(Error::contract(format!(
                "activation {} after layer {layer} does not commute with rotations",
                other.kind()
            )))
        }
    }
    if r.rows() != p.width || r.cols() != p.width {
        return Err(Error::dim(format!(
            "rotation is {}x{} but layer {layer} has width {}",
            r.rows(),
            r.cols(),
            p.width
        )));
    }
    let defect = r.orthogonality_defect();
    if !(defect < ORTHOGONALITY_TOL) {
        return Err(Error::contract(format!(
            "rotation for layer {layer} is not orthogonal (max |R^T R - I| = {defect:.3e})"
        )));
    }
    check_block_structure(r, p.split)?;
    let layers = m.layers_mut();
    rotate_outputs(&mut layers[p.linear], r);
    rotate_inputs(&mut layers[p.successor], r);
    Ok(())
}

/// Merges every layer rotation of `plan` into a copy of `m`.
pub fn merge_plan(m: &Model, plan: &RotationPlan) -> Result<Model> {
    let mut out = m.clone();
    for lr in &plan.layers {
        merge_rotation_in_place(&mut out, lr.layer, &lr.matrix())?;
    }
    Ok(out)
}

/// Picks `n` samples of `data` without replacement (all of them, in order, when
/// `n >= N`).
pub fn select_samples(data: &Tensor, n: usize, seed: u64) -> Result<Tensor> {
    let total = data.shape()[0];
    if n >= total {
        return Ok(data.clone());
    }
    let mut idx: Vec<usize> = (0..total).collect();
    Rng::new(seed).shuffle(&mut idx);
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    let per = data.len() / total;
    let mut out = Vec::with_capacity(n * per);
    for i in chosen {
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = n;
    Tensor::new(shape, out)
}

/// Captures activations once on `n_capture` samples of `data`, builds the
/// rotation plan and merges it. The returned model is forward-equivalent to `m`.
pub fn apply_cob(m: &Model, data: &Tensor, n_capture: usize, seed: u64) -> Result<(Model, RotationPlan)> {
    let batch = select_samples(data, n_capture, seed)?;
    let prunable = m.prunable_layers();
    if let Some(max_width) = prunable.iter().map(|p| p.width).max() {
        if batch.shape()[0] < max_width {
            warn!(
                "apply_cob: {} capture samples for a widest layer of {max_width}",
                batch.shape()[0]
            );
        }
    }
    let captures = m.capture(&batch, 64)?;
    let plan = build_rotation_plan(&captures)?;
    let rotated = merge_plan(m, &plan)?;
    Ok((rotated, plan))
}
