//! Sequential model container.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cob::ActivationCapture;
use crate::error::{Error, Result};
use crate::nn::activation::{SubspaceSplit, TsraParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `weight` is `out x in`, `bias` is `out`.
    Dense { weight: Tensor, bias: Tensor },
    /// `kernel` is `out x in x 3 x 3`.
    Conv2d { kernel: Tensor, bias: Tensor },
    AvgPool2,
    GlobalAvgPool,
    RmsNorm,
    Relu,
    Radial,
    Tsra {
        split: SubspaceSplit,
        params: TsraParams,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool2 => "avgpool2",
            Layer::GlobalAvgPool => "global_avgpool",
            Layer::RmsNorm => "rmsnorm",
            Layer::Relu => "relu",
            Layer::Radial => "radial",
            Layer::Tsra { .. } => "tsra",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, Layer::Relu | Layer::Radial | Layer::Tsra { .. })
    }

    /// Layers that commute with an orthogonal transform of the channel axis.
    pub fn commutes_with_channel_rotation(&self) -> bool {
        matches!(self, Layer::AvgPool2 | Layer::GlobalAvgPool | Layer::RmsNorm)
    }

    /// `(weight, bias)` of a linear layer.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Dense { weight, bias } => Some((weight, bias)),
            Layer::Conv2d { kernel, bias } => Some((kernel, bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Dense { weight, bias } => Some((weight, bias)),
            Layer::Conv2d { kernel, bias } => Some((kernel, bias)),
            _ => None,
        }
    }

    /// Output channel / feature count of a linear layer.
    pub fn out_width(&self) -> Option<usize> {
        self.params().map(|(w, _)| w.shape()[0])
    }

    /// Input channel / feature count of a linear layer.
    pub fn in_width(&self) -> Option<usize> {
        self.params().map(|(w, _)| w.shape()[1])
    }
}

/// Activation used by the model constructors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActivationKind {
    Relu,
    Radial,
    Tsra(TsraParams),
}

/// A linear layer whose activation output may be rotated and pruned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrunableLayer {
    /// Index of the dense/conv layer producing the dimensions.
    pub linear: usize,
    /// Index of the activation layer whose output is scored.
    pub activation: usize,
    /// Index of the next dense/conv layer, which consumes the dimensions.
    pub successor: usize,
    pub width: usize,
    /// Present when the activation is a TSRA.
    pub split: Option<SubspaceSplit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Forward output with optional activation captures.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub captures: Vec<ActivationCapture>,
}

/// Handles produced by [`Model::record`].
#[derive(Debug)]
pub struct Recorded {
    pub logits: Var,
    /// Weight then bias for every linear layer, in layer order.
    pub params: Vec<Var>,
    /// `(layer index, node)` of every layer output.
    pub outputs: Vec<(usize, Var)>,
}

impl Model {
    /// Validates shapes by propagating a per-sample input shape through every layer.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let m = Self {
            input_shape,
            layers,
        };
        m.output_shape()?;
        if let Some(last) = m.layers.iter().rposition(Layer::is_linear) {
            if m.layers[last..].iter().any(|l| matches!(l, Layer::Tsra { .. })) {
                return Err(Error::contract("classifier head may not be followed by a TSRA"));
            }
        }
        Ok(m)
    }

    /// Zero-depth identity model.
    pub fn identity(input_shape: Vec<usize>) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |why: &str| Error::dim(format!("layer {i} ({}): {why}, input {shape:?}", layer.kind()));
            shape = match layer {
                Layer::Dense { weight, bias } => {
                    let fan_in: usize = shape.iter().product();
                    let ws = weight.shape();
                    if ws.len() != 2 || ws[1] != fan_in || bias.shape() != [ws[0]] {
                        return Err(bad(&format!("weight {ws:?} / bias {:?}", bias.shape())));
                    }
                    vec![ws[0]]
                }
                Layer::Conv2d { kernel, bias } => {
                    let ks = kernel.shape();
                    if shape.len() != 3 || ks.len() != 4 || ks[1] != shape[0] || ks[2..] != [3, 3] || bias.shape() != [ks[0]] {
                        return Err(bad(&format!("kernel {ks:?} / bias {:?}", bias.shape())));
                    }
                    vec![ks[0], shape[1], shape[2]]
                }
                Layer::AvgPool2 => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(bad("avgpool2 needs C x H x W with even H, W"));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                Layer::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad("global_avgpool needs C x H x W"));
                    }
                    vec![shape[0]]
                }
                Layer::Tsra { split, params } => {
                    params.validate()?;
                    if shape[0] != split.dim() {
                        return Err(bad(&format!("split expects {} channels", split.dim())));
                    }
                    shape
                }
                Layer::RmsNorm | Layer::Relu | Layer::Radial => shape,
            };
        }
        Ok(shape)
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().map(|s| s.iter().product()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Layers whose activation output can be rotated/pruned. The classifier head
    /// never qualifies because it has no successor.
    pub fn prunable_layers(&self) -> Vec<PrunableLayer> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(width) = layer.out_width() else { continue };
            let mut j = i + 1;
            while j < self.layers.len() && self.layers[j].commutes_with_channel_rotation() {
                j += 1;
            }
            if j >= self.layers.len() || !self.layers[j].is_activation() {
                continue;
            }
            let mut s = j + 1;
            while s < self.layers.len() && self.layers[s].commutes_with_channel_rotation() {
                s += 1;
            }
            if s >= self.layers.len() || !self.layers[s].is_linear() {
                continue;
            }
            let split = match &self.layers[j] {
                Layer::Tsra { split, .. } => Some(*split),
                _ => None,
            };
            out.push(PrunableLayer {
                linear: i,
                activation: j,
                successor: s,
                width,
                split,
            });
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "model expects N x {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass of a batch on `tape`. Parameter leaves are copies
    /// and carry `requires_grad` when `trainable`.
    pub fn record(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<Recorded> {
        self.check_input(tape.value(input))?;
        let mut h = input;
        let mut params = Vec::new();
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { kernel: weight, bias } => {
                    let mut w = weight.clone();
                    let mut b = bias.clone();
                    w.set_requires_grad(trainable);
                    b.set_requires_grad(trainable);
                    let (w, b) = (tape.leaf(w), tape.leaf(b));
                    params.extend([w, b]);
                    if matches!(layer, Layer::Dense { .. }) {
                        tape.linear(h, w, b)?
                    } else {
                        tape.conv2d(h, w, b)?
                    }
                }
                Layer::AvgPool2 => tape.avgpool2(h)?,
                Layer::GlobalAvgPool => tape.global_avgpool(h)?,
                Layer::RmsNorm => tape.rmsnorm(h)?,
                Layer::Relu => tape.relu(h)?,
                Layer::Radial => tape.radial(h)?,
                Layer::Tsra { split, params } => tape.tsra(h, *split, *params)?,
            };
            outputs.push((i, h));
        }
        Ok(Recorded {
            logits: h,
            params,
            outputs,
        })
    }

    /// Logits for a batch `N x input_shape`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_capture(x, false)?.logits)
    }

    /// Forward pass that optionally records the post-activation output of every
    /// prunable layer, with spatial positions flattened into extra samples.
    pub fn forward_with_capture(&self, x: &Tensor, capture: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        if self.layers.is_empty() {
            return Ok(ForwardOutput {
                logits: x.clone(),
                captures: Vec::new(),
            });
        }
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let rec = self.record(&mut tape, input, false)?;
        let captures = if capture {
            self.prunable_layers()
                .iter()
                .map(|p| {
                    let v = rec.outputs[p.activation].1;
                    ActivationCapture::from_activations(p.linear, tape.value(v), p.split)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let logits = tape.value(rec.logits).clone();
        Ok(ForwardOutput { logits, captures })
    }

    /// Logits for a large batch, evaluated in chunks of `batch` samples.
    pub fn forward_batched(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut data = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            data.extend_from_slice(self.forward(&x.batch_slice(start, end)?)?.data());
            start = end;
        }
        let k = data.len() / n;
        Tensor::new(vec![n, k], data)
    }

    /// Captures every prunable layer over `x`, batching the forward passes.
    pub fn capture(&self, x: &Tensor, batch: usize) -> Result<Vec<ActivationCapture>> {
        let n = x.shape()[0];
        let mut merged: Vec<ActivationCapture> = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let out = self.forward_with_capture(&x.batch_slice(start, end)?, true)?;
            if merged.is_empty() {
                merged = out.captures;
            } else {
                for (m, c) in merged.iter_mut().zip(out.captures) {
                    m.append(c)?;
                }
            }
            start = end;
        }
        Ok(merged)
    }
}

/// Channel widths of the mini-VGG conv stages and the classifier's hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiniVggWidths {
    pub stages: [usize; 3],
    pub hidden: usize,
}

impl Default for MiniVggWidths {
    fn default() -> Self {
        Self {
            stages: [16, 32, 64],
            hidden: 64,
        }
    }
}

/// Which network variant to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// ReLU activations with Kaiming-uniform weights and zero biases.
    ReluControl,
    /// TSRA activations with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
    Tsra,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::ReluControl => "relu_control",
            Preset::Tsra => "tsra",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu_control" | "relu" => Ok(Preset::ReluControl),
            "tsra" => Ok(Preset::Tsra),
            other => Err(Error::config(format!("unknown model preset {other:?}"))),
        }
    }

    fn activation(&self, width: usize) -> Result<Layer> {
        Ok(match self {
            Preset::ReluControl => Layer::Relu,
            Preset::Tsra => Layer::Tsra {
                split: SubspaceSplit::halves(width)?,
                params: TsraParams::default(),
            },
        })
    }
}

fn init_linear(preset: Preset, out: usize, fan_in: usize, weight_shape: Vec<usize>, rng: &mut Rng) -> (Tensor, Tensor) {
    let n: usize = weight_shape.iter().product();
    let (w, b) = match preset {
        Preset::ReluControl => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (rng.uniform_vec(n, bound), vec![0.0; out])
        }
        Preset::Tsra => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (rng.uniform_vec(n, bound), rng.uniform_vec(out, bound))
        }
    };
    (
        Tensor::new(weight_shape, w).expect("shape"),
        Tensor::new(vec![out], b).expect("shape"),
    )
}

/// Desk-scale VGG: three conv stages of two 3x3 convs (each conv followed by
/// RMSNorm and the activation), average pooling between stages, global average
/// pooling, then `dense(hidden) -> activation -> dense(num_classes)`.
pub fn mini_vgg(
    preset: Preset,
    input_shape: [usize; 3],
    num_classes: usize,
    widths: MiniVggWidths,
    seed: u64,
) -> Result<Model> {
    for &w in widths.stages.iter().chain([&widths.hidden]) {
        if w < 2 || w % 2 != 0 {
            return Err(Error::contract(format!("mini-VGG widths must be even and >= 2, got {w}")));
        }
    }
    let mut rng = Rng::new(seed);
    let mut layers = Vec::new();
    let mut c_in = input_shape[0];
    for (stage, &c_out) in widths.stages.iter().enumerate() {
        if stage > 0 {
            layers.push(Layer::AvgPool2);
        }
        for _ in 0..2 {
            let (kernel, bias) = init_linear(preset, c_out, c_in * 9, vec![c_out, c_in, 3, 3], &mut rng);
            layers.push(Layer::Conv2d { kernel, bias });
            layers.push(Layer::RmsNorm);
            layers.push(preset.activation(c_out)?);
            c_in = c_out;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    let (weight, bias) = init_linear(preset, widths.hidden, c_in, vec![widths.hidden, c_in], &mut rng);
    layers.push(Layer::Dense { weight, bias });
    layers.push(preset.activation(widths.hidden)?);
    let (weight, bias) = init_linear(preset, num_classes, widths.hidden, vec![num_classes, widths.hidden], &mut rng);
    layers.push(Layer::Dense { weight, bias });
    Model::new(input_shape.to_vec(), layers)
}

/// Fully connected network `dims[0] -> ... -> dims[last]` with `activation` after
/// every hidden layer. Weights and biases are `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn mlp(input_shape: Vec<usize>, dims: &[usize], activation: ActivationKind, seed: u64) -> Result<Model> {
    let mut rng = Rng::new(seed);
    let fan0: usize = input_shape.iter().product();
    let mut layers = Vec::new();
    let mut prev = fan0;
    for (i, &d) in dims.iter().enumerate() {
        let (weight, bias) = init_linear(Preset::Tsra, d, prev, vec![d, prev], &mut rng);
        layers.push(Layer::Dense { weight, bias });
        if i + 1 < dims.len() {
            layers.push(match activation {
                ActivationKind::Relu => Layer::Relu,
                ActivationKind::Radial => Layer::Radial,
                ActivationKind::Tsra(params) => Layer::Tsra {
                    split: SubspaceSplit::halves(d)?,
                    params,
                },
            });
        }
        prev = d;
    }
    Model::new(input_shape, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_model_returns_input() {
        let m = Model::identity(vec![3]);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn single_identity_dense_layer() {
        let m = Model::new(
            vec![3],
            vec![Layer::Dense {
                weight: Tensor::eye(3),
                bias: Tensor::zeros(&[3]),
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn rejects_incompatible_layers() {
        let err = Model::new(
            vec![4],
            vec![Layer::Dense {
                weight: Tensor::zeros(&[3, 5]),
                bias: Tensor::zeros(&[3]),
            }],
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
        let err = Model::new(
            vec![4],
            vec![
                Layer::Dense {
                    weight: Tensor::zeros(&[4, 4]),
                    bias: Tensor::zeros(&[4]),
                },
                Layer::Tsra {
                    split: SubspaceSplit::halves(4).unwrap(),
                    params: TsraParams::default(),
                },
            ],
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn mini_vgg_layout() {
        let m = mini_vgg(Preset::Tsra, [3, 16, 16], 10, MiniVggWidths::default(), 1).unwrap();
        assert_eq!(m.output_shape().unwrap(), vec![10]);
        let p = m.prunable_layers();
        assert_eq!(p.len(), 7);
        assert_eq!(
            p.iter().map(|l| l.width).collect::<Vec<_>>(),
            vec![16, 16, 32, 32, 64, 64, 64]
        );
        assert!(p.iter().all(|l| l.split.map(|s| s.split()) == Some(l.width / 2)));
        assert_eq!(m.param_count(), 448 + 2320 + 4640 + 9248 + 18496 + 36928 + 4160 + 650);
    }

    #[test]
    fn init_bounds_follow_preset() {
        let m = mini_vgg(Preset::ReluControl, [3, 8, 8], 10, MiniVggWidths::default(), 2).unwrap();
        let (k, b) = m.layers()[0].params().unwrap();
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
        assert!(k.data().iter().any(|v| v.abs() > 0.8 * bound));
        assert!(b.data().iter().all(|&v| v == 0.0));
        let m = mini_vgg(Preset::Tsra, [3, 8, 8], 10, MiniVggWidths::default(), 2).unwrap();
        let (k, b) = m.layers()[0].params().unwrap();
        let bound = 1.0 / 27.0f32.sqrt();
        assert!(k.data().iter().chain(b.data()).all(|v| v.abs() <= bound));
    }
}
