//! Optimizers, training and fine-tuning loops, and accuracy evaluation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    AdamW,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdNesterov => "sgd_nesterov",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd_nesterov" | "sgd" => Ok(OptimizerKind::SgdNesterov),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD momentum, or Adam `beta1`.
    pub momentum: f64,
    /// Adam `beta2`.
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cosine decay of the learning rate across epochs.
    pub cosine: bool,
    /// Fine-tune after pruning.
    pub finetune: bool,
    pub finetune_epochs: usize,
}

impl TrainConfig {
    pub fn sgd_nesterov() -> Self {
        Self {
            optimizer: OptimizerKind::SgdNesterov,
            lr: 0.05,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            cosine: true,
            finetune: false,
            finetune_epochs: 0,
        }
    }

    pub fn adamw() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            ..Self::sgd_nesterov()
        }
    }

    pub fn for_optimizer(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::SgdNesterov => Self::sgd_nesterov(),
            OptimizerKind::AdamW => Self::adamw(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        for (name, v) in [("momentum", self.momentum), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) out of `epochs`.
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        if self.cosine && epochs > 0 {
            0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
        } else {
            base
        }
    }
}

/// Per-parameter optimizer buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: usize,
    /// Velocity (SGD) or first moment (Adam).
    pub m: Vec<Vec<f32>>,
    /// Second moment (Adam only).
    pub v: Vec<Vec<f32>>,
    /// Layer index owning each parameter, for diagnostics.
    pub layer_of: Vec<usize>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize], layer_of: Vec<usize>) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            layer_of,
        }
    }

    pub fn for_model(m: &Model) -> Self {
        let sizes: Vec<usize> = m.params().iter().map(|t| t.len()).collect();
        let layer_of = m
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_linear())
            .flat_map(|(i, _)| [i, i])
            .collect();
        Self::new(&sizes, layer_of)
    }
}

/// One update of every parameter at learning rate `lr`.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[&[f32]],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "optimizer got {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].len() || state.m[i].len() != g.len() {
            return Err(Error::dim(format!(
                "parameter {i}: {} values, {} grads, {} state",
                params[i].len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            let layer = state.layer_of.get(i).copied().unwrap_or(i);
            return Err(Error::numeric(format!(
                "non-finite gradient in layer {layer} (parameter {i}) at step {}",
                state.step
            )));
        }
    }
    let wd = cfg.weight_decay;
    match cfg.optimizer {
        OptimizerKind::SgdNesterov => {
            let mu = cfg.momentum;
            for (i, p) in params.iter_mut().enumerate() {
                let vel = &mut state.m[i];
                for ((w, &g), v) in p.data_mut().iter_mut().zip(grads[i]).zip(vel.iter_mut()) {
                    let g = g as f64 + wd * *w as f64;
                    let nv = mu * *v as f64 + g;
                    *v = nv as f32;
                    *w = (*w as f64 - lr * (g + mu * nv)) as f32;
                }
            }
        }
        OptimizerKind::AdamW => {
            let (b1, b2) = (cfg.momentum, cfg.beta2);
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for (i, p) in params.iter_mut().enumerate() {
                let (m1, m2) = (&mut state.m[i], &mut state.v[i]);
                for (((w, &g), a), b) in p
                    .data_mut()
                    .iter_mut()
                    .zip(grads[i])
                    .zip(m1.iter_mut())
                    .zip(m2.iter_mut())
                {
                    let g = g as f64;
                    let mut x = *w as f64;
                    x -= lr * wd * x;
                    let na = b1 * *a as f64 + (1.0 - b1) * g;
                    let nb = b2 * *b as f64 + (1.0 - b2) * g * g;
                    *a = na as f32;
                    *b = nb as f32;
                    x -= lr * (na / c1) / ((nb / c2).sqrt() + cfg.eps);
                    *w = x as f32;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub type History = Vec<EpochStats>;

/// Renders a history as `epoch,loss,accuracy` CSV.
pub fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in h {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
    }
    s
}

/// Index of the largest value, ties toward the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn run_epochs(m: &Model, data: &Dataset, cfg: &TrainConfig, base_lr: f64, epochs: usize) -> Result<(Model, History)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut model = m.clone();
    let mut state = OptimizerState::for_model(&model);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cfg.lr_at(base_lr, epoch, epochs);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.gather(chunk)?;
            let mut tape = Tape::new();
            let input = tape.leaf(x);
            let rec = model.record(&mut tape, input, true)?;
            let loss = tape.cross_entropy(rec.logits, &labels)?;
            let l = tape.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: loss {l} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += l * chunk.len() as f64;
            let logits = tape.value(rec.logits);
            let k = logits.shape()[1];
            correct += labels
                .iter()
                .enumerate()
                .filter(|(i, &y)| argmax(&logits.data()[i * k..(i + 1) * k]) == y)
                .count();
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = rec
                .params
                .iter()
                .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            optimizer_step(&mut model.params_mut(), &grad_refs, &mut state, cfg, lr)?;
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, history))
}

/// Trains for `cfg.epochs` epochs with seeded shuffling. Bit-reproducible for
/// equal `(m, data, cfg)`.
pub fn train(m: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    run_epochs(m, data, cfg, cfg.lr, cfg.epochs)
}

/// Fine-tunes with the same optimizer at a tenth of the base learning rate for
/// `cfg.finetune_epochs` epochs, starting from fresh optimizer state.
pub fn finetune(m: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    run_epochs(m, data, cfg, cfg.lr / 10.0, cfg.finetune_epochs)
}

/// Argmax accuracy over `data`.
pub fn evaluate(m: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let logits = m.forward_batched(&data.images, 256)?;
    let k = logits.shape()[1];
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&logits.data()[i * k..(i + 1) * k]) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
