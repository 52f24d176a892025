//! Layer kernels, activation family and the sequential model.

pub mod activation;
pub mod model;

pub use activation::{
    radial_forward, relu_forward, rmsnorm_forward, tsra_forward, SubspaceSplit, TsraParams,
};
pub use model::{mini_vgg, mlp, ActivationKind, Layer, MiniVggWidths, Model, Preset, PrunableLayer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-overlapping 2x2 mean pooling of an `N x C x H x W` tensor.
pub fn avgpool_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::dim(format!(
            "avgpool needs N x C x H x W with even H, W; got {s:?}"
        )));
    }
    let out = crate::autodiff::kernels::avgpool2_forward(x.data(), s[0] * s[1], s[2], s[3]);
    Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)
}
