//! Occupied-subspace measurements for single radial and TSRA layers.
//!
//! A radial layer `phi(Wx + b)` only rescales vectors, so its outputs stay in
//! `span(cols(W) ∪ {b})`. TSRA rescales the two subspace projections separately,
//! which lets outputs escape that span up to twice its dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, Mat};
use crate::nn::activation::radial_scale;
use crate::nn::{SubspaceSplit, TsraParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RANK_TOL: f64 = 1e-5;
pub const GAP_CERTIFICATE: f64 = 1e3;
pub const WITNESS_TRIALS: usize = 1000;
pub const WITNESS_MIN_ANGLE: f64 = 1e-3;
pub const COMPRESS_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SatActivation {
    Radial,
    Tsra,
}

impl SatActivation {
    pub fn name(&self) -> &'static str {
        match self {
            SatActivation::Radial => "radial",
            SatActivation::Tsra => "tsra",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankExperiment {
    pub activation: SatActivation,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    /// Number of random inputs, at least `4 d_out`.
    pub n: usize,
    /// Singular values at or below `tol * sigma_max` count as zero.
    pub tol: f64,
    pub params: TsraParams,
}

impl RankExperiment {
    pub fn new(activation: SatActivation, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            activation,
            d_in,
            d_out,
            bias,
            n: 8 * d_out,
            tol: RANK_TOL,
            params: TsraParams::default(),
        }
    }

    /// Upper bound on the occupied dimension: `d_in (+1)` for radial,
    /// `2 d_in (+2)` for TSRA, capped at `d_out`.
    pub fn bound(&self) -> usize {
        let base = self.d_in + usize::from(self.bias);
        let b = match self.activation {
            SatActivation::Radial => base,
            SatActivation::Tsra => 2 * base,
        };
        b.min(self.d_out)
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out < 2 {
            return Err(Error::contract(format!("need d_in >= 1 and d_out >= 2, got {} / {}", self.d_in, self.d_out)));
        }
        if self.n < 4 * self.d_out {
            return Err(Error::contract(format!("need n >= 4 d_out = {}, got {}", 4 * self.d_out, self.n)));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::contract(format!("rank tolerance must be in (0, 1), got {}", self.tol)));
        }
        self.params.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub measured_rank: usize,
    pub bound: usize,
    /// `sigma[rank - 1] / sigma[rank]`; infinite when nothing was dropped.
    pub gap_ratio: f64,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

impl RankReport {
    /// The rank call is trusted only with a clear spectral gap.
    pub fn conclusive(&self) -> bool {
        self.gap_ratio >= GAP_CERTIFICATE
    }
}

/// Numeric rank of the columns of a `d x n` matrix via the Jacobi eigenvalues of its Gram matrix.
pub fn numeric_rank(a: &Mat, tol: f64) -> Result<(usize, f64, Vec<f64>)> {
    let eig = sym_eigen(&a.gram())?;
    let sv: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > tol * smax).count()
    };
    let gap = if rank == 0 || rank == sv.len() {
        f64::INFINITY
    } else if sv[rank] == 0.0 {
        f64::INFINITY
    } else {
        sv[rank - 1] / sv[rank]
    };
    Ok((rank, gap, sv))
}

/// Applies a single-vector activation to an `f32` pre-activation.
fn activate(kind: SatActivation, params: &TsraParams, split: usize, z: &[f32], out: &mut [f32]) {
    match kind {
        SatActivation::Radial => crate::nn::activation::radial_vec(z, out),
        SatActivation::Tsra => crate::nn::activation::tsra_vec(z, split, params, out),
    }
}

/// Measures the dimension spanned by `sigma(Wx + b)` over random Gaussian `W`,
/// `b` and inputs, computed at `f32`.
pub fn activation_rank(exp: &RankExperiment, seed: u64) -> Result<RankReport> {
    exp.validate()?;
    let mut rng = Rng::new(seed);
    let w = rng.normal_vec(exp.d_out * exp.d_in);
    let b = if exp.bias { rng.normal_vec(exp.d_out) } else { vec![0.0; exp.d_out] };
    let split = exp.d_out / 2;
    let mut acts = vec![0.0f64; exp.d_out * exp.n];
    let mut z = vec![0.0f32; exp.d_out];
    let mut y = vec![0.0f32; exp.d_out];
    for s in 0..exp.n {
        let x = rng.normal_vec(exp.d_in);
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * exp.d_in..(o + 1) * exp.d_in];
            *zo = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f32>() + b[o];
        }
        activate(exp.activation, &exp.params, split, &z, &mut y);
        for (o, &v) in y.iter().enumerate() {
            acts[o * exp.n + s] = v as f64;
        }
    }
    let (measured_rank, gap_ratio, singular_values) = numeric_rank(&Mat::from_vec(exp.d_out, exp.n, acts)?, exp.tol)?;
    Ok(RankReport {
        measured_rank,
        bound: exp.bound(),
        gap_ratio,
        singular_values,
    })
}

/// Occupied dimension after each of `depth` stacked layers of width `width`.
/// Reported only; no bound is asserted beyond the first layer.
pub fn multilayer_ranks(kind: SatActivation, d_in: usize, width: usize, depth: usize, bias: bool, seed: u64) -> Result<Vec<usize>> {
    let mut rng = Rng::new(seed);
    let n = 8 * width;
    let params = TsraParams::default();
    let mut h: Vec<Vec<f32>> = (0..n).map(|_| rng.normal_vec(d_in)).collect();
    let mut prev = d_in;
    let mut ranks = Vec::with_capacity(depth);
    for _ in 0..depth {
        let w = rng.normal_vec(width * prev);
        let b = if bias { rng.normal_vec(width) } else { vec![0.0; width] };
        let scale = 1.0 / (prev as f32).sqrt();
        let mut acts = vec![0.0f64; width * n];
        for (s, x) in h.iter_mut().enumerate() {
            let z: Vec<f32> = (0..width)
                .map(|o| w[o * prev..(o + 1) * prev].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f32>() * scale + b[o])
                .collect();
            let mut y = vec![0.0f32; width];
            activate(kind, &params, width / 2, &z, &mut y);
            for (o, &v) in y.iter().enumerate() {
                acts[o * n + s] = v as f64;
            }
            *x = y;
        }
        ranks.push(numeric_rank(&Mat::from_vec(width, n, acts)?, RANK_TOL)?.0);
        prev = width;
    }
    Ok(ranks)
}

fn tsra_f64(x: &[f64], split: usize, p: &TsraParams) -> Vec<f64> {
    let nu = x[..split].iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        return vec![0.0; x.len()];
    }
    let r = nu / n;
    let (lu, lv) = (p.f_u(r), p.f_v(r));
    x.iter().enumerate().map(|(i, &v)| if i < split { lu * v } else { lv * v }).collect()
}

/// Angle in radians between `a` and `b`.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Finds `x` with both subspace components nonzero whose TSRA image is not
/// parallel to it, so `sigma(span{x})` leaves `span{x}`. Tries the all-ones
/// vector, then up to 1000 seeded Gaussian draws.
pub fn lemma1_witness(split: &SubspaceSplit, p: &TsraParams) -> Result<Vec<f64>> {
    p.validate()?;
    if split.u_len() == 0 || split.v_len() == 0 {
        return Err(Error::contract("witness needs both subspaces to be nonempty"));
    }
    let d = split.dim();
    let k = split.split();
    let is_witness = |x: &[f64]| {
        let nonzero = |s: &[f64]| s.iter().any(|&v| v != 0.0);
        nonzero(&x[..k]) && nonzero(&x[k..]) && angle(&tsra_f64(x, k, p), x) > WITNESS_MIN_ANGLE
    };
    let ones = vec![1.0; d];
    if is_witness(&ones) {
        return Ok(ones);
    }
    let mut rng = Rng::new(0x5eed);
    for _ in 0..WITNESS_TRIALS {
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if is_witness(&x) {
            return Ok(x);
        }
    }
    Err(Error::numeric(format!(
        "no subspace witness in {WITNESS_TRIALS} trials; f_U and f_V agree on every sample"
    )))
}

/// A radial layer restricted to its occupied subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedRadial {
    /// `k x d_in`
    pub weight: Tensor,
    /// `k`
    pub bias: Tensor,
    /// `d_out x k` with orthonormal columns; `phi(Wx + b) = Q phi(W'x + b')`.
    pub expand: Tensor,
    /// Largest deviation seen in the 100-input verification.
    pub max_deviation: f64,
}

/// Compresses `phi(Wx + b)` losslessly onto an orthonormal basis `Q` of
/// `span(cols(W) ∪ {b})`: `W' = Q^T W`, `b' = Q^T b`. Equivalence is checked on
/// 100 random inputs before returning.
pub fn radial_lossless_compress(weight: &Tensor, bias: Option<&Tensor>) -> Result<CompressedRadial> {
    let s = weight.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("weight must be d_out x d_in, got {s:?}")));
    }
    let (d_out, d_in) = (s[0], s[1]);
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::dim(format!("bias must have shape [{d_out}], got {:?}", b.shape())));
        }
    }
    let need = d_in + usize::from(bias.is_some());
    if d_out <= need {
        return Err(Error::contract(format!(
            "layer {d_out} x {d_in} is not compressible (needs d_out > {need})"
        )));
    }
    // Columns of W, then b, as a d_out x need matrix.
    let mut cols = vec![0.0f64; d_out * need];
    for o in 0..d_out {
        for i in 0..d_in {
            cols[o * need + i] = weight.data()[o * d_in + i] as f64;
        }
        if let Some(b) = bias {
            cols[o * need + d_in] = b.data()[o] as f64;
        }
    }
    let m = Mat::from_vec(d_out, need, cols)?;
    let eig = sym_eigen(&m.gram())?;
    let lmax = eig.values[0];
    let k = if lmax == 0.0 {
        1
    } else {
        eig.values.iter().filter(|&&l| l > RANK_TOL * RANK_TOL * lmax).count()
    };
    // Q^T has the leading eigenvectors as rows.
    let qt = Mat::from_vec(k, d_out, eig.vectors.data()[..k * d_out].to_vec())?;
    let w_full = Mat::from_f32(d_out, d_in, weight.data())?;
    let w_c = qt.matmul(&w_full)?;
    let b_full: Vec<f64> = bias.map(|b| b.data().iter().map(|&v| v as f64).collect()).unwrap_or_else(|| vec![0.0; d_out]);
    let b_c: Vec<f64> = (0..k).map(|r| qt.row(r).iter().zip(&b_full).map(|(a, b)| a * b).sum()).collect();
    let out = CompressedRadial {
        weight: Tensor::new(vec![k, d_in], w_c.to_f32())?,
        bias: Tensor::new(vec![k], b_c.iter().map(|&v| v as f32).collect())?,
        expand: Tensor::new(vec![d_out, k], qt.transpose().to_f32())?,
        max_deviation: 0.0,
    };
    let dev = verify_compression(weight, bias, &out, 100, 0xc0)?;
    if dev > COMPRESS_TOL {
        return Err(Error::numeric(format!(
            "compressed radial layer deviates by {dev:e} (> {COMPRESS_TOL:e})"
        )));
    }
    Ok(CompressedRadial { max_deviation: dev, ..out })
}

fn radial_f64(z: &[f64]) -> Vec<f64> {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = radial_scale(n);
    z.iter().map(|v| v * s).collect()
}

fn affine(w: &[f32], b: Option<&[f32]>, rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, b)| a as f64 * b).sum::<f64>()
                + b.map_or(0.0, |b| b[r] as f64)
        })
        .collect()
}

/// Max-abs difference between `phi(Wx + b)` and `Q phi(W'x + b')` over `trials` Gaussian inputs.
pub fn verify_compression(weight: &Tensor, bias: Option<&Tensor>, c: &CompressedRadial, trials: usize, seed: u64) -> Result<f64> {
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    let k = c.bias.len();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        let full = radial_f64(&affine(weight.data(), bias.map(Tensor::data), d_out, &x));
        let small = radial_f64(&affine(c.weight.data(), Some(c.bias.data()), k, &x));
        for (o, &f) in full.iter().enumerate() {
            let e: f64 = (0..k).map(|j| c.expand.data()[o * k + j] as f64 * small[j]).sum();
            worst = worst.max((e - f).abs());
        }
    }
    if !worst.is_finite() {
        return Err(Error::numeric("non-finite output while verifying compression"));
    }
    Ok(worst)
}

/// One row of the saturation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SaturationRow {
    pub activation: SatActivation,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    pub seed: u64,
    pub measured_rank: usize,
    pub bound: usize,
    pub gap_ratio: f64,
}

pub const SATURATION_HEADER: &str = "activation,d_in,d_out,bias,seed,measured_rank,bound,gap_ratio";

impl SaturationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.activation.name(),
            self.d_in,
            self.d_out,
            self.bias,
            self.seed,
            self.measured_rank,
            self.bound,
            self.gap_ratio
        )
    }
}

/// Runs every `(activation, d_in, bias, seed)` combination with `d_out = 4 d_in + 8`.
pub fn saturation_grid(d_ins: &[usize], seeds: &[u64]) -> Result<Vec<SaturationRow>> {
    let mut rows = Vec::new();
    for activation in [SatActivation::Radial, SatActivation::Tsra] {
        for &d_in in d_ins {
            for bias in [false, true] {
                for &seed in seeds {
                    let exp = RankExperiment::new(activation, d_in, 4 * d_in + 8, bias);
                    let r = activation_rank(&exp, seed)?;
                    rows.push(SaturationRow {
                        activation,
                        d_in,
                        d_out: exp.d_out,
                        bias,
                        seed,
                        measured_rank: r.measured_rank,
                        bound: r.bound,
                        gap_ratio: r.gap_ratio,
                    });
                }
            }
        }
    }
    Ok(rows)
}
