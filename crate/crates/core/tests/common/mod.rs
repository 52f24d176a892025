#![allow(dead_code)]

use cobprune::autodiff::{Tape, Var};
use cobprune::linalg::Mat;
use cobprune::nn::{mini_vgg, MiniVggWidths, Model, Preset};
use cobprune::rng::Rng;
use cobprune::Tensor;

pub mod grad_cases;
pub mod oracle;

pub const FD_H: f32 = 1e-3;
pub const FD_REL: f64 = 1e-2;
pub const FD_ABS: f64 = 1e-4;

/// Worst gradient mismatch found by [`fd_check`].
#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_excess: f64,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn weighted_sum(out: &Tensor, c: &[f64]) -> f64 {
    out.data().iter().zip(c).map(|(&o, &w)| o as f64 * w).sum()
}

/// Compares reverse-mode gradients of `L = sum(C ⊙ f(inputs))` with central
/// differences of step `FD_H`, element by element, accepting
/// `|a - n| <= max(FD_REL * max(|a|, |n|), FD_ABS)`.
///
/// `C ~ N(0, 1/n_out)` keeps the loss O(1), so the f32 rounding of the forward
/// pass stays below the absolute floor.
pub fn fd_check(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> FdReport {
    let mut rng = Rng::new(seed ^ 0xfd);
    let c = std::cell::RefCell::new(Vec::new());
    fd_core(
        FD_H,
        inputs,
        |tape, vars| {
            let out = f(tape, vars);
            let n_out = tape.value(out).len();
            let s = 1.0 / (n_out as f64).sqrt();
            let cv: Vec<f64> = (0..n_out).map(|_| s * rng.normal()).collect();
            let cvar = tape.leaf(Tensor::new(tape.value(out).shape().to_vec(), cv.iter().map(|&v| v as f32).collect()).unwrap());
            *c.borrow_mut() = cv;
            let prod = tape.mul(out, cvar).unwrap();
            (out, tape.sum(prod))
        },
        |out| weighted_sum(out, &c.borrow()),
    )
}

/// Mean softmax cross-entropy of `N x K` logits, in f64.
pub fn cross_entropy_f64(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Gradient check of `cross_entropy(f(inputs), labels)`. The numeric side
/// evaluates the loss in f64 from the logits, since a scalar f32 loss near 2
/// only resolves differences of about 1.2e-4 at `h = 1e-3`.
pub fn fd_check_ce(inputs: Vec<Tensor>, labels: Vec<usize>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> FdReport {
    fd_check_ce_step(inputs, labels, FD_H, f)
}

/// `fd_check_ce` with step `h`.
pub fn fd_check_ce_step(
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    h: f32,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> FdReport {
    fd_core(
        h,
        inputs,
        |tape, vars| {
            let logits = f(tape, vars);
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            (logits, loss)
        },
        |logits| cross_entropy_f64(logits, &labels),
    )
}

/// `build` returns `(out, loss)`; `numeric` re-evaluates the loss from `out`.
pub fn fd_core(
    h: f32,
    inputs: Vec<Tensor>,
    mut build: impl FnMut(&mut Tape, &[Var]) -> (Var, Var),
    numeric: impl Fn(&Tensor) -> f64,
) -> FdReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.into_iter().map(|t| tape.leaf(t.with_grad())).collect();
    let (out, loss) = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut report = FdReport {
        checked: 0,
        failures: Vec::new(),
        worst_excess: 0.0,
    };
    for (vi, &v) in vars.iter().enumerate() {
        let base = tape.value(v).data().to_vec();
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus[e] = base[e] + h;
            let mut minus = base.clone();
            minus[e] = base[e] - h;
            let step = plus[e] as f64 - minus[e] as f64;
            tape.set_leaf_data(v, plus).unwrap();
            tape.replay().unwrap();
            let lp = numeric(tape.value(out));
            tape.set_leaf_data(v, minus).unwrap();
            tape.replay().unwrap();
            let lm = numeric(tape.value(out));
            let n = (lp - lm) / step;
            let a = analytic[vi][e] as f64;
            let tol = (FD_REL * a.abs().max(n.abs())).max(FD_ABS);
            let err = (a - n).abs();
            report.checked += 1;
            report.worst_excess = report.worst_excess.max(err / tol);
            if err > tol {
                report.failures.push(format!("input {vi}[{e}]: analytic {a:e}, numeric {n:e}"));
            }
        }
        tape.set_leaf_data(v, base).unwrap();
        tape.replay().unwrap();
    }
    report
}

/// `N(0, scale^2)` tensor.
pub fn randn_scaled(shape: &[usize], rng: &mut Rng, scale: f32) -> Tensor {
    let t = randn(shape, rng, 0.0);
    let data = t.data().iter().map(|v| v * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Gaussian tensor, with entries nudged away from zero by at least `margin`.
pub fn randn(shape: &[usize], rng: &mut Rng, margin: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal() as f32;
            if v.abs() < margin {
                margin.copysign(v) + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn small_widths() -> MiniVggWidths {
    MiniVggWidths {
        stages: [8, 8, 16],
        hidden: 16,
    }
}

pub fn small_vgg(seed: u64) -> Model {
    mini_vgg(Preset::Tsra, [3, 16, 16], 10, small_widths(), seed).unwrap()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Uniform `[0, 1)` image batch.
pub fn images(n: usize, shape: [usize; 3], rng: &mut Rng) -> Tensor {
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.uniform() as f32).collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap()
}

/// Haar-ish random orthogonal `n x n` matrix: Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Mat {
    let g = Mat::gaussian(n, n, rng);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = g.row(i).to_vec();
        for _ in 0..2 {
            for q in &rows {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= d * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        rows.push(v.into_iter().map(|a| a / norm).collect());
    }
    Mat::from_vec(n, n, rows.concat()).unwrap()
}

/// `diag(R_U, R_V)` with random orthogonal blocks of sizes `k` and `d - k`.
pub fn random_block_rotation(d: usize, k: usize, rng: &mut Rng) -> Mat {
    let ru = random_orthogonal(k, rng);
    let rv = random_orthogonal(d - k, rng);
    Mat::block_diag(&[&ru, &rv])
}

/// `R x` for a single vector, in f64.
pub fn rotate_vec(r: &Mat, x: &[f32]) -> Vec<f32> {
    (0..r.rows())
        .map(|i| (0..r.cols()).map(|j| r[(i, j)] * x[j] as f64).sum::<f64>() as f32)
        .collect()
}

/// Applies `r` to the channel axis (axis 1) of an `N x C [x H x W]` tensor.
pub fn rotate_channels(r: &Mat, x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for p in 0..inner {
            for i in 0..c {
                let mut acc = 0.0f64;
                for j in 0..c {
                    acc += r[(i, j)] * x.data()[(b * c + j) * inner + p] as f64;
                }
                out[(b * c + i) * inner + p] = acc as f32;
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}
