//! Finite-difference cases for every differentiable tape op.

use cobprune::autodiff::Tape;
use cobprune::nn::{SubspaceSplit, TsraParams};
use cobprune::rng::Rng;

use super::{fd_check, fd_check_ce, fd_check_ce_step, randn, randn_scaled, FdReport};

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub type Case = fn(&mut Rng, u64) -> FdReport;

fn matmul(rng: &mut Rng, s: u64) -> FdReport {
    let a = randn(&[3, 3], rng, 0.0);
    let b = randn(&[3, 4], rng, 0.0);
    fd_check(vec![a, b], s, |t, v| t.matmul(v[0], v[1]).unwrap())
}

/// Plain `sum(A B)` on 3x3 inputs: `d/dA = 1 B^T`.
fn sum_matmul(rng: &mut Rng, s: u64) -> FdReport {
    let a = randn(&[3, 3], rng, 0.0);
    let b = randn(&[3, 3], rng, 0.0);
    fd_check(vec![a, b], s, |t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        t.sum(p)
    })
}

fn linear(rng: &mut Rng, s: u64) -> FdReport {
    let x = randn(&[4, 5], rng, 0.0);
    let w = randn(&[3, 5], rng, 0.0);
    let b = randn(&[3], rng, 0.0);
    fd_check(vec![x, w, b], s, |t, v| t.linear(v[0], v[1], v[2]).unwrap())
}

fn linear_4d(rng: &mut Rng, s: u64) -> FdReport {
    let x = randn(&[2, 2, 2, 2], rng, 0.0);
    let w = randn(&[3, 8], rng, 0.0);
    let b = randn(&[3], rng, 0.0);
    fd_check(vec![x, w, b], s, |t, v| t.linear(v[0], v[1], v[2]).unwrap())
}

fn conv2d(rng: &mut Rng, s: u64) -> FdReport {
    let x = randn(&[1, 2, 4, 4], rng, 0.0);
    let k = randn_scaled(&[3, 2, 3, 3], rng, 1.0 / 18f32.sqrt());
    let b = randn(&[3], rng, 0.0);
    fd_check(vec![x, k, b], s, |t, v| t.conv2d(v[0], v[1], v[2]).unwrap())
}

fn conv2d_batch(rng: &mut Rng, s: u64) -> FdReport {
    let x = randn(&[2, 3, 4, 2], rng, 0.0);
    let k = randn_scaled(&[2, 3, 3, 3], rng, 1.0 / 27f32.sqrt());
    let b = randn(&[2], rng, 0.0);
    fd_check(vec![x, k, b], s, |t, v| t.conv2d(v[0], v[1], v[2]).unwrap())
}

fn rmsnorm_2d(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[3, 6], rng, 0.0)], s, |t, v| t.rmsnorm(v[0]).unwrap())
}

fn rmsnorm_4d(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[2, 4, 3, 3], rng, 0.0)], s, |t, v| t.rmsnorm(v[0]).unwrap())
}

/// Inputs kept at least 0.05 away from the kink.
fn relu(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[4, 5], rng, 0.05)], s, |t, v| t.relu(v[0]).unwrap())
}

fn radial_2d(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[3, 5], rng, 0.0)], s, |t, v| t.radial(v[0]).unwrap())
}

fn radial_4d(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[2, 4, 2, 3], rng, 0.0)], s, |t, v| t.radial(v[0]).unwrap())
}

fn tsra_halves(rng: &mut Rng, s: u64) -> FdReport {
    let split = SubspaceSplit::halves(6).unwrap();
    let p = TsraParams::default();
    fd_check(vec![randn(&[3, 6], rng, 0.0)], s, move |t, v| t.tsra(v[0], split, p).unwrap())
}

fn tsra_uneven(rng: &mut Rng, s: u64) -> FdReport {
    let split = SubspaceSplit::new(7, 2).unwrap();
    let p = TsraParams::default();
    fd_check(vec![randn(&[3, 7], rng, 0.0)], s, move |t, v| t.tsra(v[0], split, p).unwrap())
}

fn tsra_4d(rng: &mut Rng, s: u64) -> FdReport {
    let split = SubspaceSplit::halves(4).unwrap();
    let p = TsraParams::default();
    fd_check(vec![randn(&[2, 4, 3, 2], rng, 0.0)], s, move |t, v| t.tsra(v[0], split, p).unwrap())
}

fn avgpool2(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[2, 3, 4, 4], rng, 0.0)], s, |t, v| t.avgpool2(v[0]).unwrap())
}

fn global_avgpool(rng: &mut Rng, s: u64) -> FdReport {
    fd_check(vec![randn(&[2, 3, 4, 2], rng, 0.0)], s, |t, v| t.global_avgpool(v[0]).unwrap())
}

fn mul(rng: &mut Rng, s: u64) -> FdReport {
    let a = randn(&[3, 4], rng, 0.0);
    let b = randn(&[3, 4], rng, 0.0);
    fd_check(vec![a, b], s, |t, v| t.mul(v[0], v[1]).unwrap())
}

fn cross_entropy(rng: &mut Rng, _: u64) -> FdReport {
    let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    fd_check_ce(vec![randn(&[4, 5], rng, 0.0)], labels, |_, v| v[0])
}

/// conv -> rmsnorm -> tsra -> dense (flattened) -> cross-entropy.
fn composite(rng: &mut Rng, _: u64) -> FdReport {
    let p = TsraParams::default();
    let x = randn(&[2, 2, 4, 4], rng, 0.0);
    let k = randn_scaled(&[4, 2, 3, 3], rng, 1.0 / 18f32.sqrt());
    let b = randn(&[4], rng, 0.0);
    let w = randn_scaled(&[3, 64], rng, 0.125);
    let c = randn(&[3], rng, 0.0);
    let labels = vec![rng.below(3), rng.below(3)];
    let split = SubspaceSplit::halves(4).unwrap();
    fd_check_ce(vec![x, k, b, w, c], labels, move |t: &mut Tape, v| {
        let h = t.conv2d(v[0], v[1], v[2]).unwrap();
        let h = t.rmsnorm(h).unwrap();
        let h = t.tsra(h, split, p).unwrap();
        t.linear(h, v[3], v[4]).unwrap()
    })
}

/// The same with both pooling ops before the head. Pooling divides the
/// gradients by `H * W` while the f32 forward noise stays put, so this graph
/// uses a wider step.
fn composite_pooled(rng: &mut Rng, _: u64) -> FdReport {
    let p = TsraParams::default();
    let x = randn(&[2, 3, 4, 4], rng, 0.0);
    let k = randn_scaled(&[4, 3, 3, 3], rng, 1.0 / 27f32.sqrt());
    let b = randn(&[4], rng, 0.0);
    let w = randn(&[5, 4], rng, 0.0);
    let c = randn(&[5], rng, 0.0);
    let labels = vec![rng.below(5), rng.below(5)];
    let split = SubspaceSplit::halves(4).unwrap();
    fd_check_ce_step(vec![x, k, b, w, c], labels, 1e-2, move |t: &mut Tape, v| {
        let h = t.conv2d(v[0], v[1], v[2]).unwrap();
        let h = t.rmsnorm(h).unwrap();
        let h = t.tsra(h, split, p).unwrap();
        let h = t.avgpool2(h).unwrap();
        let h = t.global_avgpool(h).unwrap();
        t.linear(h, v[3], v[4]).unwrap()
    })
}

pub const CASES: [(&str, Case); 20] = [
    ("matmul", matmul),
    ("sum(AB)", sum_matmul),
    ("linear", linear),
    ("linear 4d", linear_4d),
    ("conv2d", conv2d),
    ("conv2d batch", conv2d_batch),
    ("rmsnorm 2d", rmsnorm_2d),
    ("rmsnorm 4d", rmsnorm_4d),
    ("relu", relu),
    ("radial 2d", radial_2d),
    ("radial 4d", radial_4d),
    ("tsra halves", tsra_halves),
    ("tsra uneven", tsra_uneven),
    ("tsra 4d", tsra_4d),
    ("avgpool2", avgpool2),
    ("global avgpool", global_avgpool),
    ("mul", mul),
    ("cross entropy", cross_entropy),
    ("composite", composite),
    ("composite pooled", composite_pooled),
];

/// Runs case `name` for every seed; returns one message per failing seed.
pub fn run_case(name: &str) -> Vec<String> {
    let (_, case) = CASES.iter().find(|(n, _)| *n == name).expect("known case");
    SEEDS
        .iter()
        .filter_map(|&seed| {
            let r = case(&mut Rng::new(seed), seed);
            (!r.ok()).then(|| {
                format!(
                    "{name} seed {seed}: {} of {} failed: {:?}",
                    r.failures.len(),
                    r.checked,
                    &r.failures[..r.failures.len().min(3)]
                )
            })
        })
        .collect()
}
