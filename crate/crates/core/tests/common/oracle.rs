//! Brute-force evaluation of the selection rules, written directly from their
//! definitions and sharing no code with the library.

use cobprune::nn::SubspaceSplit;
use cobprune::pruning::{
    select_fixed_ratio, select_threshold, ImportanceReport, LayerImportance, ThresholdKind, ThresholdRule,
};
use cobprune::rng::Rng;

/// Prune ratios `i / 20`, exact in rational arithmetic.
pub const RATIO_STEPS: u32 = 20;

pub const ZSCORE_TS: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
pub const PROP_TS: [f64; 9] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0, 1.25, 1.5];

pub fn t_grid(kind: ThresholdKind) -> &'static [f64] {
    match kind {
        ThresholdKind::Zscore => &ZSCORE_TS,
        _ => &PROP_TS,
    }
}

/// Keep set for prune ratio `i / RATIO_STEPS`: the unique subset of size
/// `max(1, ceil((1 - p) n))` such that every kept dim beats every pruned dim
/// (higher score, or equal score and lower index).
pub fn fixed_ratio(scores: &[f64], i: u32) -> Vec<bool> {
    let n = scores.len();
    let num = (RATIO_STEPS - i) as usize * n;
    let k = num.div_ceil(RATIO_STEPS as usize).max(1);
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut found = None;
    for set in 0u32..(1 << n) {
        if set.count_ones() as usize != k {
            continue;
        }
        let inside = |j: usize| set & (1 << j) != 0;
        let ok = (0..n).filter(|&a| inside(a)).all(|a| (0..n).filter(|&b| !inside(b)).all(|b| beats(a, b)));
        if ok {
            assert!(found.is_none(), "two valid keep sets");
            found = Some(set);
        }
    }
    let set = found.expect("a valid keep set");
    (0..n).map(|j| set & (1 << j) != 0).collect()
}

fn statistic_mean(s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in s {
        acc += v;
    }
    acc / s.len() as f64
}

/// Midpoint median: the middle element, or the mean of the two middle ones.
fn statistic_median(s: &[f64]) -> f64 {
    // Selection by counting instead of sorting.
    let n = s.len();
    let order_stat = |r: usize| -> f64 {
        *s.iter()
            .find(|&&v| {
                let below = s.iter().filter(|&&w| w < v).count();
                let equal = s.iter().filter(|&&w| w == v).count();
                below <= r && r < below + equal
            })
            .unwrap()
    };
    if n % 2 == 1 {
        order_stat(n / 2)
    } else {
        0.5 * (order_stat(n / 2 - 1) + order_stat(n / 2))
    }
}

fn statistic_std(s: &[f64]) -> f64 {
    let mu = statistic_mean(s);
    let mut acc = 0.0;
    for v in s {
        acc += (v - mu) * (v - mu);
    }
    (acc / s.len() as f64).sqrt()
}

/// Keep flags under a threshold rule: prune strictly below the cutoff; if that
/// empties the subspace, keep the first maximal score.
pub fn threshold(scores: &[f64], kind: ThresholdKind, t: f64) -> Vec<bool> {
    let pruned: Vec<bool> = match kind {
        ThresholdKind::Zscore => {
            let sd = statistic_std(scores);
            if sd == 0.0 {
                return vec![true; scores.len()];
            }
            let mu = statistic_mean(scores);
            scores.iter().map(|s| (s - mu) / sd < t).collect()
        }
        ThresholdKind::PropAvg => {
            let c = t * statistic_mean(scores);
            scores.iter().map(|&s| s < c).collect()
        }
        ThresholdKind::PropMedian => {
            let c = t * statistic_median(scores);
            scores.iter().map(|&s| s < c).collect()
        }
        ThresholdKind::PropMax => {
            let max = scores.iter().fold(f64::MIN, |a, &b| if b > a { b } else { a });
            scores.iter().map(|&s| s < t * max).collect()
        }
    };
    let mut keep: Vec<bool> = pruned.iter().map(|p| !p).collect();
    if keep.iter().all(|k| !k) {
        let max = scores.iter().fold(f64::MIN, |a, &b| if b > a { b } else { a });
        let first = scores.iter().position(|&s| s == max).unwrap();
        keep[first] = true;
    }
    keep
}

/// Random score vector of length 1..=12: small integers (many ties),
/// continuous values, or a constant vector.
pub fn random_scores(rng: &mut Rng) -> Vec<f64> {
    let n = 1 + rng.below(12);
    match rng.below(3) {
        0 => (0..n).map(|_| rng.below(6) as f64).collect(),
        1 => (0..n).map(|_| rng.uniform() * 10.0).collect(),
        _ => vec![rng.below(4) as f64; n],
    }
}

fn report(scores: &[f64], split: Option<SubspaceSplit>) -> ImportanceReport {
    ImportanceReport {
        layers: vec![LayerImportance {
            layer: 0,
            scores: scores.to_vec(),
            split,
            samples: 1,
        }],
    }
}

fn per_subspace(scores: &[f64], split: Option<SubspaceSplit>, f: impl Fn(&[f64]) -> Vec<bool>) -> Vec<bool> {
    match split {
        None => f(scores),
        Some(s) => {
            let mut out = f(&scores[..s.split()]);
            out.extend(f(&scores[s.split()..]));
            out
        }
    }
}

fn subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

/// Checks every rule on `scores` against the oracles, plus scale invariance,
/// threshold monotonicity and fixed-ratio nestedness. Returns the violations.
pub fn check_instance(scores: &[f64], split: Option<SubspaceSplit>, scale_exp: i32) -> Vec<String> {
    let mut bad = Vec::new();
    let rep = report(scores, split);
    let scaled: Vec<f64> = scores.iter().map(|s| s * 2f64.powi(scale_exp)).collect();
    let rep_scaled = report(&scaled, split);

    let mut prev: Option<Vec<bool>> = None;
    for i in 0..RATIO_STEPS {
        let p = i as f64 / RATIO_STEPS as f64;
        let got = select_fixed_ratio(&rep, p).unwrap().layers[0].keep.clone();
        let want = per_subspace(scores, split, |s| fixed_ratio(s, i));
        if got != want {
            bad.push(format!("fixed ratio {p} on {scores:?}: {got:?} vs {want:?}"));
        }
        if select_fixed_ratio(&rep_scaled, p).unwrap().layers[0].keep != got {
            bad.push(format!("fixed ratio {p} not scale invariant on {scores:?}"));
        }
        if let Some(prev) = &prev {
            if !subset(&got, prev) {
                bad.push(format!("fixed ratio {p} not nested on {scores:?}"));
            }
        }
        prev = Some(got);
    }

    for kind in ThresholdKind::ALL {
        let mut prev_pruned: Option<Vec<bool>> = None;
        for &t in t_grid(kind) {
            let rule = ThresholdRule::new(kind, t).unwrap();
            let got = select_threshold(&rep, &rule).layers[0].keep.clone();
            let want = per_subspace(scores, split, |s| threshold(s, kind, t));
            if got != want {
                bad.push(format!("{} T={t} on {scores:?}: {got:?} vs {want:?}", kind.name()));
            }
            if select_threshold(&rep_scaled, &rule).layers[0].keep != got {
                bad.push(format!("{} T={t} not scale invariant on {scores:?}", kind.name()));
            }
            let pruned: Vec<bool> = got.iter().map(|k| !k).collect();
            if let Some(prev) = &prev_pruned {
                if !subset(prev, &pruned) {
                    bad.push(format!("{} T={t} not monotone on {scores:?}", kind.name()));
                }
            }
            prev_pruned = Some(pruned);
        }
    }
    bad
}
