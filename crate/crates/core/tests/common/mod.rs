//! Brute-force metric references shared by the eval and acceptance tests.
#![allow(dead_code)]

use keap_core::eval::{manhattan_similarity, mse, multilabel_f1, precision_at_k, spearman, ContactMap, F1Average, RangeBucket};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Top-`floor(L / divisor)` precision by sorting every in-range pair on
/// `(-p, i, j)`. `None` when the bucket or the selection is empty.
pub fn oracle_precision(len: usize, truth: &[bool], probs: &[f64], lo: usize, hi: Option<usize>, divisor: usize) -> Option<f64> {
    let mut pairs = Vec::new();
    for i in 0..len {
        for j in (i + 1)..len {
            let s = j - i;
            if s >= lo && hi.map_or(true, |h| s < h) {
                pairs.push((probs[i * len + j], i, j));
            }
        }
    }
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = (len / divisor).min(pairs.len());
    if k == 0 {
        return None;
    }
    let hits = pairs[..k].iter().filter(|p| truth[p.1 * len + p.2]).count();
    Some(hits as f64 / k as f64)
}

pub fn oracle_micro_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Rank of each value counted directly: 1 + smaller + (equal - 1) / 2.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (oracle_ranks(x), oracle_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

pub fn oracle_manhattan(u: &[f64], v: &[f64], normalizer: f64) -> f64 {
    let mut d = 0.0;
    for i in 0..u.len() {
        d += if u[i] > v[i] { u[i] - v[i] } else { v[i] - u[i] };
    }
    1.0 - d / normalizer
}

pub fn oracle_mse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    s / p.len() as f64
}

/// Symmetric contact instance with coarse probabilities so ties occur.
pub fn random_contact_map(rng: &mut ChaCha8Rng, len: usize) -> ContactMap {
    let mut truth = vec![false; len * len];
    let mut probs = vec![0.0; len * len];
    for i in 0..len {
        for j in i..len {
            let t = rng.gen_bool(0.3);
            let p = rng.gen_range(0..8) as f64 / 8.0;
            for (a, b) in [(i, j), (j, i)] {
                truth[a * len + b] = t;
                probs[a * len + b] = p;
            }
        }
    }
    ContactMap::new(len, truth, probs).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<bool>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_bool(0.4)).collect()).collect()
}

/// Mismatch counts per metric over `instances` random cases of size <= 30.
#[derive(Debug, Default)]
pub struct OracleTally {
    pub checked: [usize; 5],
    pub failures: Vec<String>,
}

pub fn run_metric_oracles(instances: usize, seed: u64) -> OracleTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = OracleTally::default();
    for n in 0..instances {
        let len = rng.gen_range(2..=30);
        let map = random_contact_map(&mut rng, len);
        for bucket in RangeBucket::ALL {
            let (lo, hi) = bucket.bounds();
            for divisor in [1, 2, 5] {
                let want = oracle_precision(len, &map.truth, &map.probs, lo, hi, divisor);
                let got = precision_at_k(&map, bucket, divisor).ok();
                if want != got {
                    tally.failures.push(format!("P@k #{n} L={len} {bucket:?}/{divisor}: {got:?} vs {want:?}"));
                }
            }
        }
        tally.checked[0] += 1;

        let rows = rng.gen_range(1..=30);
        let pred = random_labels(&mut rng, rows, 7);
        let truth = random_labels(&mut rng, rows, 7);
        let got = multilabel_f1(&pred, &truth, F1Average::Micro).unwrap();
        if got != oracle_micro_f1(&pred, &truth) {
            tally.failures.push(format!("f1 #{n}"));
        }
        tally.checked[1] += 1;

        let m = rng.gen_range(2..=30);
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(0..10) as f64).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match (spearman(&x, &y).ok(), oracle_spearman(&x, &y)) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-9 => {}
            (None, None) => {}
            (a, b) => tally.failures.push(format!("spearman #{n}: {a:?} vs {b:?}")),
        }
        tally.checked[2] += 1;

        let d = rng.gen_range(1..=30);
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let norm = rng.gen_range(0.5..100.0);
        let got = manhattan_similarity(&u, &v, norm).unwrap();
        if (got - oracle_manhattan(&u, &v, norm)).abs() > 1e-9 {
            tally.failures.push(format!("manhattan #{n}"));
        }
        tally.checked[3] += 1;

        let k = rng.gen_range(1..=30);
        let p: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        if (mse(&p, &t).unwrap() - oracle_mse(&p, &t)).abs() > 1e-9 {
            tally.failures.push(format!("mse #{n}"));
        }
        tally.checked[4] += 1;
    }
    tally
}
