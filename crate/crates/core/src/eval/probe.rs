use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::metrics::{precision_at_k, ContactMap, RangeBucket};
use super::tasks::ContactRecord;
use super::{EvalError, MetricReport};
use crate::seed::derive_seed;
use crate::tensor::{Graph, Tensor};

/// Partitions `0..n` into `k` folds whose sizes differ by at most one.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 || k > n {
        return Err(EvalError::Config(format!("k-fold needs 2 <= k <= {n}, got k = {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "kfold")));
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Linear least-squares probe with an L2 penalty on the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>()
    }
}

pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeModel, EvalError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(EvalError::Shape(format!("{} feature rows for {} targets", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(EvalError::Shape("ragged feature rows".into()));
    }
    let n = x.len();
    let mean_x: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |r, c| x[r][c] - mean_x[c]);
    let yc = DVector::from_fn(n, |r, _| y[r] - mean_y);
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda.max(1e-12);
    let rhs = xc.transpose() * yc;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| EvalError::Undefined("singular ridge system".into()))?,
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = mean_y - weights.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
    Ok(RidgeModel { weights, intercept })
}

/// Mean held-out MSE of a ridge probe over `k` seeded folds, plus the
/// per-fold values.
pub fn kfold_mse(
    x: &[Vec<f64>],
    y: &[f64],
    k: usize,
    seed: u64,
    lambda: f64,
) -> Result<(f64, Vec<f64>), EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Shape(format!("{} feature rows for {} targets", x.len(), y.len())));
    }
    let folds = kfold_partition(x.len(), k, seed)?;
    let mut per_fold = Vec::with_capacity(k);
    for test in &folds {
        let mut in_test = vec![false; x.len()];
        test.iter().for_each(|&i| in_test[i] = true);
        let (tx, ty): (Vec<Vec<f64>>, Vec<f64>) = (0..x.len())
            .filter(|&i| !in_test[i])
            .map(|i| (x[i].clone(), y[i]))
            .unzip();
        let model = fit_ridge(&tx, &ty, lambda)?;
        let preds: Vec<f64> = test.iter().map(|&i| model.predict(&x[i])).collect();
        let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        per_fold.push(super::mse(&preds, &truth)?);
    }
    Ok((per_fold.iter().sum::<f64>() / k as f64, per_fold))
}

/// Residue representations `[len, dim]` with a contact matrix `[len, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactSample {
    pub len: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub truth: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Pairs closer than this are excluded from the loss.
    pub min_separation: usize,
}

impl Default for ContactProbeSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            init_std: 0.01,
            seed: 0,
            min_separation: 6,
        }
    }
}

/// Symmetric bilinear pair scorer `sigmoid(h_i' W_s h_j + b)` with
/// `W_s = (W + W') / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactProbe {
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl ContactProbe {
    pub fn init(dim: usize, init_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "contact-probe"));
        let normal = Normal::new(0.0, init_std.max(0.0)).expect("finite std");
        Self {
            dim,
            weight: (0..dim * dim).map(|_| normal.sample(&mut rng)).collect(),
            bias: 0.0,
        }
    }

    fn symmetric_weight(&self) -> Vec<f64> {
        let d = self.dim;
        let mut ws = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                ws[a * d + b] = 0.5 * (self.weight[a * d + b] + self.weight[b * d + a]);
            }
        }
        ws
    }

    /// Contact probabilities `[len, len]`; the upper triangle is computed and
    /// mirrored.
    pub fn probabilities(&self, sample: &ContactSample) -> Result<Vec<f64>, EvalError> {
        if sample.dim != self.dim {
            return Err(EvalError::Shape(format!(
                "probe width {} applied to {}-dimensional features",
                self.dim, sample.dim
            )));
        }
        let (l, d) = (sample.len, self.dim);
        let ws = self.symmetric_weight();
        let h = &sample.features;
        let mut hw = vec![0.0; l * d];
        for i in 0..l {
            for a in 0..d {
                let hia = h[i * d + a];
                for b in 0..d {
                    hw[i * d + b] += hia * ws[a * d + b];
                }
            }
        }
        let mut probs = vec![0.0; l * l];
        for i in 0..l {
            for j in i..l {
                let s: f64 = (0..d).map(|b| hw[i * d + b] * h[j * d + b]).sum::<f64>() + self.bias;
                let p = 1.0 / (1.0 + (-s).exp());
                probs[i * l + j] = p;
                probs[j * l + i] = p;
            }
        }
        Ok(probs)
    }

    pub fn contact_map(&self, sample: &ContactSample) -> Result<ContactMap, EvalError> {
        ContactMap::new(sample.len, sample.truth.clone(), self.probabilities(sample)?)
    }
}

fn probe_loss_grad(
    probe: &ContactProbe,
    sample: &ContactSample,
    min_sep: usize,
) -> Result<Option<(f64, Vec<f64>, f64)>, EvalError> {
    let (l, d) = (sample.len, sample.dim);
    let mut weights = vec![0.0; l * l];
    let mut targets = vec![0.0; l * l];
    for i in 0..l {
        for j in i + min_sep..l {
            weights[i * l + j] = 1.0;
            targets[i * l + j] = if sample.truth[i * l + j] { 1.0 } else { 0.0 };
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(None);
    }
    let mut g = Graph::<f64>::new();
    let h = g.constant(Tensor::new(&[l, d], sample.features.clone())?);
    let mut ht = vec![0.0; d * l];
    for i in 0..l {
        for a in 0..d {
            ht[a * l + i] = sample.features[i * d + a];
        }
    }
    let ht = g.constant(Tensor::new(&[d, l], ht)?);
    let w = g.param(Tensor::new(&[d, d], probe.weight.clone())?);
    let b = g.param(Tensor::scalar(probe.bias));
    let wt = g.transpose(w)?;
    let ws = g.add(w, wt)?;
    let ws = g.scale(ws, 0.5);
    let hw = g.matmul(h, ws)?;
    let s = g.matmul(hw, ht)?;
    let s = g.add(s, b)?;
    let loss = g.bce_with_logits(s, &targets, Some(&weights))?;
    g.backward(loss)?;
    Ok(Some((g.value(loss).item(), g.grad(w).into_data(), g.grad(b).item())))
}

/// Trains the bilinear probe with full-sample Adam steps; returns the probe
/// and the mean training loss of each epoch.
pub fn train_contact_probe(
    samples: &[ContactSample],
    settings: ContactProbeSettings,
) -> Result<(ContactProbe, Vec<f64>), EvalError> {
    let dim = samples
        .first()
        .ok_or_else(|| EvalError::Config("contact probe needs at least one sample".into()))?
        .dim;
    if samples.iter().any(|s| s.dim != dim) {
        return Err(EvalError::Shape("samples disagree on feature width".into()));
    }
    let mut probe = ContactProbe::init(dim, settings.init_std, settings.seed);
    let n = probe.weight.len() + 1;
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "contact-order"));
    let mut history = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        for &i in &order {
            let Some((loss, gw, gb)) = probe_loss_grad(&probe, &samples[i], settings.min_separation)? else {
                continue;
            };
            total += loss;
            counted += 1;
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for (k, g) in gw.iter().copied().chain(std::iter::once(gb)).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let step = settings.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if k < probe.weight.len() {
                    probe.weight[k] -= step;
                } else {
                    probe.bias -= step;
                }
            }
        }
        history.push(if counted > 0 { total / counted as f64 } else { f64::NAN });
    }
    Ok((probe, history))
}

/// The 3 x 3 grid of mean precision over `samples`, one report per bucket
/// and divisor in {1, 2, 5}. Samples for which a bucket is undefined are
/// skipped for that bucket.
pub fn contact_reports(
    probe: &ContactProbe,
    samples: &[ContactSample],
    fingerprint: &str,
) -> Result<Vec<MetricReport>, EvalError> {
    let maps: Vec<ContactMap> = samples.iter().map(|s| probe.contact_map(s)).collect::<Result<_, _>>()?;
    let mut reports = Vec::with_capacity(9);
    for bucket in RangeBucket::ALL {
        for divisor in [1usize, 2, 5] {
            let mut sum = 0.0;
            let mut count = 0usize;
            for map in &maps {
                match precision_at_k(map, bucket, divisor) {
                    Ok(p) => {
                        sum += p;
                        count += 1;
                    }
                    Err(EvalError::Undefined(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if count == 0 {
                return Err(EvalError::Undefined(format!(
                    "no evaluated protein has {} range pairs",
                    bucket.name()
                )));
            }
            let name = if divisor == 1 { "P@L".to_string() } else { format!("P@L/{divisor}") };
            let mut r = MetricReport::new(name, sum / count as f64, fingerprint)?;
            r.bucket = Some(bucket);
            r.divisor = Some(divisor);
            reports.push(r);
        }
    }
    Ok(reports)
}

/// Residues reserved for planted contacts; background residues never use them.
pub const MOTIF_RESIDUES: [char; 3] = ['C', 'W', 'H'];

/// Random sequences, each with one planted pair per motif residue: a short
/// range pair of `C`, a medium range pair of `W` and a long range pair of `H`.
/// The planted pairs are the only contacts.
pub fn generate_toy_contacts(n: usize, len: usize, seed: u64) -> Result<Vec<ContactRecord>, EvalError> {
    if len < 32 {
        return Err(EvalError::Config(format!("toy contact proteins need length >= 32, got {len}")));
    }
    let background: Vec<char> = "ACDEFGHIKLMNPQRSTVWY"
        .chars()
        .filter(|c| !MOTIF_RESIDUES.contains(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-contacts"));
    let ranges = [(6usize, 12usize), (12, 24), (24, len)];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut seq: Vec<char> = (0..len).map(|_| background[rng.gen_range(0..background.len())]).collect();
        let mut used = vec![false; len];
        let mut contacts = Vec::with_capacity(3);
        for (&motif, &(lo, hi)) in MOTIF_RESIDUES.iter().zip(&ranges) {
            loop {
                let sep = rng.gen_range(lo..hi.min(len));
                let i = rng.gen_range(0..len - sep);
                let j = i + sep;
                if !used[i] && !used[j] {
                    used[i] = true;
                    used[j] = true;
                    seq[i] = motif;
                    seq[j] = motif;
                    contacts.push([i, j]);
                    break;
                }
            }
        }
        contacts.sort_unstable();
        out.push(ContactRecord {
            sequence: seq.into_iter().collect(),
            contacts,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_samples_three_folds() {
        let folds = kfold_partition(12, 3, 9).unwrap();
        assert!(folds.iter().all(|f| f.len() == 4));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(folds, kfold_partition(12, 3, 9).unwrap());
        assert!(kfold_partition(3, 4, 0).is_err());
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - 0.5 * r[1] + 3.0).collect();
        let m = fit_ridge(&x, &y, 1e-9).unwrap();
        assert!((m.weights[0] - 2.0).abs() < 1e-6);
        assert!((m.weights[1] + 0.5).abs() < 1e-6);
        assert!((m.intercept - 3.0).abs() < 1e-6);
        let (mean, folds) = kfold_mse(&x, &y, 4, 1, 1e-9).unwrap();
        assert_eq!(folds.len(), 4);
        assert!(mean < 1e-10);
    }

    #[test]
    fn toy_contacts_cover_every_bucket() {
        for rec in generate_toy_contacts(20, 40, 5).unwrap() {
            assert_eq!(rec.sequence.len(), 40);
            let seps: Vec<usize> = rec.contacts.iter().map(|c| c[1] - c[0]).collect();
            for bucket in RangeBucket::ALL {
                assert_eq!(seps.iter().filter(|&&s| bucket.contains(s)).count(), 1);
            }
            for motif in MOTIF_RESIDUES {
                assert_eq!(rec.sequence.chars().filter(|&c| c == motif).count(), 2);
            }
        }
    }
}
