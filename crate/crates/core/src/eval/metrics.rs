use serde::{Deserialize, Serialize};

use super::EvalError;

/// Sequence-separation bucket for contact precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeBucket {
    /// `6 <= |i-j| < 12`
    Short,
    /// `12 <= |i-j| < 24`
    Medium,
    /// `|i-j| >= 24`
    Long,
}

impl RangeBucket {
    pub const ALL: [RangeBucket; 3] = [RangeBucket::Short, RangeBucket::Medium, RangeBucket::Long];

    pub fn bounds(self) -> (usize, Option<usize>) {
        match self {
            RangeBucket::Short => (6, Some(12)),
            RangeBucket::Medium => (12, Some(24)),
            RangeBucket::Long => (24, None),
        }
    }

    pub fn contains(self, separation: usize) -> bool {
        let (lo, hi) = self.bounds();
        separation >= lo && hi.is_none_or(|h| separation < h)
    }

    pub fn name(self) -> &'static str {
        match self {
            RangeBucket::Short => "short",
            RangeBucket::Medium => "medium",
            RangeBucket::Long => "long",
        }
    }
}

impl std::str::FromStr for RangeBucket {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(RangeBucket::Short),
            "medium" => Ok(RangeBucket::Medium),
            "long" => Ok(RangeBucket::Long),
            other => Err(EvalError::Config(format!("unknown range bucket `{other}`"))),
        }
    }
}

/// Ground truth and predicted probabilities for one protein, both `[L, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactMap {
    pub len: usize,
    pub truth: Vec<bool>,
    pub probs: Vec<f64>,
}

impl ContactMap {
    pub fn new(len: usize, truth: Vec<bool>, probs: Vec<f64>) -> Result<Self, EvalError> {
        if truth.len() != len * len || probs.len() != len * len {
            return Err(EvalError::Shape(format!(
                "contact map of length {len} needs {} entries",
                len * len
            )));
        }
        Ok(Self { len, truth, probs })
    }

    pub fn from_pairs(len: usize, contacts: &[(usize, usize)], probs: Vec<f64>) -> Result<Self, EvalError> {
        let mut truth = vec![false; len * len];
        for &(i, j) in contacts {
            if i >= len || j >= len {
                return Err(EvalError::Shape(format!("contact ({i}, {j}) outside length {len}")));
            }
            truth[i * len + j] = true;
            truth[j * len + i] = true;
        }
        Self::new(len, truth, probs)
    }
}

/// Precision of the `floor(L / divisor)` most probable upper-triangle pairs in
/// `bucket`. Ties break towards the lexicographically smaller `(i, j)`.
pub fn precision_at_k(map: &ContactMap, bucket: RangeBucket, divisor: usize) -> Result<f64, EvalError> {
    if divisor == 0 {
        return Err(EvalError::Config("divisor must be positive".into()));
    }
    let l = map.len;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..l {
        for j in i + 1..l {
            if bucket.contains(j - i) {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::Undefined(format!(
            "no residue pairs of length-{l} protein fall in the {} range",
            bucket.name()
        )));
    }
    let k = (l / divisor).min(pairs.len());
    if k == 0 {
        return Err(EvalError::Undefined(format!("top-{l}/{divisor} selects no pairs")));
    }
    // stable sort keeps (i, j) order among equal probabilities
    pairs.sort_by(|a, b| map.probs[b.0 * l + b.1].total_cmp(&map.probs[a.0 * l + a.1]));
    let hits = pairs[..k].iter().filter(|&&(i, j)| map.truth[i * l + j]).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Micro,
    Macro,
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 over `[samples][labels]` boolean decisions.
pub fn multilabel_f1(pred: &[Vec<bool>], truth: &[Vec<bool>], average: F1Average) -> Result<f64, EvalError> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(EvalError::Shape("prediction and truth shapes differ".into()));
    }
    let labels = truth.first().map_or(0, Vec::len);
    let mut per_label = vec![(0usize, 0usize, 0usize); labels];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != labels {
            return Err(EvalError::Shape("ragged label rows".into()));
        }
        for (c, (&pv, &tv)) in p.iter().zip(t).enumerate() {
            let e = &mut per_label[c];
            match (pv, tv) {
                (true, true) => e.0 += 1,
                (true, false) => e.1 += 1,
                (false, true) => e.2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match average {
        F1Average::Micro => {
            let (tp, fp, fn_) = per_label
                .iter()
                .fold((0, 0, 0), |a, e| (a.0 + e.0, a.1 + e.1, a.2 + e.2));
            f1_from_counts(tp, fp, fn_)
        }
        F1Average::Macro => {
            if labels == 0 {
                0.0
            } else {
                per_label.iter().map(|e| f1_from_counts(e.0, e.1, e.2)).sum::<f64>() / labels as f64
            }
        }
    })
}

/// 1-based average ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Shape(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(EvalError::Undefined("spearman needs at least two points".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .map_err(|_| EvalError::Undefined("zero rank variance".into()))
}

pub fn manhattan_distance(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::Shape(format!("vector lengths {} and {} differ", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum())
}

/// `1 - ||u - v||_1 / normalizer`.
pub fn manhattan_similarity(u: &[f64], v: &[f64], normalizer: f64) -> Result<f64, EvalError> {
    if !(normalizer > 0.0) {
        return Err(EvalError::Config(format!("normalizer must be positive, got {normalizer}")));
    }
    Ok(1.0 - manhattan_distance(u, v)? / normalizer)
}

/// Similarities for index pairs into `vectors`, normalised by the largest
/// distance among those pairs. Returns (similarities, normalizer).
pub fn pairwise_manhattan_similarities(
    vectors: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<(Vec<f64>, f64), EvalError> {
    let dists: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| {
            let (u, v) = (
                vectors.get(a).ok_or_else(|| EvalError::Shape(format!("index {a} out of range")))?,
                vectors.get(b).ok_or_else(|| EvalError::Shape(format!("index {b} out of range")))?,
            );
            manhattan_distance(u, v)
        })
        .collect::<Result<_, _>>()?;
    let normalizer = dists.iter().copied().fold(0.0, f64::max);
    if normalizer == 0.0 {
        return Ok((vec![1.0; dists.len()], 0.0));
    }
    Ok((dists.iter().map(|d| 1.0 - d / normalizer).collect(), normalizer))
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Shape(format!("lengths {} and {} differ", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(EvalError::Undefined("mse of zero samples".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_disjoint() {
        for sep in 0..60 {
            let n = RangeBucket::ALL.iter().filter(|b| b.contains(sep)).count();
            assert_eq!(n, usize::from(sep >= 6));
        }
    }

    #[test]
    fn precision_perfect_and_worst() {
        let l = 20;
        let contacts: Vec<(usize, usize)> = (0..l - 8).map(|i| (i, i + 8)).collect();
        let mut probs = vec![0.0; l * l];
        for &(i, j) in &contacts {
            probs[i * l + j] = 1.0;
            probs[j * l + i] = 1.0;
        }
        let map = ContactMap::from_pairs(l, &contacts, probs.clone()).unwrap();
        assert_eq!(precision_at_k(&map, RangeBucket::Short, 2).unwrap(), 1.0);

        let inverted: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let map = ContactMap::from_pairs(l, &contacts, inverted).unwrap();
        assert_eq!(precision_at_k(&map, RangeBucket::Short, 5).unwrap(), 0.0);
    }

    #[test]
    fn empty_bucket_is_undefined_not_zero() {
        let map = ContactMap::new(10, vec![false; 100], vec![0.5; 100]).unwrap();
        assert!(matches!(
            precision_at_k(&map, RangeBucket::Long, 1),
            Err(EvalError::Undefined(_))
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        // all equal probabilities: top pairs are the first in (i, j) order
        let l = 14;
        let map = ContactMap::from_pairs(l, &[(0, 6)], vec![0.3; l * l]).unwrap();
        // floor(14/5) = 2 picks (0,6) and (0,7)
        assert_eq!(precision_at_k(&map, RangeBucket::Short, 5).unwrap(), 0.5);
    }

    #[test]
    fn f1_cases() {
        let truth = vec![vec![true, false, true], vec![false, true, false]];
        assert_eq!(multilabel_f1(&truth, &truth, F1Average::Micro).unwrap(), 1.0);
        let none = vec![vec![false; 3]; 2];
        assert_eq!(multilabel_f1(&none, &truth, F1Average::Micro).unwrap(), 0.0);
        assert_eq!(multilabel_f1(&none, &none, F1Average::Micro).unwrap(), 0.0);
        assert!(multilabel_f1(&none, &truth[..1], F1Average::Micro).is_err());
        // macro: label 0 perfect, label 1 missed, label 2 perfect
        let pred = vec![vec![true, false, true], vec![false, false, false]];
        let m = multilabel_f1(&pred, &truth, F1Average::Macro).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_antitone() {
        let x = [0.3, 1.2, -4.0, 7.5, 2.2];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v * 3.0).collect();
        assert!((spearman(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(spearman(&x, &[1.0; 5]), Err(EvalError::Undefined(_))));
        assert!(spearman(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn manhattan_cases() {
        let u = [1.0, -2.0, 0.5];
        assert_eq!(manhattan_similarity(&u, &u, 3.0).unwrap(), 1.0);
        let v = [2.0, -2.0, -0.5];
        assert_eq!(manhattan_similarity(&u, &v, 2.0).unwrap(), 0.0);
        assert!(manhattan_similarity(&u, &v, 0.0).is_err());
    }

    #[test]
    fn mse_cases() {
        let t = [1.0, 2.0, -3.0];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert!((mse(&shifted, &t).unwrap() - 0.25).abs() < 1e-12);
    }
}
