use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::{contact_reports, kfold_mse, kfold_partition, train_contact_probe, ContactProbeSettings, ContactSample};
use super::{fingerprint, fit_ridge, multilabel_f1, pairwise_manhattan_similarities, spearman};
use super::{EvalError, F1Average, MetricReport};
use crate::model::{embed_residues, ModelConfig, Parameters};

/// Interaction types of the multi-label PPI task, in column order.
pub const PPI_LABELS: [&str; 7] = [
    "reaction",
    "binding",
    "ptmod",
    "activation",
    "inhibition",
    "catalysis",
    "expression",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactRecord {
    pub sequence: String,
    pub contacts: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpiRecord {
    pub a: String,
    pub b: String,
    pub labels: [bool; 7],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRecord {
    pub a: String,
    pub b: String,
    pub truth: f64,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityRecord {
    pub a: String,
    pub b: String,
    pub affinity: f64,
}

fn read_file(path: &Path) -> Result<Vec<u8>, EvalError> {
    std::fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-blank, non-comment lines with their 1-based numbers.
fn data_lines(path: &Path) -> Result<(Vec<(usize, String)>, String), EvalError> {
    let bytes = read_file(path)?;
    let fp = fingerprint(&bytes);
    let mut out = Vec::new();
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let t = line.trim_end_matches('\r');
        if t.trim().is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t.to_string()));
    }
    Ok((out, fp))
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> EvalError {
    EvalError::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64, EvalError> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("`{field}` is not a finite number")))
}

pub fn load_contact_records(path: &Path) -> Result<(Vec<ContactRecord>, String), EvalError> {
    let (lines, fp) = data_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let rec: ContactRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        let len = rec.sequence.chars().count();
        if let Some(c) = rec.contacts.iter().find(|c| c[0] >= len || c[1] >= len) {
            return Err(parse_err(path, n, format!("contact {c:?} outside sequence of length {len}")));
        }
        out.push(rec);
    }
    Ok((out, fp))
}

pub fn save_contact_records(records: &[ContactRecord], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| io(e.into()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// `seq_a <TAB> seq_b <TAB> labels`, labels a comma-separated list of type
/// names or indices (empty for none).
pub fn load_ppi(path: &Path) -> Result<(Vec<PpiRecord>, String), EvalError> {
    let (lines, fp) = data_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(parse_err(path, n, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let mut labels = [false; 7];
        for tok in cols.get(2).copied().unwrap_or("").split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let idx = tok
                .parse::<usize>()
                .ok()
                .filter(|&i| i < 7)
                .or_else(|| PPI_LABELS.iter().position(|l| l.eq_ignore_ascii_case(tok)))
                .ok_or_else(|| parse_err(path, n, format!("unknown interaction type `{tok}`")))?;
            labels[idx] = true;
        }
        out.push(PpiRecord {
            a: cols[0].trim().to_ascii_uppercase(),
            b: cols[1].trim().to_ascii_uppercase(),
            labels,
        });
    }
    Ok((out, fp))
}

/// `seq_a <TAB> seq_b <TAB> similarity [<TAB> group]`.
pub fn load_similarity(path: &Path) -> Result<(Vec<SimilarityRecord>, String), EvalError> {
    let (lines, fp) = data_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(parse_err(path, n, format!("expected 3 or 4 tab-separated columns, found {}", cols.len())));
        }
        out.push(SimilarityRecord {
            a: cols[0].trim().to_ascii_uppercase(),
            b: cols[1].trim().to_ascii_uppercase(),
            truth: parse_f64(path, n, cols[2])?,
            group: cols.get(3).map_or("all", |g| g.trim()).to_string(),
        });
    }
    Ok((out, fp))
}

/// `seq_a <TAB> seq_b <TAB> affinity`.
pub fn load_affinity(path: &Path) -> Result<(Vec<AffinityRecord>, String), EvalError> {
    let (lines, fp) = data_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, n, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        out.push(AffinityRecord {
            a: cols[0].trim().to_ascii_uppercase(),
            b: cols[1].trim().to_ascii_uppercase(),
            affinity: parse_f64(path, n, cols[2])?,
        });
    }
    Ok((out, fp))
}

/// Mean of the per-residue encoder states.
pub fn mean_embedding(cfg: &ModelConfig, params: &Parameters<f32>, seq: &str) -> Result<Vec<f64>, EvalError> {
    let states = embed_residues(cfg, params, seq)?;
    let d = states.last_dim();
    let n = states.numel() / d;
    let mut mean = vec![0.0; d];
    for row in states.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

struct EmbeddingCache<'a> {
    cfg: &'a ModelConfig,
    params: &'a Parameters<f32>,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    fn new(cfg: &'a ModelConfig, params: &'a Parameters<f32>) -> Self {
        Self {
            cfg,
            params,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, seq: &str) -> Result<Vec<f64>, EvalError> {
        if let Some(v) = self.cache.get(seq) {
            return Ok(v.clone());
        }
        let v = mean_embedding(self.cfg, self.params, seq)?;
        self.cache.insert(seq.to_string(), v.clone());
        Ok(v)
    }
}

/// Order-independent pair features `[u * v, |u - v|]`.
fn pair_features(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(v)
        .map(|(a, b)| a * b)
        .chain(u.iter().zip(v).map(|(a, b)| (a - b).abs()))
        .collect()
}

/// Trains the contact probe on all but a held-out fifth of the proteins and
/// reports the 3 x 3 precision grid on the held-out part.
pub fn eval_contact(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    records: &[ContactRecord],
    settings: ContactProbeSettings,
    fp: &str,
) -> Result<Vec<MetricReport>, EvalError> {
    if records.len() < 2 {
        return Err(EvalError::Config("contact evaluation needs at least two proteins".into()));
    }
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let states = embed_residues(cfg, params, &r.sequence.to_ascii_uppercase())?;
        let dim = states.last_dim();
        let len = states.numel() / dim;
        let mut truth = vec![false; len * len];
        for c in r.contacts.iter().filter(|c| c[0] < len && c[1] < len) {
            truth[c[0] * len + c[1]] = true;
            truth[c[1] * len + c[0]] = true;
        }
        samples.push(ContactSample {
            len,
            dim,
            features: states.data().iter().map(|&v| v as f64).collect(),
            truth,
        });
    }
    let k = records.len().min(5);
    let folds = kfold_partition(records.len(), k, settings.seed)?;
    let test = &folds[0];
    let train: Vec<ContactSample> = (0..samples.len())
        .filter(|i| !test.contains(i))
        .map(|i| samples[i].clone())
        .collect();
    let held: Vec<ContactSample> = test.iter().map(|&i| samples[i].clone()).collect();
    let (probe, _) = train_contact_probe(&train, settings)?;
    contact_reports(&probe, &held, fp)
}

/// Per-label ridge classifiers on pair features, thresholded at 0.5 and
/// scored with F1 on each held-out fold.
pub fn eval_ppi(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    records: &[PpiRecord],
    folds: usize,
    seed: u64,
    average: F1Average,
    fp: &str,
) -> Result<Vec<MetricReport>, EvalError> {
    let mut cache = EmbeddingCache::new(cfg, params);
    let x: Vec<Vec<f64>> = records
        .iter()
        .map(|r| Ok(pair_features(&cache.get(&r.a)?, &cache.get(&r.b)?)))
        .collect::<Result<_, EvalError>>()?;
    let parts = kfold_partition(records.len(), folds, seed)?;
    let mut reports = Vec::with_capacity(folds + 1);
    let mut sum = 0.0;
    for (fi, test) in parts.iter().enumerate() {
        let train: Vec<usize> = (0..records.len()).filter(|i| !test.contains(i)).collect();
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let mut pred = vec![vec![false; 7]; test.len()];
        for label in 0..7 {
            let ty: Vec<f64> = train.iter().map(|&i| f64::from(u8::from(records[i].labels[label]))).collect();
            let model = fit_ridge(&tx, &ty, 1e-2)?;
            for (row, &i) in pred.iter_mut().zip(test) {
                row[label] = model.predict(&x[i]) >= 0.5;
            }
        }
        let truth: Vec<Vec<bool>> = test.iter().map(|&i| records[i].labels.to_vec()).collect();
        let f1 = multilabel_f1(&pred, &truth, average)?;
        sum += f1;
        let mut r = MetricReport::new("f1", f1, fp)?;
        r.fold = Some(fi);
        reports.push(r);
    }
    reports.push(MetricReport::new("f1_mean", sum / folds as f64, fp)?);
    Ok(reports)
}

/// Spearman correlation between ground truth and embedding similarity,
/// one report per group, plus the distance normaliser used.
pub fn eval_similarity(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    records: &[SimilarityRecord],
    fp: &str,
) -> Result<Vec<MetricReport>, EvalError> {
    let mut cache = EmbeddingCache::new(cfg, params);
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut vectors = Vec::new();
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let mut id = |s: &str| -> Result<usize, EvalError> {
            if let Some(&i) = index.get(s) {
                return Ok(i);
            }
            vectors.push(cache.get(s)?);
            index.insert(s.to_string(), vectors.len() - 1);
            Ok(vectors.len() - 1)
        };
        pairs.push((id(&r.a)?, id(&r.b)?));
    }
    let (sims, normalizer) = pairwise_manhattan_similarities(&vectors, &pairs)?;
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, &s) in records.iter().zip(&sims) {
        let e = groups.entry(r.group.as_str()).or_default();
        e.0.push(r.truth);
        e.1.push(s);
    }
    let mut reports = Vec::with_capacity(groups.len() + 1);
    for (group, (truth, pred)) in groups {
        let mut r = MetricReport::new("spearman", spearman(&truth, &pred)?, fp)?;
        r.group = Some(group.to_string());
        reports.push(r);
    }
    reports.push(MetricReport::new("manhattan_normalizer", normalizer, fp)?);
    Ok(reports)
}

/// K-fold ridge regression from concatenated partner embeddings.
pub fn eval_affinity(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    records: &[AffinityRecord],
    folds: usize,
    seed: u64,
    fp: &str,
) -> Result<Vec<MetricReport>, EvalError> {
    let mut cache = EmbeddingCache::new(cfg, params);
    let x: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let mut f = cache.get(&r.a)?;
            f.extend(cache.get(&r.b)?);
            Ok(f)
        })
        .collect::<Result<_, EvalError>>()?;
    let y: Vec<f64> = records.iter().map(|r| r.affinity).collect();
    let (mean, per_fold) = kfold_mse(&x, &y, folds, seed, 1e-2)?;
    let mut reports = Vec::with_capacity(folds + 1);
    for (fi, v) in per_fold.into_iter().enumerate() {
        let mut r = MetricReport::new("mse", v, fp)?;
        r.fold = Some(fi);
        reports.push(r);
    }
    reports.push(MetricReport::new("mse_mean", mean, fp)?);
    Ok(reports)
}
