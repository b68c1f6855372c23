//! Downstream metrics and small probes on frozen encoder representations.

mod metrics;
mod probe;
mod tasks;

pub use metrics::{
    average_ranks, manhattan_distance, manhattan_similarity, mse, multilabel_f1, pairwise_manhattan_similarities,
    pearson, precision_at_k, spearman, ContactMap, F1Average, RangeBucket,
};
pub use probe::{
    contact_reports, fit_ridge, generate_toy_contacts, kfold_mse, kfold_partition, train_contact_probe,
    ContactProbe, ContactProbeSettings, ContactSample, RidgeModel, MOTIF_RESIDUES,
};
pub use tasks::{
    eval_affinity, eval_contact, eval_ppi, eval_similarity, load_affinity, load_contact_records, load_ppi,
    load_similarity, mean_embedding, save_contact_records, AffinityRecord, ContactRecord, PpiRecord,
    SimilarityRecord, PPI_LABELS,
};

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One metric value with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<RangeBucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divisor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub fingerprint: String,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64, fingerprint: &str) -> Result<Self, EvalError> {
        let metric = metric.into();
        if !value.is_finite() {
            return Err(EvalError::Undefined(format!("{metric} is not finite ({value})")));
        }
        Ok(Self {
            metric,
            value,
            bucket: None,
            divisor: None,
            fold: None,
            group: None,
            fingerprint: fingerprint.to_string(),
        })
    }
}

/// Short hex digest identifying an evaluation input.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_reports_jsonl(reports: &[MetricReport], mut out: impl Write) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
