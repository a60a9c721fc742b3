//! JSON payloads for evaluation and training output.

use dml_core::metrics::{density, kmeans, retrieval_report, spectral_decay, Metric, DEFAULT_MAX_ITERS};
use dml_core::trainer::{EpochRecord, EvalMetrics};
use dml_core::EmbeddingSet;
use serde_json::{json, Map, Value};

use crate::error::Result;

/// What `eval` should compute. Empty lists and `false` flags are skipped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalRequest {
    pub recall: Vec<usize>,
    pub map: Vec<usize>,
    pub metric: Metric,
    pub nmi: bool,
    pub density: bool,
    /// Leading singular values to skip; `None` leaves spectral decay out.
    pub spectral_skip: Option<usize>,
    /// k-means seed for NMI.
    pub seed: u64,
}

pub fn evaluate_set(set: &EmbeddingSet, req: &EvalRequest) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    if !req.recall.is_empty() || !req.map.is_empty() {
        let r = retrieval_report(set, &req.recall, &req.map, req.metric)?;
        for (k, v) in &r.recall_at {
            out.insert(format!("recall@{k}"), json!(v));
        }
        for (c, v) in &r.map_at {
            out.insert(format!("map@{c}"), json!(v));
        }
    }
    if req.nmi {
        let k = set.class_index().num_classes();
        out.insert("nmi".into(), json!(kmeans(set, k, req.seed, DEFAULT_MAX_ITERS)?.nmi));
    }
    if req.density {
        let d = density(set)?;
        out.insert("pi_intra".into(), json!(d.pi_intra));
        out.insert("pi_inter".into(), json!(d.pi_inter));
        out.insert("pi_ratio".into(), json!(d.pi_ratio));
    }
    if let Some(skip) = req.spectral_skip {
        out.insert("spectral_decay".into(), json!(spectral_decay(set, skip)?));
    }
    Ok(out)
}

pub fn eval_metrics_json(m: &EvalMetrics) -> Map<String, Value> {
    let mut out = Map::new();
    out.insert("recall@1".into(), json!(m.recall_at_1));
    out.insert("map@1000".into(), json!(m.map_at_1000));
    out.insert("nmi".into(), json!(m.nmi));
    out.insert("pi_ratio".into(), json!(m.pi_ratio));
    out.insert("spectral_decay".into(), json!(m.spectral_decay));
    out
}

/// One JSON line of the training history.
pub fn epoch_json(r: &EpochRecord) -> Value {
    let mut out = Map::new();
    out.insert("epoch".into(), json!(r.epoch));
    out.insert("loss".into(), json!(r.loss));
    if let Some(d) = r.distill {
        out.insert("distill".into(), json!(d));
    }
    if let Some(m) = &r.eval {
        out.extend(eval_metrics_json(m));
    }
    Value::Object(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dml_core::Matrix;

    #[test]
    fn only_requested_keys() {
        let m = Matrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]]).unwrap();
        let set = EmbeddingSet::new(m, vec![0, 0, 1, 1]).unwrap();
        let req = EvalRequest { recall: vec![1, 2], density: true, ..Default::default() };
        let out = evaluate_set(&set, &req).unwrap();
        let keys: Vec<&str> = out.keys().map(String::as_str).collect();
        assert_eq!(keys, ["pi_inter", "pi_intra", "pi_ratio", "recall@1", "recall@2"]);
        assert_eq!(out["recall@1"], json!(1.0));
    }
}
