//! Layer-wise spectral and distinguishability analysis of a dump.
//!
//! Every statistic is computed per sequence on the preprocessed layer matrix
//! and then averaged over sequences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dumps::ActivationDump;
use crate::error::{Error, Result};
use crate::linalg::pearson;
use crate::spectral::{
    erank, logits, max_abs_cosine, min_tv, preprocess, prob_bound, rep_bound, token_entropy,
    RepMatrix,
};

pub const AGGREGATION: &str = "per_sequence_mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub rep_bound: f64,
    pub prob_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub erank: f64,
    pub min_tv: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub max_cos: f64,
    pub bounds: Bounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpAnalysis {
    pub layers: Vec<LayerRecord>,
    /// Pearson correlation of layer eRank against layer min TV.
    pub erank_tv_correlation: Option<f64>,
    pub aggregation: String,
}

impl DumpAnalysis {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        let mut out = String::from("layer,erank,min_tv,mean_entropy,max_cos,rep_bound,prob_bound\n");
        for r in &self.layers {
            let _ = writeln!(
                out,
                "{},{:e},{},{},{:e},{:e},{}",
                r.layer,
                r.erank,
                opt(r.min_tv),
                opt(r.mean_entropy),
                r.max_cos,
                r.bounds.rep_bound,
                opt(r.bounds.prob_bound)
            );
        }
        out
    }
}

/// Analyzes every stored layer. With `require_tv`, a dump without an
/// unembedding block is a capability error; otherwise TV columns are simply
/// left empty.
pub fn analyze_dump(dump: &ActivationDump, require_tv: bool) -> Result<DumpAnalysis> {
    let head = match dump.logit_head() {
        Some(h) => Some(h?),
        None if require_tv => {
            return Err(Error::Capability(
                "min TV needs a dump with an unembedding block".into(),
            ))
        }
        None => None,
    };
    let k = dump.records.len() as f64;
    let mut layers = Vec::with_capacity(dump.num_stored_layers());
    for layer in 0..dump.num_stored_layers() {
        let (mut er, mut cos, mut rb) = (0.0, 0.0, 0.0);
        let (mut tv, mut ent, mut pb) = (0.0, 0.0, 0.0);
        for (seq, _) in dump.records.iter().enumerate() {
            let x = RepMatrix::new(dump.layer(seq, layer))
                .and_then(|x| preprocess(&x))
                .map_err(|e| context(e, seq, layer))?;
            let spec = erank(x.data()).map_err(|e| context(e, seq, layer))?;
            let l = x.rows();
            let bound = rep_bound(l, spec.erank.min(l as f64))?;
            er += spec.erank;
            cos += max_abs_cosine(&x).value;
            rb += bound;
            if let Some(h) = &head {
                let z = logits(x.data(), h)?;
                tv += min_tv(&z)?.value;
                ent += token_entropy(&z).1;
                pb += prob_bound(l, spec.erank.min(l as f64), h.vocab_size(), h.scaled_spectral_norm())?;
            }
        }
        let has_tv = head.is_some();
        layers.push(LayerRecord {
            layer,
            erank: er / k,
            min_tv: has_tv.then_some(tv / k),
            mean_entropy: has_tv.then_some(ent / k),
            max_cos: cos / k,
            bounds: Bounds {
                rep_bound: rb / k,
                prob_bound: has_tv.then_some(pb / k),
            },
        });
    }
    let erank_tv_correlation = if head.is_some() {
        let e: Vec<f64> = layers.iter().map(|r| r.erank).collect();
        let t: Vec<f64> = layers.iter().filter_map(|r| r.min_tv).collect();
        pearson(&e, &t)
    } else {
        None
    };
    Ok(DumpAnalysis {
        layers,
        erank_tv_correlation,
        aggregation: AGGREGATION.into(),
    })
}

fn context(e: Error, seq: usize, layer: usize) -> Error {
    match e {
        Error::DegenerateRow { row } => Error::Degenerate(format!(
            "sequence {seq} layer {layer}: row {row} is zero after centering"
        )),
        other => other,
    }
}
