//! Turning predicted speedups into decisions.
//!
//! Predictions are classified against a threshold `t`, ranked per loop, and
//! used either directly (static selection) or as a shortlist to measure
//! (dynamic selection).

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{
    encode_transformation_onehot, encode_transformation_with, EmbeddingTable, EncodeError, Encoder, EncodingMethod,
    FreqMaps, TypeEnv,
};
use crate::lexer::TokenSeq;
use crate::mutate::TransformationSeq;
use crate::neural::{ModelParams, NeuralError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdClass {
    Advantageous,
    Disadvantageous,
    Neutral,
}

impl ThresholdClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdClass::Advantageous => "advantageous",
            ThresholdClass::Disadvantageous => "disadvantageous",
            ThresholdClass::Neutral => "neutral",
        }
    }
}

impl fmt::Display for ThresholdClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Advantageous above `t`, disadvantageous below `2 - t`, neutral in between.
pub fn classify(p: f64, t: f64) -> ThresholdClass {
    if p > t {
        ThresholdClass::Advantageous
    } else if p < 2.0 - t {
        ThresholdClass::Disadvantageous
    } else {
        ThresholdClass::Neutral
    }
}

/// Prediction and measurement agree on whether the loop got faster.
pub fn is_accurate(p: f64, a: f64) -> bool {
    (p > 1.0 && a > 1.0) || (p <= 1.0 && a <= 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub seq: TransformationSeq,
    pub p: f64,
    pub class: ThresholdClass,
}

/// Transformations of one loop, best predicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub loop_id: String,
    /// Threshold the entry classes were computed with.
    pub threshold: f64,
    pub entries: Vec<RankedEntry>,
}

/// One line of a ranking report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub loop_id: String,
    pub rank: usize,
    pub descriptor: String,
    pub p: f64,
    pub class: ThresholdClass,
}

impl RankedList {
    /// Sort by `p` descending, ties by descriptor ascending.
    pub fn from_scores(loop_id: &str, scored: Vec<(TransformationSeq, f64)>, t: f64) -> Self {
        let mut keyed: Vec<(String, TransformationSeq, f64)> =
            scored.into_iter().map(|(s, p)| (s.to_string(), s, p)).collect();
        keyed.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        let entries = keyed
            .into_iter()
            .map(|(_, seq, p)| RankedEntry { seq, p, class: classify(p, t) })
            .collect();
        RankedList { loop_id: loop_id.to_string(), threshold: t, entries }
    }

    /// Entries classified advantageous at `t`, in ranked order.
    pub fn advantageous(&self, t: f64) -> impl Iterator<Item = &RankedEntry> {
        self.entries.iter().filter(move |e| classify(e.p, t) == ThresholdClass::Advantageous)
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| ReportRecord {
                loop_id: self.loop_id.clone(),
                rank: i + 1,
                descriptor: e.seq.to_string(),
                p: e.p,
                class: e.class,
            })
            .collect()
    }

    /// `loop_id<TAB>rank<TAB>descriptor<TAB>p<TAB>class` per entry, at most `top` lines.
    pub fn to_text(&self, top: Option<usize>) -> String {
        let mut out = String::new();
        for r in self.records().into_iter().take(top.unwrap_or(usize::MAX)) {
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\t{}\n", r.loop_id, r.rank, r.descriptor, r.p, r.class));
        }
        out
    }
}

/// Outcome of a selection: a transformation to apply or the original loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    KeepOriginal,
    Apply(TransformationSeq),
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::KeepOriginal => f.write_str("keep-original"),
            Choice::Apply(s) => write!(f, "{s}"),
        }
    }
}

/// The top entry if it is advantageous at `t`.
pub fn select_static(ranked: &RankedList, t: f64) -> Choice {
    match ranked.entries.first() {
        Some(e) if classify(e.p, t) == ThresholdClass::Advantageous => Choice::Apply(e.seq.clone()),
        _ => Choice::KeepOriginal,
    }
}

/// Measure the top `k` advantageous entries and keep the fastest if it beats
/// the original; failed measurements are logged and skipped.
pub fn select_dynamic<E: fmt::Display>(
    ranked: &RankedList,
    k: usize,
    t: f64,
    mut measure: impl FnMut(&TransformationSeq) -> Result<f64, E>,
) -> (Choice, f64) {
    let mut best = (Choice::KeepOriginal, 1.0);
    for e in ranked.advantageous(t).take(k) {
        match measure(&e.seq) {
            Ok(s) if s > best.1 => best = (Choice::Apply(e.seq.clone()), s),
            Ok(_) => {}
            Err(err) => log::warn!("{}\tmeasure\t{}: {err}", ranked.loop_id, e.seq),
        }
    }
    best
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("invalid model metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How transformation sequences enter the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformEncoding {
    Compact { tile_sizes: Vec<usize> },
    /// One-hot over a fixed list of descriptors.
    Onehot { vocab: Vec<String> },
}

impl TransformEncoding {
    pub fn len(&self) -> usize {
        match self {
            TransformEncoding::Compact { .. } => crate::encode::TVEC_LEN,
            TransformEncoding::Onehot { vocab } => vocab.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, seq: &TransformationSeq) -> Result<Vec<f64>, EncodeError> {
        match self {
            TransformEncoding::Compact { tile_sizes } => Ok(encode_transformation_with(seq, tile_sizes)?.values),
            TransformEncoding::Onehot { vocab } => {
                let parsed: Vec<TransformationSeq> = vocab.iter().filter_map(|d| d.parse().ok()).collect();
                encode_transformation_onehot(seq, &parsed)
            }
        }
    }
}

/// Everything besides the weights needed to score a loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub method: EncodingMethod,
    pub max_len: usize,
    pub transform: TransformEncoding,
    pub freq: FreqMaps,
    /// Embedding file for the fasttext method, relative to the metadata file.
    pub embeddings: Option<PathBuf>,
}

/// A trained model with its frozen input encoders.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: ModelParams,
    pub meta: ModelMeta,
    pub encoder: Encoder,
}

impl Predictor {
    pub fn new(model: ModelParams, meta: ModelMeta, emb: Option<&EmbeddingTable>) -> Result<Self, PredictError> {
        let encoder = Encoder::new(meta.method, Some(&meta.freq), emb, meta.max_len)?;
        if encoder.channels() != model.arch.in_channels || meta.transform.len() != model.arch.tvec_len {
            return Err(PredictError::Meta(format!(
                "encoders produce {}x{} inputs, the model expects {}x{}",
                encoder.channels(),
                meta.transform.len(),
                model.arch.in_channels,
                model.arch.tvec_len
            )));
        }
        Ok(Predictor { model, meta, encoder })
    }

    /// Checkpoint at `path`, metadata at `path` with `.json` appended.
    pub fn save(&self, path: &Path) -> Result<(), PredictError> {
        self.model.save(path)?;
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| PredictError::Meta(e.to_string()))?;
        std::fs::write(meta_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictError> {
        let model = ModelParams::load(path)?;
        let text = std::fs::read_to_string(meta_path(path))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| PredictError::Meta(e.to_string()))?;
        let emb = match &meta.embeddings {
            Some(p) => {
                let base = path.parent().unwrap_or(Path::new("."));
                Some(EmbeddingTable::load(&base.join(p))?)
            }
            None => None,
        };
        Predictor::new(model, meta, emb.as_ref())
    }

    /// Predicted speedups of `seqs` on one loop, with one feature pass.
    pub fn predict(&self, seq: &TokenSeq, types: Option<&TypeEnv>, seqs: &[TransformationSeq]) -> Result<Vec<f64>, PredictError> {
        let enc = self.encoder.encode(seq, types)?;
        let tvecs = seqs.iter().map(|s| self.meta.transform.encode(s)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.model.score_batch(&enc.matrix, enc.max_len, &tvecs)?)
    }
}

pub fn meta_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Rank the enumerated transformations of one loop.
pub fn rank_loop(
    predictor: &Predictor,
    seq: &TokenSeq,
    types: Option<&TypeEnv>,
    transformations: &[TransformationSeq],
    t: f64,
) -> Result<RankedList, PredictError> {
    if transformations.is_empty() {
        return Ok(RankedList { loop_id: seq.loop_id.clone(), threshold: t, entries: Vec::new() });
    }
    let preds = predictor.predict(seq, types, transformations)?;
    Ok(RankedList::from_scores(&seq.loop_id, transformations.iter().cloned().zip(preds).collect(), t))
}

/// Total order on finite predictions used by callers that sort scores.
pub fn cmp_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(d: &str) -> TransformationSeq {
        d.parse().unwrap()
    }

    #[test]
    fn classes() {
        assert_eq!(classify(1.2, 1.1), ThresholdClass::Advantageous);
        assert_eq!(classify(0.85, 1.1), ThresholdClass::Disadvantageous);
        assert_eq!(classify(1.0, 1.1), ThresholdClass::Neutral);
        assert_eq!(classify(1.0, 1.0), ThresholdClass::Neutral);
        assert_eq!(classify(1.0001, 1.0), ThresholdClass::Advantageous);
    }

    #[test]
    fn accuracy_predicate() {
        assert!(is_accurate(1.05, 1.2));
        assert!(!is_accurate(0.9, 1.3));
        assert!(is_accurate(1.0, 1.0));
    }

    #[test]
    fn ties_break_by_descriptor() {
        let r = RankedList::from_scores(
            "l",
            vec![(s("unrolling(factor=4)"), 1.3), (s("unrolling(factor=8)"), 0.9), (s("unrolling(factor=2)"), 1.3)],
            1.0,
        );
        let order: Vec<String> = r.entries.iter().map(|e| e.seq.to_string()).collect();
        assert_eq!(order, ["unrolling(factor=2)", "unrolling(factor=4)", "unrolling(factor=8)"]);
    }

    #[test]
    fn dynamic_selection() {
        let r = RankedList::from_scores(
            "l",
            vec![(s("unrolling(factor=2)"), 1.5), (s("unrolling(factor=4)"), 1.4), (s("unrolling(factor=8)"), 1.3)],
            1.0,
        );
        let measured = [1.05, 0.97, 1.20];
        let mut i = 0;
        let (c, v) = select_dynamic(&r, 3, 1.0, |_| -> Result<f64, String> {
            i += 1;
            Ok(measured[i - 1])
        });
        assert_eq!((c, v), (Choice::Apply(s("unrolling(factor=8)")), 1.20));
        let (c, v) = select_dynamic(&r, 3, 1.0, |_| -> Result<f64, String> { Ok(0.9) });
        assert_eq!((c, v), (Choice::KeepOriginal, 1.0));
        let empty = RankedList::from_scores("l", vec![], 1.0);
        assert_eq!(select_static(&empty, 1.0), Choice::KeepOriginal);
    }
}
