//! Glue from a measured dataset to a trained predictor and its scores.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::encode::{
    build_freq_maps_checked, onehot_vocab, train_embeddings, EmbeddingConfig, EmbeddingTable, EncodeError, Encoder,
    EncodingMethod, TypeEnv,
};
use crate::harness::{CorpusLoop, Dataset, Scored, Side};
use crate::lexer::{admit, Admission, TokenSeq, DEFAULT_MAX_LEN};
use crate::mutate::{TransformationSeq, DEFAULT_TILE_SIZES};
use crate::neural::{train, Architecture, Example, Hyperparams, NeuralError, TrainOutcome, TrainingSet};
use crate::rank::{ModelMeta, PredictError, Predictor, TransformEncoding};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("no training sample refers to a usable loop")]
    NoTrainingData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    Compact,
    /// One-hot over the `size` most frequent training sequences.
    Onehot { size: usize },
}

/// Layer sizes other than the input and transformation widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchShape {
    pub init_channels: usize,
    pub blocks: usize,
    pub growth: usize,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for ArchShape {
    fn default() -> Self {
        let a = Architecture::new(0, 0);
        ArchShape { init_channels: a.init_channels, blocks: a.blocks, growth: a.growth, kernel: a.kernel, hidden: a.hidden }
    }
}

impl ArchShape {
    pub fn build(&self, in_channels: usize, tvec_len: usize) -> Architecture {
        Architecture {
            in_channels,
            tvec_len,
            init_channels: self.init_channels,
            blocks: self.blocks,
            growth: self.growth,
            kernel: self.kernel,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub method: EncodingMethod,
    pub transform: TransformMode,
    pub tile_sizes: Vec<usize>,
    pub max_len: usize,
    pub arch: ArchShape,
    pub hyper: Hyperparams,
    pub embedding: EmbeddingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: EncodingMethod::Basic,
            transform: TransformMode::Compact,
            tile_sizes: DEFAULT_TILE_SIZES.to_vec(),
            max_len: DEFAULT_MAX_LEN,
            arch: ArchShape::default(),
            hyper: Hyperparams::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

/// Tokens and declared types of one loop.
#[derive(Debug, Clone)]
pub struct LoopInput {
    pub tokens: TokenSeq,
    pub types: TypeEnv,
}

/// Tokenize every admissible corpus loop, keyed by loop id.
pub fn loop_inputs(corpus: &[CorpusLoop], max_len: usize) -> BTreeMap<String, LoopInput> {
    let mut out = BTreeMap::new();
    for l in corpus {
        let Ok(seq) = l.tokens() else { continue };
        if let Admission::Admitted(tokens) = admit(seq, max_len) {
            out.insert(l.loop_id.clone(), LoopInput { tokens, types: l.types() });
        }
    }
    out
}

/// A trained predictor together with its training record.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub predictor: Predictor,
    pub outcome: TrainOutcome,
    /// Subword table for the fasttext method.
    pub embeddings: Option<EmbeddingTable>,
    /// Samples left out because their transformation had no encoding.
    pub unencodable: usize,
}

/// Build encoders from the training split only, then train the regressor.
pub fn fit(dataset: &Dataset, loops: &BTreeMap<String, LoopInput>, cfg: &PipelineConfig) -> Result<Fitted, PipelineError> {
    let train_ids: BTreeSet<&str> = dataset.loops(Side::Train);
    let validation_ids: BTreeSet<String> = dataset.loops(Side::Validation).into_iter().map(str::to_string).collect();
    let train_seqs: Vec<TokenSeq> =
        loops.iter().filter(|(id, _)| train_ids.contains(id.as_str())).map(|(_, l)| l.tokens.clone()).collect();
    let freq = build_freq_maps_checked(&train_seqs, &validation_ids)?;
    let embeddings = match cfg.method {
        EncodingMethod::FastText => Some(train_embeddings(&train_seqs, &cfg.embedding)),
        _ => None,
    };
    let encoder = Encoder::new(cfg.method, Some(&freq), embeddings.as_ref(), cfg.max_len)?;
    let transform = match cfg.transform {
        TransformMode::Compact => TransformEncoding::Compact { tile_sizes: cfg.tile_sizes.clone() },
        TransformMode::Onehot { size } => TransformEncoding::Onehot {
            vocab: onehot_vocab(dataset.samples_on(Side::Train).map(|s| &s.transformation), size)
                .iter()
                .map(|s| s.to_string())
                .collect(),
        },
    };

    let mut set = TrainingSet::default();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unencodable = 0;
    for s in &dataset.samples {
        let Some(input) = loops.get(&s.loop_id) else { continue };
        let Some(side) = dataset.side(&s.loop_id) else { continue };
        let tvec = match transform.encode(&s.transformation) {
            Ok(v) => v,
            Err(EncodeError::UnknownTransformation(_)) => {
                unencodable += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let loop_index = match index.get(s.loop_id.as_str()) {
            Some(&i) => i,
            None => {
                let enc = encoder.encode(&input.tokens, Some(&input.types))?;
                set.loops.push((enc.matrix, enc.max_len));
                index.insert(&s.loop_id, set.loops.len() - 1);
                set.loops.len() - 1
            }
        };
        let ex = Example { loop_index, tvec, target: s.speedup };
        match side {
            Side::Train => set.train.push(ex),
            Side::Validation => set.validation.push(ex),
        }
    }
    if set.train.is_empty() {
        return Err(PipelineError::NoTrainingData);
    }
    let arch = cfg.arch.build(encoder.channels(), transform.len());
    let outcome = train(&set, arch, &cfg.hyper)?;
    let meta = ModelMeta { method: cfg.method, max_len: cfg.max_len, transform, freq, embeddings: None };
    let predictor = Predictor::new(outcome.model.clone(), meta, embeddings.as_ref())?;
    Ok(Fitted { predictor, outcome, embeddings, unencodable })
}

/// Predictions for every encodable sample, split by side. Each loop is
/// scored in one batch.
pub fn score(
    predictor: &Predictor,
    dataset: &Dataset,
    loops: &BTreeMap<String, LoopInput>,
) -> Result<(Vec<Scored>, Vec<Scored>), PipelineError> {
    let mut by_loop: BTreeMap<&str, Vec<(&TransformationSeq, f64)>> = BTreeMap::new();
    for s in &dataset.samples {
        if predictor.meta.transform.encode(&s.transformation).is_ok() {
            by_loop.entry(&s.loop_id).or_default().push((&s.transformation, s.speedup));
        }
    }
    let (mut train_out, mut val_out) = (Vec::new(), Vec::new());
    for (loop_id, samples) in by_loop {
        let (Some(input), Some(side)) = (loops.get(loop_id), dataset.side(loop_id)) else { continue };
        let seqs: Vec<TransformationSeq> = samples.iter().map(|(s, _)| (*s).clone()).collect();
        let preds = predictor.predict(&input.tokens, Some(&input.types), &seqs)?;
        let out = if side == Side::Train { &mut train_out } else { &mut val_out };
        for ((seq, a), p) in samples.into_iter().zip(preds) {
            out.push(Scored { loop_id: loop_id.to_string(), seq: seq.clone(), p, a });
        }
    }
    Ok((train_out, val_out))
}
