//! Model inputs: token encodings, frequency maps, subword embeddings and the
//! transformation vectors.
//!
//! Every token encoding produces a `max_len x channels` matrix whose rows past
//! the last token are zero. The compact transformation vector has 56 entries,
//! split into per-kind subvectors that each start with a presence bit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::{Token, TokenKind, TokenSeq};
use crate::mutate::{
    TransformationSeq, TransformationStep, DEFAULT_TILE_SIZES, MAX_PERM, TILE_LEVELS, UNROLL_AND_JAM_FACTORS,
    UNROLL_AND_JAM_LEVELS, UNROLL_FACTORS,
};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("missing resource: {0}")]
    MissingResource(&'static str),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("parameter out of encodable range: {0}")]
    EncodingOverflow(String),
    #[error("malformed transformation vector: {0}")]
    MalformedVector(String),
    #[error("transformation `{0}` is not in the one-hot vocabulary")]
    UnknownTransformation(String),
    #[error("frequency maps must not see validation loop `{0}`")]
    ValidationLeak(String),
    #[error("invalid embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Types the type-based encoding distinguishes.
pub const TYPE_SLOTS: [&str; 7] = ["int", "double", "long", "float", "struct", "char", "short"];
/// Width of the log-scale integer segment of the complex encoding.
pub const LITERAL_BUCKETS: usize = 64;
pub const EMBEDDING_DIM: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMethod {
    /// Top `n` tokens one-hot, the rest unknown.
    Fixed { n: usize },
    Basic,
    TypeBased,
    /// Identifiers consistently mapped to `m` random slots per loop.
    Renaming { m: usize },
    /// Identifiers covering `c` percent of occurrences get their own slot.
    Complex { c: u32 },
    FastText,
}

impl EncodingMethod {
    pub const NAMES: [&'static str; 6] = ["fixed", "basic", "type_based", "renaming", "complex", "fasttext"];

    pub fn name(&self) -> &'static str {
        match self {
            EncodingMethod::Fixed { .. } => "fixed",
            EncodingMethod::Basic => "basic",
            EncodingMethod::TypeBased => "type_based",
            EncodingMethod::Renaming { .. } => "renaming",
            EncodingMethod::Complex { .. } => "complex",
            EncodingMethod::FastText => "fasttext",
        }
    }

    /// Build from a method name and the parameters of all methods.
    pub fn from_parts(name: &str, n: usize, m: usize, c: u32) -> Option<Self> {
        Some(match name {
            "fixed" => EncodingMethod::Fixed { n },
            "basic" => EncodingMethod::Basic,
            "type_based" | "type-based" => EncodingMethod::TypeBased,
            "renaming" => EncodingMethod::Renaming { m },
            "complex" if c <= 100 => EncodingMethod::Complex { c },
            "fasttext" => EncodingMethod::FastText,
            _ => return None,
        })
    }
}

impl fmt::Display for EncodingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodingMethod::Fixed { n } => write!(f, "fixed(n={n})"),
            EncodingMethod::Renaming { m } => write!(f, "renaming(m={m})"),
            EncodingMethod::Complex { c } => write!(f, "complex(c={c})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Token frequency statistics of the training split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreqMaps {
    pub f_tokens: BTreeMap<String, u64>,
    pub f_ids: BTreeMap<String, u64>,
    pub f_std_tokens: BTreeMap<String, u64>,
    /// Percentage -> number of most frequent identifiers covering it.
    pub i_cov: BTreeMap<u32, usize>,
}

/// Keys ordered by count descending, then text ascending.
pub fn by_frequency(map: &BTreeMap<String, u64>) -> Vec<&str> {
    let mut v: Vec<(&String, &u64)> = map.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.as_str()).collect()
}

impl FreqMaps {
    pub fn top_tokens(&self, n: usize) -> Vec<&str> {
        by_frequency(&self.f_tokens).into_iter().take(n).collect()
    }

    pub fn std_vocab(&self) -> Vec<&str> {
        by_frequency(&self.f_std_tokens)
    }

    /// Identifiers covering `c` percent of identifier occurrences.
    pub fn covering_ids(&self, c: u32) -> Vec<&str> {
        let k = self.i_cov.get(&c.min(100)).copied().unwrap_or(0);
        by_frequency(&self.f_ids).into_iter().take(k).collect()
    }
}

/// Count tokens of the training corpus.
pub fn build_freq_maps(corpus: &[TokenSeq]) -> FreqMaps {
    let mut maps = FreqMaps::default();
    for seq in corpus {
        for t in &seq.tokens {
            *maps.f_tokens.entry(t.text.clone()).or_default() += 1;
            if t.kind == TokenKind::Identifier {
                *maps.f_ids.entry(t.text.clone()).or_default() += 1;
            } else if t.kind.is_standard() {
                *maps.f_std_tokens.entry(t.text.clone()).or_default() += 1;
            }
        }
    }
    let total: u64 = maps.f_ids.values().sum();
    if total > 0 {
        let mut counts: Vec<u64> = maps.f_ids.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        for p in 0..=100u32 {
            let mut covered = 0u64;
            let mut k = 0;
            // covered / total >= p / 100, in integers
            while covered * 100 < u64::from(p) * total {
                covered += counts[k];
                k += 1;
            }
            maps.i_cov.insert(p, k);
        }
    }
    maps
}

/// As [`build_freq_maps`], refusing any loop listed in `validation`.
pub fn build_freq_maps_checked(corpus: &[TokenSeq], validation: &BTreeSet<String>) -> Result<FreqMaps, EncodeError> {
    if let Some(s) = corpus.iter().find(|s| validation.contains(&s.loop_id)) {
        return Err(EncodeError::ValidationLeak(s.loop_id.clone()));
    }
    Ok(build_freq_maps(corpus))
}

/// Declared type of each identifier, restricted to [`TYPE_SLOTS`].
pub type TypeEnv = BTreeMap<String, &'static str>;

const SPECIFIERS: &[&str] = &[
    "int", "double", "long", "float", "struct", "union", "char", "short", "unsigned", "signed", "const",
    "volatile", "static", "register", "extern", "enum", "void", "typedef", "_Bool", "restrict", "inline",
];

fn base_type(specs: &[&str]) -> Option<&'static str> {
    let has = |s: &str| specs.contains(&s);
    if has("struct") || has("union") {
        Some("struct")
    } else if has("double") {
        Some("double")
    } else if has("float") {
        Some("float")
    } else if has("char") {
        Some("char")
    } else if has("short") {
        Some("short")
    } else if has("long") {
        Some("long")
    } else if has("int") || has("unsigned") || has("signed") || has("enum") {
        Some("int")
    } else {
        None
    }
}

/// Scan declarations (including typedefs) in a token list.
pub fn declared_types(tokens: &[Token]) -> TypeEnv {
    let mut env = TypeEnv::new();
    let mut typedefs: BTreeMap<String, Option<&'static str>> = BTreeMap::new();
    let mut k = 0;
    while k < tokens.len() {
        let starts = k == 0 || ["(", ";", "{", "}"].iter().any(|s| tokens[k - 1].is(s));
        let is_spec = |t: &Token| SPECIFIERS.contains(&t.text.as_str()) && t.kind == TokenKind::Keyword;
        let is_typedef_name = |t: &Token| t.kind == TokenKind::Identifier && typedefs.contains_key(&t.text);
        if !starts || !(is_spec(&tokens[k]) || is_typedef_name(&tokens[k]) && tokens.get(k + 1).is_some_and(|t| t.kind == TokenKind::Identifier || t.is("*"))) {
            k += 1;
            continue;
        }
        let mut specs: Vec<&str> = Vec::new();
        let mut from_typedef: Option<Option<&'static str>> = None;
        while k < tokens.len() {
            let t = &tokens[k];
            if is_spec(t) {
                specs.push(t.text.as_str());
                if (t.is("struct") || t.is("union") || t.is("enum")) && tokens.get(k + 1).is_some_and(|n| n.kind == TokenKind::Identifier) {
                    k += 1;
                }
                k += 1;
            } else if specs.iter().all(|s| ["const", "volatile", "static", "register", "extern", "typedef"].contains(s))
                && from_typedef.is_none()
                && is_typedef_name(t)
            {
                from_typedef = Some(typedefs[&t.text]);
                k += 1;
            } else {
                break;
            }
        }
        let ty = match from_typedef {
            Some(t) => t,
            None => base_type(&specs),
        };
        let is_typedef = specs.contains(&"typedef");
        // declarators
        loop {
            while k < tokens.len() && (tokens[k].is("*") || tokens[k].is("const") || tokens[k].is("restrict")) {
                k += 1;
            }
            let Some(name) = tokens.get(k).filter(|t| t.kind == TokenKind::Identifier) else { break };
            if is_typedef {
                typedefs.insert(name.text.clone(), ty);
            } else if let Some(ty) = ty {
                env.insert(name.text.clone(), ty);
            }
            k += 1;
            // skip array dimensions, parameter lists and initializers
            let mut depth = 0i32;
            while k < tokens.len() {
                let t = &tokens[k];
                if t.is("(") || t.is("[") || t.is("{") {
                    depth += 1;
                } else if t.is(")") || t.is("]") || t.is("}") {
                    if depth == 0 {
                        break;
                    }
                    depth -= 1;
                } else if depth == 0 && (t.is(",") || t.is(";")) {
                    break;
                }
                k += 1;
            }
            if tokens.get(k).is_some_and(|t| t.is(",")) {
                k += 1;
                continue;
            }
            break;
        }
    }
    env
}

/// A padded `max_len x channels` input matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedLoop {
    pub method: EncodingMethod,
    pub channels: usize,
    pub max_len: usize,
    /// Number of real (non-padding) rows.
    pub len: usize,
    /// Row-major values.
    pub matrix: Vec<f64>,
}

impl EncodedLoop {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.channels..(i + 1) * self.channels]
    }
}

/// A frozen token encoder: vocabularies are resolved once, then applied to many loops.
#[derive(Debug, Clone)]
pub struct Encoder {
    method: EncodingMethod,
    max_len: usize,
    /// Token text -> channel for one-hot vocabularies.
    slots: HashMap<String, usize>,
    /// Start of the special slots after the vocabulary.
    special: usize,
    channels: usize,
    emb: Option<EmbeddingTable>,
}

/// Layout of the special slots that follow the standard-token vocabulary.
struct Specials {
    id: usize,
    unknown: usize,
}

impl Encoder {
    pub fn new(
        method: EncodingMethod,
        freq: Option<&FreqMaps>,
        emb: Option<&EmbeddingTable>,
        max_len: usize,
    ) -> Result<Self, EncodeError> {
        let mut slots = HashMap::new();
        let need_freq = || freq.ok_or(EncodeError::MissingResource("frequency maps"));
        let (special, channels) = match method {
            EncodingMethod::Fixed { n } => {
                for (i, t) in need_freq()?.top_tokens(n).into_iter().enumerate() {
                    slots.insert(t.to_string(), i);
                }
                // Always n + 1 wide, even if the corpus has fewer distinct tokens.
                (n, n + 1)
            }
            EncodingMethod::Basic | EncodingMethod::TypeBased | EncodingMethod::Renaming { .. } => {
                let vocab = need_freq()?.std_vocab();
                for (i, t) in vocab.iter().enumerate() {
                    slots.insert(t.to_string(), i);
                }
                let s = vocab.len();
                let extra = match method {
                    EncodingMethod::TypeBased => TYPE_SLOTS.len(),
                    EncodingMethod::Renaming { m } => m,
                    _ => 0,
                };
                // [vocab][extra][id][unknown][int][magnitude]
                (s, s + extra + 4)
            }
            EncodingMethod::Complex { c } => {
                let freq = need_freq()?;
                let vocab = freq.std_vocab();
                let ids = freq.covering_ids(c);
                for (i, t) in vocab.iter().chain(&ids).enumerate() {
                    slots.insert(t.to_string(), i);
                }
                let s = vocab.len() + ids.len();
                // [vocab][ids][id][unknown][64 buckets]
                (s, s + 2 + LITERAL_BUCKETS)
            }
            EncodingMethod::FastText => {
                let e = emb.ok_or(EncodeError::MissingResource("embedding table"))?;
                (0, e.dim)
            }
        };
        Ok(Encoder {
            method,
            max_len,
            slots,
            special,
            channels,
            emb: if method == EncodingMethod::FastText { emb.cloned() } else { None },
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn method(&self) -> EncodingMethod {
        self.method
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn specials(&self) -> Specials {
        let extra = match self.method {
            EncodingMethod::TypeBased => TYPE_SLOTS.len(),
            EncodingMethod::Renaming { m } => m,
            _ => 0,
        };
        Specials { id: self.special + extra, unknown: self.special + extra + 1 }
    }

    /// Encode `seq`. `types` supplies declared types for the type-based
    /// method; without it, declarations inside the loop are used.
    pub fn encode(&self, seq: &TokenSeq, types: Option<&TypeEnv>) -> Result<EncodedLoop, EncodeError> {
        if seq.len() > self.max_len {
            return Err(EncodeError::TooLong { len: seq.len(), max_len: self.max_len });
        }
        let c = self.channels;
        let mut matrix = vec![0.0; self.max_len * c];
        let sp = self.specials();
        let local_types;
        let types = match types {
            Some(t) => t,
            None => {
                local_types = declared_types(&seq.tokens);
                &local_types
            }
        };
        let renaming = match self.method {
            EncodingMethod::Renaming { m } => renaming_slots(seq, m),
            _ => HashMap::new(),
        };
        for (i, t) in seq.tokens.iter().enumerate() {
            let row = &mut matrix[i * c..(i + 1) * c];
            match self.method {
                EncodingMethod::Fixed { n } => {
                    row[self.slots.get(&t.text).copied().unwrap_or(n)] = 1.0;
                }
                EncodingMethod::Basic | EncodingMethod::TypeBased | EncodingMethod::Renaming { .. } => {
                    let int_slot = sp.unknown + 1;
                    match t.kind {
                        TokenKind::Identifier => {
                            let slot = match self.method {
                                EncodingMethod::TypeBased => types
                                    .get(&t.text)
                                    .and_then(|ty| TYPE_SLOTS.iter().position(|s| s == ty))
                                    .map(|p| self.special + p),
                                EncodingMethod::Renaming { .. } => renaming.get(&t.text).map(|p| self.special + p),
                                _ => None,
                            };
                            row[slot.unwrap_or(sp.id)] = 1.0;
                        }
                        TokenKind::IntLiteral => {
                            row[int_slot] = 1.0;
                            row[int_slot + 1] = magnitude(t);
                        }
                        _ => row[self.slots.get(&t.text).copied().filter(|_| t.kind.is_standard()).unwrap_or(sp.unknown)] = 1.0,
                    }
                }
                EncodingMethod::Complex { .. } => match t.kind {
                    TokenKind::IntLiteral => {
                        row[sp.unknown + 1 + literal_bucket(t.int_value().unwrap_or(u64::MAX))] = 1.0;
                    }
                    TokenKind::Identifier => row[self.slots.get(&t.text).copied().unwrap_or(sp.id)] = 1.0,
                    k if k.is_standard() => row[self.slots.get(&t.text).copied().unwrap_or(sp.unknown)] = 1.0,
                    _ => row[sp.unknown] = 1.0,
                },
                EncodingMethod::FastText => {
                    let e = self.emb.as_ref().expect("checked at construction");
                    if let Some(v) = e.lookup(&t.text) {
                        row.copy_from_slice(&v);
                    }
                }
            }
        }
        Ok(EncodedLoop { method: self.method, channels: c, max_len: self.max_len, len: seq.len(), matrix })
    }

    /// Channel ranges that are one-hot segments (at most one 1 per row).
    pub fn onehot_segments(&self) -> Vec<std::ops::Range<usize>> {
        let sp = self.specials();
        match self.method {
            EncodingMethod::Fixed { .. } => vec![0..self.channels],
            EncodingMethod::Basic | EncodingMethod::TypeBased | EncodingMethod::Renaming { .. } => {
                vec![0..sp.unknown + 2]
            }
            EncodingMethod::Complex { .. } => vec![0..self.channels],
            EncodingMethod::FastText => vec![],
        }
    }
}

/// Encode one loop with a throwaway [`Encoder`].
pub fn encode_tokens(
    seq: &TokenSeq,
    method: EncodingMethod,
    freq: Option<&FreqMaps>,
    emb: Option<&EmbeddingTable>,
    max_len: usize,
) -> Result<EncodedLoop, EncodeError> {
    Encoder::new(method, freq, emb, max_len)?.encode(seq, None)
}

/// log2(|v| + 1) of an integer literal.
fn magnitude(t: &Token) -> f64 {
    t.int_value().map(|v| (v as f64 + 1.0).log2()).unwrap_or(64.0)
}

/// floor(log2(v + 1)), clamped to the bucket range.
pub fn literal_bucket(v: u64) -> usize {
    let x = u128::from(v) + 1;
    ((127 - x.leading_zeros()) as usize).min(LITERAL_BUCKETS - 1)
}

/// 64-bit FNV-1a, used to derive per-loop seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Distinct identifiers in first-occurrence order, each given a slot from a
/// seeded shuffle of `0..m`; identifiers beyond `m` get none.
fn renaming_slots(seq: &TokenSeq, m: usize) -> HashMap<String, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seq.loop_id.as_bytes()));
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut out = HashMap::new();
    for t in seq.tokens.iter().filter(|t| t.kind == TokenKind::Identifier) {
        let next = out.len();
        if !out.contains_key(&t.text) && next < m {
            out.insert(t.text.clone(), order[next]);
        }
    }
    out
}

/// Subword (character n-gram) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vocab: BTreeMap<String, Vec<f64>>,
    pub subwords: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_n: usize,
    pub max_n: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: EMBEDDING_DIM,
            epochs: 100,
            window: 5,
            negatives: 5,
            min_n: 3,
            max_n: 6,
            learning_rate: 0.05,
            seed: 1,
        }
    }
}

/// Character n-grams of `<word>` with lengths in `min_n..=max_n`.
pub fn char_ngrams(word: &str, min_n: usize, max_n: usize) -> Vec<String> {
    let chars: Vec<char> = format!("<{word}>").chars().collect();
    let mut out = Vec::new();
    for n in min_n..=max_n {
        for w in chars.windows(n) {
            out.push(w.iter().collect());
        }
    }
    out
}

const EMB_MAGIC: &[u8; 8] = b"LTEMB\0\0\0";
const EMB_VERSION: u32 = 1;

impl EmbeddingTable {
    /// The stored vector of an in-vocabulary token, otherwise the mean of its
    /// known n-gram vectors. `None` if no n-gram is known.
    pub fn lookup(&self, word: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.vocab.get(word) {
            return Some(v.clone());
        }
        let mut sum = vec![0.0; self.dim];
        let mut count = 0usize;
        for g in char_ngrams(word, 3, 6) {
            if let Some(v) = self.subwords.get(&g) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                count += 1;
            }
        }
        (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), EncodeError> {
        w.write_all(EMB_MAGIC)?;
        w.write_all(&EMB_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u64).to_le_bytes())?;
        w.write_all(&(self.subwords.len() as u64).to_le_bytes())?;
        for (text, v) in self.vocab.iter().chain(&self.subwords) {
            w.write_all(&(text.len() as u32).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, EncodeError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EMB_MAGIC {
            return Err(EncodeError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != EMB_VERSION {
            return Err(EncodeError::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(r)? as usize;
        let nv = read_u64(r)?;
        let ng = read_u64(r)?;
        let mut read_records = |n: u64| -> Result<BTreeMap<String, Vec<f64>>, EncodeError> {
            let mut out = BTreeMap::new();
            for _ in 0..n {
                let len = read_u32(r)? as usize;
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf)?;
                let text = String::from_utf8(buf).map_err(|_| EncodeError::Format("record text is not UTF-8".into()))?;
                let mut v = Vec::with_capacity(dim);
                for _ in 0..dim {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    v.push(f64::from_le_bytes(b));
                }
                out.insert(text, v);
            }
            Ok(out)
        };
        let vocab = read_records(nv)?;
        let subwords = read_records(ng)?;
        Ok(EmbeddingTable { dim, vocab, subwords })
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodeError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncodeError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, EncodeError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, EncodeError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Train subword embeddings with skip-gram and negative sampling.
///
/// A word's input representation is the mean of its own vector and its
/// n-gram vectors; the stored vocabulary vector is that mean after training.
pub fn train_embeddings(corpus: &[TokenSeq], cfg: &EmbeddingConfig) -> EmbeddingTable {
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for s in corpus {
        for t in &s.tokens {
            *counts.entry(t.text.as_str()).or_default() += 1;
        }
    }
    let words: Vec<&str> = counts.keys().copied().collect();
    let word_index: HashMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let mut ngram_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut inputs_of: Vec<Vec<usize>> = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let mut ids = vec![i];
        for g in char_ngrams(w, cfg.min_n, cfg.max_n) {
            let next = words.len() + ngram_index.len();
            let id = *ngram_index.entry(g).or_insert(next);
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        inputs_of.push(ids);
    }
    let rows = words.len() + ngram_index.len();
    let bound = 1.0 / dim as f64;
    let mut input: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut output = vec![0.0; words.len() * dim];

    // Unigram^0.75 table for negative sampling.
    let mut table = Vec::new();
    let z: f64 = counts.values().map(|&c| (c as f64).powf(0.75)).sum();
    for (i, &c) in counts.values().enumerate() {
        let share = ((c as f64).powf(0.75) / z * 10_000.0).ceil() as usize;
        table.extend(std::iter::repeat_n(i, share.max(1)));
    }

    let sentences: Vec<Vec<usize>> =
        corpus.iter().map(|s| s.tokens.iter().map(|t| word_index[t.text.as_str()]).collect()).collect();
    let total_steps = (cfg.epochs * sentences.iter().map(Vec::len).sum::<usize>()).max(1);
    let mut step = 0usize;
    let mut hidden = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for sent in &sentences {
            for (pos, &center) in sent.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64).max(1e-4);
                step += 1;
                let ids = &inputs_of[center];
                let scale = 1.0 / ids.len() as f64;
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window + 1).min(sent.len());
                for ctx_pos in lo..hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    hidden.iter_mut().for_each(|h| *h = 0.0);
                    for &id in ids {
                        hidden.iter_mut().zip(&input[id * dim..(id + 1) * dim]).for_each(|(h, x)| *h += x * scale);
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let target = sent[ctx_pos];
                    for n in 0..=cfg.negatives {
                        let (word, label) = if n == 0 {
                            (target, 1.0)
                        } else {
                            let w = table[rng.gen_range(0..table.len())];
                            if w == target {
                                continue;
                            }
                            (w, 0.0)
                        };
                        let out = &mut output[word * dim..(word + 1) * dim];
                        let score: f64 = hidden.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let g = lr * (label - sigmoid(score));
                        for k in 0..dim {
                            grad[k] += g * out[k];
                            out[k] += g * hidden[k];
                        }
                    }
                    for &id in ids {
                        input[id * dim..(id + 1) * dim].iter_mut().zip(&grad).for_each(|(x, g)| *x += g * scale);
                    }
                }
            }
        }
    }
    let row = |id: usize| input[id * dim..(id + 1) * dim].to_vec();
    let subwords: BTreeMap<String, Vec<f64>> = ngram_index.iter().map(|(g, &id)| (g.clone(), row(id))).collect();
    let vocab = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let ids = &inputs_of[i];
            let mut v = vec![0.0; dim];
            for &id in ids {
                v.iter_mut().zip(&input[id * dim..(id + 1) * dim]).for_each(|(a, x)| *a += x);
            }
            v.iter_mut().for_each(|a| *a /= ids.len() as f64);
            (w.to_string(), v)
        })
        .collect();
    EmbeddingTable { dim, vocab, subwords }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Length of the compact transformation vector.
pub const TVEC_LEN: usize = 56;
pub const UNROLL_OFFSET: usize = 0;
pub const UNROLL_AND_JAM_OFFSET: usize = 4;
pub const TILING_OFFSET: usize = 11;
pub const INTERCHANGE_OFFSET: usize = 24;
pub const DISTRIBUTION_OFFSET: usize = 54;

/// Compact 56-element encoding of a transformation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformVector {
    pub values: Vec<f64>,
}

impl TransformVector {
    pub fn zeros() -> Self {
        TransformVector { values: vec![0.0; TVEC_LEN] }
    }
}

fn overflow(step: &TransformationStep) -> EncodeError {
    EncodeError::EncodingOverflow(step.to_string())
}

/// Encode with the default tile sizes.
pub fn encode_transformation(seq: &TransformationSeq) -> Result<TransformVector, EncodeError> {
    encode_transformation_with(seq, &DEFAULT_TILE_SIZES)
}

pub fn encode_transformation_with(seq: &TransformationSeq, tile_sizes: &[usize]) -> Result<TransformVector, EncodeError> {
    if tile_sizes.len() != 3 {
        return Err(EncodeError::EncodingOverflow(format!("{} tile sizes configured, the layout has 3", tile_sizes.len())));
    }
    seq.validate().map_err(|e| EncodeError::EncodingOverflow(e.to_string()))?;
    let mut v = TransformVector::zeros();
    for step in &seq.steps {
        let (offset, slot) = match *step {
            TransformationStep::Unrolling { factor } => {
                let f = UNROLL_FACTORS.iter().position(|&x| x == factor).ok_or_else(|| overflow(step))?;
                (UNROLL_OFFSET, 1 + f)
            }
            TransformationStep::UnrollAndJam { level, factor } => {
                let f = UNROLL_AND_JAM_FACTORS.iter().position(|&x| x == factor).ok_or_else(|| overflow(step))?;
                if !UNROLL_AND_JAM_LEVELS.contains(&level) {
                    return Err(overflow(step));
                }
                (UNROLL_AND_JAM_OFFSET, 1 + (level - 1) * UNROLL_AND_JAM_FACTORS.len() + f)
            }
            TransformationStep::Tiling { level, size } => {
                let s = tile_sizes.iter().position(|&x| x == size).ok_or_else(|| overflow(step))?;
                if !TILE_LEVELS.contains(&level) {
                    return Err(overflow(step));
                }
                (TILING_OFFSET, 1 + (level - 1) * tile_sizes.len() + s)
            }
            TransformationStep::Interchange { perm } => {
                if !(1..=MAX_PERM).contains(&perm) {
                    return Err(overflow(step));
                }
                (INTERCHANGE_OFFSET, perm)
            }
            TransformationStep::Distribution => (DISTRIBUTION_OFFSET, 1),
        };
        v.values[offset] = 1.0;
        v.values[offset + slot] = 1.0;
    }
    Ok(v)
}

pub fn decode_transformation(vec: &TransformVector) -> Result<TransformationSeq, EncodeError> {
    decode_transformation_with(vec, &DEFAULT_TILE_SIZES)
}

pub fn decode_transformation_with(vec: &TransformVector, tile_sizes: &[usize]) -> Result<TransformationSeq, EncodeError> {
    let bad = |m: String| EncodeError::MalformedVector(m);
    if vec.values.len() != TVEC_LEN {
        return Err(bad(format!("length {} instead of {TVEC_LEN}", vec.values.len())));
    }
    if let Some(x) = vec.values.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(bad(format!("entry {x} is not 0 or 1")));
    }
    // Fetch the single parameter slot of a subvector, if present.
    let segment = |name: &str, offset: usize, len: usize| -> Result<Option<usize>, EncodeError> {
        let sub = &vec.values[offset..offset + len];
        let set: Vec<usize> = (1..len).filter(|&i| sub[i] == 1.0).collect();
        match (sub[0] == 1.0, set.as_slice()) {
            (false, []) => Ok(None),
            (true, [i]) => Ok(Some(*i)),
            (true, []) => Err(bad(format!("{name} presence bit without a parameter slot"))),
            (false, _) => Err(bad(format!("{name} parameter slot without presence bit"))),
            (true, _) => Err(bad(format!("{name} has several parameter slots"))),
        }
    };
    let mut steps = Vec::new();
    if let Some(perm) = segment("interchange", INTERCHANGE_OFFSET, 30)? {
        steps.push(TransformationStep::Interchange { perm });
    }
    let uj = segment("unroll_and_jam", UNROLL_AND_JAM_OFFSET, 7)?;
    let tiling = segment("tiling", TILING_OFFSET, 13)?;
    if uj.is_some() && tiling.is_some() {
        return Err(bad("unroll_and_jam and tiling both present".into()));
    }
    if let Some(i) = uj {
        let nf = UNROLL_AND_JAM_FACTORS.len();
        steps.push(TransformationStep::UnrollAndJam { level: 1 + (i - 1) / nf, factor: UNROLL_AND_JAM_FACTORS[(i - 1) % nf] });
    }
    if let Some(i) = tiling {
        let ns = tile_sizes.len();
        steps.push(TransformationStep::Tiling { level: 1 + (i - 1) / ns, size: tile_sizes[(i - 1) % ns] });
    }
    if segment("distribution", DISTRIBUTION_OFFSET, 2)?.is_some() {
        steps.push(TransformationStep::Distribution);
    }
    if let Some(i) = segment("unrolling", UNROLL_OFFSET, 4)? {
        steps.push(TransformationStep::Unrolling { factor: UNROLL_FACTORS[i - 1] });
    }
    Ok(TransformationSeq { steps })
}

/// One-hot over a fixed list of sequences.
pub fn encode_transformation_onehot(seq: &TransformationSeq, vocab: &[TransformationSeq]) -> Result<Vec<f64>, EncodeError> {
    let i = vocab.iter().position(|s| s == seq).ok_or_else(|| EncodeError::UnknownTransformation(seq.to_string()))?;
    let mut v = vec![0.0; vocab.len()];
    v[i] = 1.0;
    Ok(v)
}

/// The `size` most frequent sequences, ties broken by descriptor.
pub fn onehot_vocab<'a>(samples: impl IntoIterator<Item = &'a TransformationSeq>, size: usize) -> Vec<TransformationSeq> {
    let mut counts: BTreeMap<String, (u64, &TransformationSeq)> = BTreeMap::new();
    for s in samples {
        counts.entry(s.to_string()).or_insert((0, s)).0 += 1;
    }
    let mut v: Vec<(String, u64, &TransformationSeq)> = counts.into_iter().map(|(k, (c, s))| (k, c, s)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(size).map(|(_, _, s)| s.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::tokenize_loop;

    fn seq(id: &str, src: &str) -> TokenSeq {
        tokenize_loop(id, src).unwrap()
    }

    #[test]
    fn counting() {
        let s = TokenSeq::new("x", vec![Token::keyword("for"), Token::keyword("for"), Token::ident("i")]);
        let f = build_freq_maps(&[s]);
        assert_eq!(f.f_tokens, BTreeMap::from([("for".into(), 2), ("i".into(), 1)]));
        assert_eq!(f.f_ids, BTreeMap::from([("i".into(), 1)]));
        assert_eq!(f.f_std_tokens, BTreeMap::from([("for".into(), 2)]));
        assert_eq!(build_freq_maps(&[]), FreqMaps::default());
    }

    #[test]
    fn bucket_of_256_is_8() {
        assert_eq!(literal_bucket(256), 8);
        assert_eq!(literal_bucket(0), 0);
        assert_eq!(literal_bucket(u64::MAX), 63);
    }

    #[test]
    fn fixed_unknown_slot() {
        let f = build_freq_maps(&[seq("a", "for for for i i x")]);
        let e = Encoder::new(EncodingMethod::Fixed { n: 2 }, Some(&f), None, 4).unwrap();
        let out = e.encode(&seq("b", "for x"), None).unwrap();
        assert_eq!(out.channels, 3);
        assert_eq!(out.row(0), [1.0, 0.0, 0.0]);
        assert_eq!(out.row(1), [0.0, 0.0, 1.0]);
        assert_eq!(out.row(2), [0.0; 3]);
    }

    #[test]
    fn type_env_reads_typedefs() {
        let toks = crate::lexer::tokenize("typedef int I32; double a[10], *b; I32 cf = 1; for (long k = 0; k < 3; k++) {}").unwrap();
        let env = declared_types(&toks);
        assert_eq!(env.get("a"), Some(&"double"));
        assert_eq!(env.get("b"), Some(&"double"));
        assert_eq!(env.get("cf"), Some(&"int"));
        assert_eq!(env.get("k"), Some(&"long"));
        assert!(!env.contains_key("I32"));
    }

    #[test]
    fn compact_layout() {
        let v = encode_transformation(&"unrolling(factor=2)".parse().unwrap()).unwrap();
        assert_eq!(v.values.len(), 56);
        assert_eq!(&v.values[..4], &[1.0, 1.0, 0.0, 0.0]);
        assert!(v.values[4..].iter().all(|&x| x == 0.0));
        let bad = TransformVector { values: { let mut z = vec![0.0; 56]; z[0] = 1.0; z } };
        assert!(matches!(decode_transformation(&bad), Err(EncodeError::MalformedVector(_))));
        assert!(matches!(
            encode_transformation(&"interchange(perm=30)".parse().unwrap()),
            Err(EncodeError::EncodingOverflow(_))
        ));
    }
}
