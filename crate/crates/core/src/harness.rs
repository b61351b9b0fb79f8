//! Measurement, datasets and evaluation metrics.
//!
//! Variants are compiled with an external C compiler and timed one at a
//! time. Every corpus program prints `time <seconds>` for its loop region
//! and `checksum <hex>` over its output arrays; a variant whose checksum
//! differs from the original's is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::{admit, extract_region, splice_region, tokenize, tokenize_loop, Admission, TokenSeq, DEFAULT_MAX_LEN};
use crate::loopir::parse_nest;
use crate::mutate::{apply, enumerate_with, TransformationSeq, DEFAULT_TILE_SIZES};
use crate::rank::{classify, is_accurate, Choice, RankedList, ThresholdClass};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("compile error: {0}")]
    Compile(String),
    #[error("run error: {0}")]
    Run(String),
    #[error("checksum mismatch: expected {expected}, got {got}")]
    ChecksumMismatch { expected: String, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Output of one program execution.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Seconds spent in the loop region.
    pub time: f64,
    pub checksum: Option<String>,
}

/// Compiles and runs standalone programs.
pub trait Runner {
    fn compile(&mut self, src: &Path, exe: &Path) -> Result<(), MeasureError>;
    fn run(&mut self, exe: &Path) -> Result<RunOutput, MeasureError>;
}

/// Compiler command template and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CompilerConfig {
    /// Whitespace-separated command with `{src}`, `{out}` and `{flags}` placeholders.
    pub command: String,
    pub flags: String,
}

impl Default for CompilerConfig {
    fn default() -> Self {
        CompilerConfig { command: "gcc {flags} {src} -o {out} -lm".into(), flags: "-O3".into() }
    }
}

impl CompilerConfig {
    pub fn argv(&self, src: &Path, out: &Path) -> Vec<String> {
        let mut argv = Vec::new();
        for word in self.command.split_whitespace() {
            match word {
                "{flags}" => argv.extend(self.flags.split_whitespace().map(str::to_string)),
                w => argv.push(w.replace("{src}", &src.to_string_lossy()).replace("{out}", &out.to_string_lossy())),
            }
        }
        argv
    }
}

/// Runs the configured compiler and the produced executables.
#[derive(Debug, Clone, Default)]
pub struct CommandRunner {
    pub compiler: CompilerConfig,
}

impl Runner for CommandRunner {
    fn compile(&mut self, src: &Path, exe: &Path) -> Result<(), MeasureError> {
        let argv = self.compiler.argv(src, exe);
        let (prog, args) = argv.split_first().ok_or_else(|| MeasureError::Compile("empty compiler command".into()))?;
        let out = Command::new(prog)
            .args(args)
            .output()
            .map_err(|e| MeasureError::Compile(format!("cannot start `{prog}`: {e}")))?;
        if !out.status.success() {
            return Err(MeasureError::Compile(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        Ok(())
    }

    fn run(&mut self, exe: &Path) -> Result<RunOutput, MeasureError> {
        let start = Instant::now();
        let out = Command::new(exe).output().map_err(|e| MeasureError::Run(e.to_string()))?;
        let wall = start.elapsed().as_secs_f64();
        if !out.status.success() {
            return Err(MeasureError::Run(format!("exit status {}", out.status)));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        Ok(parse_program_output(&stdout, wall))
    }
}

/// Read `time` and `checksum` lines; without a `time` line the wall clock counts.
pub fn parse_program_output(stdout: &str, wall: f64) -> RunOutput {
    let mut time = None;
    let mut checksum = None;
    for line in stdout.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("time"), Some(v)) => time = v.parse::<f64>().ok(),
            (Some("checksum"), Some(v)) => checksum = Some(v.to_string()),
            _ => {}
        }
    }
    RunOutput { time: time.unwrap_or(wall), checksum }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median time and checksum of one program.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub time: f64,
    pub checksum: Option<String>,
}

/// Compile `source`, run it `reps + 1` times, drop the warm-up run and
/// return the median of the rest.
pub fn measure_source(runner: &mut dyn Runner, source: &str, reps: usize, workdir: &Path) -> Result<Measurement, MeasureError> {
    let src = workdir.join("variant.c");
    let exe = workdir.join("variant");
    std::fs::write(&src, source)?;
    runner.compile(&src, &exe)?;
    let mut times = Vec::with_capacity(reps);
    let mut checksum = None;
    for i in 0..=reps.max(1) {
        let out = runner.run(&exe)?;
        if i > 0 && checksum.is_some() && out.checksum != checksum {
            return Err(MeasureError::Run("checksum changed between runs".into()));
        }
        checksum = out.checksum;
        if i > 0 {
            times.push(out.time);
        }
    }
    let time = median(&mut times);
    if !(time > 0.0 && time.is_finite()) {
        return Err(MeasureError::Run(format!("non-positive time {time}")));
    }
    Ok(Measurement { time, checksum })
}

/// Measure a corpus file with its loop region replaced by `region`
/// (or unchanged when `None`).
pub fn measure(
    runner: &mut dyn Runner,
    loop_file_text: &str,
    region: Option<&str>,
    reps: usize,
    workdir: &Path,
) -> Result<Measurement, MeasureError> {
    let source = match region {
        Some(r) => splice_region(loop_file_text, r).map_err(|e| MeasureError::Compile(e.to_string()))?,
        None => loop_file_text.to_string(),
    };
    measure_source(runner, &source, reps, workdir)
}

/// Measure a variant and check it against the original checksum.
pub fn measure_variant(
    runner: &mut dyn Runner,
    loop_file_text: &str,
    region: &str,
    original: &Measurement,
    reps: usize,
    workdir: &Path,
) -> Result<Measurement, MeasureError> {
    let m = measure(runner, loop_file_text, Some(region), reps, workdir)?;
    if m.checksum != original.checksum {
        return Err(MeasureError::ChecksumMismatch {
            expected: original.checksum.clone().unwrap_or_default(),
            got: m.checksum.unwrap_or_default(),
        });
    }
    Ok(m)
}

/// One loop of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusLoop {
    pub loop_id: String,
    pub path: PathBuf,
    pub text: String,
}

impl CorpusLoop {
    pub fn tokens(&self) -> Result<TokenSeq, crate::lexer::LexError> {
        tokenize_loop(&self.loop_id, extract_region(&self.text)?)
    }

    /// Declared types from the whole file, for the type-based encoding.
    pub fn types(&self) -> crate::encode::TypeEnv {
        tokenize(&strip_preprocessor(&self.text)).map(|t| crate::encode::declared_types(&t)).unwrap_or_default()
    }
}

/// Blank out preprocessor lines so the rest of a file can be lexed.
pub fn strip_preprocessor(text: &str) -> String {
    text.lines()
        .map(|l| if l.trim_start().starts_with('#') { "" } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}

/// All `.c` files of a directory, sorted by loop id (the file stem).
pub fn load_corpus(dir: &Path) -> std::io::Result<Vec<CorpusLoop>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "c") {
            let loop_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let text = std::fs::read_to_string(&path)?;
            out.push(CorpusLoop { loop_id, path, text });
        }
    }
    out.sort_by(|a, b| a.loop_id.cmp(&b.loop_id));
    Ok(out)
}

pub fn load_loop(path: &Path) -> std::io::Result<CorpusLoop> {
    let loop_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(CorpusLoop { loop_id, path: path.to_path_buf(), text: std::fs::read_to_string(path)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub loop_id: String,
    pub transformation: TransformationSeq,
    /// Original time over transformed time.
    pub speedup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Validation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: BTreeMap<String, Side>,
}

/// Assign `round(0.8 * L)` loops to training after a seeded shuffle of the sorted ids.
pub fn split_loops<'a>(loop_ids: impl IntoIterator<Item = &'a str>, seed: u64) -> BTreeMap<String, Side> {
    let mut ids: Vec<&str> = loop_ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.8 * ids.len() as f64).round() as usize;
    ids.iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), if i < n_train { Side::Train } else { Side::Validation }))
        .collect()
}

impl Dataset {
    /// Build from samples, splitting their loops with `seed`.
    pub fn with_split(samples: Vec<Sample>, seed: u64) -> Self {
        let split = split_loops(samples.iter().map(|s| s.loop_id.as_str()), seed);
        Dataset { samples, split }
    }

    pub fn side(&self, loop_id: &str) -> Option<Side> {
        self.split.get(loop_id).copied()
    }

    pub fn loops(&self, side: Side) -> BTreeSet<&str> {
        self.split.iter().filter(|(_, s)| **s == side).map(|(l, _)| l.as_str()).collect()
    }

    pub fn samples_on(&self, side: Side) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| self.side(&s.loop_id) == Some(side))
    }

    pub fn samples_of<'a>(&'a self, loop_id: &'a str) -> impl Iterator<Item = &'a Sample> {
        self.samples.iter().filter(move |s| s.loop_id == loop_id)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# loop_id\tdescriptor\tspeedup")?;
        for s in &self.samples {
            writeln!(w, "{}\t{}\t{}", s.loop_id, s.transformation, s.speedup)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    /// Read samples; the split is recomputed from `seed`.
    pub fn read_from(r: impl BufRead, seed: u64) -> Result<Self, DatasetError> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| DatasetError::Parse { line: i + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            let [loop_id, descriptor, speedup] = fields.as_slice() else {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let transformation: TransformationSeq = descriptor.parse().map_err(|e| bad(format!("{e}")))?;
            if transformation.is_empty() {
                return Err(bad("empty descriptor".into()));
            }
            let speedup: f64 = speedup.parse().map_err(|_| bad(format!("invalid speedup `{speedup}`")))?;
            if !(speedup > 0.0 && speedup.is_finite()) {
                return Err(bad(format!("speedup must be positive, got {speedup}")));
            }
            samples.push(Sample { loop_id: loop_id.to_string(), transformation, speedup });
        }
        Ok(Dataset::with_split(samples, seed))
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self, DatasetError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), seed)
    }
}

/// A loop or sample left out of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub loop_id: String,
    pub stage: String,
    pub reason: String,
}

impl fmt::Display for SkipRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let clean = |s: &str| s.replace(['\t', '\n'], " ");
        write!(f, "{}\t{}\t{}", clean(&self.loop_id), clean(&self.stage), clean(&self.reason))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub reps: usize,
    pub seed: u64,
    pub tile_sizes: Vec<usize>,
    pub max_len: usize,
    /// Also time each original a second time and report the ratio.
    pub symmetry_check: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig { reps: 5, seed: 42, tile_sizes: DEFAULT_TILE_SIZES.to_vec(), max_len: DEFAULT_MAX_LEN, symmetry_check: false }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOutcome {
    pub dataset: Dataset,
    pub skips: Vec<SkipRecord>,
    /// (loop, transformation) pairs compiled, run and compared with the original checksum.
    pub checked: usize,
    /// Pairs whose checksum differed.
    pub mismatches: Vec<(String, String)>,
    /// Original-versus-original speedup per loop, when requested.
    pub symmetry: Vec<(String, f64)>,
}

/// Parse, enumerate, apply and measure every loop; failures are recorded and skipped.
pub fn build_dataset(corpus: &[CorpusLoop], runner: &mut dyn Runner, cfg: &BuildConfig) -> Result<BuildOutcome, std::io::Error> {
    let work = tempfile_dir()?;
    let mut out = BuildOutcome::default();
    let mut samples = Vec::new();
    for l in corpus {
        let skip = |stage: &str, reason: String| {
            let r = SkipRecord { loop_id: l.loop_id.clone(), stage: stage.into(), reason };
            log::warn!("{r}");
            r
        };
        let seq = match l.tokens() {
            Ok(s) => s,
            Err(e) => {
                out.skips.push(skip("lex", e.to_string()));
                continue;
            }
        };
        let seq = match admit(seq, cfg.max_len) {
            Admission::Admitted(s) => s,
            Admission::Rejected { len } => {
                out.skips.push(skip("admit", format!("{len} tokens exceed {}", cfg.max_len)));
                continue;
            }
        };
        let nest = match parse_nest(&seq) {
            Ok(n) => n,
            Err(e) => {
                out.skips.push(skip("parse", e.to_string()));
                continue;
            }
        };
        let seqs = enumerate_with(&nest, &cfg.tile_sizes);
        if seqs.is_empty() {
            out.skips.push(skip("enumerate", "no legal transformation".into()));
            continue;
        }
        let original = match measure(runner, &l.text, None, cfg.reps, &work) {
            Ok(m) => m,
            Err(e) => {
                out.skips.push(skip("measure-original", e.to_string()));
                continue;
            }
        };
        if cfg.symmetry_check {
            match measure(runner, &l.text, None, cfg.reps, &work) {
                Ok(again) => out.symmetry.push((l.loop_id.clone(), original.time / again.time)),
                Err(e) => out.skips.push(skip("measure-original", e.to_string())),
            }
        }
        for s in seqs {
            let region = match apply(&nest, &s) {
                Ok(r) => r,
                Err(e) => {
                    out.skips.push(skip("apply", format!("{s}: {e}")));
                    continue;
                }
            };
            match measure_variant(runner, &l.text, &region, &original, cfg.reps, &work) {
                Ok(m) => {
                    out.checked += 1;
                    samples.push(Sample { loop_id: l.loop_id.clone(), transformation: s, speedup: original.time / m.time });
                }
                Err(e @ MeasureError::ChecksumMismatch { .. }) => {
                    out.checked += 1;
                    out.mismatches.push((l.loop_id.clone(), s.to_string()));
                    out.skips.push(skip("checksum", format!("{s}: {e}")));
                }
                Err(e) => out.skips.push(skip("measure", format!("{s}: {e}"))),
            }
        }
    }
    let _ = std::fs::remove_dir_all(&work);
    out.dataset = Dataset::with_split(samples, cfg.seed);
    Ok(out)
}

fn tempfile_dir() -> std::io::Result<PathBuf> {
    let base = std::env::temp_dir().join(format!("looptune-{}-{}", std::process::id(), unique_suffix()));
    std::fs::create_dir_all(&base)?;
    Ok(base)
}

fn unique_suffix() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// Best measured transformation of one loop, or the original if nothing beats 1.0.
pub fn exhaustive_search<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> (Choice, f64) {
    let mut best = (Choice::KeepOriginal, 1.0);
    for s in samples {
        if s.speedup > best.1 {
            best = (Choice::Apply(s.transformation.clone()), s.speedup);
        }
    }
    best
}

/// A percentage that may be undefined (empty denominator set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pct {
    pub value: f64,
    /// The denominator set was empty; `value` is then 0.
    pub empty: bool,
}

impl Pct {
    pub fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Pct { value: 0.0, empty: true }
        } else {
            Pct { value: 100.0 * num as f64 / den as f64, empty: false }
        }
    }
}

impl fmt::Display for Pct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.empty {
            write!(f, "{:.2} (empty)", self.value)
        } else {
            write!(f, "{:.2}", self.value)
        }
    }
}

pub fn f1(precision: Pct, recall: Pct) -> f64 {
    let (p, r) = (precision.value, recall.value);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// A prediction for a measured sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub loop_id: String,
    pub seq: TransformationSeq,
    /// Predicted speedup.
    pub p: f64,
    /// Measured speedup.
    pub a: f64,
}

/// Predicted speedup at threshold `t`.
pub fn predicted_speedup(p: f64, t: f64) -> bool {
    p > t
}

/// Predicted slowdown at threshold `t`; at `t = 1` everything not above 1.
pub fn predicted_slowdown(p: f64, t: f64) -> bool {
    p <= 2.0 - t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub total_accuracy: Pct,
    pub speedup_recall: Pct,
    pub speedup_precision: Pct,
    pub speedup_f1: f64,
    pub slowdown_recall: Pct,
    pub slowdown_precision: Pct,
    pub slowdown_f1: f64,
}

/// Pair-level metrics over all scored samples.
pub fn overall_metrics(scored: &[Scored], t: f64) -> OverallMetrics {
    let (mut pp_tp, mut pm_tm, mut pp, mut pm, mut tp, mut tm) = (0, 0, 0, 0, 0, 0);
    for s in scored {
        let (sp, sm) = (predicted_speedup(s.p, t), predicted_slowdown(s.p, t));
        let (ap, am) = (s.a > 1.0, s.a <= 1.0);
        pp += sp as usize;
        pm += sm as usize;
        tp += ap as usize;
        tm += am as usize;
        pp_tp += (sp && ap) as usize;
        pm_tm += (sm && am) as usize;
    }
    let speedup_recall = Pct::of(pp_tp, tp);
    let speedup_precision = Pct::of(pp_tp, pp);
    let slowdown_recall = Pct::of(pm_tm, tm);
    let slowdown_precision = Pct::of(pm_tm, pm);
    OverallMetrics {
        total_accuracy: Pct::of(pp_tp + pm_tm, scored.len()),
        speedup_recall,
        speedup_precision,
        speedup_f1: f1(speedup_precision, speedup_recall),
        slowdown_recall,
        slowdown_precision,
        slowdown_f1: f1(slowdown_precision, slowdown_recall),
    }
}

/// Measured speedups by loop and descriptor.
pub type Actuals = BTreeMap<String, BTreeMap<String, f64>>;

pub fn actuals_of(scored: &[Scored]) -> Actuals {
    let mut out = Actuals::new();
    for s in scored {
        out.entry(s.loop_id.clone()).or_default().insert(s.seq.to_string(), s.a);
    }
    out
}

/// One ranked list per loop, built from the scored samples.
pub fn ranked_lists(scored: &[Scored], t: f64) -> Vec<RankedList> {
    let mut by_loop: BTreeMap<&str, Vec<(TransformationSeq, f64)>> = BTreeMap::new();
    for s in scored {
        by_loop.entry(&s.loop_id).or_default().push((s.seq.clone(), s.p));
    }
    by_loop.into_iter().map(|(l, v)| RankedList::from_scores(l, v, t)).collect()
}

fn actual(actuals: &Actuals, loop_id: &str, seq: &TransformationSeq) -> Option<f64> {
    actuals.get(loop_id).and_then(|m| m.get(&seq.to_string())).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub k: usize,
    pub total_accuracy: Pct,
    pub speedup_recall: Pct,
    pub speedup_precision: Pct,
}

/// Loop-level metrics over the top `k` entries of each ranked list.
pub fn topk_metrics(ranked: &[RankedList], actuals: &Actuals, k: usize, t: f64) -> TopKMetrics {
    let (mut acc, mut l_plus, mut rec, mut l_sp, mut prec) = (0, 0, 0, 0, 0);
    for r in ranked {
        let top: Vec<(&TransformationSeq, f64, f64)> = r
            .entries
            .iter()
            .take(k)
            .filter_map(|e| actual(actuals, &r.loop_id, &e.seq).map(|a| (&e.seq, e.p, a)))
            .collect();
        let advantageous: Vec<f64> =
            top.iter().filter(|(_, p, _)| classify(*p, t) == ThresholdClass::Advantageous).map(|x| x.2).collect();
        let hit = advantageous.iter().any(|&a| a > 1.0);
        if top.iter().any(|&(_, p, a)| is_accurate(p, a)) {
            acc += 1;
        }
        if actuals.get(&r.loop_id).is_some_and(|m| m.values().any(|&a| a > 1.0)) {
            l_plus += 1;
            rec += hit as usize;
        }
        if in_l_sp(r, t) {
            l_sp += 1;
            prec += hit as usize;
        }
    }
    TopKMetrics {
        k,
        total_accuracy: Pct::of(acc, ranked.len()),
        speedup_recall: Pct::of(rec, l_plus),
        speedup_precision: Pct::of(prec, l_sp),
    }
}

/// The loop's top-ranked transformation is predicted advantageous.
pub fn in_l_sp(r: &RankedList, t: f64) -> bool {
    r.entries.first().is_some_and(|e| classify(e.p, t) == ThresholdClass::Advantageous)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geomean {
    pub value: f64,
    /// No loop qualified; `value` is then 1.0.
    pub empty: bool,
}

pub fn geomean(values: &[f64]) -> Geomean {
    if values.is_empty() {
        return Geomean { value: 1.0, empty: true };
    }
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Geomean { value: mean_log.exp(), empty: false }
}

/// Achieved speedup per loop of `L_sp` when applying the top advantageous pick.
pub fn static_speedups(ranked: &[RankedList], actuals: &Actuals, t: f64) -> Vec<f64> {
    ranked
        .iter()
        .filter(|r| in_l_sp(r, t))
        .filter_map(|r| actual(actuals, &r.loop_id, &r.entries[0].seq))
        .collect()
}

/// Achieved speedup per loop of `L_sp` when measuring the top `k` advantageous
/// picks and keeping the best, or 1.0 if none is faster.
pub fn dynamic_speedups(ranked: &[RankedList], actuals: &Actuals, k: usize, t: f64) -> Vec<f64> {
    ranked
        .iter()
        .filter(|r| in_l_sp(r, t))
        .map(|r| {
            r.entries
                .iter()
                .take(k)
                .filter(|e| classify(e.p, t) == ThresholdClass::Advantageous)
                .filter_map(|e| actual(actuals, &r.loop_id, &e.seq))
                .fold(1.0, f64::max)
        })
        .collect()
}

/// Static (top-1) and dynamic (top-`k`) geometric means over `L_sp`.
pub fn speedup_geomeans(ranked: &[RankedList], actuals: &Actuals, k: usize, t: f64) -> (Geomean, Geomean) {
    (geomean(&static_speedups(ranked, actuals, t)), geomean(&dynamic_speedups(ranked, actuals, k, t)))
}

/// Exhaustive-search speedup of every loop of `L_sp`.
pub fn exhaustive_speedups(ranked: &[RankedList], actuals: &Actuals, t: f64) -> Vec<f64> {
    ranked
        .iter()
        .filter(|r| in_l_sp(r, t))
        .map(|r| actuals.get(&r.loop_id).map(|m| m.values().copied().fold(1.0, f64::max)).unwrap_or(1.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub speedup_precision: Pct,
    pub speedup_recall: Pct,
}

/// Speedup precision and recall for each threshold.
pub fn threshold_sweep(scored: &[Scored], t_values: &[f64]) -> Vec<SweepRow> {
    t_values
        .iter()
        .map(|&t| {
            let m = overall_metrics(scored, t);
            SweepRow { t, speedup_precision: m.speedup_precision, speedup_recall: m.speedup_recall }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    /// Step kinds joined by `;`.
    pub shape: String,
    pub train_accuracy: Pct,
    pub validation_accuracy: Pct,
    pub speedup_recall: Pct,
    pub speedup_precision: Pct,
    /// Validation loops with at least one sample of this shape.
    pub loop_count: usize,
    pub coverage: Pct,
}

/// Metrics per sequence shape; recall and precision are on validation samples at t = 1.
pub fn per_sequence_metrics(train: &[Scored], validation: &[Scored]) -> Vec<SequenceRow> {
    let mut shapes: BTreeSet<String> = BTreeSet::new();
    shapes.extend(train.iter().chain(validation).map(|s| s.seq.shape()));
    let val_loops: BTreeSet<&str> = validation.iter().map(|s| s.loop_id.as_str()).collect();
    shapes
        .into_iter()
        .map(|shape| {
            let tr: Vec<Scored> = train.iter().filter(|s| s.seq.shape() == shape).cloned().collect();
            let va: Vec<Scored> = validation.iter().filter(|s| s.seq.shape() == shape).cloned().collect();
            let loops: BTreeSet<&str> = va.iter().map(|s| s.loop_id.as_str()).collect();
            let m = overall_metrics(&va, 1.0);
            SequenceRow {
                train_accuracy: overall_metrics(&tr, 1.0).total_accuracy,
                validation_accuracy: m.total_accuracy,
                speedup_recall: m.speedup_recall,
                speedup_precision: m.speedup_precision,
                loop_count: loops.len(),
                coverage: Pct::of(loops.len(), val_loops.len()),
                shape,
            }
        })
        .collect()
}

/// The full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub overall: OverallMetrics,
    pub topk: Vec<TopKMetrics>,
    pub geomean_static: Geomean,
    /// `(k, geomean)` for each requested k.
    pub geomean_dynamic: Vec<(usize, Geomean)>,
    pub per_sequence: Vec<SequenceRow>,
}

pub fn metrics_report(train: &[Scored], validation: &[Scored], t: f64, ks: &[usize]) -> MetricsReport {
    let ranked = ranked_lists(validation, t);
    let actuals = actuals_of(validation);
    MetricsReport {
        threshold: t,
        overall: overall_metrics(validation, t),
        topk: ks.iter().map(|&k| topk_metrics(&ranked, &actuals, k, t)).collect(),
        geomean_static: geomean(&static_speedups(&ranked, &actuals, t)),
        geomean_dynamic: ks.iter().map(|&k| (k, geomean(&dynamic_speedups(&ranked, &actuals, k, t)))).collect(),
        per_sequence: per_sequence_metrics(train, validation),
    }
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let o = &self.overall;
        let mut s = format!("threshold\t{}\n", self.threshold);
        s += &format!("total_accuracy\t{}\n", o.total_accuracy);
        s += &format!("speedup_recall\t{}\nspeedup_precision\t{}\nspeedup_f1\t{:.2}\n", o.speedup_recall, o.speedup_precision, o.speedup_f1);
        s += &format!(
            "slowdown_recall\t{}\nslowdown_precision\t{}\nslowdown_f1\t{:.2}\n",
            o.slowdown_recall, o.slowdown_precision, o.slowdown_f1
        );
        for k in &self.topk {
            s += &format!(
                "top{}\ttotal_accuracy {}\tspeedup_recall {}\tspeedup_precision {}\n",
                k.k, k.total_accuracy, k.speedup_recall, k.speedup_precision
            );
        }
        s += &format!("geomean_static\t{:.4}{}\n", self.geomean_static.value, if self.geomean_static.empty { " (empty)" } else { "" });
        for (k, g) in &self.geomean_dynamic {
            s += &format!("geomean_dynamic_top{k}\t{:.4}{}\n", g.value, if g.empty { " (empty)" } else { "" });
        }
        s += "sequence\ttrain_acc\tval_acc\tspeedup_recall\tspeedup_precision\tloops\tcoverage\n";
        for r in &self.per_sequence {
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.shape, r.train_accuracy, r.validation_accuracy, r.speedup_recall, r.speedup_precision, r.loop_count, r.coverage
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fake(Vec<f64>);

    impl Runner for Fake {
        fn compile(&mut self, _: &Path, _: &Path) -> Result<(), MeasureError> {
            Ok(())
        }
        fn run(&mut self, _: &Path) -> Result<RunOutput, MeasureError> {
            Ok(RunOutput { time: self.0.remove(0), checksum: Some("ab".into()) })
        }
    }

    #[test]
    fn warm_up_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Fake(vec![9.0, 5.0, 5.0, 5.0, 5.0, 5.0]);
        assert_eq!(measure_source(&mut r, "int main(){}", 5, dir.path()).unwrap().time, 5.0);
    }

    #[test]
    fn output_parsing() {
        let o = parse_program_output("time 0.25\nchecksum 1f\n", 9.0);
        assert_eq!(o, RunOutput { time: 0.25, checksum: Some("1f".into()) });
        assert_eq!(parse_program_output("", 2.0).time, 2.0);
    }

    #[test]
    fn argv_expansion() {
        let c = CompilerConfig { command: "cc {flags} {src} -o {out}".into(), flags: "-O3 -march=native".into() };
        assert_eq!(c.argv(Path::new("a.c"), Path::new("a")), ["cc", "-O3", "-march=native", "a.c", "-o", "a"]);
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
        let a = split_loops(ids.iter().map(String::as_str), 7);
        assert_eq!(a, split_loops(ids.iter().rev().map(String::as_str), 7));
        assert_eq!(a.values().filter(|s| **s == Side::Train).count(), 8);
    }

    #[test]
    fn exhaustive_examples() {
        let mk = |d: &str, s: f64| Sample { loop_id: "l".into(), transformation: d.parse().unwrap(), speedup: s };
        let v = [mk("unrolling(factor=2)", 1.1), mk("unrolling(factor=4)", 0.8), mk("unrolling(factor=8)", 1.4)];
        assert_eq!(exhaustive_search(&v), (Choice::Apply("unrolling(factor=8)".parse().unwrap()), 1.4));
        assert_eq!(exhaustive_search(&v[1..2]), (Choice::KeepOriginal, 1.0));
    }

    #[test]
    fn geomean_examples() {
        assert!((geomean(&[1.0, 4.0]).value - 2.0).abs() < 1e-12);
        assert_eq!(geomean(&[]), Geomean { value: 1.0, empty: true });
    }

    #[test]
    fn dataset_file_round_trip() {
        let d = Dataset::with_split(
            vec![Sample { loop_id: "a".into(), transformation: "distribution()".parse().unwrap(), speedup: 1.25 }],
            1,
        );
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&buf[..], 1).unwrap(), d);
        assert!(Dataset::read_from(&b"a\tfoo()\t1\n"[..], 1).is_err());
    }
}
