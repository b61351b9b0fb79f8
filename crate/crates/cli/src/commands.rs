//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use looptune::encode::{
    build_freq_maps, encode_transformation_with, EmbeddingTable, EncodeError, Encoder, EncodingMethod,
};
use looptune::harness::{
    build_dataset, exhaustive_search, load_corpus, load_loop, measure, measure_variant, metrics_report,
    threshold_sweep, BuildConfig, CommandRunner, CorpusLoop, Dataset, MeasureError, Sample, Side,
};
use looptune::lexer::{admit, Admission, TokenSeq};
use looptune::loopir::parse_nest;
use looptune::mutate::{apply, enumerate_with, TransformationSeq};
use looptune::neural::NeuralError;
use looptune::pipeline::{fit, loop_inputs, score, PipelineError};
use looptune::rank::{classify as classify_p, rank_loop, select_dynamic, select_static, Choice, PredictError, Predictor};
use looptune::LoopNest;

use crate::config::Config;
use crate::{Command, InvariantError, UsageError};

/// Exit code and kind for an error.
pub fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    const INPUT: (u8, &str) = (2, "input");
    const MEASURE: (u8, &str) = (3, "measure");
    const INVARIANT: (u8, &str) = (4, "invariant");
    let neural = |n: &NeuralError| match n {
        NeuralError::NonFinite { .. } | NeuralError::ShapeMismatch(_) | NeuralError::EmptyBatch => INVARIANT,
        _ => INPUT,
    };
    let encode = |x: &EncodeError| match x {
        EncodeError::ValidationLeak(_) => INVARIANT,
        _ => INPUT,
    };
    let predict = |p: &PredictError| match p {
        PredictError::Neural(n) => neural(n),
        PredictError::Encode(x) => encode(x),
        _ => INPUT,
    };
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return (1, "usage");
        }
        if cause.is::<InvariantError>() {
            return INVARIANT;
        }
        if cause.is::<MeasureError>() {
            return MEASURE;
        }
        if let Some(n) = cause.downcast_ref::<NeuralError>() {
            return neural(n);
        }
        if let Some(x) = cause.downcast_ref::<EncodeError>() {
            return encode(x);
        }
        if let Some(p) = cause.downcast_ref::<PredictError>() {
            return predict(p);
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Neural(n) => neural(n),
                PipelineError::Encode(x) => encode(x),
                PipelineError::Predict(x) => predict(x),
                PipelineError::NoTrainingData => INPUT,
            };
        }
    }
    INPUT
}

pub fn run(command: Command, cfg: &Config) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match command {
        Command::Tokenize { loop_file } => {
            let seq = loop_tokens(&read_loop(&loop_file)?, usize::MAX)?;
            for t in &seq.tokens {
                writeln!(out, "{}\t{}", t.kind, t.text)?;
            }
        }
        Command::Mutate { loop_file, descriptor, out: dest, list, region_only } => {
            let l = read_loop(&loop_file)?;
            let nest = loop_nest(&l, cfg.max_len)?;
            if list {
                for s in enumerate_with(&nest, &cfg.tile_sizes) {
                    writeln!(out, "{s}")?;
                }
                return Ok(());
            }
            let render = |s: &TransformationSeq| -> Result<String> {
                let region = apply(&nest, s).with_context(|| format!("cannot apply `{s}` to {}", l.loop_id))?;
                if region_only {
                    Ok(region + "\n")
                } else {
                    Ok(looptune::lexer::splice_region(&l.text, &region)?)
                }
            };
            match (descriptor, dest) {
                (Some(d), dest) => {
                    let text = render(&parse_descriptor(&d)?)?;
                    match dest {
                        Some(p) => std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?,
                        None => out.write_all(text.as_bytes())?,
                    }
                }
                (None, Some(dir)) => {
                    std::fs::create_dir_all(&dir)?;
                    let mut index = String::new();
                    for (i, s) in enumerate_with(&nest, &cfg.tile_sizes).iter().enumerate() {
                        let name = format!("{}_{:04}.c", l.loop_id, i + 1);
                        std::fs::write(dir.join(&name), render(s)?)?;
                        writeln!(index, "{name}\t{s}")?;
                    }
                    std::fs::write(dir.join("index.tsv"), &index)?;
                    writeln!(out, "wrote {} variants to {}", index.lines().count(), dir.display())?;
                }
                (None, None) => bail!(UsageError("mutate needs --list, --descriptor or --out".into())),
            }
        }
        Command::Encode { loop_file, model, corpus, embeddings, descriptor } => {
            let l = read_loop(&loop_file)?;
            let seq = loop_tokens(&l, cfg.max_len)?;
            let (encoder, tile_sizes) = match model {
                Some(m) => {
                    let p = Predictor::load(&m).with_context(|| format!("cannot load model {}", m.display()))?;
                    let tiles = match &p.meta.transform {
                        looptune::rank::TransformEncoding::Compact { tile_sizes } => tile_sizes.clone(),
                        _ => cfg.tile_sizes.clone(),
                    };
                    (p.encoder, tiles)
                }
                None => {
                    let seqs: Vec<TokenSeq> = match &corpus {
                        Some(dir) => read_corpus(dir)?.iter().filter_map(|c| loop_tokens(c, cfg.max_len).ok()).collect(),
                        None => vec![seq.clone()],
                    };
                    let freq = build_freq_maps(&seqs);
                    let emb = match (&embeddings, cfg.method) {
                        (Some(p), _) => Some(EmbeddingTable::load(p)?),
                        (None, EncodingMethod::FastText) => {
                            bail!(UsageError("the fasttext encoding needs --embeddings or --model".into()))
                        }
                        _ => None,
                    };
                    (Encoder::new(cfg.method, Some(&freq), emb.as_ref(), cfg.max_len)?, cfg.tile_sizes.clone())
                }
            };
            let enc = encoder.encode(&seq, Some(&l.types()))?;
            writeln!(out, "method\t{}\tchannels\t{}\tlen\t{}\tmax_len\t{}", enc.method, enc.channels, enc.len, enc.max_len)?;
            for i in 0..enc.len {
                writeln!(out, "{}", join_values(enc.row(i)))?;
            }
            if let Some(d) = descriptor {
                let v = encode_transformation_with(&parse_descriptor(&d)?, &tile_sizes)?;
                writeln!(out, "tvec\t{}", join_values(&v.values))?;
            }
        }
        Command::Embed { corpus, dataset, out: dest } => {
            let loops = read_corpus(&corpus)?;
            let keep: Option<BTreeSet<String>> = match dataset {
                Some(d) => {
                    let ds = read_dataset(&d, cfg.seed)?;
                    Some(ds.loops(Side::Train).into_iter().map(str::to_string).collect())
                }
                None => None,
            };
            let seqs: Vec<TokenSeq> = loops
                .iter()
                .filter(|l| keep.as_ref().is_none_or(|k| k.contains(&l.loop_id)))
                .filter_map(|l| loop_tokens(l, cfg.max_len).ok())
                .collect();
            if seqs.is_empty() {
                bail!("no usable training loops for embeddings");
            }
            let table = looptune::encode::train_embeddings(&seqs, &cfg.embedding);
            table.save(&dest)?;
            writeln!(out, "embeddings\t{}\twords\t{}\tsubwords\t{}", dest.display(), table.vocab.len(), table.subwords.len())?;
        }
        Command::BuildDataset { corpus, out: dest, skip_log, symmetry } => {
            let loops = read_corpus(&corpus)?;
            let mut runner = CommandRunner { compiler: cfg.compiler.clone() };
            let bcfg = BuildConfig {
                reps: cfg.reps,
                seed: cfg.seed,
                tile_sizes: cfg.tile_sizes.clone(),
                max_len: cfg.max_len,
                symmetry_check: symmetry,
            };
            let built = build_dataset(&loops, &mut runner, &bcfg)?;
            built.dataset.save(&dest).with_context(|| format!("cannot write {}", dest.display()))?;
            let skip_path = skip_log.unwrap_or_else(|| with_suffix(&dest, ".skips"));
            let mut skips = String::new();
            for s in &built.skips {
                writeln!(skips, "{s}")?;
            }
            std::fs::write(&skip_path, skips)?;
            let ds = &built.dataset;
            writeln!(out, "loops\t{}", loops.len())?;
            writeln!(out, "samples\t{}", ds.samples.len())?;
            writeln!(out, "train_loops\t{}\tvalidation_loops\t{}", ds.loops(Side::Train).len(), ds.loops(Side::Validation).len())?;
            writeln!(out, "checked_pairs\t{}\tchecksum_mismatches\t{}", built.checked, built.mismatches.len())?;
            writeln!(out, "skipped\t{}\t{}", built.skips.len(), skip_path.display())?;
            for (id, s) in &built.symmetry {
                let flag = if (1.0 - s).abs() < cfg.noise_bound { "ok" } else { "noisy" };
                writeln!(out, "symmetry\t{id}\t{s:.4}\t{flag}")?;
            }
        }
        Command::Train { dataset, corpus, out: dest } => {
            let ds = read_dataset(&dataset, cfg.seed)?;
            let loops = loop_inputs(&read_corpus(&corpus)?, cfg.max_len);
            let fitted = fit(&ds, &loops, &cfg.pipeline())?;
            let mut predictor = fitted.predictor;
            if let Some(emb) = &fitted.embeddings {
                let emb_path = with_suffix(&dest, ".emb");
                emb.save(&emb_path)?;
                predictor.meta.embeddings = emb_path.file_name().map(PathBuf::from);
            }
            predictor.save(&dest)?;
            let best = &fitted.outcome.history[fitted.outcome.best_epoch];
            writeln!(out, "model\t{}", dest.display())?;
            writeln!(out, "train_examples\t{}", ds.samples_on(Side::Train).count())?;
            writeln!(out, "validation_examples\t{}", ds.samples_on(Side::Validation).count())?;
            writeln!(out, "unencodable\t{}", fitted.unencodable)?;
            writeln!(out, "best_epoch\t{}", best.epoch)?;
            writeln!(out, "train_mse\t{:.6}\tval_mse\t{:.6}\tval_accuracy\t{:.2}", best.train_mse, best.val_mse, best.val_accuracy)?;
        }
        Command::Predict { model, loop_file, descriptor } => {
            let p = load_model(&model)?;
            let l = read_loop(&loop_file)?;
            let seq = loop_tokens(&l, p.meta.max_len)?;
            let d = parse_descriptor(&descriptor)?;
            let pred = p.predict(&seq, Some(&l.types()), std::slice::from_ref(&d))?[0];
            writeln!(out, "{}\t{}\t{:.6}\t{}", l.loop_id, d, pred, classify_p(pred, cfg.threshold))?;
        }
        Command::Rank { model, loop_file } => {
            let p = load_model(&model)?;
            let l = read_loop(&loop_file)?;
            let ranked = rank_for(&p, &l, cfg)?;
            out.write_all(ranked.to_text(Some(cfg.top_k)).as_bytes())?;
        }
        Command::Bench { model, loop_files, exhaustive } => {
            let p = load_model(&model)?;
            let mut runner = CommandRunner { compiler: cfg.compiler.clone() };
            let work = tempfile::tempdir()?;
            writeln!(out, "loop\tscenario\tchoice\tspeedup")?;
            for f in loop_files {
                let l = read_loop(&f)?;
                let nest = loop_nest(&l, p.meta.max_len)?;
                let ranked = rank_for(&p, &l, cfg)?;
                let original = measure(&mut runner, &l.text, None, cfg.reps, work.path())?;
                let mut speedup_of = |s: &TransformationSeq| -> Result<f64> {
                    let region = apply(&nest, s)?;
                    let m = measure_variant(&mut runner, &l.text, &region, &original, cfg.reps, work.path())?;
                    Ok(original.time / m.time)
                };
                let st = select_static(&ranked, cfg.threshold);
                let st_speedup = match &st {
                    Choice::KeepOriginal => 1.0,
                    Choice::Apply(s) => speedup_of(s)?,
                };
                writeln!(out, "{}\tstatic\t{st}\t{st_speedup:.4}", l.loop_id)?;
                let (dy, dy_speedup) = select_dynamic(&ranked, cfg.top_k, cfg.threshold, |s| speedup_of(s));
                writeln!(out, "{}\tdynamic\t{dy}\t{dy_speedup:.4}", l.loop_id)?;
                if exhaustive {
                    let mut samples = Vec::new();
                    for e in &ranked.entries {
                        match speedup_of(&e.seq) {
                            Ok(s) => samples.push(Sample { loop_id: l.loop_id.clone(), transformation: e.seq.clone(), speedup: s }),
                            Err(err) => log::warn!("{}\tmeasure\t{}: {err:#}", l.loop_id, e.seq),
                        }
                    }
                    let (ex, ex_speedup) = exhaustive_search(&samples);
                    writeln!(out, "{}\texhaustive\t{ex}\t{ex_speedup:.4}", l.loop_id)?;
                }
            }
        }
        Command::Eval { dataset, corpus, model, json } => {
            let (train, val) = scored(&dataset, &corpus, &model, cfg)?;
            let ks: Vec<usize> = (1..=cfg.top_k).collect();
            let report = metrics_report(&train, &val, cfg.threshold, &ks);
            check_report(&report)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                out.write_all(report.to_text().as_bytes())?;
            }
        }
        Command::Sweep { dataset, corpus, model, from, to, step } => {
            if !(step > 0.0 && from >= 1.0 && to >= from) {
                bail!(UsageError("sweep needs 1 <= from <= to and step > 0".into()));
            }
            let (_, val) = scored(&dataset, &corpus, &model, cfg)?;
            let n = ((to - from) / step + 1e-9).floor() as usize;
            let ts: Vec<f64> = (0..=n).map(|i| from + i as f64 * step).collect();
            writeln!(out, "t\tspeedup_precision\tspeedup_recall")?;
            for r in threshold_sweep(&val, &ts) {
                writeln!(out, "{:.4}\t{}\t{}", r.t, r.speedup_precision, r.speedup_recall)?;
            }
        }
    }
    Ok(())
}

fn read_loop(path: &Path) -> Result<CorpusLoop> {
    load_loop(path).with_context(|| format!("cannot read loop file {}", path.display()))
}

fn read_corpus(dir: &Path) -> Result<Vec<CorpusLoop>> {
    let loops = load_corpus(dir).with_context(|| format!("cannot read corpus directory {}", dir.display()))?;
    if loops.is_empty() {
        bail!("corpus directory {} has no .c files", dir.display());
    }
    Ok(loops)
}

fn read_dataset(path: &Path, seed: u64) -> Result<Dataset> {
    Dataset::load(path, seed).with_context(|| format!("cannot read dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Predictor> {
    Predictor::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn loop_tokens(l: &CorpusLoop, max_len: usize) -> Result<TokenSeq> {
    let seq = l.tokens().with_context(|| format!("cannot tokenize {}", l.path.display()))?;
    match admit(seq, max_len) {
        Admission::Admitted(s) => Ok(s),
        Admission::Rejected { len } => bail!("{}: {len} tokens exceed max_len {max_len}", l.loop_id),
    }
}

fn loop_nest(l: &CorpusLoop, max_len: usize) -> Result<LoopNest> {
    let seq = loop_tokens(l, max_len)?;
    parse_nest(&seq).with_context(|| format!("cannot parse the loop region of {}", l.path.display()))
}

fn parse_descriptor(d: &str) -> Result<TransformationSeq> {
    d.parse::<TransformationSeq>().with_context(|| format!("invalid descriptor `{d}`"))
}

fn rank_for(p: &Predictor, l: &CorpusLoop, cfg: &Config) -> Result<looptune::rank::RankedList> {
    let seq = loop_tokens(l, p.meta.max_len)?;
    let nest = parse_nest(&seq).with_context(|| format!("cannot parse the loop region of {}", l.path.display()))?;
    let seqs: Vec<TransformationSeq> =
        enumerate_with(&nest, &cfg.tile_sizes).into_iter().filter(|s| p.meta.transform.encode(s).is_ok()).collect();
    Ok(rank_loop(p, &seq, Some(&l.types()), &seqs, cfg.threshold)?)
}

fn scored(
    dataset: &Path,
    corpus: &Path,
    model: &Path,
    cfg: &Config,
) -> Result<(Vec<looptune::harness::Scored>, Vec<looptune::harness::Scored>)> {
    let ds = read_dataset(dataset, cfg.seed)?;
    let p = load_model(model)?;
    let loops = loop_inputs(&read_corpus(corpus)?, p.meta.max_len);
    let (train, val) = score(&p, &ds, &loops)?;
    if val.is_empty() {
        bail!("no validation sample could be scored");
    }
    Ok((train, val))
}

fn check_report(r: &looptune::harness::MetricsReport) -> Result<()> {
    let o = &r.overall;
    let mut pcts = vec![
        o.total_accuracy,
        o.speedup_recall,
        o.speedup_precision,
        o.slowdown_recall,
        o.slowdown_precision,
    ];
    for k in &r.topk {
        pcts.extend([k.total_accuracy, k.speedup_recall, k.speedup_precision]);
    }
    if pcts.iter().any(|p| !(0.0..=100.0).contains(&p.value)) {
        bail!(InvariantError("percentage outside [0, 100]".into()));
    }
    if r.geomean_dynamic.iter().any(|(_, g)| g.value + 1e-12 < r.geomean_static.value) {
        bail!(InvariantError("dynamic geomean below static geomean".into()));
    }
    Ok(())
}

fn join_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
