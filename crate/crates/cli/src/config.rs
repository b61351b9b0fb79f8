//! Run configuration: command-line flag, then config file, then default.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use looptune::encode::{EmbeddingConfig, EncodingMethod};
use looptune::harness::CompilerConfig;
use looptune::lexer::DEFAULT_MAX_LEN;
use looptune::mutate::DEFAULT_TILE_SIZES;
use looptune::neural::Hyperparams;
use looptune::pipeline::{ArchShape, PipelineConfig, TransformMode};

use crate::UsageError;

/// Every key accepted in a config file.
pub const KEYS: &[&str] = &[
    "method",
    "n",
    "m",
    "c",
    "transform",
    "onehot_size",
    "threshold",
    "top_k",
    "compiler",
    "flags",
    "reps",
    "noise_bound",
    "seed",
    "tile_sizes",
    "max_len",
    "epochs",
    "batch_size",
    "lr",
    "init_channels",
    "blocks",
    "growth",
    "hidden",
    "embed_dim",
    "embed_epochs",
];

/// Validated settings shared by all subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub method: EncodingMethod,
    pub transform: TransformMode,
    pub threshold: f64,
    pub top_k: usize,
    pub compiler: CompilerConfig,
    pub reps: usize,
    /// Largest accepted |1 - s| when timing a loop against itself.
    pub noise_bound: f64,
    pub seed: u64,
    pub tile_sizes: Vec<usize>,
    pub max_len: usize,
    pub arch: ArchShape,
    pub hyper: Hyperparams,
    pub embedding: EmbeddingConfig,
}

/// Raw `key = value` pairs from a config file.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UsageError(format!("config line {}: expected key = value", i + 1)).into());
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(UsageError(format!("config line {}: unknown key `{k}`", i + 1)).into());
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Resolve settings from flag values (`overrides`), an optional config file
/// and built-in defaults.
pub fn resolve(overrides: &BTreeMap<&'static str, String>, file: Option<&Path>) -> Result<Config> {
    let from_file = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
            parse_config_file(&text)?
        }
        None => BTreeMap::new(),
    };
    let get = |k: &str| overrides.get(k).or_else(|| from_file.get(k)).map(String::as_str);
    fn num<T: std::str::FromStr>(key: &str, v: Option<&str>, default: T) -> Result<T> {
        match v {
            Some(s) => s.parse().map_err(|_| UsageError(format!("invalid value `{s}` for {key}")).into()),
            None => Ok(default),
        }
    }

    let n = num("n", get("n"), 1000usize)?;
    let m = num("m", get("m"), 40usize)?;
    let c = num("c", get("c"), 80u32)?;
    let method_name = get("method").unwrap_or("fasttext");
    let Some(method) = EncodingMethod::from_parts(method_name, n, m, c) else {
        bail!(UsageError(format!("unknown encoding method `{method_name}` or c > 100")));
    };
    let transform = match get("transform").unwrap_or("compact") {
        "compact" => TransformMode::Compact,
        "onehot" => TransformMode::Onehot { size: num("onehot_size", get("onehot_size"), 50usize)? },
        other => bail!(UsageError(format!("unknown transformation encoding `{other}`"))),
    };
    let threshold = num("threshold", get("threshold"), 1.0f64)?;
    if !(1.0..2.0).contains(&threshold) {
        bail!(UsageError(format!("threshold must be in [1, 2), got {threshold}")));
    }
    let top_k = num("top_k", get("top_k"), 3usize)?;
    let reps = num("reps", get("reps"), 5usize)?;
    if top_k == 0 || reps == 0 {
        bail!(UsageError("top_k and reps must be positive".into()));
    }
    let noise_bound = num("noise_bound", get("noise_bound"), 0.1f64)?;
    let seed = num("seed", get("seed"), 42u64)?;
    let tile_sizes = match get("tile_sizes") {
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse::<usize>().ok().filter(|&v| v > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| UsageError(format!("invalid tile_sizes `{s}`")))?,
        None => DEFAULT_TILE_SIZES.to_vec(),
    };
    let max_len = num("max_len", get("max_len"), DEFAULT_MAX_LEN)?;
    let mut compiler = CompilerConfig::default();
    if let Some(cmd) = get("compiler") {
        compiler.command = cmd.to_string();
    }
    if let Some(flags) = get("flags") {
        compiler.flags = flags.to_string();
    }
    if !compiler.command.contains("{src}") || !compiler.command.contains("{out}") {
        bail!(UsageError("compiler command needs {src} and {out} placeholders".into()));
    }

    let d = ArchShape::default();
    let arch = ArchShape {
        init_channels: num("init_channels", get("init_channels"), d.init_channels)?,
        blocks: num("blocks", get("blocks"), d.blocks)?,
        growth: num("growth", get("growth"), d.growth)?,
        kernel: d.kernel,
        hidden: num("hidden", get("hidden"), d.hidden)?,
    };
    if arch.init_channels == 0 || arch.growth == 0 || arch.hidden == 0 {
        bail!(UsageError("layer widths must be positive".into()));
    }
    let mut hyper = Hyperparams { seed, ..Hyperparams::default() };
    hyper.epochs = num("epochs", get("epochs"), hyper.epochs)?;
    hyper.batch_size = num("batch_size", get("batch_size"), hyper.batch_size)?;
    hyper.lr0 = num("lr", get("lr"), hyper.lr0)?;
    // Keep the drop epochs proportional when training for fewer epochs.
    if hyper.epochs != Hyperparams::default().epochs {
        hyper.lr_drop_epochs = vec![hyper.epochs / 3, 2 * hyper.epochs / 3];
        hyper.lr_drop_epochs.retain(|&e| e > 0);
    }
    hyper.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut embedding = EmbeddingConfig { seed, ..EmbeddingConfig::default() };
    embedding.dim = num("embed_dim", get("embed_dim"), embedding.dim)?;
    embedding.epochs = num("embed_epochs", get("embed_epochs"), embedding.epochs)?;
    if embedding.dim == 0 {
        bail!(UsageError("embed_dim must be positive".into()));
    }

    Ok(Config {
        method,
        transform,
        threshold,
        top_k,
        compiler,
        reps,
        noise_bound,
        seed,
        tile_sizes,
        max_len,
        arch,
        hyper,
        embedding,
    })
}

impl Config {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            method: self.method,
            transform: self.transform,
            tile_sizes: self.tile_sizes.clone(),
            max_len: self.max_len,
            arch: self.arch,
            hyper: self.hyper.clone(),
            embedding: self.embedding,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = resolve(&BTreeMap::new(), None).unwrap();
        assert_eq!(c.threshold, 1.0);
        assert_eq!(c.top_k, 3);
        assert_eq!(c.compiler.flags, "-O3");
        assert_eq!(c.tile_sizes, [8, 16, 32]);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg");
        std::fs::write(&p, "# comment\ntop_k = 5\nthreshold = 1.2\n").unwrap();
        let mut flags = BTreeMap::new();
        flags.insert("top_k", "7".to_string());
        let c = resolve(&flags, Some(&p)).unwrap();
        assert_eq!(c.top_k, 7);
        assert_eq!(c.threshold, 1.2);
        assert_eq!(c.reps, 5);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(parse_config_file("colour = red").is_err());
        assert!(parse_config_file("no equals sign").is_err());
    }
}
