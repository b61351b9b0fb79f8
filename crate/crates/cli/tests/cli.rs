//! End-to-end runs of the `looptune` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn looptune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_looptune")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The last line of standard error is a JSON object with the exit code.
fn error_line(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    serde_json::from_str(err.lines().last().unwrap()).unwrap_or_else(|_| panic!("not JSON: {err}"))
}

#[test]
fn help_succeeds() {
    let o = looptune(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("build-dataset"));
}

#[test]
fn bad_usage_exits_with_one() {
    let o = looptune(&["mutate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["kind"], "usage");

    let regclass = corpus().join("regclass.c");
    let o = looptune(&["--threshold", "2.5", "mutate", "--list", "--loop", path(&regclass)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"]["code"], 1);
}

#[test]
fn missing_file_exits_with_two() {
    let o = looptune(&["tokenize", "--loop", "/nonexistent/loop.c"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "input");
    assert!(e["error"]["message"].as_str().unwrap().contains("/nonexistent/loop.c"));
}

#[test]
fn tokenize_prints_kind_and_text() {
    let o = looptune(&["tokenize", "--loop", path(&corpus().join("regclass.c"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let first: Vec<&str> = out.lines().take(2).collect();
    assert_eq!(first, ["keyword\tfor", "punctuation\t("]);
}

#[test]
fn mutate_unrolls_regclass_by_two() {
    let o = looptune(&[
        "mutate",
        "--loop",
        path(&corpus().join("regclass.c")),
        "--descriptor",
        "unrolling(factor=2)",
        "--region-only",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.trim_start().starts_with("for (Class = 0; Class <= 255; Class += 2)"), "{out}");
    assert!(out.contains("Perl_fold[Class + 1]"));
    assert_eq!(out.matches("Perl_fold[").count(), 2);
}

#[test]
fn mutate_writes_a_compilable_program() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("v.c");
    let src = corpus().join("saxpy.c");
    let o = looptune(&["mutate", "--loop", path(&src), "--descriptor", "unrolling(factor=4)", "--out", path(&dest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&dest).unwrap();
    assert!(text.contains("#pragma looplearner begin") && text.contains("#pragma looplearner end"));
    assert_ne!(text, std::fs::read_to_string(&src).unwrap());
}

fn tiling_sizes(listing: &str) -> Vec<String> {
    let mut v: Vec<String> = listing
        .lines()
        .filter_map(|l| l.split("size=").nth(1))
        .map(|s| s.split(')').next().unwrap().to_string())
        .collect();
    v.sort();
    v.dedup();
    v
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("looptune.conf");
    std::fs::write(&cfg, "# tile sizes only\ntile_sizes = 16\n").unwrap();
    let matmul = corpus().join("matmul.c");

    let default = looptune(&["mutate", "--list", "--loop", path(&matmul)]);
    assert_eq!(tiling_sizes(&stdout(&default)), ["16", "32", "8"]);

    let from_file = looptune(&["--config", path(&cfg), "mutate", "--list", "--loop", path(&matmul)]);
    assert_eq!(tiling_sizes(&stdout(&from_file)), ["16"]);

    let flag = looptune(&["--config", path(&cfg), "--tile-sizes", "32", "mutate", "--list", "--loop", path(&matmul)]);
    assert_eq!(tiling_sizes(&stdout(&flag)), ["32"]);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = looptune(&["--config", path(&cfg), "mutate", "--list", "--loop", path(&corpus().join("dot.c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
}

const TINY: &[&str] = &[
    "--method", "basic", "--epochs", "3", "--batch-size", "16", "--init-channels", "4", "--blocks", "1", "--growth",
    "4", "--hidden", "8", "--max-len", "250",
];

/// A five-loop corpus with a synthetic dataset built from `mutate --list`,
/// so training needs no compiler.
fn tiny_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cdir = dir.join("corpus");
    std::fs::create_dir(&cdir).unwrap();
    let mut rows = String::new();
    for id in ["saxpy", "matmul", "dot", "transpose", "regclass"] {
        let src = corpus().join(format!("{id}.c"));
        std::fs::copy(&src, cdir.join(format!("{id}.c"))).unwrap();
        let listing = stdout(&looptune(&["mutate", "--list", "--loop", path(&src)]));
        for (i, d) in listing.lines().take(20).enumerate() {
            let speedup = 0.7 + 0.05 * ((i * 7 + id.len()) % 13) as f64;
            rows.push_str(&format!("{id}\t{d}\t{speedup:.3}\n"));
        }
    }
    let ds = dir.join("dataset.tsv");
    std::fs::write(&ds, rows).unwrap();
    (cdir, ds)
}

#[test]
fn train_rank_predict_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (cdir, ds) = tiny_setup(dir.path());
    let model = dir.path().join("model.ckpt");

    let mut args = TINY.to_vec();
    args.extend(["train", "--dataset", path(&ds), "--corpus", path(&cdir), "--out", path(&model)]);
    let o = looptune(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best_epoch"));
    assert!(model.exists());

    let matmul = cdir.join("matmul.c");
    let o = looptune(&["--top-k", "3", "rank", "--model", path(&model), "--loop", path(&matmul)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let preds: Vec<f64> = out.lines().filter_map(|l| l.split('\t').nth(3)?.parse().ok()).collect();
    assert_eq!(preds.len(), 3, "{out}");
    assert!(preds.windows(2).all(|w| w[0] >= w[1]), "{out}");

    let o = looptune(&["predict", "--model", path(&model), "--loop", path(&matmul), "--descriptor", "unrolling(factor=2)"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fields: Vec<String> = stdout(&o).trim().split('\t').map(String::from).collect();
    assert_eq!(fields[0], "matmul");
    assert!(fields[2].parse::<f64>().unwrap().is_finite());

    let o = looptune(&["eval", "--json", "--dataset", path(&ds), "--corpus", path(&cdir), "--model", path(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report.is_object());

    let o = looptune(&["sweep", "--dataset", path(&ds), "--corpus", path(&cdir), "--model", path(&model), "--to", "1.2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 5);

    let o = looptune(&["rank", "--model", path(&dir.path().join("missing.ckpt")), "--loop", path(&matmul)]);
    assert_eq!(o.status.code(), Some(2));
}
