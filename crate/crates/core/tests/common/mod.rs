//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use looptune::encode::encode_transformation;
use looptune::harness::Scored;
use looptune::mutate::{TransformationSeq, TransformationStep};
use looptune::neural::{
    conv1d_backward, conv1d_forward, dense_block_backward, dense_block_forward, global_avg_pool,
    global_avg_pool_backward, predict_examples, train, Architecture, DenseBlockRef, Example, Hyperparams,
    ModelParams, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn weighted(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Worst relative error over input, weight and bias gradients of one random convolution.
pub fn conv_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(3..9);
    let in_ch = rng.gen_range(1..5);
    let out_ch = rng.gen_range(1..5);
    let k = [1, 3, 5][rng.gen_range(0..3)].min(len);
    let pad = if seed % 2 == 0 { k / 2 } else { 0 };
    let x = random_vec(&mut rng, len * in_ch);
    let w = random_vec(&mut rng, out_ch * k * in_ch);
    let b = random_vec(&mut rng, out_ch);
    let out_len = len + 2 * pad - k + 1;
    let r = random_vec(&mut rng, out_len * out_ch);
    let (dx, dw, db) = conv1d_backward(&x, len, in_ch, &w, out_ch, k, pad, &r, true);
    let loss = |x: &[f64], w: &[f64], b: &[f64]| weighted(&conv1d_forward(x, len, in_ch, w, b, k, pad).unwrap(), &r);
    let nx = numeric_grad(&x, |v| loss(v, &w, &b));
    let nw = numeric_grad(&w, |v| loss(&x, v, &b));
    let nb = numeric_grad(&b, |v| loss(&x, &w, v));
    relative_error(&dx, &nx).max(relative_error(&dw, &nw)).max(relative_error(&db, &nb))
}

/// Worst relative error over the gradients of one random dense block.
pub fn dense_block_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(3..8);
    let in_ch = rng.gen_range(1..5);
    let growth = rng.gen_range(1..4);
    let kernel = 3;
    let x = random_vec(&mut rng, len * in_ch);
    let mut params = vec![
        random_vec(&mut rng, growth * kernel * in_ch),
        random_vec(&mut rng, growth),
        random_vec(&mut rng, growth * kernel * growth),
        random_vec(&mut rng, growth),
    ];
    let r = random_vec(&mut rng, len * (in_ch + growth));
    let eval = |x: &[f64], p: &[Vec<f64>]| {
        let block = DenseBlockRef { in_ch, growth, kernel, w1: &p[0], b1: &p[1], w2: &p[2], b2: &p[3] };
        dense_block_forward(&block, x, len).unwrap()
    };
    let (_, cache) = eval(&x, &params);
    let block = DenseBlockRef { in_ch, growth, kernel, w1: &params[0], b1: &params[1], w2: &params[2], b2: &params[3] };
    let (dx, dp) = dense_block_backward(&block, &cache, &r, len);
    let mut worst = relative_error(&dx, &numeric_grad(&x, |v| weighted(&eval(v, &params).0, &r)));
    for i in 0..4 {
        let base = params[i].clone();
        let n = numeric_grad(&base, |v| {
            params[i] = v.to_vec();
            weighted(&eval(&x, &params).0, &r)
        });
        params[i] = base;
        worst = worst.max(relative_error(&dp[i], &n));
    }
    worst
}

/// Relative error of the global-average-pooling input gradient.
pub fn pool_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(1..10);
    let ch = rng.gen_range(1..6);
    let x = random_vec(&mut rng, len * ch);
    let r = random_vec(&mut rng, ch);
    let analytic = global_avg_pool_backward(&r, len);
    let numeric = numeric_grad(&x, |v| weighted(&global_avg_pool(v, len, ch), &r));
    relative_error(&analytic, &numeric)
}

/// A tiny network, loops and examples for end-to-end gradient checks.
pub fn tiny_problem(seed: u64) -> (ModelParams, TrainingSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        in_channels: rng.gen_range(1..4),
        tvec_len: rng.gen_range(1..5),
        init_channels: rng.gen_range(2..5),
        blocks: rng.gen_range(1..3),
        growth: rng.gen_range(1..4),
        kernel: 3,
        hidden: rng.gen_range(2..6),
    };
    let mut model = ModelParams::init(arch, Hyperparams { seed, ..Hyperparams::default() });
    // Non-zero biases exercise every gradient path.
    for t in model.tensors.iter_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let mut set = TrainingSet::default();
    for _ in 0..2 {
        let len = rng.gen_range(3..7);
        set.loops.push((random_vec(&mut rng, len * arch.in_channels), len));
    }
    for i in 0..3 {
        set.train.push(Example { loop_index: i % 2, tvec: random_vec(&mut rng, arch.tvec_len), target: rng.gen_range(0.5..2.0) });
    }
    (model, set)
}

/// Relative error of the full-network MSE gradient over every parameter.
pub fn network_grad_error(seed: u64) -> f64 {
    let (model, set) = tiny_problem(seed);
    let batch: Vec<&Example> = set.train.iter().collect();
    let (grads, _) = looptune::neural::batch_gradients(&model, &set, &batch).unwrap();
    let mut probe = model.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..model.tensors.len() {
        let base = model.tensors[i].clone();
        let n = numeric_grad(&base, |v| {
            probe.tensors[i] = v.to_vec();
            mse(&probe, &set)
        });
        probe.tensors[i] = base;
        analytic.extend_from_slice(&grads[i]);
        numeric.extend(n);
    }
    relative_error(&analytic, &numeric)
}

fn mse(model: &ModelParams, set: &TrainingSet) -> f64 {
    let preds = predict_examples(model, set, &set.train).unwrap();
    preds.iter().zip(&set.train).map(|(p, e)| (p - e.target) * (p - e.target)).sum::<f64>() / preds.len() as f64
}

/// 50 samples over 5 random loops with targets linear in the compact vector.
pub fn overfit_set() -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seqs: Vec<TransformationSeq> = [
        "unrolling(factor=2)",
        "unrolling(factor=4)",
        "unrolling(factor=8)",
        "interchange(perm=2)",
        "interchange(perm=2);unrolling(factor=4)",
        "tiling(level=1,size=8)",
        "tiling(level=2,size=32);unrolling(factor=2)",
        "unroll_and_jam(level=1,factor=2)",
        "distribution()",
        "distribution();unrolling(factor=8)",
    ]
    .iter()
    .map(|d| d.parse().unwrap())
    .collect();
    let weights: Vec<f64> = (0..looptune::encode::TVEC_LEN).map(|i| 0.15 * ((i % 5) as f64 - 2.0)).collect();
    let mut set = TrainingSet::default();
    for l in 0..5 {
        set.loops.push((random_vec(&mut rng, 12 * 4), 12));
        for s in &seqs {
            let tvec = encode_transformation(s).unwrap().values;
            let target = 1.0 + l as f64 * 0.05 + tvec.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
            set.train.push(Example { loop_index: l, tvec, target });
        }
    }
    set
}

/// Final training MSE after 300 epochs at the default hyperparameters, with
/// the batch size capped at `max_batch`.
pub fn overfit_final_mse(max_batch: usize) -> (f64, bool) {
    let set = overfit_set();
    let arch = Architecture::new(4, looptune::encode::TVEC_LEN);
    let hyper = Hyperparams { batch_size: max_batch.min(set.train.len()), ..Hyperparams::default() };
    let out = train(&set, arch, &hyper).unwrap();
    let last = out.history.last().unwrap();
    (last.train_mse, out.model.all_finite())
}

// Brute-force metric oracles: direct set construction and per-loop predicates.

pub fn oracle_pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// (total acc, sp recall, sp precision, sd recall, sd precision) by set algebra.
pub fn oracle_overall(s: &[Scored], t: f64) -> [f64; 5] {
    let idx = |f: &dyn Fn(&Scored) -> bool| -> HashSet<usize> { (0..s.len()).filter(|&i| f(&s[i])).collect() };
    let p_plus = idx(&|x| x.p > t);
    let p_minus = idx(&|x| x.p <= 2.0 - t);
    let t_plus = idx(&|x| x.a > 1.0);
    let t_minus = idx(&|x| x.a <= 1.0);
    let sp: HashSet<usize> = p_plus.intersection(&t_plus).copied().collect();
    let sd: HashSet<usize> = p_minus.intersection(&t_minus).copied().collect();
    let correct: HashSet<usize> = sp.union(&sd).copied().collect();
    [
        oracle_pct(correct.len(), s.len()),
        oracle_pct(sp.len(), t_plus.len()),
        oracle_pct(sp.len(), p_plus.len()),
        oracle_pct(sd.len(), t_minus.len()),
        oracle_pct(sd.len(), p_minus.len()),
    ]
}

/// Per-loop ordered lists: (descriptor, p, a), best first, ties by descriptor.
pub fn oracle_lists(s: &[Scored]) -> BTreeMap<String, Vec<(String, f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(String, f64, f64)>> = BTreeMap::new();
    for x in s {
        out.entry(x.loop_id.clone()).or_default().push((x.seq.to_string(), x.p, x.a));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    }
    out
}

/// (total acc, sp recall, sp precision) over loops.
pub fn oracle_topk(s: &[Scored], k: usize, t: f64) -> [f64; 3] {
    let lists = oracle_lists(s);
    let (mut acc, mut lp, mut rec, mut lsp, mut prec) = (0, 0, 0, 0, 0);
    for v in lists.values() {
        let top = &v[..k.min(v.len())];
        let pos: Vec<&(String, f64, f64)> = top.iter().filter(|e| e.1 > t).collect();
        if top.iter().any(|e| (e.1 > 1.0) == (e.2 > 1.0)) {
            acc += 1;
        }
        let hit = pos.iter().any(|e| e.2 > 1.0);
        if v.iter().any(|e| e.2 > 1.0) {
            lp += 1;
            if hit {
                rec += 1;
            }
        }
        if v[0].1 > t {
            lsp += 1;
            if hit {
                prec += 1;
            }
        }
    }
    [oracle_pct(acc, lists.len()), oracle_pct(rec, lp), oracle_pct(prec, lsp)]
}

fn oracle_geo(v: &[f64]) -> f64 {
    if v.is_empty() {
        1.0
    } else {
        (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
    }
}

/// (static, dynamic(k), exhaustive) geomeans over L_sp.
pub fn oracle_geomeans(s: &[Scored], k: usize, t: f64) -> (f64, f64, f64) {
    let lists = oracle_lists(s);
    let (mut st, mut dy, mut ex) = (Vec::new(), Vec::new(), Vec::new());
    for v in lists.values() {
        if v[0].1 <= t {
            continue;
        }
        st.push(v[0].2);
        let mut best = 1.0f64;
        for e in v.iter().take(k) {
            if e.1 > t && e.2 > best {
                best = e.2;
            }
        }
        dy.push(best);
        ex.push(v.iter().map(|e| e.2).fold(1.0, f64::max));
    }
    (oracle_geo(&st), oracle_geo(&dy), oracle_geo(&ex))
}

/// (shape, val acc, recall, precision, loop count, coverage) per shape.
pub fn oracle_per_sequence(val: &[Scored]) -> Vec<(String, f64, f64, f64, usize, f64)> {
    let shapes: BTreeSet<String> = val.iter().map(|s| s.seq.shape()).collect();
    let all_loops: BTreeSet<&str> = val.iter().map(|s| s.loop_id.as_str()).collect();
    shapes
        .into_iter()
        .map(|shape| {
            let sub: Vec<Scored> = val.iter().filter(|s| s.seq.shape() == shape).cloned().collect();
            let m = oracle_overall(&sub, 1.0);
            let loops: BTreeSet<&str> = sub.iter().map(|s| s.loop_id.as_str()).collect();
            let n = loops.len();
            (shape, m[0], m[1], m[2], n, oracle_pct(n, all_loops.len()))
        })
        .collect()
}

fn sc(loop_id: &str, d: &str, p: f64, a: f64) -> Scored {
    Scored { loop_id: loop_id.into(), seq: d.parse().unwrap(), p, a }
}

/// A hand-built five-loop validation fixture covering ties, neutral
/// predictions, loops without any speedup and loops outside L_sp.
pub fn five_loop_fixture() -> Vec<Scored> {
    vec![
        // Top pick advantageous and faster.
        sc("l1", "unrolling(factor=2)", 1.30, 1.25),
        sc("l1", "unrolling(factor=4)", 1.10, 0.90),
        sc("l1", "unrolling(factor=8)", 0.80, 1.05),
        // Tie at the top, broken by descriptor; first pick slower, second faster.
        sc("l2", "tiling(level=1,size=8)", 1.20, 0.95),
        sc("l2", "interchange(perm=2)", 1.20, 1.40),
        sc("l2", "unrolling(factor=2)", 0.70, 0.60),
        sc("l2", "tiling(level=1,size=8);unrolling(factor=2)", 1.05, 1.10),
        // Nothing predicted advantageous although a speedup exists.
        sc("l3", "unrolling(factor=2)", 0.90, 1.10),
        sc("l3", "unrolling(factor=4)", 0.95, 0.85),
        sc("l3", "distribution()", 1.00, 1.02),
        // Predicted advantageous, no real speedup anywhere.
        sc("l4", "unrolling(factor=2)", 1.50, 0.70),
        sc("l4", "unrolling(factor=4)", 1.02, 0.99),
        // Best transformation predicted slower than the original.
        sc("l5", "interchange(perm=2);unrolling(factor=2)", 1.08, 1.01),
        sc("l5", "unroll_and_jam(level=1,factor=2)", 0.97, 1.60),
        sc("l5", "unrolling(factor=8)", 1.12, 0.98),
    ]
}

/// Training-side companion for the per-sequence table.
pub fn five_loop_train() -> Vec<Scored> {
    vec![
        sc("t1", "unrolling(factor=2)", 1.10, 1.20),
        sc("t1", "unrolling(factor=4)", 0.90, 1.10),
        sc("t2", "interchange(perm=2)", 0.80, 0.70),
        sc("t2", "tiling(level=1,size=8)", 1.30, 0.90),
    ]
}

/// Every grammar-valid non-empty sequence, built without the library's enumerator.
pub fn full_grammar() -> Vec<TransformationSeq> {
    let mut interchange = vec![None];
    interchange.extend((1..=29).map(|perm| Some(TransformationStep::Interchange { perm })));
    let mut middle = vec![None];
    for level in 1..=3 {
        for factor in [2, 4] {
            middle.push(Some(TransformationStep::UnrollAndJam { level, factor }));
        }
    }
    for level in 1..=4 {
        for size in [8, 16, 32] {
            middle.push(Some(TransformationStep::Tiling { level, size }));
        }
    }
    let distribution = [None, Some(TransformationStep::Distribution)];
    let mut unroll = vec![None];
    unroll.extend([2, 4, 8].map(|factor| Some(TransformationStep::Unrolling { factor })));
    let mut out = Vec::new();
    for a in &interchange {
        for b in &middle {
            for c in &distribution {
                for d in &unroll {
                    let steps: Vec<TransformationStep> = [a, b, c, d].into_iter().flatten().copied().collect();
                    if !steps.is_empty() {
                        out.push(TransformationSeq { steps });
                    }
                }
            }
        }
    }
    out
}
