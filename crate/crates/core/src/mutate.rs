//! Transformation sequences: descriptors, enumeration and application.
//!
//! A sequence is a sub-sequence of one of the two canonical orders
//! `interchange -> unroll_and_jam -> distribution -> unrolling` and
//! `interchange -> tiling -> distribution -> unrolling`. Each step is checked
//! with [`legality`] against the nest produced by the steps before it.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::Token;
use crate::loopir::legality::{distribution_groups, nth_permutation, perfect_band};
use crate::loopir::{legality, substitute_stmt, Comparison, ForLoop, LoopHeader, LoopNest, Stmt};

pub const UNROLL_FACTORS: [usize; 3] = [2, 4, 8];
pub const UNROLL_AND_JAM_FACTORS: [usize; 2] = [2, 4];
pub const UNROLL_AND_JAM_LEVELS: RangeInclusive<usize> = 1..=3;
pub const TILE_LEVELS: RangeInclusive<usize> = 1..=4;
pub const DEFAULT_TILE_SIZES: [usize; 3] = [8, 16, 32];
/// Highest permutation number the compact encoding has a slot for.
pub const MAX_PERM: usize = 29;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutateError {
    #[error("illegal transformation {step}")]
    IllegalTransformation { step: String },
    #[error("invalid descriptor `{text}`: {reason}")]
    InvalidDescriptor { text: String, reason: String },
    #[error("sequence violates the transformation grammar: {0}")]
    Grammar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Interchange,
    UnrollAndJam,
    Tiling,
    Distribution,
    Unrolling,
}

impl StepKind {
    pub const ALL: [StepKind; 5] = [
        StepKind::Interchange,
        StepKind::UnrollAndJam,
        StepKind::Tiling,
        StepKind::Distribution,
        StepKind::Unrolling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Interchange => "interchange",
            StepKind::UnrollAndJam => "unroll_and_jam",
            StepKind::Tiling => "tiling",
            StepKind::Distribution => "distribution",
            StepKind::Unrolling => "unrolling",
        }
    }

    /// Position in the canonical orders; unroll-and-jam and tiling share a slot.
    pub fn rank(self) -> u8 {
        match self {
            StepKind::Interchange => 0,
            StepKind::UnrollAndJam | StepKind::Tiling => 1,
            StepKind::Distribution => 2,
            StepKind::Unrolling => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformationStep {
    Unrolling { factor: usize },
    UnrollAndJam { level: usize, factor: usize },
    Tiling { level: usize, size: usize },
    Interchange { perm: usize },
    Distribution,
}

impl TransformationStep {
    pub fn kind(&self) -> StepKind {
        match self {
            TransformationStep::Unrolling { .. } => StepKind::Unrolling,
            TransformationStep::UnrollAndJam { .. } => StepKind::UnrollAndJam,
            TransformationStep::Tiling { .. } => StepKind::Tiling,
            TransformationStep::Interchange { .. } => StepKind::Interchange,
            TransformationStep::Distribution => StepKind::Distribution,
        }
    }
}

impl fmt::Display for TransformationStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = self.kind().as_str();
        match *self {
            TransformationStep::Unrolling { factor } => write!(f, "{kind}(factor={factor})"),
            TransformationStep::UnrollAndJam { level, factor } => write!(f, "{kind}(level={level},factor={factor})"),
            TransformationStep::Tiling { level, size } => write!(f, "{kind}(level={level},size={size})"),
            TransformationStep::Interchange { perm } => write!(f, "{kind}(perm={perm})"),
            TransformationStep::Distribution => write!(f, "{kind}()"),
        }
    }
}

impl FromStr for TransformationStep {
    type Err = MutateError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| MutateError::InvalidDescriptor { text: text.to_string(), reason: reason.to_string() };
        let open = text.find('(').ok_or_else(|| bad("missing `(`"))?;
        let inner = text[open + 1..].strip_suffix(')').ok_or_else(|| bad("missing `)`"))?;
        let mut params: Vec<(&str, usize)> = Vec::new();
        if !inner.is_empty() {
            for part in inner.split(',') {
                let (k, v) = part.split_once('=').ok_or_else(|| bad("parameter must be `name=value`"))?;
                let v: usize = v.parse().map_err(|_| bad("parameter value must be a non-negative integer"))?;
                params.push((k, v));
            }
        }
        let names: Vec<&str> = params.iter().map(|p| p.0).collect();
        let step = match (&text[..open], names.as_slice()) {
            ("unrolling", ["factor"]) => TransformationStep::Unrolling { factor: params[0].1 },
            ("unroll_and_jam", ["level", "factor"]) => {
                TransformationStep::UnrollAndJam { level: params[0].1, factor: params[1].1 }
            }
            ("tiling", ["level", "size"]) => TransformationStep::Tiling { level: params[0].1, size: params[1].1 },
            ("interchange", ["perm"]) => TransformationStep::Interchange { perm: params[0].1 },
            ("distribution", []) => TransformationStep::Distribution,
            ("unrolling" | "unroll_and_jam" | "tiling" | "interchange" | "distribution", _) => {
                return Err(bad("wrong parameters for this kind"))
            }
            _ => return Err(bad("unknown transformation kind")),
        };
        // Only the canonical spelling is accepted, so files round-trip byte-exactly.
        if step.to_string() != text {
            return Err(bad("non-canonical spelling"));
        }
        Ok(step)
    }
}

/// An ordered list of steps satisfying the grammar.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformationSeq {
    pub steps: Vec<TransformationStep>,
}

impl TransformationSeq {
    pub fn new(steps: Vec<TransformationStep>) -> Result<Self, MutateError> {
        let seq = TransformationSeq { steps };
        seq.validate()?;
        Ok(seq)
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Check the grammar: strictly increasing canonical rank, which also
    /// rules out repeated kinds and unroll-and-jam together with tiling.
    pub fn validate(&self) -> Result<(), MutateError> {
        for w in self.steps.windows(2) {
            let (a, b) = (w[0].kind(), w[1].kind());
            if a.rank() >= b.rank() {
                return Err(MutateError::Grammar(format!("{} cannot follow {}", b.as_str(), a.as_str())));
            }
        }
        Ok(())
    }

    /// Step kinds, parameters dropped, e.g. `interchange;unrolling`.
    pub fn shape(&self) -> String {
        self.steps.iter().map(|s| s.kind().as_str()).collect::<Vec<_>>().join(";")
    }

    pub fn descriptor(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TransformationSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for TransformationSeq {
    type Err = MutateError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        if text.is_empty() {
            return Ok(TransformationSeq::default());
        }
        let steps = text.split(';').map(str::parse).collect::<Result<Vec<_>, _>>()?;
        TransformationSeq::new(steps)
    }
}

/// Every legal grammar-valid non-empty sequence, sorted by descriptor.
pub fn enumerate(nest: &LoopNest) -> Vec<TransformationSeq> {
    enumerate_with(nest, &DEFAULT_TILE_SIZES)
}

pub fn enumerate_with(nest: &LoopNest, tile_sizes: &[usize]) -> Vec<TransformationSeq> {
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    extend(nest, None, tile_sizes, &mut prefix, &mut out);
    out.sort_by_cached_key(|s| s.to_string());
    out
}

fn candidates(nest: &LoopNest, after: Option<u8>, tile_sizes: &[usize]) -> Vec<TransformationStep> {
    let depth = nest.depth();
    let mut out = Vec::new();
    let allowed = |k: StepKind| after.is_none_or(|r| k.rank() > r);
    if allowed(StepKind::Interchange) && depth >= 2 {
        let total: usize = (1..=depth).product();
        out.extend((2..=total.min(MAX_PERM)).map(|perm| TransformationStep::Interchange { perm }));
    }
    if allowed(StepKind::UnrollAndJam) {
        for level in UNROLL_AND_JAM_LEVELS {
            for factor in UNROLL_AND_JAM_FACTORS {
                out.push(TransformationStep::UnrollAndJam { level, factor });
            }
        }
        for level in TILE_LEVELS {
            for &size in tile_sizes {
                out.push(TransformationStep::Tiling { level, size });
            }
        }
    }
    if allowed(StepKind::Distribution) {
        out.push(TransformationStep::Distribution);
    }
    if allowed(StepKind::Unrolling) {
        out.extend(UNROLL_FACTORS.map(|factor| TransformationStep::Unrolling { factor }));
    }
    out
}

fn extend(
    nest: &LoopNest,
    after: Option<u8>,
    tile_sizes: &[usize],
    prefix: &mut Vec<TransformationStep>,
    out: &mut Vec<TransformationSeq>,
) {
    for step in candidates(nest, after, tile_sizes) {
        if !legality(nest, &step) {
            continue;
        }
        let Ok(next) = apply_step(nest, &step) else { continue };
        prefix.push(step);
        out.push(TransformationSeq { steps: prefix.clone() });
        extend(&next, Some(step.kind().rank()), tile_sizes, prefix, out);
        prefix.pop();
    }
}

/// Apply `seq` left to right and render the resulting region as C.
pub fn apply(nest: &LoopNest, seq: &TransformationSeq) -> Result<String, MutateError> {
    Ok(apply_ir(nest, seq)?.to_c())
}

pub fn apply_ir(nest: &LoopNest, seq: &TransformationSeq) -> Result<LoopNest, MutateError> {
    seq.validate()?;
    let mut cur = nest.clone();
    for step in &seq.steps {
        if !legality(&cur, step) {
            return Err(illegal(step));
        }
        cur = apply_step(&cur, step)?;
    }
    Ok(cur)
}

fn illegal(step: &TransformationStep) -> MutateError {
    MutateError::IllegalTransformation { step: step.to_string() }
}

/// Apply one step without a legality check.
pub fn apply_step(nest: &LoopNest, step: &TransformationStep) -> Result<LoopNest, MutateError> {
    match *step {
        TransformationStep::Unrolling { factor } => unroll(nest, factor),
        TransformationStep::UnrollAndJam { level, factor } => unroll_and_jam(nest, level, factor),
        TransformationStep::Tiling { level, size } => tile(nest, level, size),
        TransformationStep::Interchange { perm } => interchange(nest, perm),
        TransformationStep::Distribution => {
            let parts = distribute(nest)?;
            Ok(LoopNest { stmts: parts.into_iter().flat_map(|n| n.stmts).collect() })
        }
    }
}

fn int_tokens(v: i64) -> Vec<Token> {
    if v < 0 {
        vec![Token::op("-"), Token::int(-v)]
    } else {
        vec![Token::int(v)]
    }
}

fn parenthesized(tokens: &[Token]) -> Vec<Token> {
    if tokens.len() == 1 {
        return tokens.to_vec();
    }
    let mut out = vec![Token::punct("(")];
    out.extend(tokens.iter().cloned());
    out.push(Token::punct(")"));
    out
}

fn concat(parts: &[&[Token]]) -> Vec<Token> {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

/// `f` copies of `body`, copy `k` with `var` shifted by `k * stride`.
/// Copies are flattened into one block unless they declare names at top level.
fn replicate(body: &Stmt, var: &str, stride: i64, f: usize) -> Stmt {
    let items = body.items();
    let braced = items.iter().any(Stmt::is_declaration);
    let mut out = Vec::new();
    for k in 0..f as i64 {
        let copy = substitute_stmt(body, var, k * stride);
        if braced {
            out.push(Stmt::Compound(copy.items().to_vec()));
        } else {
            out.extend(copy.items().iter().cloned());
        }
    }
    Stmt::Compound(out)
}

/// Header of the widened loop plus, if needed, the start of a remainder loop.
fn widened_header(h: &LoopHeader, f: usize) -> (LoopHeader, Option<Vec<Token>>) {
    let s = h.step;
    let big = s * f as i64;
    let mut main = h.clone().touched();
    main.step = big;
    let constants = h.lower_affine().and_then(|a| a.as_constant()).zip(h.upper_affine().and_then(|a| a.as_constant()));
    let trip = h.constant_trip_count();
    if let Some(t) = trip {
        if t % f as i64 == 0 {
            if let (Some((lo, _)), true) = (constants, t > 0) {
                main.comparison = Comparison::Le;
                main.upper = int_tokens(lo + (t - 1) * s);
            }
            return (main, None);
        }
    }
    let k = (f as i64 - 1) * s;
    main.upper = match h.upper_affine().and_then(|a| a.as_constant()) {
        Some(u) => int_tokens(u - k),
        None => concat(&[&parenthesized(&h.upper), &[Token::op("-"), Token::int(k)]]),
    };
    let start = match (constants, trip) {
        (Some((lo, _)), Some(t)) => int_tokens(lo + (t / f as i64) * big),
        _ => {
            let lo = parenthesized(&h.lower);
            let mut ueff = parenthesized(&h.upper);
            if h.comparison == Comparison::Le {
                ueff = concat(&[&[Token::punct("(")], &ueff, &[Token::op("+"), Token::int(1), Token::punct(")")]]);
            }
            // D = Ueff - lo - K; start = lo + (D > 0 ? (D + F - 1) / F : 0) * F
            let d = concat(&[&[Token::punct("(")], &ueff, &[Token::op("-")], &lo, &[Token::op("-"), Token::int(k), Token::punct(")")]]);
            concat(&[
                &lo,
                &[Token::op("+"), Token::punct("(")],
                &d,
                &[Token::op(">"), Token::int(0), Token::op("?"), Token::punct("(")],
                &d,
                &[Token::op("+"), Token::int(big - 1), Token::punct(")"), Token::op("/"), Token::int(big)],
                &[Token::op(":"), Token::int(0), Token::punct(")"), Token::op("*"), Token::int(big)],
            ])
        }
    };
    (main, Some(start))
}

fn remainder_loop(original: &ForLoop, start: Vec<Token>) -> Stmt {
    let mut h = original.header.clone().touched();
    h.lower = start;
    Stmt::For(ForLoop { header: h, body: original.body.clone() })
}

fn one_or_block(mut v: Vec<Stmt>) -> Stmt {
    if v.len() == 1 {
        v.pop().expect("one element")
    } else {
        Stmt::Compound(v)
    }
}

/// Rewrite every innermost loop with `f`, splicing multi-statement results.
fn map_innermost(stmts: &[Stmt], f: &impl Fn(&ForLoop) -> Vec<Stmt>) -> Vec<Stmt> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            Stmt::For(l) if !l.body.contains_loop() => out.extend(f(l)),
            other => out.push(map_stmt(other, f)),
        }
    }
    out
}

fn map_stmt(s: &Stmt, f: &impl Fn(&ForLoop) -> Vec<Stmt>) -> Stmt {
    match s {
        Stmt::Simple(_) => s.clone(),
        Stmt::Compound(items) => Stmt::Compound(map_innermost(items, f)),
        Stmt::If { cond, then, els } => Stmt::If {
            cond: cond.clone(),
            then: Box::new(one_or_block(map_innermost(std::slice::from_ref(then), f))),
            els: els.as_ref().map(|e| Box::new(one_or_block(map_innermost(std::slice::from_ref(e), f)))),
        },
        Stmt::For(l) => Stmt::For(ForLoop {
            header: l.header.clone(),
            body: Box::new(one_or_block(map_innermost(std::slice::from_ref(&l.body), f))),
        }),
    }
}

/// Unroll every innermost loop by `factor`, with a remainder loop when the
/// trip count is not provably a multiple of it.
pub fn unroll(nest: &LoopNest, factor: usize) -> Result<LoopNest, MutateError> {
    let step = TransformationStep::Unrolling { factor };
    if factor < 1 {
        return Err(illegal(&step));
    }
    let stmts = map_innermost(&nest.stmts, &|l: &ForLoop| {
        let (header, start) = widened_header(&l.header, factor);
        let body = replicate(&l.body, &l.header.var, l.header.step, factor);
        let mut v = vec![Stmt::For(ForLoop { header, body: Box::new(body) })];
        if let Some(start) = start {
            v.push(remainder_loop(l, start));
        }
        v
    });
    Ok(LoopNest { stmts })
}

/// Rebuild the chain of a single-root nest, replacing loop `level - 1` by
/// the statements `f` returns for it.
fn replace_chain_loop(
    nest: &LoopNest,
    level: usize,
    step: &TransformationStep,
    f: impl FnOnce(&ForLoop) -> Vec<Stmt>,
) -> Result<LoopNest, MutateError> {
    let chain = nest.chain();
    if level < 1 || level > chain.len() {
        return Err(illegal(step));
    }
    let mut replacement = f(chain[level - 1]);
    for outer in chain[..level - 1].iter().rev() {
        let wrap_block = matches!(*outer.body, Stmt::Compound(_));
        let body = if wrap_block || replacement.len() > 1 {
            Stmt::Compound(replacement)
        } else {
            replacement.pop().expect("one statement")
        };
        replacement = vec![Stmt::For(ForLoop { header: outer.header.clone(), body: Box::new(body) })];
    }
    Ok(LoopNest { stmts: replacement })
}

/// Replace the innermost body of a perfect band starting at `l`.
fn with_innermost_body(l: &ForLoop, body: Stmt) -> ForLoop {
    match l.body.items() {
        [Stmt::For(inner)] => {
            let new_inner = Stmt::For(with_innermost_body(inner, body));
            let wrapped = match *l.body {
                Stmt::Compound(_) => Stmt::Compound(vec![new_inner]),
                _ => new_inner,
            };
            ForLoop { header: l.header.clone(), body: Box::new(wrapped) }
        }
        _ => ForLoop { header: l.header.clone(), body: Box::new(body) },
    }
}

fn innermost_body(l: &ForLoop) -> &Stmt {
    match l.body.items() {
        [Stmt::For(inner)] => innermost_body(inner),
        _ => &l.body,
    }
}

/// Unroll the loop at `level` by `factor` and jam the copies into the innermost body.
pub fn unroll_and_jam(nest: &LoopNest, level: usize, factor: usize) -> Result<LoopNest, MutateError> {
    let step = TransformationStep::UnrollAndJam { level, factor };
    if nest.depth() <= level || !nest.perfectly_nested() {
        return Err(illegal(&step));
    }
    replace_chain_loop(nest, level, &step, |l| {
        let (header, start) = widened_header(&l.header, factor);
        let jammed = replicate(innermost_body(l), &l.header.var, l.header.step, factor);
        let mut main = with_innermost_body(l, jammed);
        main.header = header;
        let mut v = vec![Stmt::For(main)];
        if let Some(start) = start {
            v.push(remainder_loop(l, start));
        }
        v
    })
}

fn fresh_name(nest: &LoopNest, base: &str) -> String {
    let taken = nest.identifiers();
    let first = format!("{base}t");
    if !taken.contains(&first) {
        return first;
    }
    (1..).map(|k| format!("{base}t{k}")).find(|n| !taken.contains(n)).expect("unbounded search")
}

/// Split the loop at `level` into a tile loop and a point loop.
pub fn tile(nest: &LoopNest, level: usize, size: usize) -> Result<LoopNest, MutateError> {
    let step = TransformationStep::Tiling { level, size };
    if size < 1 {
        return Err(illegal(&step));
    }
    let chain = nest.chain();
    if level < 1 || level > chain.len() {
        return Err(illegal(&step));
    }
    let tvar = fresh_name(nest, &chain[level - 1].header.var);
    replace_chain_loop(nest, level, &step, |l| {
        let h = &l.header;
        let width = size as i64 * h.step;
        let tile_header = LoopHeader {
            var: tvar.clone(),
            decl: Some(vec![Token::keyword("int")]),
            lower: h.lower.clone(),
            comparison: h.comparison,
            upper: h.upper.clone(),
            step: width,
            verbatim: None,
        };
        // point bound: (tv + W < (U) ? tv + W : (U)), or W - 1 for `<=`
        let reach = match h.comparison {
            Comparison::Lt => width,
            Comparison::Le => width - 1,
        };
        let edge = vec![Token::ident(&tvar), Token::op("+"), Token::int(reach)];
        let u = concat(&[&[Token::punct("(")], &h.upper, &[Token::punct(")")]]);
        let upper = concat(&[
            &[Token::punct("(")],
            &edge,
            &[Token::op("<")],
            &u,
            &[Token::op("?")],
            &edge,
            &[Token::op(":")],
            &u,
            &[Token::punct(")")],
        ]);
        let point = LoopHeader {
            var: h.var.clone(),
            decl: h.decl.clone(),
            lower: vec![Token::ident(&tvar)],
            comparison: h.comparison,
            upper,
            step: h.step,
            verbatim: None,
        };
        let point_loop = ForLoop { header: point, body: l.body.clone() };
        vec![Stmt::For(ForLoop { header: tile_header, body: Box::new(Stmt::For(point_loop)) })]
    })
}

/// Reorder the loops of a perfect nest by the `perm`-th lexicographic permutation.
pub fn interchange(nest: &LoopNest, perm: usize) -> Result<LoopNest, MutateError> {
    let step = TransformationStep::Interchange { perm };
    let chain = nest.chain();
    if !nest.perfectly_nested() {
        return Err(illegal(&step));
    }
    let order = nth_permutation(chain.len(), perm).ok_or_else(|| illegal(&step))?;
    let mut cur: Stmt = (*chain.last().expect("non-empty chain").body).clone();
    for p in (0..chain.len()).rev() {
        let header = chain[order[p]].header.clone();
        if p < chain.len() - 1 && matches!(*chain[p].body, Stmt::Compound(_)) {
            cur = Stmt::Compound(vec![cur]);
        }
        cur = Stmt::For(ForLoop { header, body: Box::new(cur) });
    }
    Ok(LoopNest { stmts: vec![cur] })
}

/// Split each top-level loop band into one band per independent statement group.
pub fn distribute(nest: &LoopNest) -> Result<Vec<LoopNest>, MutateError> {
    let step = TransformationStep::Distribution;
    let mut out = Vec::new();
    for s in &nest.stmts {
        let Stmt::For(l) = s else { return Err(illegal(&step)) };
        let band = perfect_band(l);
        let bottom = band.last().expect("non-empty band");
        let items = bottom.body.items();
        let groups = distribution_groups(items).ok_or_else(|| illegal(&step))?;
        if groups.len() < 2 {
            return Err(illegal(&step));
        }
        for g in groups {
            let body = Stmt::Compound(g.iter().map(|&i| items[i].clone()).collect());
            out.push(LoopNest::from_loop(with_innermost_body(l, body)));
        }
    }
    Ok(out)
}
