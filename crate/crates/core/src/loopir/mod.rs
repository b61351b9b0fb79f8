//! Loop-nest IR.
//!
//! Statements keep their exact tokens, so printing a parsed nest re-lexes to
//! the original token list. Analysis (reads, writes, affine subscripts) is
//! recomputed from tokens on demand.

pub mod expr;
pub mod legality;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::{tokenize, Token, TokenKind, TokenSeq};
use expr::{effects, is_type_keyword, parse_expr, parse_initializer, Access, AccessMode, Affine, Effects};

pub use legality::{legality, DependenceVector};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at token {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    Lt,
    Le,
}

impl Comparison {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::Lt => "<",
            Comparison::Le => "<=",
        }
    }
}

/// Header of a counted loop `for (var = lower; var cmp upper; var += step)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopHeader {
    pub var: String,
    /// Type tokens when the init clause declares the variable.
    pub decl: Option<Vec<Token>>,
    pub lower: Vec<Token>,
    pub comparison: Comparison,
    pub upper: Vec<Token>,
    pub step: i64,
    /// Original tokens between the parentheses, reused while the header is unchanged.
    pub verbatim: Option<Vec<Token>>,
}

impl LoopHeader {
    pub fn new(var: &str, lower: Vec<Token>, comparison: Comparison, upper: Vec<Token>, step: i64) -> Self {
        LoopHeader { var: var.to_string(), decl: None, lower, comparison, upper, step, verbatim: None }
    }

    pub fn lower_affine(&self) -> Option<Affine> {
        Affine::from_tokens(&self.lower)
    }

    pub fn upper_affine(&self) -> Option<Affine> {
        Affine::from_tokens(&self.upper)
    }

    /// Number of iterations when it does not depend on any symbol.
    pub fn constant_trip_count(&self) -> Option<i64> {
        let span = self.upper_affine()?.sub(&self.lower_affine()?)?.as_constant()?;
        let last = match self.comparison {
            Comparison::Lt => span - 1,
            Comparison::Le => span,
        };
        Some(if last < 0 { 0 } else { last / self.step + 1 })
    }

    /// Identifiers read by the bound and init expressions.
    pub fn bound_symbols(&self) -> BTreeSet<String> {
        self.lower
            .iter()
            .chain(&self.upper)
            .filter(|t| t.kind == TokenKind::Identifier)
            .map(|t| t.text.clone())
            .collect()
    }

    /// Tokens between the parentheses.
    pub fn tokens(&self) -> Vec<Token> {
        if let Some(v) = &self.verbatim {
            return v.clone();
        }
        let mut out = Vec::new();
        if let Some(d) = &self.decl {
            out.extend(d.iter().cloned());
        }
        out.push(Token::ident(&self.var));
        out.push(Token::op("="));
        out.extend(self.lower.iter().cloned());
        out.push(Token::punct(";"));
        out.push(Token::ident(&self.var));
        out.push(Token::op(self.comparison.as_str()));
        out.extend(self.upper.iter().cloned());
        out.push(Token::punct(";"));
        out.push(Token::ident(&self.var));
        if self.step == 1 {
            out.push(Token::op("++"));
        } else {
            out.push(Token::op("+="));
            out.push(Token::int(self.step));
        }
        out
    }

    /// Drop the verbatim tokens after a field changed.
    pub fn touched(mut self) -> Self {
        self.verbatim = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForLoop {
    pub header: LoopHeader,
    pub body: Box<Stmt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatementKind {
    Assignment,
    Compound,
    Conditional,
    Loop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    /// Expression statement, declaration, jump or empty statement, including `;`.
    Simple(Vec<Token>),
    Compound(Vec<Stmt>),
    If { cond: Vec<Token>, then: Box<Stmt>, els: Option<Box<Stmt>> },
    For(ForLoop),
}

/// How a simple statement reads.
#[derive(Debug, Clone, PartialEq)]
pub enum SimpleForm {
    Empty,
    Expr(expr::Expr),
    /// Declaration of the listed names, with initializer effects.
    Decl { names: Vec<String>, fx: Effects },
    /// `break`, `continue` or `return`.
    Jump,
}

impl Stmt {
    pub fn kind(&self) -> StatementKind {
        match self {
            Stmt::Simple(_) => StatementKind::Assignment,
            Stmt::Compound(_) => StatementKind::Compound,
            Stmt::If { .. } => StatementKind::Conditional,
            Stmt::For(_) => StatementKind::Loop,
        }
    }

    /// Flattened token list.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<Token>) {
        match self {
            Stmt::Simple(t) => out.extend(t.iter().cloned()),
            Stmt::Compound(items) => {
                out.push(Token::punct("{"));
                for s in items {
                    s.push_tokens(out);
                }
                out.push(Token::punct("}"));
            }
            Stmt::If { cond, then, els } => {
                out.push(Token::keyword("if"));
                out.push(Token::punct("("));
                out.extend(cond.iter().cloned());
                out.push(Token::punct(")"));
                then.push_tokens(out);
                if let Some(e) = els {
                    out.push(Token::keyword("else"));
                    e.push_tokens(out);
                }
            }
            Stmt::For(f) => {
                out.push(Token::keyword("for"));
                out.push(Token::punct("("));
                out.extend(f.header.tokens());
                out.push(Token::punct(")"));
                f.body.push_tokens(out);
            }
        }
    }

    /// Statements directly inside a body (a compound's items, or itself).
    pub fn items(&self) -> &[Stmt] {
        match self {
            Stmt::Compound(items) => items,
            other => std::slice::from_ref(other),
        }
    }

    pub fn simple_form(tokens: &[Token]) -> Result<SimpleForm, expr::ExprError> {
        let body = match tokens.split_last() {
            Some((last, rest)) if last.is(";") => rest,
            _ => tokens,
        };
        if body.is_empty() {
            return Ok(SimpleForm::Empty);
        }
        if body[0].is("break") || body[0].is("continue") || body[0].is("return") {
            return Ok(SimpleForm::Jump);
        }
        if let Some(type_len) = declaration_type_len(body) {
            return parse_declarators(&body[type_len..]);
        }
        parse_expr(body).map(SimpleForm::Expr)
    }

    /// Visit every statement in this subtree, outermost first.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Stmt)) {
        f(self);
        match self {
            Stmt::Simple(_) => {}
            Stmt::Compound(items) => items.iter().for_each(|s| s.walk(f)),
            Stmt::If { then, els, .. } => {
                then.walk(f);
                if let Some(e) = els {
                    e.walk(f);
                }
            }
            Stmt::For(l) => l.body.walk(f),
        }
    }

    /// Memory effects of this statement, or why they cannot be determined.
    pub fn analyze(&self) -> Result<StmtEffects, String> {
        let mut out = StmtEffects::default();
        let mut err = None;
        self.walk(&mut |s| {
            if err.is_some() {
                return;
            }
            let r = match s {
                Stmt::Simple(t) => match Stmt::simple_form(t) {
                    Ok(SimpleForm::Empty) => Ok(()),
                    Ok(SimpleForm::Jump) => {
                        out.jumps = true;
                        Ok(())
                    }
                    Ok(SimpleForm::Expr(e)) => {
                        out.fx.merge(effects(&e));
                        Ok(())
                    }
                    Ok(SimpleForm::Decl { names, fx }) => {
                        out.locals.extend(names.iter().cloned());
                        out.fx.merge(fx);
                        for n in names {
                            out.fx.accesses.push(Access {
                                name: n,
                                subscripts: None,
                                mode: AccessMode::Write,
                                opaque: false,
                            });
                        }
                        Ok(())
                    }
                    Err(e) => Err(e.to_string()),
                },
                Stmt::If { cond, .. } => parse_expr(cond).map(|e| out.fx.merge(effects(&e))).map_err(|e| e.to_string()),
                Stmt::For(l) => {
                    out.inner_vars.insert(l.header.var.clone());
                    let mut r = Ok(());
                    for part in [&l.header.lower, &l.header.upper] {
                        match parse_expr(part) {
                            Ok(e) => out.fx.merge(effects(&e)),
                            Err(e) => r = Err(e.to_string()),
                        }
                    }
                    out.fx.accesses.push(Access {
                        name: l.header.var.clone(),
                        subscripts: None,
                        mode: AccessMode::ReadWrite,
                        opaque: false,
                    });
                    r
                }
                Stmt::Compound(_) => Ok(()),
            };
            if let Err(e) = r {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Array and scalar references read by this statement.
    pub fn reads(&self) -> Vec<Access> {
        self.analyze()
            .map(|a| a.fx.accesses.into_iter().filter(|x| x.mode.reads()).collect())
            .unwrap_or_default()
    }

    /// Array and scalar references written by this statement.
    pub fn writes(&self) -> Vec<Access> {
        self.analyze()
            .map(|a| a.fx.accesses.into_iter().filter(|x| x.mode.writes()).collect())
            .unwrap_or_default()
    }

    /// Does this statement declare a variable at its own level?
    pub fn is_declaration(&self) -> bool {
        match self {
            Stmt::Simple(t) => {
                let body = t.strip_suffix(&[Token::punct(";")][..]).unwrap_or(t);
                declaration_type_len(body).is_some()
            }
            _ => false,
        }
    }

    pub fn contains_loop(&self) -> bool {
        let mut found = false;
        self.walk(&mut |s| found |= matches!(s, Stmt::For(_)));
        found
    }
}

/// Aggregated effects of a statement subtree.
#[derive(Debug, Clone, Default)]
pub struct StmtEffects {
    pub fx: Effects,
    /// Variables declared inside the subtree.
    pub locals: BTreeSet<String>,
    /// Induction variables of loops inside the subtree.
    pub inner_vars: BTreeSet<String>,
    pub jumps: bool,
}

impl StmtEffects {
    pub fn written_names(&self) -> BTreeSet<String> {
        self.fx.accesses.iter().filter(|a| a.mode.writes()).map(|a| a.name.clone()).collect()
    }

    pub fn has_opaque_write(&self) -> bool {
        self.fx.accesses.iter().any(|a| a.opaque && a.mode.writes())
    }
}

/// Length of the type prefix if `body` starts a declaration.
fn declaration_type_len(body: &[Token]) -> Option<usize> {
    let mut n = 0;
    while n < body.len() && is_type_keyword(&body[n]) {
        n += 1;
        // `struct tag`
        if body[n - 1].is("struct") || body[n - 1].is("union") || body[n - 1].is("enum") {
            if body.get(n).is_some_and(|t| t.kind == TokenKind::Identifier) {
                n += 1;
            }
        }
    }
    if n > 0 {
        return Some(n);
    }
    // typedef name followed by a declarator: `I32 cf = ...`
    match (body.first(), body.get(1)) {
        (Some(a), Some(b)) if a.kind == TokenKind::Identifier && b.kind == TokenKind::Identifier => Some(1),
        _ => None,
    }
}

fn parse_declarators(tokens: &[Token]) -> Result<SimpleForm, expr::ExprError> {
    let mut names = Vec::new();
    let mut fx = Effects::default();
    for part in split_top_level(tokens, ",") {
        let (decl, init) = match part.iter().position(|t| t.is("=")) {
            Some(p) => (&part[..p], Some(&part[p + 1..])),
            None => (part, None),
        };
        let name = decl
            .iter()
            .find(|t| t.kind == TokenKind::Identifier)
            .ok_or_else(|| expr::ExprError { offset: 0, reason: "declarator without a name".into() })?;
        names.push(name.text.clone());
        // Array dimension expressions are reads.
        let mut depth = 0;
        let mut start = 0;
        for (i, t) in decl.iter().enumerate() {
            if t.is("[") {
                if depth == 0 {
                    start = i + 1;
                }
                depth += 1;
            } else if t.is("]") {
                depth -= 1;
                if depth == 0 && i > start {
                    fx.merge(effects(&parse_expr(&decl[start..i])?));
                }
            }
        }
        if let Some(init) = init {
            fx.merge(effects(&parse_initializer(init)?));
        }
    }
    Ok(SimpleForm::Decl { names, fx })
}

fn split_top_level<'a>(tokens: &'a [Token], sep: &str) -> Vec<&'a [Token]> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.is("(") || t.is("[") || t.is("{") {
            depth += 1;
        } else if t.is(")") || t.is("]") || t.is("}") {
            depth -= 1;
        } else if depth == 0 && t.is(sep) {
            parts.push(&tokens[start..i]);
            start = i + 1;
        }
    }
    parts.push(&tokens[start..]);
    parts
}

/// A loop region: one or more top-level statements, at least one of them a loop.
///
/// Parsing yields a single top-level loop; transformations such as
/// distribution or unrolling with a remainder may produce several.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopNest {
    pub stmts: Vec<Stmt>,
}

impl LoopNest {
    pub fn from_loop(l: ForLoop) -> Self {
        LoopNest { stmts: vec![Stmt::For(l)] }
    }

    /// The single top-level loop, if the region has exactly one statement and it is a loop.
    pub fn root(&self) -> Option<&ForLoop> {
        match self.stmts.as_slice() {
            [Stmt::For(l)] => Some(l),
            _ => None,
        }
    }

    /// Loops from the root downwards, descending while a body holds exactly one loop.
    pub fn chain(&self) -> Vec<&ForLoop> {
        let mut out = Vec::new();
        let Some(mut cur) = self.root() else { return out };
        loop {
            out.push(cur);
            let mut inner = cur.body.items().iter().filter_map(|s| match s {
                Stmt::For(l) => Some(l),
                _ => None,
            });
            match (inner.next(), inner.next()) {
                (Some(l), None) if !cur.body.items().iter().any(|s| !matches!(s, Stmt::For(_)) && s.contains_loop()) => {
                    cur = l
                }
                _ => break,
            }
        }
        out
    }

    /// Loop headers, outermost first.
    pub fn loops(&self) -> Vec<&LoopHeader> {
        self.chain().into_iter().map(|l| &l.header).collect()
    }

    pub fn depth(&self) -> usize {
        self.chain().len()
    }

    /// Every non-innermost loop's body consists solely of the next loop.
    pub fn perfectly_nested(&self) -> bool {
        let chain = self.chain();
        !chain.is_empty()
            && chain[..chain.len() - 1]
                .iter()
                .all(|l| matches!(l.body.items(), [Stmt::For(_)]))
    }

    /// Statements of the innermost loop in the chain.
    pub fn body(&self) -> &[Stmt] {
        self.chain().last().map(|l| l.body.items()).unwrap_or(&[])
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.stmts.iter().flat_map(|s| s.tokens()).collect()
    }

    /// Every identifier in the region.
    pub fn identifiers(&self) -> BTreeSet<String> {
        self.tokens()
            .into_iter()
            .filter(|t| t.kind == TokenKind::Identifier)
            .map(|t| t.text)
            .collect()
    }

    /// Render as indented C.
    pub fn to_c(&self) -> String {
        let mut out = String::new();
        for s in &self.stmts {
            print_stmt(s, 1, &mut out);
        }
        out
    }
}

/// Parse the token sequence of a loop region into a nest.
pub fn parse_nest(seq: &TokenSeq) -> Result<LoopNest, ParseError> {
    parse_tokens(&seq.tokens)
}

pub fn parse_tokens(tokens: &[Token]) -> Result<LoopNest, ParseError> {
    if !tokens.first().is_some_and(|t| t.is("for")) {
        return Err(ParseError { offset: 0, reason: "region must begin with `for`".into() });
    }
    let mut p = StmtParser { toks: tokens, pos: 0 };
    let stmt = p.statement()?;
    if p.pos != tokens.len() {
        return Err(p.err("trailing tokens after the loop nest"));
    }
    let Stmt::For(l) = stmt else { unreachable!("began with `for`") };
    Ok(LoopNest::from_loop(l))
}

/// Parse C text into a region of statements (used for transformed output).
pub fn parse_region(src: &str) -> Result<Vec<Stmt>, ParseError> {
    let tokens = tokenize(src).map_err(|e| ParseError { offset: 0, reason: e.to_string() })?;
    let mut p = StmtParser { toks: &tokens, pos: 0 };
    let mut out = Vec::new();
    while p.pos < tokens.len() {
        out.push(p.statement()?);
    }
    Ok(out)
}

struct StmtParser<'a> {
    toks: &'a [Token],
    pos: usize,
}

impl<'a> StmtParser<'a> {
    fn err(&self, reason: impl Into<String>) -> ParseError {
        ParseError { offset: self.pos, reason: reason.into() }
    }

    fn peek(&self) -> Option<&'a Token> {
        self.toks.get(self.pos)
    }

    fn expect(&mut self, s: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t.is(s) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected `{s}`"))),
        }
    }

    /// Tokens up to the matching close paren (the open paren is already consumed).
    fn paren_contents(&mut self) -> Result<&'a [Token], ParseError> {
        let start = self.pos;
        let mut depth = 1;
        while let Some(t) = self.peek() {
            if t.is("(") {
                depth += 1;
            } else if t.is(")") {
                depth -= 1;
                if depth == 0 {
                    let inner = &self.toks[start..self.pos];
                    self.pos += 1;
                    return Ok(inner);
                }
            }
            self.pos += 1;
        }
        Err(self.err("unbalanced parentheses"))
    }

    fn statement(&mut self) -> Result<Stmt, ParseError> {
        let Some(tok) = self.peek() else { return Err(self.err("expected a statement")) };
        if tok.is("{") {
            self.pos += 1;
            let mut items = Vec::new();
            while !self.peek().is_some_and(|t| t.is("}")) {
                if self.peek().is_none() {
                    return Err(self.err("unterminated block"));
                }
                items.push(self.statement()?);
            }
            self.pos += 1;
            return Ok(Stmt::Compound(items));
        }
        if tok.is("if") {
            self.pos += 1;
            self.expect("(")?;
            let cond = self.paren_contents()?.to_vec();
            if cond.is_empty() {
                return Err(self.err("empty condition"));
            }
            let then = Box::new(self.statement()?);
            let els = if self.peek().is_some_and(|t| t.is("else")) {
                self.pos += 1;
                Some(Box::new(self.statement()?))
            } else {
                None
            };
            return Ok(Stmt::If { cond, then, els });
        }
        if tok.is("for") {
            self.pos += 1;
            let at = self.pos;
            self.expect("(")?;
            let inner = self.paren_contents()?;
            let header = parse_header(inner).map_err(|reason| ParseError { offset: at, reason })?;
            let body = Box::new(self.statement()?);
            return Ok(Stmt::For(ForLoop { header, body }));
        }
        for unsupported in ["goto", "while", "do", "switch", "case", "default", "typedef"] {
            if tok.is(unsupported) {
                return Err(self.err(format!("unsupported construct `{unsupported}`")));
            }
        }
        // Simple statement: up to the next top-level `;`.
        let start = self.pos;
        let mut depth = 0i32;
        while let Some(t) = self.peek() {
            if t.is("(") || t.is("[") {
                depth += 1;
            } else if t.is(")") || t.is("]") {
                depth -= 1;
            } else if t.is("{") {
                let prev = self.pos.checked_sub(1).map(|i| &self.toks[i]);
                if prev.is_some_and(|p| p.is(")")) && depth == 0 {
                    return Err(self.err("function definition inside loop body"));
                }
                depth += 1;
            } else if t.is("}") {
                depth -= 1;
                if depth < 0 {
                    return Err(self.err("unexpected `}`"));
                }
            } else if t.is(";") && depth == 0 {
                self.pos += 1;
                return Ok(Stmt::Simple(self.toks[start..self.pos].to_vec()));
            }
            self.pos += 1;
        }
        Err(ParseError { offset: start, reason: "statement without `;`".into() })
    }
}

fn parse_header(inner: &[Token]) -> Result<LoopHeader, String> {
    let parts = split_top_level(inner, ";");
    let [init, cond, inc] = parts.as_slice() else {
        return Err("for header must have three clauses".into());
    };
    if init.is_empty() || cond.is_empty() || inc.is_empty() {
        return Err("non-counted loop: missing init, condition or increment".into());
    }
    // init: `[type] var = lower`
    let eq = init.iter().position(|t| t.is("=")).ok_or("init clause must assign the induction variable")?;
    let (lhs, lower) = (&init[..eq], &init[eq + 1..]);
    let (var_tok, decl) = match lhs.split_last() {
        Some((v, ty)) if v.kind == TokenKind::Identifier => (v, (!ty.is_empty()).then(|| ty.to_vec())),
        _ => return Err("init clause must assign a variable".into()),
    };
    if lower.is_empty() {
        return Err("empty lower bound".into());
    }
    let var = var_tok.text.clone();
    // cond: `var < upper` or `var <= upper`
    let comparison = match cond.get(1) {
        Some(t) if t.is("<") => Comparison::Lt,
        Some(t) if t.is("<=") => Comparison::Le,
        _ => return Err("condition must be `var < bound` or `var <= bound`".into()),
    };
    if cond[0].kind != TokenKind::Identifier || cond[0].text != var || cond.len() < 3 {
        return Err("condition must test the induction variable".into());
    }
    let upper = cond[2..].to_vec();
    let step = parse_increment(inc, &var)?;
    if parse_expr(lower).is_err() || parse_expr(&upper).is_err() {
        return Err("unparseable loop bound".into());
    }
    Ok(LoopHeader {
        var,
        decl,
        lower: lower.to_vec(),
        comparison,
        upper,
        step,
        verbatim: Some(inner.to_vec()),
    })
}

fn parse_increment(inc: &[Token], var: &str) -> Result<i64, String> {
    let is_var = |t: &Token| t.kind == TokenKind::Identifier && t.text == var;
    let positive = |t: &Token| match t.int_value() {
        Some(v) if v >= 1 && v <= i64::MAX as u64 => Ok(v as i64),
        _ => Err("step must be a positive integer constant".to_string()),
    };
    match inc {
        [a, b] if is_var(a) && b.is("++") => Ok(1),
        [a, b] if a.is("++") && is_var(b) => Ok(1),
        [a, b, c] if is_var(a) && b.is("+=") => positive(c),
        [a, b, c, d, e] if is_var(a) && b.is("=") && is_var(c) && d.is("+") => positive(e),
        _ => Err("increment must advance the induction variable by a positive constant".into()),
    }
}

/// Join tokens with spacing that re-lexes to the same list.
pub fn format_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    let mut prev: Option<&Token> = None;
    for t in tokens {
        if let Some(p) = prev {
            if needs_space(p, t) {
                out.push(' ');
            }
        }
        out.push_str(&t.text);
        prev = Some(t);
    }
    out
}

fn needs_space(prev: &Token, next: &Token) -> bool {
    let operand_end = |t: &Token| {
        matches!(t.kind, TokenKind::Identifier | TokenKind::IntLiteral | TokenKind::FloatLiteral)
            || t.is(")")
            || t.is("]")
    };
    if prev.is("(") || prev.is("[") || next.is(")") || next.is("]") || next.is(";") || next.is(",") {
        return false;
    }
    if next.is("[") && operand_end(prev) {
        return false;
    }
    if next.is("(") && prev.kind == TokenKind::Identifier {
        return false;
    }
    if (next.is("++") || next.is("--")) && operand_end(prev) {
        return false;
    }
    if next.is(".") || next.is("->") || prev.is(".") || prev.is("->") {
        return false;
    }
    true
}

fn print_stmt(s: &Stmt, indent: usize, out: &mut String) {
    let pad = "    ".repeat(indent);
    match s {
        Stmt::Simple(t) => {
            let _ = writeln!(out, "{pad}{}", format_tokens(t));
        }
        Stmt::Compound(items) => {
            let _ = writeln!(out, "{pad}{{");
            for i in items {
                print_stmt(i, indent + 1, out);
            }
            let _ = writeln!(out, "{pad}}}");
        }
        Stmt::If { cond, then, els } => {
            let _ = write!(out, "{pad}if ({})", format_tokens(cond));
            print_body(then, indent, out);
            if let Some(e) = els {
                let _ = write!(out, "{pad}else");
                print_body(e, indent, out);
            }
        }
        Stmt::For(l) => {
            let _ = write!(out, "{pad}for ({})", format_tokens(&l.header.tokens()));
            print_body(&l.body, indent, out);
        }
    }
}

fn print_body(body: &Stmt, indent: usize, out: &mut String) {
    match body {
        Stmt::Compound(items) => {
            out.push_str(" {\n");
            for i in items {
                print_stmt(i, indent + 1, out);
            }
            let _ = writeln!(out, "{}}}", "    ".repeat(indent));
        }
        other => {
            out.push('\n');
            print_stmt(other, indent + 1, out);
        }
    }
}

/// Substitute `var` with `var + offset` in a token list.
///
/// The replacement is parenthesized unless both neighbours bind no tighter
/// than additive operators, so `a[i]` becomes `a[i+1]` while `2*i` becomes
/// `2*(i+1)`.
pub fn substitute_tokens(tokens: &[Token], var: &str, offset: i64) -> Vec<Token> {
    if offset == 0 {
        return tokens.to_vec();
    }
    let mut out = Vec::with_capacity(tokens.len() + 4);
    for (k, t) in tokens.iter().enumerate() {
        let prev = k.checked_sub(1).map(|i| &tokens[i]);
        let member = prev.is_some_and(|p| p.is(".") || p.is("->"));
        if t.kind != TokenKind::Identifier || t.text != var || member {
            out.push(t.clone());
            continue;
        }
        let prev_prev = k.checked_sub(2).map(|i| &tokens[i]);
        let bare = prev_allows_bare(prev, prev_prev) && next_allows_bare(tokens.get(k + 1));
        let (sign, mag) = if offset < 0 { ("-", -offset) } else { ("+", offset) };
        if !bare {
            out.push(Token::punct("("));
        }
        out.push(t.clone());
        out.push(Token::op(sign));
        out.push(Token::int(mag));
        if !bare {
            out.push(Token::punct(")"));
        }
    }
    out
}

fn prev_allows_bare(prev: Option<&Token>, prev_prev: Option<&Token>) -> bool {
    let Some(p) = prev else { return true };
    if p.kind == TokenKind::Punctuation {
        return matches!(p.text.as_str(), "(" | "[" | "," | ";" | "{" | "}");
    }
    if p.is("return") {
        return true;
    }
    if p.kind != TokenKind::Operator {
        return false;
    }
    let binary = prev_prev.is_some_and(|pp| {
        matches!(pp.kind, TokenKind::Identifier | TokenKind::IntLiteral | TokenKind::FloatLiteral | TokenKind::CharLiteral)
            || pp.is(")")
            || pp.is("]")
            || pp.is("++")
            || pp.is("--")
    });
    match p.text.as_str() {
        "=" | "+=" | "-=" | "*=" | "/=" | "%=" | "&=" | "|=" | "^=" | "<<=" | ">>=" | "?" | ":" | "+" => true,
        "<<" | ">>" | "<" | ">" | "<=" | ">=" | "==" | "!=" | "^" | "|" | "&&" | "||" => true,
        "&" => binary,
        _ => false,
    }
}

fn next_allows_bare(next: Option<&Token>) -> bool {
    let Some(n) = next else { return true };
    if n.kind == TokenKind::Punctuation {
        return matches!(n.text.as_str(), ")" | "]" | "," | ";");
    }
    n.kind == TokenKind::Operator
        && matches!(
            n.text.as_str(),
            "+" | "-" | "<<" | ">>" | "<" | ">" | "<=" | ">=" | "==" | "!=" | "&" | "^" | "|" | "&&" | "||" | "?" | ":"
        )
}

/// Apply [`substitute_tokens`] throughout a statement tree.
pub fn substitute_stmt(s: &Stmt, var: &str, offset: i64) -> Stmt {
    match s {
        Stmt::Simple(t) => Stmt::Simple(substitute_tokens(t, var, offset)),
        Stmt::Compound(items) => Stmt::Compound(items.iter().map(|i| substitute_stmt(i, var, offset)).collect()),
        Stmt::If { cond, then, els } => Stmt::If {
            cond: substitute_tokens(cond, var, offset),
            then: Box::new(substitute_stmt(then, var, offset)),
            els: els.as_ref().map(|e| Box::new(substitute_stmt(e, var, offset))),
        },
        Stmt::For(l) => {
            let mut h = l.header.clone();
            if offset != 0 && h.bound_symbols().contains(var) {
                h.lower = substitute_tokens(&h.lower, var, offset);
                h.upper = substitute_tokens(&h.upper, var, offset);
                h = h.touched();
            }
            Stmt::For(ForLoop { header: h, body: Box::new(substitute_stmt(&l.body, var, offset)) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::tokenize_loop;

    pub(crate) const REGCLASS: &str = "for(Class = 0; Class < 256; ++Class){
    if(opnd[1 +(Class >> 3 & 31)] & 1 <<(Class & 7)){
         I32 cf = Perl_fold[Class];
         opnd[1 +(cf >> 3 & 31)] |= 1 <<(cf & 7);
    }
}";

    fn nest(src: &str) -> LoopNest {
        parse_nest(&tokenize_loop("t", src).unwrap()).unwrap()
    }

    #[test]
    fn single_loop() {
        let n = nest("for(i=0;i<n;++i) a[i]=0;");
        assert_eq!(n.depth(), 1);
        let h = n.loops()[0];
        assert_eq!(h.var, "i");
        assert_eq!(h.comparison, Comparison::Lt);
        assert_eq!(h.step, 1);
        assert_eq!(n.body().len(), 1);
        assert_eq!(n.body()[0].kind(), StatementKind::Assignment);
    }

    #[test]
    fn regclass_header() {
        let n = nest(REGCLASS);
        assert_eq!(n.depth(), 1);
        let h = n.loops()[0];
        assert_eq!(h.var, "Class");
        assert_eq!(h.lower_affine().unwrap().as_constant(), Some(0));
        assert_eq!(h.upper_affine().unwrap().as_constant(), Some(256));
        assert_eq!(h.comparison, Comparison::Lt);
        assert_eq!(h.step, 1);
        assert_eq!(h.constant_trip_count(), Some(256));
        assert_eq!(n.body()[0].kind(), StatementKind::Conditional);
        let fx = n.body()[0].analyze().unwrap();
        assert!(fx.locals.contains("cf"));
    }

    #[test]
    fn perfect_double_nest() {
        let n = nest("for(i=0;i<n;i++) for(j=0;j<m;j++) c[i][j]=0;");
        assert_eq!(n.depth(), 2);
        assert!(n.perfectly_nested());
        let n = nest("for(i=0;i<n;i++) { x[i]=0; for(j=0;j<m;j++) c[i][j]=0; }");
        assert_eq!(n.depth(), 2);
        assert!(!n.perfectly_nested());
    }

    #[test]
    fn parse_errors() {
        let err = |s: &str| parse_nest(&tokenize_loop("t", s).unwrap()).unwrap_err();
        assert!(err("for(;;) x++;").reason.contains("non-counted"));
        assert!(err("for(i=0;i<n;i++) { goto out; }").reason.contains("goto"));
        assert!(err("for(i=0;i<n;i++) { int f(int x) { return x; } }").reason.contains("function definition"));
        assert!(err("for(i=0;i!=n;i++) x++;").reason.contains("condition"));
        assert!(err("for(i=0;i<n;i*=2) x++;").reason.contains("increment"));
        assert_eq!(err("x = 1;").offset, 0);
    }

    #[test]
    fn printing_round_trips() {
        for src in [
            REGCLASS,
            "for(i=0;i<n;++i) a[i]=0;",
            "for (int i = 0; i <= n - 1; i += 2) { if (a[i] > 0) b[i] = -a[i]; else b[i] = 0; }",
            "for(i=0;i<n;i++) for(j=0;j<m;j++) { s = 0.5f; c[i][j] = s * a[j][i]; }",
        ] {
            let n = nest(src);
            let again = parse_tokens(&tokenize(&n.to_c()).unwrap()).unwrap();
            assert_eq!(again, n);
            assert_eq!(n.tokens(), tokenize(src).unwrap());
        }
    }

    #[test]
    fn substitution_parenthesizes_when_needed() {
        let sub = |s: &str| format_tokens(&substitute_tokens(&tokenize(s).unwrap(), "i", 1));
        assert_eq!(sub("a[i] = b[i] + 2*i - i;"), "a[i + 1] = b[i + 1] + 2 * (i + 1) - (i + 1);");
        assert_eq!(sub("x = i >> 3 & 7;"), "x = i + 1 >> 3 & 7;");
        assert_eq!(sub("x = s.i + -i;"), "x = s.i + - (i + 1);");
    }
}
