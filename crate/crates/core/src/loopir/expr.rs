//! Expression trees used for access analysis.
//!
//! Printing always goes through the original tokens; these trees only feed
//! read/write extraction and affine subscript analysis.

use std::collections::BTreeMap;
use std::fmt;

use crate::lexer::{Token, TokenKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Ident(String),
    Int(i64),
    /// Float, char or string literal.
    Literal,
    Unary(String, Box<Expr>),
    Postfix(String, Box<Expr>),
    Binary(String, Box<Expr>, Box<Expr>),
    Assign(String, Box<Expr>, Box<Expr>),
    Ternary(Box<Expr>, Box<Expr>, Box<Expr>),
    Index(Box<Expr>, Box<Expr>),
    Call(Box<Expr>, Vec<Expr>),
    Member(Box<Expr>, String),
    Cast(Box<Expr>),
    Sizeof,
    /// Brace initializer list.
    InitList(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExprError {
    pub offset: usize,
    pub reason: String,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token {}: {}", self.offset, self.reason)
    }
}

const TYPE_KEYWORDS: &[&str] = &[
    "int", "char", "short", "long", "float", "double", "signed", "unsigned", "const", "volatile",
    "struct", "union", "enum", "void", "_Bool", "static", "register", "restrict",
];

pub fn is_type_keyword(tok: &Token) -> bool {
    tok.kind == TokenKind::Keyword && TYPE_KEYWORDS.contains(&tok.text.as_str())
}

/// Functions known to have no side effects on program state.
pub const PURE_FUNCTIONS: &[&str] = &[
    "sqrt", "sqrtf", "exp", "expf", "log", "logf", "log2", "exp2", "fabs", "fabsf", "abs",
    "labs", "sin", "sinf", "cos", "cosf", "tan", "tanh", "pow", "powf", "floor", "ceil", "fmin",
    "fmax", "fmod", "round", "atan", "atan2",
];

/// Parse a complete expression from `tokens`.
pub fn parse_expr(tokens: &[Token]) -> Result<Expr, ExprError> {
    let mut p = Parser { toks: tokens, pos: 0 };
    let e = p.expr(0)?;
    if p.pos != tokens.len() {
        return Err(p.err("trailing tokens in expression"));
    }
    Ok(e)
}

/// Parse an initializer: either an assignment expression or a brace list.
pub fn parse_initializer(tokens: &[Token]) -> Result<Expr, ExprError> {
    let mut p = Parser { toks: tokens, pos: 0 };
    let e = p.initializer()?;
    if p.pos != tokens.len() {
        return Err(p.err("trailing tokens in initializer"));
    }
    Ok(e)
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
}

fn infix_power(op: &str) -> Option<(u8, u8)> {
    // (left, right) binding power; right-associative ops have right < left.
    Some(match op {
        "," => (1, 2),
        "=" | "+=" | "-=" | "*=" | "/=" | "%=" | "&=" | "|=" | "^=" | "<<=" | ">>=" => (4, 3),
        "?" => (6, 5),
        "||" => (7, 8),
        "&&" => (9, 10),
        "|" => (11, 12),
        "^" => (13, 14),
        "&" => (15, 16),
        "==" | "!=" => (17, 18),
        "<" | ">" | "<=" | ">=" => (19, 20),
        "<<" | ">>" => (21, 22),
        "+" | "-" => (23, 24),
        "*" | "/" | "%" => (25, 26),
        _ => return None,
    })
}

const PREFIX_POWER: u8 = 27;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.toks.get(self.pos)
    }

    fn err(&self, reason: impl Into<String>) -> ExprError {
        ExprError { offset: self.pos, reason: reason.into() }
    }

    fn expect(&mut self, s: &str) -> Result<(), ExprError> {
        match self.peek() {
            Some(t) if t.is(s) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected `{s}`"))),
        }
    }

    fn initializer(&mut self) -> Result<Expr, ExprError> {
        if self.peek().is_some_and(|t| t.is("{")) {
            self.pos += 1;
            let mut items = Vec::new();
            while !self.peek().is_some_and(|t| t.is("}")) {
                items.push(self.initializer()?);
                if self.peek().is_some_and(|t| t.is(",")) {
                    self.pos += 1;
                } else {
                    break;
                }
            }
            self.expect("}")?;
            Ok(Expr::InitList(items))
        } else {
            // Assignment expression: stop at commas.
            self.expr(3)
        }
    }

    fn looks_like_cast(&self) -> bool {
        self.peek().is_some_and(|t| t.is("("))
            && self.toks.get(self.pos + 1).is_some_and(is_type_keyword)
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr, ExprError> {
        let mut lhs = self.prefix()?;
        loop {
            let Some(tok) = self.peek() else { break };
            if tok.kind != TokenKind::Operator && !tok.is(",") {
                // Postfix `[` and `(` are handled in `postfix`.
                break;
            }
            let op = tok.text.as_str();
            let Some((lbp, rbp)) = infix_power(op) else { break };
            if lbp < min_bp {
                break;
            }
            self.pos += 1;
            if op == "?" {
                let then = self.expr(0)?;
                self.expect(":")?;
                let els = self.expr(rbp)?;
                lhs = Expr::Ternary(Box::new(lhs), Box::new(then), Box::new(els));
                continue;
            }
            let rhs = self.expr(rbp)?;
            lhs = if lbp == 4 {
                Expr::Assign(op.to_string(), Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Binary(op.to_string(), Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek() else { return Err(self.err("unexpected end of expression")) };
        if tok.kind == TokenKind::Operator
            && matches!(tok.text.as_str(), "+" | "-" | "!" | "~" | "*" | "&" | "++" | "--")
        {
            self.pos += 1;
            let operand = self.expr(PREFIX_POWER)?;
            return Ok(Expr::Unary(tok.text.clone(), Box::new(operand)));
        }
        if tok.is("sizeof") {
            self.pos += 1;
            if self.looks_like_cast() {
                self.skip_parens()?;
            } else {
                self.expr(PREFIX_POWER)?;
            }
            return Ok(Expr::Sizeof);
        }
        if self.looks_like_cast() {
            self.skip_parens()?;
            let operand = self.expr(PREFIX_POWER)?;
            return Ok(Expr::Cast(Box::new(operand)));
        }
        let primary = self.primary()?;
        self.postfix(primary)
    }

    fn skip_parens(&mut self) -> Result<(), ExprError> {
        let mut depth = 0usize;
        while let Some(t) = self.peek() {
            self.pos += 1;
            if t.is("(") {
                depth += 1;
            } else if t.is(")") {
                depth -= 1;
                if depth == 0 {
                    return Ok(());
                }
            }
        }
        Err(self.err("unbalanced parentheses"))
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek() else { return Err(self.err("unexpected end of expression")) };
        self.pos += 1;
        match tok.kind {
            TokenKind::Identifier => Ok(Expr::Ident(tok.text.clone())),
            TokenKind::IntLiteral => match tok.int_value().and_then(|v| i64::try_from(v).ok()) {
                Some(v) => Ok(Expr::Int(v)),
                None => Ok(Expr::Literal),
            },
            TokenKind::FloatLiteral | TokenKind::CharLiteral | TokenKind::StringLiteral => {
                Ok(Expr::Literal)
            }
            _ if tok.is("(") => {
                let inner = self.expr(0)?;
                self.expect(")")?;
                Ok(inner)
            }
            _ => {
                self.pos -= 1;
                Err(self.err(format!("unexpected token `{}`", tok.text)))
            }
        }
    }

    fn postfix(&mut self, mut e: Expr) -> Result<Expr, ExprError> {
        while let Some(tok) = self.peek() {
            if tok.is("[") {
                self.pos += 1;
                let idx = self.expr(0)?;
                self.expect("]")?;
                e = Expr::Index(Box::new(e), Box::new(idx));
            } else if tok.is("(") {
                self.pos += 1;
                let mut args = Vec::new();
                if !self.peek().is_some_and(|t| t.is(")")) {
                    loop {
                        args.push(self.expr(3)?);
                        if self.peek().is_some_and(|t| t.is(",")) {
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                }
                self.expect(")")?;
                e = Expr::Call(Box::new(e), args);
            } else if tok.is(".") || tok.is("->") {
                self.pos += 1;
                match self.peek() {
                    Some(t) if t.kind == TokenKind::Identifier => {
                        self.pos += 1;
                        e = Expr::Member(Box::new(e), t.text.clone());
                    }
                    _ => return Err(self.err("expected member name")),
                }
            } else if tok.is("++") || tok.is("--") {
                self.pos += 1;
                e = Expr::Postfix(tok.text.clone(), Box::new(e));
            } else {
                break;
            }
        }
        Ok(e)
    }
}

/// Integer affine form `sum(coeff * name) + constant`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Affine {
    pub coeffs: BTreeMap<String, i64>,
    pub constant: i64,
}

impl Affine {
    pub fn constant(c: i64) -> Self {
        Affine { coeffs: BTreeMap::new(), constant: c }
    }

    pub fn var(name: &str) -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(name.to_string(), 1);
        Affine { coeffs, constant: 0 }
    }

    pub fn as_constant(&self) -> Option<i64> {
        self.coeffs.is_empty().then_some(self.constant)
    }

    pub fn coeff(&self, name: &str) -> i64 {
        self.coeffs.get(name).copied().unwrap_or(0)
    }

    pub fn mentions(&self, name: &str) -> bool {
        self.coeff(name) != 0
    }

    fn combine(mut self, other: &Affine, sign: i64) -> Option<Affine> {
        for (k, v) in &other.coeffs {
            let e = self.coeffs.entry(k.clone()).or_insert(0);
            *e = e.checked_add(v.checked_mul(sign)?)?;
            if *e == 0 {
                self.coeffs.remove(k);
            }
        }
        self.constant = self.constant.checked_add(other.constant.checked_mul(sign)?)?;
        Some(self)
    }

    pub fn add(self, other: &Affine) -> Option<Affine> {
        self.combine(other, 1)
    }

    pub fn sub(self, other: &Affine) -> Option<Affine> {
        self.combine(other, -1)
    }

    pub fn scale(mut self, k: i64) -> Option<Affine> {
        if k == 0 {
            return Some(Affine::default());
        }
        for v in self.coeffs.values_mut() {
            *v = v.checked_mul(k)?;
        }
        self.constant = self.constant.checked_mul(k)?;
        Some(self)
    }

    /// Affine form of an expression, if it has one.
    pub fn from_expr(e: &Expr) -> Option<Affine> {
        match e {
            Expr::Int(v) => Some(Affine::constant(*v)),
            Expr::Ident(n) => Some(Affine::var(n)),
            Expr::Unary(op, x) if op == "-" => Affine::from_expr(x)?.scale(-1),
            Expr::Unary(op, x) if op == "+" => Affine::from_expr(x),
            Expr::Binary(op, l, r) => {
                let (l, r) = (Affine::from_expr(l)?, Affine::from_expr(r)?);
                match op.as_str() {
                    "+" => l.add(&r),
                    "-" => l.sub(&r),
                    "*" => match (l.as_constant(), r.as_constant()) {
                        (Some(c), _) => r.scale(c),
                        (_, Some(c)) => l.scale(c),
                        _ => None,
                    },
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn from_tokens(tokens: &[Token]) -> Option<Affine> {
        Affine::from_expr(&parse_expr(tokens).ok()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn writes(self) -> bool {
        matches!(self, AccessMode::Write | AccessMode::ReadWrite)
    }

    pub fn reads(self) -> bool {
        matches!(self, AccessMode::Read | AccessMode::ReadWrite)
    }
}

/// One memory reference found in an expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Access {
    /// Root variable name.
    pub name: String,
    /// `None` for a scalar reference.
    pub subscripts: Option<Vec<Expr>>,
    pub mode: AccessMode,
    /// The referenced location cannot be described by name and subscripts
    /// (pointer dereference, member access, address taken).
    pub opaque: bool,
}

/// Everything an expression touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Effects {
    pub accesses: Vec<Access>,
    /// Calls to functions not known to be pure.
    pub impure_calls: Vec<String>,
}

impl Effects {
    pub fn merge(&mut self, other: Effects) {
        self.accesses.extend(other.accesses);
        self.impure_calls.extend(other.impure_calls);
    }
}

pub fn effects(e: &Expr) -> Effects {
    let mut fx = Effects::default();
    collect(e, AccessMode::Read, &mut fx);
    fx
}

/// Decompose `a[i][j]` into (`a`, [i, j]); `None` if the base is not a name.
fn index_chain(e: &Expr) -> Option<(String, Vec<Expr>)> {
    let mut subs = Vec::new();
    let mut cur = e;
    while let Expr::Index(base, idx) = cur {
        subs.push((**idx).clone());
        cur = base;
    }
    subs.reverse();
    match cur {
        Expr::Ident(n) => Some((n.clone(), subs)),
        _ => None,
    }
}

fn root_name(e: &Expr) -> Option<String> {
    match e {
        Expr::Ident(n) => Some(n.clone()),
        Expr::Index(b, _) | Expr::Member(b, _) | Expr::Cast(b) | Expr::Postfix(_, b) => root_name(b),
        Expr::Unary(_, b) => root_name(b),
        Expr::Binary(_, l, _) => root_name(l),
        _ => None,
    }
}

fn collect(e: &Expr, mode: AccessMode, fx: &mut Effects) {
    match e {
        Expr::Ident(n) => fx.accesses.push(Access {
            name: n.clone(),
            subscripts: None,
            mode,
            opaque: false,
        }),
        Expr::Int(_) | Expr::Literal | Expr::Sizeof => {}
        Expr::Index(..) => {
            match index_chain(e) {
                Some((name, subs)) => {
                    for s in &subs {
                        collect(s, AccessMode::Read, fx);
                    }
                    fx.accesses.push(Access { name, subscripts: Some(subs), mode, opaque: false });
                }
                None => opaque_ref(e, mode, fx),
            }
        }
        Expr::Member(..) => opaque_ref(e, mode, fx),
        Expr::Unary(op, x) => match op.as_str() {
            "++" | "--" => collect(x, AccessMode::ReadWrite, fx),
            "*" => opaque_ref(e, mode, fx),
            // Taking an address lets the location be written through a pointer.
            "&" => opaque_ref(x, AccessMode::ReadWrite, fx),
            _ => collect(x, AccessMode::Read, fx),
        },
        Expr::Postfix(_, x) => collect(x, AccessMode::ReadWrite, fx),
        Expr::Binary(_, l, r) => {
            collect(l, AccessMode::Read, fx);
            collect(r, AccessMode::Read, fx);
        }
        Expr::Assign(op, l, r) => {
            collect(r, AccessMode::Read, fx);
            let m = if op == "=" { AccessMode::Write } else { AccessMode::ReadWrite };
            collect(l, m, fx);
        }
        Expr::Ternary(c, a, b) => {
            collect(c, AccessMode::Read, fx);
            collect(a, mode, fx);
            collect(b, mode, fx);
        }
        Expr::Call(f, args) => {
            match &**f {
                Expr::Ident(name) if PURE_FUNCTIONS.contains(&name.as_str()) => {}
                Expr::Ident(name) => fx.impure_calls.push(name.clone()),
                other => fx.impure_calls.push(format!("{other:?}")),
            }
            for a in args {
                collect(a, AccessMode::Read, fx);
            }
        }
        Expr::Cast(x) => collect(x, mode, fx),
        Expr::InitList(items) => {
            for i in items {
                collect(i, AccessMode::Read, fx);
            }
        }
    }
}

fn opaque_ref(e: &Expr, mode: AccessMode, fx: &mut Effects) {
    // Record every name read inside, then the opaque location itself.
    let mut inner = Effects::default();
    match e {
        Expr::Unary(_, x) | Expr::Member(x, _) | Expr::Cast(x) => collect(x, AccessMode::Read, &mut inner),
        Expr::Index(b, i) => {
            collect(b, AccessMode::Read, &mut inner);
            collect(i, AccessMode::Read, &mut inner);
        }
        other => collect(other, AccessMode::Read, &mut inner),
    }
    fx.merge(inner);
    fx.accesses.push(Access {
        name: root_name(e).unwrap_or_else(|| "<memory>".to_string()),
        subscripts: None,
        mode,
        opaque: true,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::tokenize;

    fn p(s: &str) -> Expr {
        parse_expr(&tokenize(s).unwrap()).unwrap()
    }

    #[test]
    fn precedence() {
        // Additive binds tighter than shift, shift tighter than bitwise and.
        let e = p("1 +(Class >> 3 & 31)");
        let Expr::Binary(op, _, r) = e else { panic!() };
        assert_eq!(op, "+");
        assert!(matches!(*r, Expr::Binary(ref o, _, _) if o == "&"));
        assert!(matches!(p("a = b = c"), Expr::Assign(_, _, r) if matches!(*r, Expr::Assign(..))));
    }

    #[test]
    fn affine_forms() {
        let a = Affine::from_expr(&p("2*i - (j + 3) + n")).unwrap();
        assert_eq!(a.coeff("i"), 2);
        assert_eq!(a.coeff("j"), -1);
        assert_eq!(a.coeff("n"), 1);
        assert_eq!(a.constant, -3);
        assert!(Affine::from_expr(&p("i * j")).is_none());
        assert!(Affine::from_expr(&p("i / 2")).is_none());
    }

    #[test]
    fn access_modes() {
        let fx = effects(&p("c[i][j] += a[i][k] * b[k][j]"));
        let c = fx.accesses.iter().find(|a| a.name == "c").unwrap();
        assert_eq!(c.mode, AccessMode::ReadWrite);
        assert_eq!(c.subscripts.as_ref().unwrap().len(), 2);
        let a = fx.accesses.iter().find(|a| a.name == "a").unwrap();
        assert_eq!(a.mode, AccessMode::Read);
        assert!(fx.impure_calls.is_empty());
    }

    #[test]
    fn calls_and_pointers() {
        let fx = effects(&p("x = sqrt(y) + foo(z)"));
        assert_eq!(fx.impure_calls, vec!["foo".to_string()]);
        let fx = effects(&p("*p = 3"));
        assert!(fx.accesses.iter().any(|a| a.opaque && a.mode.writes()));
        let fx = effects(&p("q = (double) i"));
        assert!(fx.accesses.iter().any(|a| a.name == "i" && a.mode == AccessMode::Read));
    }
}
