//! Concrete syntax for oppl programs: lexer, parser, printer and
//! substitution.
//!
//! Precedence, loosest first: `;` (right-associative), then `:=` and the
//! prefix forms (`let`, `fn`, `if`, `while`), then application `f(a)`.
//! Prefix-form bodies stop at `;`, so a sequenced loop body or let body needs
//! parentheses: `while x0 do (x1 := e ; x0 := e')`.

use std::collections::BTreeSet;
use std::fmt;

/// Byte range plus the line/column of its start (both 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
    pub line: u32,
    pub col: u32,
}

impl SourceSpan {
    pub fn join(self, other: SourceSpan) -> SourceSpan {
        SourceSpan {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
            line: self.line,
            col: self.col,
        }
    }

    pub fn zero() -> SourceSpan {
        SourceSpan { start: 0, end: 0, line: 1, col: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TermKind {
    /// Element `value` of the finite type with `card` elements; `()` is the
    /// sole element of the one-element type, `true`/`false` are the two
    /// elements of the booleans.
    ConstFin { value: u64, card: u64 },
    /// Tuple of natural-number literals.
    ConstNat(Vec<u64>),
    /// Tuple of real literals.
    ConstReal(Vec<f64>),
    /// Positive semi-definite matrix literal.
    ConstPosDef(Vec<Vec<f64>>),
    /// Application of a named primitive operation.
    Builtin(String, Vec<Term>),
    Var(u32),
    Assign(u32, Box<Term>),
    Seq(Box<Term>, Box<Term>),
    LetIn(u32, Box<Term>, Box<Term>),
    Fn(u32, Box<Term>),
    App(Box<Term>, Box<Term>),
    If(Box<Term>, Box<Term>, Box<Term>),
    While(Box<Term>, Box<Term>),
    Sample(Box<Term>),
    Sampler(Box<Term>),
    Observe(Box<Term>),
}

/// An AST node. Equality ignores source spans so parsed and synthesised
/// terms compare structurally.
#[derive(Clone, Debug)]
pub struct Term {
    pub kind: TermKind,
    pub span: SourceSpan,
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Term {
    pub fn new(kind: TermKind, span: SourceSpan) -> Term {
        Term { kind, span }
    }

    pub fn synth(kind: TermKind) -> Term {
        Term { kind, span: SourceSpan::zero() }
    }

    /// Free variable indices (reads only; assignment targets are store
    /// slots, not reads).
    pub fn free_vars(&self) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        self.collect_free(&mut out);
        out
    }

    fn collect_free(&self, out: &mut BTreeSet<u32>) {
        match &self.kind {
            TermKind::Var(i) => {
                out.insert(*i);
            }
            TermKind::Fn(i, body) => {
                let mut inner = BTreeSet::new();
                body.collect_free(&mut inner);
                inner.remove(i);
                out.extend(inner);
            }
            TermKind::LetIn(i, value, body) => {
                value.collect_free(out);
                let mut inner = BTreeSet::new();
                body.collect_free(&mut inner);
                inner.remove(i);
                out.extend(inner);
            }
            TermKind::Assign(_, e) | TermKind::Sample(e) | TermKind::Sampler(e)
            | TermKind::Observe(e) => e.collect_free(out),
            TermKind::Seq(a, b) | TermKind::App(a, b) | TermKind::While(a, b) => {
                a.collect_free(out);
                b.collect_free(out);
            }
            TermKind::If(c, t, f) => {
                c.collect_free(out);
                t.collect_free(out);
                f.collect_free(out);
            }
            TermKind::Builtin(_, args) => {
                for a in args {
                    a.collect_free(out);
                }
            }
            _ => {}
        }
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostic {
    pub span: SourceSpan,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.span.line, self.span.col, self.message)
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Nat(u64),
    Real(f64),
    Var(u32),
    Ident(String),
    Keyword(&'static str),
    Sym(&'static str),
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    span: SourceSpan,
}

const KEYWORDS: [&str; 13] = [
    "let", "in", "fn", "if", "then", "else", "while", "do", "sample", "sampler", "observe",
    "true", "false",
];

fn lex(text: &str) -> Result<Vec<Token>, Diagnostic> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let span_at = |start: usize, end: usize, line: u32, col: u32| SourceSpan {
        start,
        end,
        line,
        col,
    };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = i;
        let (sline, scol) = (line, col);
        if c.is_ascii_digit() || (c == '-' && i + 1 < bytes.len() && (bytes[i + 1] as char).is_ascii_digit()) {
            let negative = c == '-';
            if negative {
                i += 1;
            }
            let mut seen_dot = false;
            let mut seen_exp = false;
            while i < bytes.len() {
                let d = bytes[i] as char;
                if d.is_ascii_digit() {
                    i += 1;
                } else if d == '.' && !seen_dot && !seen_exp
                    && i + 1 < bytes.len()
                    && (bytes[i + 1] as char).is_ascii_digit()
                {
                    seen_dot = true;
                    i += 1;
                } else if (d == 'e' || d == 'E') && !seen_exp
                    && i + 1 < bytes.len()
                    && ((bytes[i + 1] as char).is_ascii_digit()
                        || ((bytes[i + 1] as char == '+' || bytes[i + 1] as char == '-')
                            && i + 2 < bytes.len()
                            && (bytes[i + 2] as char).is_ascii_digit()))
                {
                    seen_exp = true;
                    i += 1;
                    if bytes[i] as char == '+' || bytes[i] as char == '-' {
                        i += 1;
                    }
                } else {
                    break;
                }
            }
            let textual = &text[start..i];
            let tok = if seen_dot || seen_exp || negative {
                Tok::Real(textual.parse().map_err(|_| Diagnostic {
                    span: span_at(start, i, sline, scol),
                    message: format!("malformed number `{textual}`"),
                })?)
            } else {
                Tok::Nat(textual.parse().map_err(|_| Diagnostic {
                    span: span_at(start, i, sline, scol),
                    message: format!("natural literal `{textual}` is out of range"),
                })?)
            };
            col += (i - start) as u32;
            toks.push(Token { tok, span: span_at(start, i, sline, scol) });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() {
                let d = bytes[i] as char;
                if d.is_ascii_alphanumeric() || d == '_' {
                    i += 1;
                } else {
                    break;
                }
            }
            let word = &text[start..i];
            let tok = if let Some(kw) = KEYWORDS.iter().find(|k| **k == word) {
                Tok::Keyword(kw)
            } else if let Some(rest) = word.strip_prefix('x') {
                if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                    Tok::Var(rest.parse().map_err(|_| Diagnostic {
                        span: span_at(start, i, sline, scol),
                        message: format!("variable index in `{word}` is out of range"),
                    })?)
                } else {
                    Tok::Ident(word.to_string())
                }
            } else {
                Tok::Ident(word.to_string())
            };
            col += (i - start) as u32;
            toks.push(Token { tok, span: span_at(start, i, sline, scol) });
            continue;
        }
        if c == ':' {
            if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                toks.push(Token { tok: Tok::Sym(":="), span: span_at(start, i + 2, sline, scol) });
                i += 2;
                col += 2;
                continue;
            }
            return Err(Diagnostic {
                span: span_at(start, i + 1, sline, scol),
                message: "expected `:=`".into(),
            });
        }
        let sym = match c {
            ';' => ";",
            '(' => "(",
            ')' => ")",
            '[' => "[",
            ']' => "]",
            ',' => ",",
            '.' => ".",
            '=' => "=",
            '@' => "@",
            _ => {
                return Err(Diagnostic {
                    span: span_at(start, i + 1, sline, scol),
                    message: format!("unexpected character `{c}`"),
                })
            }
        };
        toks.push(Token { tok: Tok::Sym(sym), span: span_at(start, i + 1, sline, scol) });
        i += 1;
        col += 1;
    }
    toks.push(Token {
        tok: Tok::Eof,
        span: span_at(bytes.len(), bytes.len(), line, col),
    });
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, Diagnostic>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].tok
    }

    fn span(&self) -> SourceSpan {
        self.toks[self.pos].span
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect_sym(&mut self, s: &str) -> PResult<SourceSpan> {
        match self.peek() {
            Tok::Sym(t) if *t == s => Ok(self.bump().span),
            _ => Err(self.err(format!("expected `{s}`"))),
        }
    }

    fn expect_keyword(&mut self, k: &str) -> PResult<()> {
        match self.peek() {
            Tok::Keyword(t) if *t == k => {
                self.bump();
                Ok(())
            }
            _ => Err(self.err(format!("expected `{k}`"))),
        }
    }

    fn expect_var(&mut self) -> PResult<(u32, SourceSpan)> {
        match self.peek() {
            Tok::Var(i) => {
                let i = *i;
                let sp = self.bump().span;
                Ok((i, sp))
            }
            _ => Err(self.err("expected a variable (x0, x1, ...)".into())),
        }
    }

    fn err(&self, message: String) -> Diagnostic {
        Diagnostic { span: self.span(), message }
    }

    fn seq(&mut self) -> PResult<Term> {
        let left = self.assign()?;
        if matches!(self.peek(), Tok::Sym(";")) {
            self.bump();
            let right = self.seq()?;
            let span = left.span.join(right.span);
            return Ok(Term::new(TermKind::Seq(Box::new(left), Box::new(right)), span));
        }
        Ok(left)
    }

    fn assign(&mut self) -> PResult<Term> {
        match self.peek() {
            Tok::Var(_) if matches!(self.peek2(), Tok::Sym(":=")) => {
                let (i, vspan) = self.expect_var()?;
                self.expect_sym(":=")?;
                let rhs = self.assign()?;
                let span = vspan.join(rhs.span);
                Ok(Term::new(TermKind::Assign(i, Box::new(rhs)), span))
            }
            Tok::Keyword("let") => {
                let start = self.bump().span;
                let (i, _) = self.expect_var()?;
                self.expect_sym("=")?;
                let value = self.assign()?;
                self.expect_keyword("in")?;
                let body = self.assign()?;
                let span = start.join(body.span);
                Ok(Term::new(
                    TermKind::LetIn(i, Box::new(value), Box::new(body)),
                    span,
                ))
            }
            Tok::Keyword("fn") => {
                let start = self.bump().span;
                let (i, _) = self.expect_var()?;
                self.expect_sym(".")?;
                let body = self.assign()?;
                let span = start.join(body.span);
                Ok(Term::new(TermKind::Fn(i, Box::new(body)), span))
            }
            Tok::Keyword("if") => {
                let start = self.bump().span;
                let cond = self.assign()?;
                self.expect_keyword("then")?;
                let then_branch = self.assign()?;
                self.expect_keyword("else")?;
                let else_branch = self.assign()?;
                let span = start.join(else_branch.span);
                Ok(Term::new(
                    TermKind::If(
                        Box::new(cond),
                        Box::new(then_branch),
                        Box::new(else_branch),
                    ),
                    span,
                ))
            }
            Tok::Keyword("while") => {
                let start = self.bump().span;
                let cond = self.assign()?;
                self.expect_keyword("do")?;
                let body = self.assign()?;
                let span = start.join(body.span);
                Ok(Term::new(TermKind::While(Box::new(cond), Box::new(body)), span))
            }
            _ => self.app(),
        }
    }

    fn app(&mut self) -> PResult<Term> {
        let mut t = self.primary()?;
        while matches!(self.peek(), Tok::Sym("(")) {
            self.bump();
            let arg = self.seq()?;
            let close = self.expect_sym(")")?;
            let span = t.span.join(close);
            t = Term::new(TermKind::App(Box::new(t), Box::new(arg)), span);
        }
        Ok(t)
    }

    fn primary(&mut self) -> PResult<Term> {
        match self.peek().clone() {
            Tok::Nat(n) => {
                let sp = self.bump().span;
                // `k@m` is the k-th element of the m-element finite type.
                if matches!(self.peek(), Tok::Sym("@")) {
                    self.bump();
                    if let Tok::Nat(m) = self.peek().clone() {
                        let end = self.bump().span;
                        return Ok(Term::new(
                            TermKind::ConstFin { value: n, card: m },
                            sp.join(end),
                        ));
                    }
                    return Err(self.err("expected a cardinality after `@`".into()));
                }
                Ok(Term::new(TermKind::ConstNat(vec![n]), sp))
            }
            Tok::Real(r) => {
                let sp = self.bump().span;
                Ok(Term::new(TermKind::ConstReal(vec![r]), sp))
            }
            Tok::Var(_) => {
                let (i, sp) = self.expect_var()?;
                Ok(Term::new(TermKind::Var(i), sp))
            }
            Tok::Keyword("true") => {
                let sp = self.bump().span;
                Ok(Term::new(TermKind::ConstFin { value: 1, card: 2 }, sp))
            }
            Tok::Keyword("false") => {
                let sp = self.bump().span;
                Ok(Term::new(TermKind::ConstFin { value: 0, card: 2 }, sp))
            }
            Tok::Keyword(kw @ ("sample" | "sampler" | "observe")) => {
                let start = self.bump().span;
                self.expect_sym("(")?;
                let inner = self.seq()?;
                let end = self.expect_sym(")")?;
                let span = start.join(end);
                let boxed = Box::new(inner);
                Ok(Term::new(
                    match kw {
                        "sample" => TermKind::Sample(boxed),
                        "sampler" => TermKind::Sampler(boxed),
                        _ => TermKind::Observe(boxed),
                    },
                    span,
                ))
            }
            Tok::Ident(name) => {
                let start = self.bump().span;
                self.expect_sym("(").map_err(|_| Diagnostic {
                    span: start,
                    message: format!("`{name}` must be applied: `{name}(...)`"),
                })?;
                let mut args = Vec::new();
                if !matches!(self.peek(), Tok::Sym(")")) {
                    loop {
                        args.push(self.seq()?);
                        if matches!(self.peek(), Tok::Sym(",")) {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                let end = self.expect_sym(")")?;
                Ok(Term::new(TermKind::Builtin(name, args), start.join(end)))
            }
            Tok::Sym("[") => self.posdef(),
            Tok::Sym("(") => {
                let start = self.bump().span;
                if matches!(self.peek(), Tok::Sym(")")) {
                    let end = self.bump().span;
                    return Ok(Term::new(
                        TermKind::ConstFin { value: 0, card: 1 },
                        start.join(end),
                    ));
                }
                // A numeric literal followed by a comma starts a tuple
                // constant; anything else is a parenthesised expression.
                if matches!(self.peek(), Tok::Nat(_) | Tok::Real(_))
                    && matches!(self.peek2(), Tok::Sym(","))
                {
                    let mut nats: Vec<u64> = Vec::new();
                    let mut reals: Vec<f64> = Vec::new();
                    let mut all_nat = true;
                    loop {
                        match self.peek().clone() {
                            Tok::Nat(n) => {
                                self.bump();
                                nats.push(n);
                                reals.push(n as f64);
                            }
                            Tok::Real(r) => {
                                self.bump();
                                all_nat = false;
                                reals.push(r);
                            }
                            _ => return Err(self.err("expected a number in tuple".into())),
                        }
                        if matches!(self.peek(), Tok::Sym(",")) {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    let end = self.expect_sym(")")?;
                    let span = start.join(end);
                    return Ok(Term::new(
                        if all_nat {
                            TermKind::ConstNat(nats)
                        } else {
                            TermKind::ConstReal(reals)
                        },
                        span,
                    ));
                }
                let inner = self.seq()?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            Tok::Eof => Err(self.err("unexpected end of input".into())),
            other => Err(self.err(format!("unexpected token {other:?}"))),
        }
    }

    fn posdef(&mut self) -> PResult<Term> {
        let start = self.expect_sym("[")?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        loop {
            self.expect_sym("[")?;
            let mut row = Vec::new();
            loop {
                match self.peek().clone() {
                    Tok::Nat(n) => {
                        self.bump();
                        row.push(n as f64);
                    }
                    Tok::Real(r) => {
                        self.bump();
                        row.push(r);
                    }
                    _ => return Err(self.err("expected a number in matrix row".into())),
                }
                if matches!(self.peek(), Tok::Sym(",")) {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect_sym("]")?;
            rows.push(row);
            if matches!(self.peek(), Tok::Sym(",")) {
                self.bump();
            } else {
                break;
            }
        }
        let end = self.expect_sym("]")?;
        let span = start.join(end);
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Diagnostic { span, message: "matrix literal must be square".into() });
        }
        for i in 0..n {
            for j in 0..i {
                if (rows[i][j] - rows[j][i]).abs() > 1e-9 {
                    return Err(Diagnostic {
                        span,
                        message: "matrix literal must be symmetric".into(),
                    });
                }
            }
        }
        let min_eig = sym_min_eigenvalue(&rows);
        if min_eig < -1e-9 {
            return Err(Diagnostic {
                span,
                message: format!(
                    "matrix literal must be positive semi-definite (eigenvalue {min_eig:.3e})"
                ),
            });
        }
        Ok(Term::new(TermKind::ConstPosDef(rows), span))
    }
}

/// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi rotations.
fn sym_min_eigenvalue(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n == 0 {
        return 0.0;
    }
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q].abs();
            }
        }
        if off < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-15 {
                    continue;
                }
                let theta = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
                let (s, c) = theta.sin_cos();
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
}

/// Parses a program; on failure returns the diagnostics (currently the first
/// error encountered).
pub fn parse(text: &str) -> Result<Term, Vec<Diagnostic>> {
    let toks = lex(text).map_err(|d| vec![d])?;
    let mut p = Parser { toks, pos: 0 };
    let term = p.seq().map_err(|d| vec![d])?;
    if !matches!(p.peek(), Tok::Eof) {
        return Err(vec![p.err("trailing input after program".into())]);
    }
    Ok(term)
}

// ---------------------------------------------------------------------------
// Printer

fn fmt_real_literal(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Precedence levels: 0 sequences, 1 assignments and prefix forms, 2
/// application, 3 atoms.
fn pp(t: &Term, level: u8, out: &mut String) {
    let wrap = |needed: u8| level > needed;
    match &t.kind {
        TermKind::ConstFin { value, card } => match (value, card) {
            (0, 1) => out.push_str("()"),
            (0, 2) => out.push_str("false"),
            (1, 2) => out.push_str("true"),
            (v, c) => out.push_str(&format!("{v}@{c}")),
        },
        TermKind::ConstNat(ns) => {
            if ns.len() == 1 {
                out.push_str(&ns[0].to_string());
            } else {
                let parts: Vec<String> = ns.iter().map(|n| n.to_string()).collect();
                out.push_str(&format!("({})", parts.join(", ")));
            }
        }
        TermKind::ConstReal(rs) => {
            if rs.len() == 1 {
                out.push_str(&fmt_real_literal(rs[0]));
            } else {
                let parts: Vec<String> = rs.iter().map(|r| fmt_real_literal(*r)).collect();
                out.push_str(&format!("({})", parts.join(", ")));
            }
        }
        TermKind::ConstPosDef(rows) => {
            let rendered: Vec<String> = rows
                .iter()
                .map(|r| {
                    let es: Vec<String> = r.iter().map(|x| fmt_real_literal(*x)).collect();
                    format!("[{}]", es.join(", "))
                })
                .collect();
            out.push_str(&format!("[{}]", rendered.join(", ")));
        }
        TermKind::Var(i) => out.push_str(&format!("x{i}")),
        TermKind::Builtin(name, args) => {
            out.push_str(name);
            out.push('(');
            for (k, a) in args.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                pp(a, 0, out);
            }
            out.push(')');
        }
        TermKind::Sample(e) | TermKind::Sampler(e) | TermKind::Observe(e) => {
            out.push_str(match &t.kind {
                TermKind::Sample(_) => "sample(",
                TermKind::Sampler(_) => "sampler(",
                _ => "observe(",
            });
            pp(e, 0, out);
            out.push(')');
        }
        TermKind::App(f, a) => {
            if wrap(2) {
                out.push('(');
            }
            pp(f, 2, out);
            out.push('(');
            pp(a, 0, out);
            out.push(')');
            if wrap(2) {
                out.push(')');
            }
        }
        TermKind::Assign(i, e) => {
            if wrap(1) {
                out.push('(');
            }
            out.push_str(&format!("x{i} := "));
            pp(e, 1, out);
            if wrap(1) {
                out.push(')');
            }
        }
        TermKind::LetIn(i, v, b) => {
            if wrap(1) {
                out.push('(');
            }
            out.push_str(&format!("let x{i} = "));
            pp(v, 1, out);
            out.push_str(" in ");
            pp(b, 1, out);
            if wrap(1) {
                out.push(')');
            }
        }
        TermKind::Fn(i, b) => {
            if wrap(1) {
                out.push('(');
            }
            out.push_str(&format!("fn x{i} . "));
            pp(b, 1, out);
            if wrap(1) {
                out.push(')');
            }
        }
        TermKind::If(c, a, b) => {
            if wrap(1) {
                out.push('(');
            }
            out.push_str("if ");
            pp(c, 1, out);
            out.push_str(" then ");
            pp(a, 1, out);
            out.push_str(" else ");
            pp(b, 1, out);
            if wrap(1) {
                out.push(')');
            }
        }
        TermKind::While(c, b) => {
            if wrap(1) {
                out.push('(');
            }
            out.push_str("while ");
            pp(c, 1, out);
            out.push_str(" do ");
            pp(b, 1, out);
            if wrap(1) {
                out.push(')');
            }
        }
        TermKind::Seq(a, b) => {
            if wrap(0) {
                out.push('(');
            }
            pp(a, 1, out);
            out.push_str(" ; ");
            pp(b, 0, out);
            if wrap(0) {
                out.push(')');
            }
        }
    }
}

/// Renders a term so that `parse(pretty(t))` returns `t` (up to spans).
pub fn pretty(t: &Term) -> String {
    let mut out = String::new();
    pp(t, 0, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Substitution

#[derive(Debug, thiserror::Error)]
pub enum SubstError {
    #[error("substituted term must be closed; it has free variables {0:?}")]
    OpenTerm(Vec<u32>),
}

/// Replaces free occurrences of `x_i` in `t` by the closed term `s`.
/// `Fn`/`LetIn` binders on the same index shadow; assignment targets are
/// slots, not reads, and stay untouched.
pub fn substitute(t: &Term, i: u32, s: &Term) -> Result<Term, SubstError> {
    let free = s.free_vars();
    if !free.is_empty() {
        return Err(SubstError::OpenTerm(free.into_iter().collect()));
    }
    Ok(subst_rec(t, i, s))
}

fn subst_rec(t: &Term, i: u32, s: &Term) -> Term {
    let kind = match &t.kind {
        TermKind::Var(j) if *j == i => return s.clone(),
        TermKind::Fn(j, body) => {
            if *j == i {
                return t.clone();
            }
            TermKind::Fn(*j, Box::new(subst_rec(body, i, s)))
        }
        TermKind::LetIn(j, value, body) => {
            let value = Box::new(subst_rec(value, i, s));
            let body = if *j == i { body.clone() } else { Box::new(subst_rec(body, i, s)) };
            TermKind::LetIn(*j, value, body)
        }
        TermKind::Assign(j, e) => TermKind::Assign(*j, Box::new(subst_rec(e, i, s))),
        TermKind::Seq(a, b) => {
            TermKind::Seq(Box::new(subst_rec(a, i, s)), Box::new(subst_rec(b, i, s)))
        }
        TermKind::App(f, a) => {
            TermKind::App(Box::new(subst_rec(f, i, s)), Box::new(subst_rec(a, i, s)))
        }
        TermKind::If(c, a, b) => TermKind::If(
            Box::new(subst_rec(c, i, s)),
            Box::new(subst_rec(a, i, s)),
            Box::new(subst_rec(b, i, s)),
        ),
        TermKind::While(c, b) => {
            TermKind::While(Box::new(subst_rec(c, i, s)), Box::new(subst_rec(b, i, s)))
        }
        TermKind::Sample(e) => TermKind::Sample(Box::new(subst_rec(e, i, s))),
        TermKind::Sampler(e) => TermKind::Sampler(Box::new(subst_rec(e, i, s))),
        TermKind::Observe(e) => TermKind::Observe(Box::new(subst_rec(e, i, s))),
        TermKind::Builtin(name, args) => TermKind::Builtin(
            name.clone(),
            args.iter().map(|a| subst_rec(a, i, s)).collect(),
        ),
        other => other.clone(),
    };
    Term::new(kind, t.span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(text: &str) -> Term {
        parse(text).unwrap_or_else(|d| panic!("parse failed on `{text}`: {}", d[0]))
    }

    #[test]
    fn gaussian_program_parses_to_the_expected_shape() {
        let t = p("let x0 = sample(normal(0, 1)) in observe(sample(normal(x0, 1)))");
        match &t.kind {
            TermKind::LetIn(0, value, body) => {
                match &value.kind {
                    TermKind::Sample(inner) => match &inner.kind {
                        TermKind::Builtin(name, args) => {
                            assert_eq!(name, "normal");
                            assert_eq!(args.len(), 2);
                        }
                        other => panic!("unexpected sample payload {other:?}"),
                    },
                    other => panic!("unexpected let value {other:?}"),
                }
                assert!(matches!(&body.kind, TermKind::Observe(_)));
            }
            other => panic!("unexpected program shape {other:?}"),
        }
    }

    #[test]
    fn sequencing_is_lowest_precedence_and_right_associative() {
        let t = p("x1 := 3.5 ; x2 := 7.3");
        let expect = Term::synth(TermKind::Seq(
            Box::new(Term::synth(TermKind::Assign(
                1,
                Box::new(Term::synth(TermKind::ConstReal(vec![3.5]))),
            ))),
            Box::new(Term::synth(TermKind::Assign(
                2,
                Box::new(Term::synth(TermKind::ConstReal(vec![7.3]))),
            ))),
        ));
        assert_eq!(t, expect);

        let t3 = p("x0 := 1 ; x1 := 2 ; x2 := 3");
        match &t3.kind {
            TermKind::Seq(_, rest) => assert!(matches!(&rest.kind, TermKind::Seq(_, _))),
            other => panic!("expected right-nested sequence, got {other:?}"),
        }
    }

    #[test]
    fn identity_function_and_application() {
        let t = p("fn x0 . x0");
        assert_eq!(
            t,
            Term::synth(TermKind::Fn(0, Box::new(Term::synth(TermKind::Var(0)))))
        );
        let app = p("(fn x0 . x0)(3.5)");
        assert!(matches!(&app.kind, TermKind::App(_, _)));
    }

    #[test]
    fn constants_in_all_shapes() {
        assert_eq!(p("3").kind, TermKind::ConstNat(vec![3]));
        assert_eq!(p("3.5").kind, TermKind::ConstReal(vec![3.5]));
        assert_eq!(p("-2").kind, TermKind::ConstReal(vec![-2.0]));
        assert_eq!(p("(1, 2)").kind, TermKind::ConstNat(vec![1, 2]));
        assert_eq!(p("(1.5, 2)").kind, TermKind::ConstReal(vec![1.5, 2.0]));
        assert_eq!(p("(3)").kind, TermKind::ConstNat(vec![3]));
        assert_eq!(p("()").kind, TermKind::ConstFin { value: 0, card: 1 });
        assert_eq!(p("true").kind, TermKind::ConstFin { value: 1, card: 2 });
        assert_eq!(p("false").kind, TermKind::ConstFin { value: 0, card: 2 });
        assert_eq!(p("2@5").kind, TermKind::ConstFin { value: 2, card: 5 });
        assert_eq!(
            p("[[2.0, 0.5], [0.5, 1.0]]").kind,
            TermKind::ConstPosDef(vec![vec![2.0, 0.5], vec![0.5, 1.0]])
        );
    }

    #[test]
    fn matrix_literals_must_be_positive_semidefinite() {
        assert!(parse("[[1.0, 2.0], [0.0, 1.0]]").is_err(), "asymmetric");
        assert!(parse("[[-1.0]]").is_err(), "negative eigenvalue");
        assert!(parse("[[1.0, 2.0], [2.0, 1.0]]").is_err(), "indefinite");
        assert!(parse("[[0.0]]").is_ok(), "zero matrix is on the boundary");
    }

    #[test]
    fn diagnostics_carry_positions_and_never_panic() {
        for bad in [
            "let x0 = in x0",
            "x0 :=",
            "fn . x0",
            "observe",
            "((", "数",
            "if x0 then x1",
            "normal(0, ",
            "x0 ; ",
            "3 4",
        ] {
            match parse(bad) {
                Err(ds) => {
                    assert!(!ds.is_empty());
                    assert!(ds[0].span.line >= 1);
                }
                Ok(t) => panic!("expected failure on `{bad}`, parsed {t:?}"),
            }
        }
    }

    #[test]
    fn pretty_prints_variables_and_round_trips_the_gaussian_program() {
        assert_eq!(pretty(&Term::synth(TermKind::Var(3))), "x3");
        let src = "let x0 = sample(normal(0, 1)) in observe(sample(normal(x0, 1)))";
        let t = p(src);
        assert_eq!(pretty(&t), src);
        assert_eq!(p(&pretty(&t)), t);
    }

    #[test]
    fn printer_inserts_parens_where_precedence_demands_them() {
        let seq_in_let = p("let x0 = (x1 := 1 ; x2 := 2) in x0");
        assert_eq!(p(&pretty(&seq_in_let)), seq_in_let);
        let seq_body = p("while x0 do (x1 := 2 ; x0 := false)");
        assert_eq!(p(&pretty(&seq_body)), seq_body);
        let left_nested = p("(x0 := 1 ; x1 := 2) ; x2 := 3");
        assert_eq!(p(&pretty(&left_nested)), left_nested);
    }

    fn random_term(rng: &mut ChaCha8Rng, depth: u32) -> Term {
        let leaf = depth == 0;
        let pick = if leaf { rng.gen_range(0..6) } else { rng.gen_range(0..16) };
        let t = |k| Term::synth(k);
        match pick {
            0 => t(TermKind::ConstNat(vec![rng.gen_range(0..100)])),
            1 => {
                // Keep literals to values the printer reproduces exactly.
                let v = (rng.gen_range(-1000..1000) as f64) / 8.0;
                t(TermKind::ConstReal(vec![v]))
            }
            2 => t(TermKind::Var(rng.gen_range(0..8))),
            3 => t(TermKind::ConstFin { value: 0, card: 1 }),
            4 => {
                let card = rng.gen_range(1..6);
                t(TermKind::ConstFin { value: rng.gen_range(0..card), card })
            }
            5 => {
                let d = rng.gen_range(0.5..3.0f64);
                t(TermKind::ConstPosDef(vec![vec![(d * 8.0).round() / 8.0]]))
            }
            6 => t(TermKind::Assign(
                rng.gen_range(0..8),
                Box::new(random_term(rng, depth - 1)),
            )),
            7 => t(TermKind::Seq(
                Box::new(random_term(rng, depth - 1)),
                Box::new(random_term(rng, depth - 1)),
            )),
            8 => t(TermKind::LetIn(
                rng.gen_range(0..8),
                Box::new(random_term(rng, depth - 1)),
                Box::new(random_term(rng, depth - 1)),
            )),
            9 => t(TermKind::Fn(
                rng.gen_range(0..8),
                Box::new(random_term(rng, depth - 1)),
            )),
            10 => t(TermKind::App(
                Box::new(random_term(rng, depth - 1)),
                Box::new(random_term(rng, depth - 1)),
            )),
            11 => t(TermKind::If(
                Box::new(random_term(rng, depth - 1)),
                Box::new(random_term(rng, depth - 1)),
                Box::new(random_term(rng, depth - 1)),
            )),
            12 => t(TermKind::While(
                Box::new(random_term(rng, depth - 1)),
                Box::new(random_term(rng, depth - 1)),
            )),
            13 => t(TermKind::Sample(Box::new(random_term(rng, depth - 1)))),
            14 => t(TermKind::Observe(Box::new(random_term(rng, depth - 1)))),
            _ => {
                let n = rng.gen_range(0..3);
                t(TermKind::Builtin(
                    ["addr", "muli", "flip"][rng.gen_range(0..3)].to_string(),
                    (0..n).map(|_| random_term(rng, depth - 1)).collect(),
                ))
            }
        }
    }

    #[test]
    fn print_parse_round_trip_on_random_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa57);
        for k in 0..1000 {
            let t = random_term(&mut rng, 4);
            let text = pretty(&t);
            match parse(&text) {
                Ok(back) => assert_eq!(back, t, "round trip failed on `{text}` (case {k})"),
                Err(d) => panic!("failed to re-parse `{text}`: {} (case {k})", d[0]),
            }
        }
    }

    #[test]
    fn substitution_replaces_free_occurrences_only() {
        let three_and_a_half = p("3.5");
        assert_eq!(
            substitute(&p("x0"), 0, &three_and_a_half).unwrap(),
            three_and_a_half
        );
        let shadowed = p("fn x0 . x0");
        assert_eq!(substitute(&shadowed, 0, &three_and_a_half).unwrap(), shadowed);
        // The let value is outside the binder's scope, the body inside it.
        let t = p("let x0 = x0 in x0");
        let r = substitute(&t, 0, &three_and_a_half).unwrap();
        assert_eq!(r, p("let x0 = 3.5 in x0"));
    }

    #[test]
    fn substitution_produces_the_marginal_display_form() {
        let body = p("sample(normal(x0, 1))");
        let prior = p("sample(normal(0, 1))");
        let result = substitute(&body, 0, &prior).unwrap();
        assert_eq!(pretty(&result), "sample(normal(sample(normal(0, 1)), 1))");
    }

    #[test]
    fn substitution_rejects_open_replacements() {
        assert!(substitute(&p("x0"), 0, &p("x1")).is_err());
    }

    #[test]
    fn free_variables_respect_binders() {
        let t = p("let x0 = x1 in x0");
        assert_eq!(t.free_vars().into_iter().collect::<Vec<_>>(), vec![1]);
        let f = p("fn x2 . addr(x2, x3)");
        assert_eq!(f.free_vars().into_iter().collect::<Vec<_>>(), vec![3]);
    }
}
