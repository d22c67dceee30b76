//! The linear type system: type grammar, subtyping, context algebra, and the
//! typing judgment with full derivation trees.
//!
//! Judgments come in two flavours. A functional computation has a bare type
//! on the right of the turnstile; a store-manipulating command (assignment,
//! sequencing, loops) has a context there, read as the tensor of its slot
//! types. Contexts are resources: reading a slot consumes it, and no rule
//! duplicates or discards a non-unit slot silently.

use std::collections::BTreeMap;
use std::fmt;

use crate::syntax::{pretty, substitute, SourceSpan, Term, TermKind};

#[derive(Clone, Debug, PartialEq)]
pub enum Type {
    /// Finite type with m elements; Fin(1) is unit, Fin(2) is bool.
    Fin(u64),
    /// Vectors of integers, arity >= 1.
    Int(u32),
    /// Vectors of reals, arity >= 1.
    Real(u32),
    /// Positive semi-definite n x n covariance matrices.
    PosDef(u32),
    /// Carrier type together with a closed prior term inhabiting it.
    Bayes(Box<Type>, Box<Term>),
    Tensor(Box<Type>, Box<Type>),
    Arrow(Box<Type>, Box<Type>),
    MType(Box<Type>),
}

impl Type {
    pub fn unit() -> Type {
        Type::Fin(1)
    }

    pub fn bool_ty() -> Type {
        Type::Fin(2)
    }

    pub fn real() -> Type {
        Type::Real(1)
    }

    pub fn int() -> Type {
        Type::Int(1)
    }

    pub fn is_unit(&self) -> bool {
        matches!(self, Type::Fin(1))
    }

    pub fn is_ground(&self) -> bool {
        matches!(self, Type::Fin(_) | Type::Int(_) | Type::Real(_) | Type::PosDef(_))
    }

    /// Strips Bayesian layers down to the underlying carrier.
    pub fn carrier(&self) -> &Type {
        match self {
            Type::Bayes(t, _) => t.carrier(),
            other => other,
        }
    }

    pub fn bayes(carrier: Type, prior: Term) -> Type {
        Type::Bayes(Box::new(carrier), Box::new(prior))
    }

    pub fn tensor(a: Type, b: Type) -> Type {
        Type::Tensor(Box::new(a), Box::new(b))
    }

    pub fn arrow(a: Type, b: Type) -> Type {
        Type::Arrow(Box::new(a), Box::new(b))
    }

    pub fn m(t: Type) -> Type {
        Type::MType(Box::new(t))
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Fin(1) => write!(f, "unit"),
            Type::Fin(2) => write!(f, "bool"),
            Type::Fin(m) => write!(f, "{m}"),
            Type::Int(1) => write!(f, "int"),
            Type::Int(k) => write!(f, "int^{k}"),
            Type::Real(1) => write!(f, "real"),
            Type::Real(k) => write!(f, "real^{k}"),
            Type::PosDef(n) => write!(f, "posdef({n})"),
            Type::Bayes(t, e) => write!(f, "({t}, {})", pretty(e)),
            Type::Tensor(a, b) => write!(f, "({a} (x) {b})"),
            Type::Arrow(a, b) => write!(f, "({a} -> {b})"),
            Type::MType(t) => write!(f, "M {t}"),
        }
    }
}

/// Measure types: everything the grammar generates except arrows, anywhere.
pub fn is_measure_type(t: &Type) -> bool {
    match t {
        Type::Fin(_) | Type::Int(_) | Type::Real(_) | Type::PosDef(_) => true,
        Type::Bayes(inner, _) | Type::MType(inner) => is_measure_type(inner),
        Type::Tensor(a, b) => is_measure_type(a) && is_measure_type(b),
        Type::Arrow(_, _) => false,
    }
}

fn is_bayes_over_ground(t: &Type) -> bool {
    matches!(t, Type::Bayes(g, _) if g.is_ground())
}

fn is_order_complete_s(t: &Type) -> bool {
    t.is_ground()
        || is_bayes_over_ground(t)
        || matches!(t, Type::Tensor(a, b) if is_bayes_over_ground(a) && is_bayes_over_ground(b))
}

/// Order-complete types: a ground type, a Bayesian type over a ground type,
/// a tensor of two of those, or one arrow / measure layer over such types.
pub fn is_order_complete(t: &Type) -> bool {
    is_order_complete_s(t)
        || match t {
            Type::Arrow(a, b) => is_order_complete_s(a) && is_order_complete_s(b),
            Type::MType(s) => is_order_complete_s(s),
            _ => false,
        }
}

/// Decides `a <: b` in the preorder generated by prior erasure
/// `(T, mu) <: T`, covariant tensors, contravariant-domain arrows, declared
/// axioms, reflexivity and transitivity.
pub fn subtype(a: &Type, b: &Type, axioms: &[(Type, Type)]) -> bool {
    fn go(a: &Type, b: &Type, axioms: &[(Type, Type)], seen: &mut Vec<(Type, Type)>) -> bool {
        if a == b {
            return true;
        }
        let key = (a.clone(), b.clone());
        if seen.contains(&key) {
            return false;
        }
        seen.push(key);
        let mut ok = false;
        if let Type::Bayes(inner, _) = a {
            ok = go(inner, b, axioms, seen);
        }
        if !ok {
            ok = match (a, b) {
                (Type::Tensor(a1, a2), Type::Tensor(b1, b2)) => {
                    go(a1, b1, axioms, seen) && go(a2, b2, axioms, seen)
                }
                (Type::Arrow(a1, a2), Type::Arrow(b1, b2)) => {
                    go(b1, a1, axioms, seen) && go(a2, b2, axioms, seen)
                }
                _ => false,
            };
        }
        if !ok {
            ok = axioms
                .iter()
                .any(|(l, r)| l == a && go(r, b, axioms, seen));
        }
        seen.pop();
        ok
    }
    go(a, b, axioms, &mut Vec::new())
}

// ---------------------------------------------------------------------------
// Contexts

/// A typing context: a map from variable indices to types, unit everywhere
/// else. Only non-unit slots are stored.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Context(BTreeMap<u32, Type>);

impl Context {
    pub fn empty() -> Context {
        Context(BTreeMap::new())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, Type)>) -> Context {
        let mut c = Context::empty();
        for (i, t) in pairs {
            c.set(i, t);
        }
        c
    }

    pub fn get(&self, i: u32) -> Type {
        self.0.get(&i).cloned().unwrap_or_else(Type::unit)
    }

    pub fn set(&mut self, i: u32, t: Type) {
        if t.is_unit() {
            self.0.remove(&i);
        } else {
            self.0.insert(i, t);
        }
    }

    pub fn with(&self, i: u32, t: Type) -> Context {
        let mut c = self.clone();
        c.set(i, t);
        c
    }

    pub fn without(&self, i: u32) -> Context {
        let mut c = self.clone();
        c.0.remove(&i);
        c
    }

    pub fn support(&self) -> Vec<u32> {
        self.0.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Type)> {
        self.0.iter()
    }

    /// Compatibility: agreement on the intersection of supports.
    pub fn compatible(&self, other: &Context) -> bool {
        self.0
            .iter()
            .all(|(i, t)| other.0.get(i).map_or(true, |u| t == u))
    }

    /// Union of graphs; caller must ensure compatibility.
    pub fn union(&self, other: &Context) -> Context {
        debug_assert!(self.compatible(other));
        let mut c = self.clone();
        for (i, t) in &other.0 {
            c.0.insert(*i, t.clone());
        }
        c
    }

    /// Difference: keeps a slot only where `other` is unsupported.
    pub fn diff(&self, other: &Context) -> Context {
        Context(
            self.0
                .iter()
                .filter(|(i, _)| !other.0.contains_key(i))
                .map(|(i, t)| (*i, t.clone()))
                .collect(),
        )
    }

    pub fn disjoint(&self, other: &Context) -> bool {
        self.0.keys().all(|i| !other.0.contains_key(i))
    }

    /// The tensor type of the slots in increasing index order; unit when
    /// empty, the bare slot type when singleton.
    pub fn as_type(&self) -> Type {
        let mut tys: Vec<Type> = self.0.values().cloned().collect();
        match tys.len() {
            0 => Type::unit(),
            1 => tys.pop().unwrap(),
            _ => {
                let first = tys.remove(0);
                tys.into_iter().fold(first, Type::tensor)
            }
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, (i, t)) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "x{i}: {t}")?;
        }
        write!(f, "]")
    }
}

// ---------------------------------------------------------------------------
// Judgments and derivations

#[derive(Clone, Debug, PartialEq)]
pub enum JudgmentResult {
    Type(Type),
    Store(Context),
}

impl JudgmentResult {
    /// The implicit context-to-type conversion for results on the right of
    /// the turnstile.
    pub fn as_type(&self) -> Type {
        match self {
            JudgmentResult::Type(t) => t.clone(),
            JudgmentResult::Store(c) => c.as_type(),
        }
    }

    pub fn as_store(&self) -> Option<&Context> {
        match self {
            JudgmentResult::Store(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for JudgmentResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JudgmentResult::Type(t) => write!(f, "{t}"),
            JudgmentResult::Store(c) => write!(f, "store {c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    ConstFin,
    ConstInt,
    ConstReal,
    ConstPosDef,
    Var,
    Subsume,
    BayesIntro,
    Builtin,
    AssignPlain,
    AssignBayes,
    Let,
    SeqComp,
    Fn,
    App,
    If,
    While,
    Sampler,
    Sample,
    Observe,
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::ConstFin => "const-fin",
            Rule::ConstInt => "const-int",
            Rule::ConstReal => "const-real",
            Rule::ConstPosDef => "const-posdef",
            Rule::Var => "var",
            Rule::Subsume => "subsume",
            Rule::BayesIntro => "bayes-intro",
            Rule::Builtin => "builtin",
            Rule::AssignPlain => "assign",
            Rule::AssignBayes => "assign-bayes",
            Rule::Let => "let",
            Rule::SeqComp => "seq",
            Rule::Fn => "fn",
            Rule::App => "app",
            Rule::If => "if",
            Rule::While => "while",
            Rule::Sampler => "sampler",
            Rule::Sample => "sample",
            Rule::Observe => "observe",
        }
    }
}

/// One node of a typing derivation: the rule applied, the full judgment it
/// concludes, and the premise derivations in rule order.
#[derive(Clone, Debug)]
pub struct Derivation {
    pub rule: Rule,
    pub ctx: Context,
    pub term: Term,
    pub result: JudgmentResult,
    pub premises: Vec<Derivation>,
}

impl Derivation {
    pub fn result_type(&self) -> Type {
        self.result.as_type()
    }

    /// Serialises the tree with terms in concrete syntax and types in
    /// display form, for golden files and the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        let ctx: serde_json::Map<String, serde_json::Value> = self
            .ctx
            .iter()
            .map(|(i, t)| (format!("x{i}"), serde_json::Value::String(t.to_string())))
            .collect();
        serde_json::json!({
            "rule": self.rule.name(),
            "ctx": ctx,
            "term": pretty(&self.term),
            "result": self.result.to_string(),
            "premises": self.premises.iter().map(|p| p.to_json()).collect::<Vec<_>>(),
        })
    }
}

/// A typing failure: where, which side condition, and a human explanation.
#[derive(Clone, Debug)]
pub struct TypeDiagnostic {
    pub span: SourceSpan,
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for TypeDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: [{}] {}", self.span.line, self.span.col, self.rule, self.message)
    }
}

impl std::error::Error for TypeDiagnostic {}

// ---------------------------------------------------------------------------
// Builtin signatures

#[derive(Clone, Debug, PartialEq)]
pub enum GroundTy {
    Fin(u64),
    Int(u32),
    Real(u32),
    PosDef(u32),
}

impl GroundTy {
    pub fn to_type(&self) -> Type {
        match self {
            GroundTy::Fin(m) => Type::Fin(*m),
            GroundTy::Int(k) => Type::Int(*k),
            GroundTy::Real(k) => Type::Real(*k),
            GroundTy::PosDef(n) => Type::PosDef(*n),
        }
    }

    fn parse(s: &str) -> Result<GroundTy, String> {
        let s = s.trim();
        if s == "unit" {
            return Ok(GroundTy::Fin(1));
        }
        if s == "bool" {
            return Ok(GroundTy::Fin(2));
        }
        if s == "int" {
            return Ok(GroundTy::Int(1));
        }
        if s == "real" {
            return Ok(GroundTy::Real(1));
        }
        if let Some(rest) = s.strip_prefix("int^") {
            return rest
                .parse()
                .map(GroundTy::Int)
                .map_err(|_| format!("bad int arity in `{s}`"));
        }
        if let Some(rest) = s.strip_prefix("real^") {
            return rest
                .parse()
                .map(GroundTy::Real)
                .map_err(|_| format!("bad real arity in `{s}`"));
        }
        if let Some(rest) = s.strip_prefix("fin(").and_then(|r| r.strip_suffix(')')) {
            return rest
                .parse()
                .map(GroundTy::Fin)
                .map_err(|_| format!("bad cardinality in `{s}`"));
        }
        if let Some(rest) = s.strip_prefix("posdef(").and_then(|r| r.strip_suffix(')')) {
            return rest
                .parse()
                .map(GroundTy::PosDef)
                .map_err(|_| format!("bad dimension in `{s}`"));
        }
        Err(format!("unknown ground type `{s}`"))
    }

    fn render(&self) -> String {
        match self {
            GroundTy::Fin(1) => "unit".to_string(),
            GroundTy::Fin(2) => "bool".to_string(),
            GroundTy::Fin(m) => format!("fin({m})"),
            GroundTy::Int(1) => "int".to_string(),
            GroundTy::Int(k) => format!("int^{k}"),
            GroundTy::Real(1) => "real".to_string(),
            GroundTy::Real(k) => format!("real^{k}"),
            GroundTy::PosDef(n) => format!("posdef({n})"),
        }
    }
}

/// Result part of a builtin signature: a ground type or measures over one.
#[derive(Clone, Debug, PartialEq)]
pub enum BuiltinRet {
    Ground(GroundTy),
    Dist(GroundTy),
}

impl BuiltinRet {
    pub fn to_type(&self) -> Type {
        match self {
            BuiltinRet::Ground(g) => g.to_type(),
            BuiltinRet::Dist(g) => Type::m(g.to_type()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuiltinSig {
    pub args: Vec<GroundTy>,
    pub ret: BuiltinRet,
}

/// Table of built-in operations and their typing tuples, loadable from a
/// JSON document of the shape `{"name": {"args": [...], "ret": "..."}}`.
#[derive(Clone, Debug)]
pub struct BuiltinTable(BTreeMap<String, BuiltinSig>);

impl BuiltinTable {
    pub fn get(&self, name: &str) -> Option<&BuiltinSig> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn insert(&mut self, name: &str, args: Vec<GroundTy>, ret: BuiltinRet) {
        self.0.insert(name.to_string(), BuiltinSig { args, ret });
    }

    /// The default library: boolean connectives, grid arithmetic and
    /// comparisons, and the distribution constructors.
    pub fn standard() -> BuiltinTable {
        use BuiltinRet::{Dist, Ground};
        use GroundTy::{Fin, Int, Real, PosDef};
        let mut t = BuiltinTable(BTreeMap::new());
        let b = Fin(2);
        t.insert("or", vec![b.clone(), b.clone()], Ground(b.clone()));
        t.insert("and", vec![b.clone(), b.clone()], Ground(b.clone()));
        t.insert("not", vec![b.clone()], Ground(b.clone()));
        for (name, ret) in [
            ("addi", Ground(Int(1))),
            ("muli", Ground(Int(1))),
            ("eqi", Ground(Fin(2))),
            ("lti", Ground(Fin(2))),
        ] {
            t.insert(name, vec![Int(1), Int(1)], ret);
        }
        t.insert("negi", vec![Int(1)], Ground(Int(1)));
        for (name, ret) in [
            ("addr", Ground(Real(1))),
            ("mulr", Ground(Real(1))),
            ("eqr", Ground(Fin(2))),
            ("ltr", Ground(Fin(2))),
        ] {
            t.insert(name, vec![Real(1), Real(1)], ret);
        }
        t.insert("negr", vec![Real(1)], Ground(Real(1)));
        t.insert("bernoulli", vec![Real(1)], Dist(Fin(2)));
        t.insert("normal", vec![Real(1), PosDef(1)], Dist(Real(1)));
        for m in 2..=6u64 {
            t.insert(&format!("uniform_fin{m}"), vec![], Dist(Fin(m)));
        }
        t
    }

    pub fn from_json(text: &str) -> Result<BuiltinTable, String> {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| format!("builtin table is not JSON: {e}"))?;
        let obj = doc.as_object().ok_or("builtin table must be a JSON object")?;
        let mut table = BuiltinTable(BTreeMap::new());
        for (name, entry) in obj {
            let args = entry
                .get("args")
                .and_then(|a| a.as_array())
                .ok_or_else(|| format!("`{name}` needs an `args` array"))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .ok_or_else(|| format!("`{name}` arg types must be strings"))
                        .and_then(GroundTy::parse)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let ret_str = entry
                .get("ret")
                .and_then(|r| r.as_str())
                .ok_or_else(|| format!("`{name}` needs a `ret` string"))?;
            let ret = if let Some(rest) = ret_str.strip_prefix("M ") {
                BuiltinRet::Dist(GroundTy::parse(rest)?)
            } else {
                BuiltinRet::Ground(GroundTy::parse(ret_str)?)
            };
            table.0.insert(name.clone(), BuiltinSig { args, ret });
        }
        Ok(table)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (name, sig) in &self.0 {
            let args: Vec<serde_json::Value> = sig
                .args
                .iter()
                .map(|g| serde_json::Value::String(g.render()))
                .collect();
            let ret = match &sig.ret {
                BuiltinRet::Ground(g) => g.render(),
                BuiltinRet::Dist(g) => format!("M {}", g.render()),
            };
            obj.insert(name.clone(), serde_json::json!({"args": args, "ret": ret}));
        }
        serde_json::Value::Object(obj)
    }
}

// ---------------------------------------------------------------------------
// The checker

type Env = BTreeMap<u32, Type>;

pub struct Checker<'a> {
    table: &'a BuiltinTable,
    axioms: &'a [(Type, Type)],
}

/// Checks `t` against the declared context, returning the canonical
/// derivation. The declared slots feed variable typing; the synthesised
/// conclusion context must consume exactly the declared slots (strengthening
/// a slot along `<:` is the only flexibility).
pub fn typecheck(
    ctx: &Context,
    t: &Term,
    table: &BuiltinTable,
) -> Result<Derivation, TypeDiagnostic> {
    typecheck_with_axioms(ctx, t, table, &[])
}

pub fn typecheck_with_axioms(
    ctx: &Context,
    t: &Term,
    table: &BuiltinTable,
    axioms: &[(Type, Type)],
) -> Result<Derivation, TypeDiagnostic> {
    let checker = Checker { table, axioms };
    let env: Env = ctx.iter().map(|(i, t)| (*i, t.clone())).collect();
    let d = checker.synth(&env, t)?;
    checker.reconcile_declared(d, ctx, t.span)
}

/// Synthesises a derivation with no declared context: the conclusion context
/// is whatever the program consumes. Program files carry no declarations, so
/// this is the driver's entry point.
pub fn typecheck_open(t: &Term, table: &BuiltinTable) -> Result<Derivation, TypeDiagnostic> {
    let checker = Checker { table, axioms: &[] };
    checker.synth(&Env::new(), t)
}

/// Checks a closed term against an expected type. Prior annotations inside
/// Bayesian types are evaluated through here, so constant payloads coerce
/// the same way they did when the annotation was formed.
pub fn typecheck_value(
    t: &Term,
    expected: &Type,
    table: &BuiltinTable,
) -> Result<Derivation, TypeDiagnostic> {
    let checker = Checker { table, axioms: &[] };
    let d = checker.check_expect(&Env::new(), t, expected)?;
    if !d.ctx.is_empty() {
        return Err(TypeDiagnostic {
            span: t.span,
            rule: "OpenValue",
            message: format!("value term must be closed but consumes {}", d.ctx),
        });
    }
    Ok(d)
}

impl<'a> Checker<'a> {
    fn sub(&self, a: &Type, b: &Type) -> bool {
        subtype(a, b, self.axioms)
    }

    fn fail(&self, span: SourceSpan, rule: &'static str, message: String) -> TypeDiagnostic {
        TypeDiagnostic { span, rule, message }
    }

    /// Wraps a subsumption node that strengthens context slot `i` to a
    /// subtype of what the premise demanded.
    fn strengthen_ctx_slot(
        &self,
        d: Derivation,
        i: u32,
        ty: Type,
        span: SourceSpan,
    ) -> Result<Derivation, TypeDiagnostic> {
        let old = d.ctx.get(i);
        if old == ty {
            return Ok(d);
        }
        if !self.sub(&ty, &old) {
            return Err(self.fail(
                span,
                "Subsumption",
                format!("slot x{i} would need {ty} <: {old}, which does not hold"),
            ));
        }
        let ctx = d.ctx.with(i, ty);
        Ok(Derivation {
            rule: Rule::Subsume,
            ctx,
            term: d.term.clone(),
            result: d.result.clone(),
            premises: vec![d],
        })
    }

    /// Wraps a subsumption node that weakens a bare-type result covariantly.
    fn weaken_result(
        &self,
        d: Derivation,
        ty: Type,
        span: SourceSpan,
    ) -> Result<Derivation, TypeDiagnostic> {
        let old = d.result_type();
        if old == ty {
            return Ok(d);
        }
        if !self.sub(&old, &ty) {
            return Err(self.fail(
                span,
                "Subsumption",
                format!("result would need {old} <: {ty}, which does not hold"),
            ));
        }
        Ok(Derivation {
            rule: Rule::Subsume,
            ctx: d.ctx.clone(),
            term: d.term.clone(),
            result: JudgmentResult::Type(ty),
            premises: vec![d],
        })
    }

    /// Weakens one slot of a store result covariantly.
    fn weaken_store_slot(
        &self,
        d: Derivation,
        j: u32,
        ty: Type,
        span: SourceSpan,
    ) -> Result<Derivation, TypeDiagnostic> {
        let store = match &d.result {
            JudgmentResult::Store(c) => c.clone(),
            _ => {
                return Err(self.fail(span, "Subsumption", "expected a store result".to_string()))
            }
        };
        let old = store.get(j);
        if old == ty {
            return Ok(d);
        }
        if !self.sub(&old, &ty) {
            return Err(self.fail(
                span,
                "Subsumption",
                format!("store slot x{j} would need {old} <: {ty}, which does not hold"),
            ));
        }
        Ok(Derivation {
            rule: Rule::Subsume,
            ctx: d.ctx.clone(),
            term: d.term.clone(),
            result: JudgmentResult::Store(store.with(j, ty)),
            premises: vec![d],
        })
    }

    fn reconcile_declared(
        &self,
        d: Derivation,
        declared: &Context,
        span: SourceSpan,
    ) -> Result<Derivation, TypeDiagnostic> {
        let mut d = d;
        let mut slots: Vec<u32> = declared.support();
        slots.extend(d.ctx.support());
        slots.sort_unstable();
        slots.dedup();
        for i in slots {
            let want = declared.get(i);
            let have = d.ctx.get(i);
            if want == have {
                continue;
            }
            if have.is_unit() {
                return Err(self.fail(
                    span,
                    "ContextMismatch",
                    format!("declared slot x{i}: {want} is never consumed by the program"),
                ));
            }
            if want.is_unit() {
                return Err(self.fail(
                    span,
                    "ContextMismatch",
                    format!("program consumes x{i}: {have} but the context does not provide it"),
                ));
            }
            if self.sub(&want, &have) {
                d = self.strengthen_ctx_slot(d, i, want, span)?;
            } else {
                return Err(self.fail(
                    span,
                    "ContextMismatch",
                    format!("slot x{i} is declared {want} but the program needs {have}"),
                ));
            }
        }
        Ok(d)
    }

    // -- expression synthesis ------------------------------------------------

    fn synth(&self, env: &Env, t: &Term) -> Result<Derivation, TypeDiagnostic> {
        match &t.kind {
            TermKind::ConstFin { value, card } => {
                if *card == 0 {
                    return Err(self.fail(
                        t.span,
                        "FinConstantOutOfRange",
                        "finite types need at least one element".to_string(),
                    ));
                }
                if value >= card {
                    return Err(self.fail(
                        t.span,
                        "FinConstantOutOfRange",
                        format!("{value} is not an element of the {card}-element type"),
                    ));
                }
                Ok(Derivation {
                    rule: Rule::ConstFin,
                    ctx: Context::empty(),
                    term: t.clone(),
                    result: JudgmentResult::Type(Type::Fin(*card)),
                    premises: vec![],
                })
            }
            TermKind::ConstNat(ns) => Ok(Derivation {
                rule: Rule::ConstInt,
                ctx: Context::empty(),
                term: t.clone(),
                result: JudgmentResult::Type(Type::Int(ns.len() as u32)),
                premises: vec![],
            }),
            TermKind::ConstReal(rs) => Ok(Derivation {
                rule: Rule::ConstReal,
                ctx: Context::empty(),
                term: t.clone(),
                result: JudgmentResult::Type(Type::Real(rs.len() as u32)),
                premises: vec![],
            }),
            TermKind::ConstPosDef(rows) => Ok(Derivation {
                rule: Rule::ConstPosDef,
                ctx: Context::empty(),
                term: t.clone(),
                result: JudgmentResult::Type(Type::PosDef(rows.len() as u32)),
                premises: vec![],
            }),
            TermKind::Var(i) => match env.get(i) {
                Some(ty) => Ok(self.var_at(*i, ty.clone(), t)),
                None => Err(self.fail(
                    t.span,
                    "VariableTypeUndetermined",
                    format!("no type is known for x{i} here"),
                )),
            },
            TermKind::Builtin(name, args) => self.synth_builtin(env, t, name, args),
            TermKind::Assign(i, rhs) => self.synth_assign(env, t, *i, rhs),
            TermKind::Seq(e1, e2) => self.synth_seq(env, t, e1, e2),
            TermKind::LetIn(i, value, body) => self.synth_let(env, t, *i, value, body),
            TermKind::Fn(i, body) => self.synth_fn(env, t, *i, body, None),
            TermKind::App(fun, arg) => self.synth_app(env, t, fun, arg),
            TermKind::If(c, a, b) => self.synth_if(env, t, c, a, b),
            TermKind::While(c, body) => self.synth_while(env, t, c, body),
            TermKind::Sampler(e) => {
                let d = self.synth(env, e)?;
                let ty = d.result_type();
                if !is_measure_type(&ty) {
                    return Err(self.fail(
                        t.span,
                        "SamplerNeedsMeasureType",
                        format!("sampler argument has type {ty}, which is not a measure type"),
                    ));
                }
                Ok(Derivation {
                    rule: Rule::Sampler,
                    ctx: d.ctx.clone(),
                    term: t.clone(),
                    result: JudgmentResult::Type(Type::m(ty)),
                    premises: vec![d],
                })
            }
            TermKind::Sample(e) => {
                let d = self.synth(env, e)?;
                let ty = d.result_type();
                match ty {
                    Type::MType(inner) if is_measure_type(&inner) => Ok(Derivation {
                        rule: Rule::Sample,
                        ctx: d.ctx.clone(),
                        term: t.clone(),
                        result: JudgmentResult::Type(*inner),
                        premises: vec![d],
                    }),
                    other => Err(self.fail(
                        t.span,
                        "SampleNeedsMType",
                        format!("sample argument has type {other}, not M of a measure type"),
                    )),
                }
            }
            TermKind::Observe(e) => self.synth_observe(env, t, e),
        }
    }

    /// The variable rule, reading the slot at the most informative type the
    /// surroundings know.
    fn var_at(&self, i: u32, ty: Type, t: &Term) -> Derivation {
        Derivation {
            rule: Rule::Var,
            ctx: Context::from_pairs([(i, ty.clone())]),
            term: t.clone(),
            result: JudgmentResult::Type(ty),
            premises: vec![],
        }
    }

    /// Checks a term against an expected type. Numeric literals shift
    /// between the numeric ground types here (a natural is a real, a
    /// nonnegative scalar is a 1x1 covariance); variables take the expected
    /// type directly when the environment knows nothing stronger.
    fn check_expect(&self, env: &Env, t: &Term, expected: &Type) -> Result<Derivation, TypeDiagnostic> {
        match (&t.kind, expected) {
            (TermKind::Var(i), _) => {
                let base = match env.get(i) {
                    Some(ty) if self.sub(ty, expected) => self.var_at(*i, ty.clone(), t),
                    _ => self.var_at(*i, expected.clone(), t),
                };
                self.weaken_result(base, expected.clone(), t.span)
            }
            (TermKind::ConstNat(ns), Type::Real(k)) if ns.len() == *k as usize => Ok(Derivation {
                rule: Rule::ConstReal,
                ctx: Context::empty(),
                term: t.clone(),
                result: JudgmentResult::Type(expected.clone()),
                premises: vec![],
            }),
            (TermKind::ConstNat(ns), Type::PosDef(1)) if ns.len() == 1 => Ok(Derivation {
                rule: Rule::ConstPosDef,
                ctx: Context::empty(),
                term: t.clone(),
                result: JudgmentResult::Type(expected.clone()),
                premises: vec![],
            }),
            (TermKind::ConstReal(rs), Type::PosDef(1)) if rs.len() == 1 && rs[0] >= 0.0 => {
                Ok(Derivation {
                    rule: Rule::ConstPosDef,
                    ctx: Context::empty(),
                    term: t.clone(),
                    result: JudgmentResult::Type(expected.clone()),
                    premises: vec![],
                })
            }
            (TermKind::Fn(i, body), Type::Arrow(dom, _)) => {
                let d = self.synth_fn(env, t, *i, body, Some((**dom).clone()))?;
                let got = d.result_type();
                if got == *expected {
                    Ok(d)
                } else if self.sub(&got, expected) {
                    self.weaken_result(d, expected.clone(), t.span)
                } else {
                    Err(self.fail(
                        t.span,
                        "TypeMismatch",
                        format!("expected {expected}, found {got}"),
                    ))
                }
            }
            _ => {
                let d = self.synth(env, t)?;
                let got = d.result_type();
                if got == *expected {
                    Ok(d)
                } else if matches!(d.result, JudgmentResult::Type(_)) && self.sub(&got, expected) {
                    self.weaken_result(d, expected.clone(), t.span)
                } else {
                    Err(self.fail(
                        t.span,
                        "TypeMismatch",
                        format!("expected {expected}, found {got}"),
                    ))
                }
            }
        }
    }

    fn synth_builtin(
        &self,
        env: &Env,
        t: &Term,
        name: &str,
        args: &[Term],
    ) -> Result<Derivation, TypeDiagnostic> {
        let sig = self.table.get(name).ok_or_else(|| {
            self.fail(t.span, "UnknownBuiltin", format!("no builtin named `{name}`"))
        })?;
        if sig.args.len() != args.len() {
            return Err(self.fail(
                t.span,
                "BuiltinArityMismatch",
                format!("`{name}` takes {} arguments, got {}", sig.args.len(), args.len()),
            ));
        }
        let mut premises = Vec::with_capacity(args.len());
        let mut ctx = Context::empty();
        for (arg, g) in args.iter().zip(&sig.args) {
            let d = self.check_expect(env, arg, &g.to_type())?;
            if !ctx.disjoint(&d.ctx) {
                return Err(self.fail(
                    t.span,
                    "BuiltinOverlappingContexts",
                    format!("arguments of `{name}` consume overlapping slots"),
                ));
            }
            ctx = ctx.union(&d.ctx);
            premises.push(d);
        }
        Ok(Derivation {
            rule: Rule::Builtin,
            ctx,
            term: t.clone(),
            result: JudgmentResult::Type(sig.ret.to_type()),
            premises,
        })
    }

    fn synth_assign(
        &self,
        env: &Env,
        t: &Term,
        i: u32,
        rhs: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        // The surrounding store's carrier type guides the right-hand side,
        // so `x0 := 1` in a real-typed slot reads the literal as a real.
        let d_rhs = match env.get(&i) {
            Some(hint) => {
                let want = hint.carrier().clone();
                self.check_expect(env, rhs, &want)
                    .or_else(|_| self.synth(env, rhs))?
            }
            None => self.synth(env, rhs)?,
        };
        let ty = match &d_rhs.result {
            JudgmentResult::Type(ty) => ty.clone(),
            JudgmentResult::Store(_) => {
                return Err(self.fail(
                    t.span,
                    "AssignNeedsValue",
                    "the right-hand side of an assignment is a command, not a value".to_string(),
                ))
            }
        };
        if d_rhs.ctx.is_empty() && is_measure_type(&ty) {
            // Closed right-hand sides set a prior on the slot.
            let prior = rhs.clone();
            let bayes = Type::bayes(ty.clone(), prior);
            return Ok(Derivation {
                rule: Rule::AssignBayes,
                ctx: Context::from_pairs([(i, ty)]),
                term: t.clone(),
                result: JudgmentResult::Store(Context::from_pairs([(i, bayes)])),
                premises: vec![d_rhs],
            });
        }
        let existing = d_rhs.ctx.get(i);
        if !existing.is_unit() && existing != ty {
            return Err(self.fail(
                t.span,
                "AssignSlotTypeConflict",
                format!("x{i} is read at {existing} but assigned a {ty}"),
            ));
        }
        Ok(Derivation {
            rule: Rule::AssignPlain,
            ctx: d_rhs.ctx.with(i, ty.clone()),
            term: t.clone(),
            result: JudgmentResult::Store(Context::from_pairs([(i, ty)])),
            premises: vec![d_rhs],
        })
    }

    fn synth_seq(
        &self,
        env: &Env,
        t: &Term,
        e1: &Term,
        e2: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        let d1 = self.synth(env, e1)?;
        let delta1 = match &d1.result {
            JudgmentResult::Store(c) => c.clone(),
            JudgmentResult::Type(ty) => {
                return Err(self.fail(
                    e1.span,
                    "SeqNeedsStores",
                    format!("left of `;` must be a store command, found value of type {ty}"),
                ))
            }
        };
        // Thread the output store into the environment for the right side.
        let mut env2 = env.clone();
        for (i, ty) in delta1.iter() {
            env2.insert(*i, ty.clone());
        }
        let mut d2 = self.synth(&env2, e2)?;
        if matches!(d2.result, JudgmentResult::Type(_)) {
            return Err(self.fail(
                e2.span,
                "SeqNeedsStores",
                format!(
                    "right of `;` must be a store command, found value of type {}",
                    d2.result_type()
                ),
            ));
        }
        // Compatibility of the produced store with the consumed context:
        // strengthen slots of e2's context along <: where possible.
        for i in delta1.support() {
            let want = delta1.get(i);
            let have = d2.ctx.get(i);
            if have.is_unit() || want == have {
                continue;
            }
            if self.sub(&want, &have) {
                d2 = self.strengthen_ctx_slot(d2, i, want, t.span)?;
            } else {
                return Err(self.fail(
                    t.span,
                    "SeqContextsIncompatible",
                    format!(
                        "the first command leaves x{i}: {want} but the second consumes x{i}: {have}"
                    ),
                ));
            }
        }
        let gamma2 = d2.ctx.clone();
        let delta2 = d2.result.as_store().unwrap().clone();
        let gamma2_minus_delta1 = gamma2.diff(&delta1);
        if !d1.ctx.compatible(&gamma2_minus_delta1) {
            return Err(self.fail(
                t.span,
                "SeqContextsIncompatible",
                "the two commands disagree on a shared input slot".to_string(),
            ));
        }
        let delta1_minus_gamma2 = delta1.diff(&gamma2);
        if !delta2.compatible(&delta1_minus_gamma2) {
            return Err(self.fail(
                t.span,
                "SeqContextsIncompatible",
                "the second command's output conflicts with a slot carried over".to_string(),
            ));
        }
        let ctx = d1.ctx.union(&gamma2_minus_delta1);
        let result = delta1_minus_gamma2.union(&delta2);
        Ok(Derivation {
            rule: Rule::SeqComp,
            ctx,
            term: t.clone(),
            result: JudgmentResult::Store(result),
            premises: vec![d1, d2],
        })
    }

    fn synth_let(
        &self,
        env: &Env,
        t: &Term,
        i: u32,
        value: &Term,
        body: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        let mut d1 = self.synth(env, value)?;
        let mut s = d1.result.as_type();
        // A closed value of measure type becomes a prior for the bound
        // variable; this is the only Bayesian-type introduction site apart
        // from assignment.
        if d1.ctx.is_empty()
            && is_measure_type(&s)
            && !matches!(s, Type::Bayes(_, _))
            && matches!(d1.result, JudgmentResult::Type(_))
        {
            s = Type::bayes(s, value.clone());
            d1 = Derivation {
                rule: Rule::BayesIntro,
                ctx: Context::empty(),
                term: value.clone(),
                result: JudgmentResult::Type(s.clone()),
                premises: vec![d1],
            };
        }
        let mut env2 = env.clone();
        env2.insert(i, s.clone());
        let mut d2 = self.synth(&env2, body)?;
        let delta = d2.ctx.without(i);
        if !d1.ctx.disjoint(&delta) {
            return Err(self.fail(
                t.span,
                "LetOverlappingContexts",
                "the bound value and the body consume overlapping slots".to_string(),
            ));
        }
        let bound = d2.ctx.get(i);
        if bound.is_unit() {
            if !s.is_unit() {
                return Err(self.fail(
                    t.span,
                    "LetBinderNotConsumed",
                    format!("x{i} is bound at {s} but the body never consumes it"),
                ));
            }
        } else if bound != s {
            if self.sub(&s, &bound) {
                d2 = self.strengthen_ctx_slot(d2, i, s.clone(), t.span)?;
            } else {
                return Err(self.fail(
                    t.span,
                    "LetBinderTypeMismatch",
                    format!("x{i} is bound at {s} but the body consumes it at {bound}"),
                ));
            }
        }
        let ctx = d1.ctx.union(&delta);
        let result = d2.result.clone();
        Ok(Derivation {
            rule: Rule::Let,
            ctx,
            term: t.clone(),
            result,
            premises: vec![d1, d2],
        })
    }

    fn synth_fn(
        &self,
        env: &Env,
        t: &Term,
        i: u32,
        body: &Term,
        binder: Option<Type>,
    ) -> Result<Derivation, TypeDiagnostic> {
        let mut env2 = env.clone();
        match &binder {
            Some(ty) => {
                env2.insert(i, ty.clone());
            }
            None => {
                env2.remove(&i);
            }
        }
        let mut d = self.synth(&env2, body).map_err(|e| {
            if e.rule == "VariableTypeUndetermined" && binder.is_none() {
                self.fail(
                    t.span,
                    "FnBinderUndetermined",
                    format!("cannot determine the type of the binder x{i}; apply the function or use x{i} in a typed position"),
                )
            } else {
                e
            }
        })?;
        let s = match &binder {
            Some(ty) => {
                let demanded = d.ctx.get(i);
                if demanded.is_unit() {
                    if !ty.is_unit() {
                        return Err(self.fail(
                            t.span,
                            "FnBinderNotConsumed",
                            format!("the body never consumes the binder x{i}: {ty}"),
                        ));
                    }
                } else if *ty != demanded {
                    if self.sub(ty, &demanded) {
                        d = self.strengthen_ctx_slot(d, i, ty.clone(), t.span)?;
                    } else {
                        return Err(self.fail(
                            t.span,
                            "TypeMismatch",
                            format!("binder x{i} expects {ty} but the body consumes {demanded}"),
                        ));
                    }
                }
                ty.clone()
            }
            None => {
                let demanded = d.ctx.get(i);
                if demanded.is_unit() {
                    Type::unit()
                } else {
                    demanded
                }
            }
        };
        let ctx = d.ctx.without(i);
        let result_ty = d.result.as_type();
        Ok(Derivation {
            rule: Rule::Fn,
            ctx,
            term: t.clone(),
            result: JudgmentResult::Type(Type::arrow(s, result_ty)),
            premises: vec![d],
        })
    }

    fn synth_app(
        &self,
        env: &Env,
        t: &Term,
        fun: &Term,
        arg: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        let d_arg = self.synth(env, arg)?;
        let s = d_arg.result.as_type();
        let d_fun = match &fun.kind {
            TermKind::Fn(i, body) => self.synth_fn(env, fun, *i, body, Some(s.clone()))?,
            _ => {
                let d = self.synth(env, fun)?;
                match d.result_type() {
                    Type::Arrow(_, _) => d,
                    other => {
                        return Err(self.fail(
                            fun.span,
                            "AppNotAFunction",
                            format!("applied expression has type {other}, not a function type"),
                        ))
                    }
                }
            }
        };
        let (dom, cod) = match d_fun.result_type() {
            Type::Arrow(dom, cod) => (*dom, *cod),
            _ => unreachable!("function side is always an arrow here"),
        };
        let d_arg = if s == dom {
            d_arg
        } else if self.sub(&s, &dom) {
            self.weaken_result(d_arg, dom, t.span)?
        } else {
            return Err(self.fail(
                t.span,
                "TypeMismatch",
                format!("function expects {dom} but the argument has type {s}"),
            ));
        };
        if !d_arg.ctx.disjoint(&d_fun.ctx) {
            return Err(self.fail(
                t.span,
                "AppOverlappingContexts",
                "function and argument consume overlapping slots".to_string(),
            ));
        }
        let ctx = d_arg.ctx.union(&d_fun.ctx);
        Ok(Derivation {
            rule: Rule::App,
            ctx,
            term: t.clone(),
            result: JudgmentResult::Type(cod),
            premises: vec![d_arg, d_fun],
        })
    }

    /// Aligns the contexts of several premise derivations to their slotwise
    /// meet (the strongest type among the demands, which must be a subtype
    /// of the others). Fails if any slot is missing from some premise.
    fn reconcile_shared_context(
        &self,
        ds: Vec<Derivation>,
        span: SourceSpan,
        rule: &'static str,
    ) -> Result<(Vec<Derivation>, Context), TypeDiagnostic> {
        let mut slots: Vec<u32> = Vec::new();
        for d in &ds {
            slots.extend(d.ctx.support());
        }
        slots.sort_unstable();
        slots.dedup();
        let mut target = Context::empty();
        for &i in &slots {
            let tys: Vec<Type> = ds.iter().map(|d| d.ctx.get(i)).collect();
            if tys.iter().any(|t| t.is_unit()) {
                return Err(self.fail(
                    span,
                    rule,
                    format!(
                        "the branches must consume the same slots, but x{i} is consumed by only some of them"
                    ),
                ));
            }
            let meet = tys
                .iter()
                .find(|cand| tys.iter().all(|other| self.sub(cand, other)))
                .cloned()
                .ok_or_else(|| {
                    self.fail(
                        span,
                        rule,
                        format!("x{i} is consumed at incompatible types across the branches"),
                    )
                })?;
            target.set(i, meet);
        }
        let mut out = Vec::with_capacity(ds.len());
        for mut d in ds {
            for &i in &slots {
                let want = target.get(i);
                if d.ctx.get(i) != want {
                    d = self.strengthen_ctx_slot(d, i, want, span)?;
                }
            }
            out.push(d);
        }
        Ok((out, target))
    }

    /// Common supertype of two result types, formed by erasing priors until
    /// the shapes agree.
    fn join_types(&self, a: &Type, b: &Type) -> Option<Type> {
        if a == b {
            return Some(a.clone());
        }
        if self.sub(a, b) {
            return Some(b.clone());
        }
        if self.sub(b, a) {
            return Some(a.clone());
        }
        match (a, b) {
            (Type::Bayes(ta, _), _) => self.join_types(ta, b),
            (_, Type::Bayes(tb, _)) => self.join_types(a, tb),
            (Type::Tensor(a1, a2), Type::Tensor(b1, b2)) => Some(Type::tensor(
                self.join_types(a1, b1)?,
                self.join_types(a2, b2)?,
            )),
            _ => None,
        }
    }

    fn synth_if(
        &self,
        env: &Env,
        t: &Term,
        c: &Term,
        a: &Term,
        b: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        let d_c = self.check_expect(env, c, &Type::bool_ty())?;
        let d_a = self.synth(env, a)?;
        let d_b = self.synth(env, b)?;
        // Branch results must agree; erase priors down to a common type.
        let (d_a, d_b) = match (&d_a.result, &d_b.result) {
            (JudgmentResult::Type(ta), JudgmentResult::Type(tb)) => {
                let join = self.join_types(ta, tb).ok_or_else(|| {
                    self.fail(
                        t.span,
                        "IfBranchTypeMismatch",
                        format!("branches have incompatible types {ta} and {tb}"),
                    )
                })?;
                (
                    self.weaken_result(d_a, join.clone(), t.span)?,
                    self.weaken_result(d_b, join, t.span)?,
                )
            }
            (JudgmentResult::Store(sa), JudgmentResult::Store(sb)) => {
                let (sa, sb) = (sa.clone(), sb.clone());
                if sa.support() != sb.support() {
                    return Err(self.fail(
                        t.span,
                        "IfBranchTypeMismatch",
                        "branches write different sets of slots".to_string(),
                    ));
                }
                let mut da = d_a;
                let mut db = d_b;
                for i in sa.support() {
                    let ta = sa.get(i);
                    let tb = sb.get(i);
                    if ta != tb {
                        let join = self.join_types(&ta, &tb).ok_or_else(|| {
                            self.fail(
                                t.span,
                                "IfBranchTypeMismatch",
                                format!("branches write x{i} at incompatible types {ta} and {tb}"),
                            )
                        })?;
                        da = self.weaken_store_slot(da, i, join.clone(), t.span)?;
                        db = self.weaken_store_slot(db, i, join, t.span)?;
                    }
                }
                (da, db)
            }
            _ => {
                return Err(self.fail(
                    t.span,
                    "IfBranchTypeMismatch",
                    "one branch is a value and the other a store command".to_string(),
                ))
            }
        };
        let result = d_a.result.clone();
        let (mut ds, ctx) =
            self.reconcile_shared_context(vec![d_c, d_a, d_b], t.span, "IfContextMismatch")?;
        let ctx_ty = ctx.as_type();
        if !is_order_complete(&ctx_ty) {
            return Err(self.fail(
                t.span,
                "IfContextNotOrderComplete",
                format!("the shared context {ctx_ty} is not order-complete"),
            ));
        }
        let d_b = ds.pop().unwrap();
        let d_a = ds.pop().unwrap();
        let d_c = ds.pop().unwrap();
        Ok(Derivation {
            rule: Rule::If,
            ctx,
            term: t.clone(),
            result,
            premises: vec![d_c, d_a, d_b],
        })
    }

    fn synth_while(
        &self,
        env: &Env,
        t: &Term,
        c: &Term,
        body: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        // First pass with the ambient environment; if the body's output
        // store cannot be read back as the loop context (a fresh prior on a
        // slot, say), demote the offending slots to their carriers and
        // retry once.
        match self.try_while(env, t, c, body) {
            Ok(d) => Ok(d),
            Err(first) => {
                let mut env2 = env.clone();
                let mut changed = false;
                for (i, ty) in env.iter() {
                    if matches!(ty, Type::Bayes(_, _)) {
                        env2.insert(*i, ty.carrier().clone());
                        changed = true;
                    }
                }
                if changed {
                    self.try_while(&env2, t, c, body).map_err(|_| first)
                } else {
                    Err(first)
                }
            }
        }
    }

    fn try_while(
        &self,
        env: &Env,
        t: &Term,
        c: &Term,
        body: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        let d_c = self.check_expect(env, c, &Type::bool_ty())?;
        let d_body = self.synth(env, body)?;
        if !matches!(d_body.result, JudgmentResult::Store(_)) {
            return Err(self.fail(
                body.span,
                "WhileBodyStoreMismatch",
                format!(
                    "a loop body must be a store command, found value of type {}",
                    d_body.result_type()
                ),
            ));
        }
        let (mut ds, ctx) =
            self.reconcile_shared_context(vec![d_c, d_body], t.span, "WhileContextMismatch")?;
        let mut d_body = ds.pop().unwrap();
        let d_c = ds.pop().unwrap();
        // The body's output store must be exactly the loop context.
        let out = d_body.result.as_store().unwrap().clone();
        if out.support() != ctx.support() {
            return Err(self.fail(
                t.span,
                "WhileBodyStoreMismatch",
                format!(
                    "the loop context is {ctx} but the body's output store is {out}"
                ),
            ));
        }
        for i in ctx.support() {
            let want = ctx.get(i);
            let have = out.get(i);
            if have != want {
                d_body = self.weaken_store_slot(d_body, i, want, t.span)?;
            }
        }
        let ctx_ty = ctx.as_type();
        if !is_order_complete(&ctx_ty) {
            return Err(self.fail(
                t.span,
                "WhileContextNotOrderComplete",
                format!("the loop context {ctx_ty} is not order-complete"),
            ));
        }
        Ok(Derivation {
            rule: Rule::While,
            ctx: ctx.clone(),
            term: t.clone(),
            result: JudgmentResult::Store(ctx),
            premises: vec![d_c, d_body],
        })
    }

    fn synth_observe(
        &self,
        env: &Env,
        t: &Term,
        e: &Term,
    ) -> Result<Derivation, TypeDiagnostic> {
        let mut d = self.synth(env, e)?;
        let support = d.ctx.support();
        if support.len() != 1 {
            return Err(self.fail(
                t.span,
                "ObserveContextNotSingleton",
                format!(
                    "observe needs exactly one live slot with a prior, found {}",
                    if support.is_empty() { "none".to_string() } else { format!("{}", d.ctx) }
                ),
            ));
        }
        let i = support[0];
        // If the slot was typed at the carrier, pull the prior back in from
        // the environment.
        if !matches!(d.ctx.get(i), Type::Bayes(_, _)) {
            if let Some(hint @ Type::Bayes(_, _)) = env.get(&i) {
                if self.sub(hint, &d.ctx.get(i)) {
                    d = self.strengthen_ctx_slot(d, i, hint.clone(), t.span)?;
                }
            }
        }
        let (s, mu) = match d.ctx.get(i) {
            Type::Bayes(s, mu) => (*s, *mu),
            other => {
                return Err(self.fail(
                    t.span,
                    "ObserveNeedsBayesianContext",
                    format!("x{i} has type {other}, which carries no prior to condition"),
                ))
            }
        };
        let ty = d.result.as_type();
        if !is_measure_type(&ty) {
            return Err(self.fail(
                t.span,
                "ObserveNeedsMeasureType",
                format!("the observed expression has type {ty}, not a measure type"),
            ));
        }
        if !is_measure_type(&s) {
            return Err(self.fail(
                t.span,
                "ObserveNeedsMeasureType",
                format!("the prior carrier {s} is not a measure type"),
            ));
        }
        if !is_order_complete(&s) {
            return Err(self.fail(
                t.span,
                "ObserveCarrierNotOrderComplete",
                format!("the prior carrier {s} is not order-complete"),
            ));
        }
        let marginal = substitute(e, i, &mu).map_err(|err| {
            self.fail(t.span, "ObserveOpenPrior", err.to_string())
        })?;
        let ctx = d.ctx.clone();
        let result = Type::arrow(
            Type::bayes(ty, marginal),
            Type::bayes(s, mu),
        );
        Ok(Derivation {
            rule: Rule::Observe,
            ctx,
            term: t.clone(),
            result: JudgmentResult::Type(result),
            premises: vec![d],
        })
    }
}

// ---------------------------------------------------------------------------
// Independent derivation validation

/// Re-checks every node of a derivation against its rule's premises and side
/// conditions. Used as an oracle on the checker's output; it shares no code
/// with the synthesis above beyond the type predicates.
pub fn validate_derivation(
    d: &Derivation,
    table: &BuiltinTable,
    axioms: &[(Type, Type)],
) -> Result<(), String> {
    for p in &d.premises {
        validate_derivation(p, table, axioms)?;
    }
    let fail = |msg: String| Err(format!("{} node for `{}`: {}", d.rule.name(), pretty(&d.term), msg));
    match d.rule {
        Rule::ConstFin => {
            let (value, card) = match &d.term.kind {
                TermKind::ConstFin { value, card } => (*value, *card),
                _ => return fail("term is not a finite constant".into()),
            };
            if value >= card || !d.ctx.is_empty() || d.result != JudgmentResult::Type(Type::Fin(card)) {
                return fail("finite constant judgment malformed".into());
            }
        }
        Rule::ConstInt => {
            let k = match &d.term.kind {
                TermKind::ConstNat(ns) => ns.len() as u32,
                _ => return fail("term is not a natural constant".into()),
            };
            if !d.ctx.is_empty() || d.result != JudgmentResult::Type(Type::Int(k)) {
                return fail("integer constant judgment malformed".into());
            }
        }
        Rule::ConstReal => {
            // Naturals are reals, so a natural literal may be typed here.
            let k = match &d.term.kind {
                TermKind::ConstReal(rs) => rs.len() as u32,
                TermKind::ConstNat(ns) => ns.len() as u32,
                _ => return fail("term is not a numeric constant".into()),
            };
            if !d.ctx.is_empty() || d.result != JudgmentResult::Type(Type::Real(k)) {
                return fail("real constant judgment malformed".into());
            }
        }
        Rule::ConstPosDef => {
            let ok = match &d.term.kind {
                TermKind::ConstPosDef(rows) => {
                    d.result == JudgmentResult::Type(Type::PosDef(rows.len() as u32))
                }
                // Scalar literals double as 1x1 covariance matrices.
                TermKind::ConstNat(ns) => {
                    ns.len() == 1 && d.result == JudgmentResult::Type(Type::PosDef(1))
                }
                TermKind::ConstReal(rs) => {
                    rs.len() == 1
                        && rs[0] >= 0.0
                        && d.result == JudgmentResult::Type(Type::PosDef(1))
                }
                _ => false,
            };
            if !ok || !d.ctx.is_empty() {
                return fail("covariance constant judgment malformed".into());
            }
        }
        Rule::Var => {
            let i = match &d.term.kind {
                TermKind::Var(i) => *i,
                _ => return fail("term is not a variable".into()),
            };
            if d.ctx.support() != vec![i] || d.result != JudgmentResult::Type(d.ctx.get(i)) {
                return fail("variable judgment must use the singleton context".into());
            }
        }
        Rule::Subsume => {
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("subsumption takes one premise".into()),
            };
            if p.term != d.term {
                return fail("subsumption changes the subject term".into());
            }
            let mut slots = d.ctx.support();
            slots.extend(p.ctx.support());
            slots.sort_unstable();
            slots.dedup();
            for i in slots {
                if !subtype(&d.ctx.get(i), &p.ctx.get(i), axioms) {
                    return fail(format!("context slot x{i} is not strengthened along <:"));
                }
            }
            match (&p.result, &d.result) {
                (JudgmentResult::Type(a), JudgmentResult::Type(b)) => {
                    if !subtype(a, b, axioms) {
                        return fail(format!("result weakening {a} <: {b} fails"));
                    }
                }
                (JudgmentResult::Store(a), JudgmentResult::Store(b)) => {
                    let mut slots = a.support();
                    slots.extend(b.support());
                    slots.sort_unstable();
                    slots.dedup();
                    for j in slots {
                        if !subtype(&a.get(j), &b.get(j), axioms) {
                            return fail(format!("store slot x{j} is not weakened along <:"));
                        }
                    }
                }
                _ => return fail("subsumption cannot change a value into a store".into()),
            }
        }
        Rule::BayesIntro => {
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("prior introduction takes one premise".into()),
            };
            let inner = p.result.as_type();
            if !d.ctx.is_empty() || !p.ctx.is_empty() {
                return fail("priors require an empty context".into());
            }
            if !is_measure_type(&inner) {
                return fail(format!("{inner} is not a measure type"));
            }
            if !d.term.free_vars().is_empty() {
                return fail("prior term must be closed".into());
            }
            match &d.result {
                JudgmentResult::Type(Type::Bayes(t, e)) => {
                    if **t != inner || **e != d.term || p.term != d.term {
                        return fail("prior type must pair the premise type with the term itself".into());
                    }
                }
                other => return fail(format!("expected a Bayesian type, found {other}")),
            }
        }
        Rule::Builtin => {
            let (name, args) = match &d.term.kind {
                TermKind::Builtin(name, args) => (name, args),
                _ => return fail("term is not a builtin application".into()),
            };
            let sig = table
                .get(name)
                .ok_or_else(|| format!("unknown builtin `{name}`"))?;
            if sig.args.len() != args.len() || d.premises.len() != args.len() {
                return fail("arity mismatch".into());
            }
            let mut ctx = Context::empty();
            for ((p, arg), g) in d.premises.iter().zip(args).zip(&sig.args) {
                if p.term != *arg {
                    return fail("premise order must follow the argument order".into());
                }
                if p.result.as_type() != g.to_type() {
                    return fail(format!("argument must have type {}", g.to_type()));
                }
                if !ctx.disjoint(&p.ctx) {
                    return fail("argument contexts must be pairwise disjoint".into());
                }
                ctx = ctx.union(&p.ctx);
            }
            if d.ctx != ctx || d.result != JudgmentResult::Type(sig.ret.to_type()) {
                return fail("conclusion context or result is wrong".into());
            }
        }
        Rule::AssignPlain => {
            let (i, rhs) = match &d.term.kind {
                TermKind::Assign(i, rhs) => (*i, rhs),
                _ => return fail("term is not an assignment".into()),
            };
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("assignment takes one premise".into()),
            };
            if p.term != **rhs {
                return fail("premise must type the right-hand side".into());
            }
            let ty = match &p.result {
                JudgmentResult::Type(t) => t.clone(),
                _ => return fail("right-hand side must be a value".into()),
            };
            let existing = p.ctx.get(i);
            if !existing.is_unit() && existing != ty {
                return fail(format!("slot x{i} read at {existing} cannot take a {ty}"));
            }
            if d.ctx != p.ctx.with(i, ty.clone())
                || d.result != JudgmentResult::Store(Context::from_pairs([(i, ty)]))
            {
                return fail("conclusion must extend the context and output the written slot".into());
            }
        }
        Rule::AssignBayes => {
            let (i, rhs) = match &d.term.kind {
                TermKind::Assign(i, rhs) => (*i, rhs),
                _ => return fail("term is not an assignment".into()),
            };
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("assignment takes one premise".into()),
            };
            if !p.ctx.is_empty() || p.term != **rhs {
                return fail("a prior-setting assignment needs a closed right-hand side".into());
            }
            let ty = p.result.as_type();
            if !is_measure_type(&ty) {
                return fail(format!("{ty} is not a measure type"));
            }
            let expect = JudgmentResult::Store(Context::from_pairs([(
                i,
                Type::bayes(ty.clone(), (**rhs).clone()),
            )]));
            if d.ctx != Context::from_pairs([(i, ty)]) || d.result != expect {
                return fail("conclusion must set the prior on the written slot".into());
            }
        }
        Rule::Let => {
            let (i, value, body) = match &d.term.kind {
                TermKind::LetIn(i, v, b) => (*i, v, b),
                _ => return fail("term is not a let".into()),
            };
            let (p1, p2) = match d.premises.as_slice() {
                [p1, p2] => (p1, p2),
                _ => return fail("let takes two premises".into()),
            };
            if p1.term != **value || p2.term != **body {
                return fail("premises must type the value and the body".into());
            }
            let s = p1.result.as_type();
            if p2.ctx.get(i) != s {
                return fail(format!("the body must consume x{i} at {s}"));
            }
            let delta = p2.ctx.without(i);
            if !p1.ctx.disjoint(&delta) {
                return fail("value and body contexts must have disjoint supports".into());
            }
            if d.ctx != p1.ctx.union(&delta) || d.result != p2.result {
                return fail("conclusion context or result is wrong".into());
            }
        }
        Rule::SeqComp => {
            let (e1, e2) = match &d.term.kind {
                TermKind::Seq(a, b) => (a, b),
                _ => return fail("term is not a sequence".into()),
            };
            let (p1, p2) = match d.premises.as_slice() {
                [p1, p2] => (p1, p2),
                _ => return fail("sequencing takes two premises".into()),
            };
            if p1.term != **e1 || p2.term != **e2 {
                return fail("premises must type the two commands".into());
            }
            let d1 = match &p1.result {
                JudgmentResult::Store(c) => c,
                _ => return fail("left command must produce a store".into()),
            };
            let d2 = match &p2.result {
                JudgmentResult::Store(c) => c,
                _ => return fail("right command must produce a store".into()),
            };
            let g1 = &p1.ctx;
            let g2 = &p2.ctx;
            if !d1.compatible(g2) {
                return fail("output store of the first command conflicts with the second's context".into());
            }
            if !g1.compatible(&g2.diff(d1)) {
                return fail("the commands disagree on a shared input slot".into());
            }
            if !d2.compatible(&d1.diff(g2)) {
                return fail("the second output conflicts with carried-over slots".into());
            }
            if d.ctx != g1.union(&g2.diff(d1))
                || d.result != JudgmentResult::Store(d1.diff(g2).union(d2))
            {
                return fail("conclusion context or store is wrong".into());
            }
        }
        Rule::Fn => {
            let (i, body) = match &d.term.kind {
                TermKind::Fn(i, b) => (*i, b),
                _ => return fail("term is not an abstraction".into()),
            };
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("abstraction takes one premise".into()),
            };
            if p.term != **body {
                return fail("premise must type the body".into());
            }
            let s = p.ctx.get(i);
            if d.ctx != p.ctx.without(i) {
                return fail("conclusion context must drop the binder slot".into());
            }
            if d.ctx.support().contains(&i) {
                return fail(format!("binder x{i} must not occur in the outer context"));
            }
            if d.result != JudgmentResult::Type(Type::arrow(s, p.result.as_type())) {
                return fail("conclusion must be the arrow from binder to body type".into());
            }
        }
        Rule::App => {
            let (fun, arg) = match &d.term.kind {
                TermKind::App(f, a) => (f, a),
                _ => return fail("term is not an application".into()),
            };
            let (p_arg, p_fun) = match d.premises.as_slice() {
                [a, f] => (a, f),
                _ => return fail("application takes two premises".into()),
            };
            if p_arg.term != **arg || p_fun.term != **fun {
                return fail("premises must type the argument then the function".into());
            }
            let (dom, cod) = match p_fun.result.as_type() {
                Type::Arrow(a, b) => (*a, *b),
                other => return fail(format!("function premise has type {other}")),
            };
            if p_arg.result.as_type() != dom {
                return fail(format!("argument must have the domain type {dom}"));
            }
            if !p_arg.ctx.disjoint(&p_fun.ctx) {
                return fail("argument and function contexts must be disjoint".into());
            }
            if d.ctx != p_arg.ctx.union(&p_fun.ctx) || d.result != JudgmentResult::Type(cod) {
                return fail("conclusion context or result is wrong".into());
            }
        }
        Rule::If => {
            let (c, a, b) = match &d.term.kind {
                TermKind::If(c, a, b) => (c, a, b),
                _ => return fail("term is not a conditional".into()),
            };
            let (pc, pa, pb) = match d.premises.as_slice() {
                [pc, pa, pb] => (pc, pa, pb),
                _ => return fail("conditionals take three premises".into()),
            };
            if pc.term != **c || pa.term != **a || pb.term != **b {
                return fail("premises must type condition, then-branch, else-branch".into());
            }
            if pc.result.as_type() != Type::bool_ty() {
                return fail("condition must be boolean".into());
            }
            if pc.ctx != d.ctx || pa.ctx != d.ctx || pb.ctx != d.ctx {
                return fail("all premises must share the conclusion context exactly".into());
            }
            if pa.result != d.result || pb.result != d.result {
                return fail("both branches must produce the conclusion result".into());
            }
            if !is_order_complete(&d.ctx.as_type()) {
                return fail(format!("context {} is not order-complete", d.ctx.as_type()));
            }
        }
        Rule::While => {
            let (c, body) = match &d.term.kind {
                TermKind::While(c, b) => (c, b),
                _ => return fail("term is not a loop".into()),
            };
            let (pc, pb) = match d.premises.as_slice() {
                [pc, pb] => (pc, pb),
                _ => return fail("loops take two premises".into()),
            };
            if pc.term != **c || pb.term != **body {
                return fail("premises must type the condition and the body".into());
            }
            if pc.result.as_type() != Type::bool_ty() {
                return fail("condition must be boolean".into());
            }
            if pc.ctx != d.ctx || pb.ctx != d.ctx {
                return fail("condition and body must share the loop context".into());
            }
            if pb.result != JudgmentResult::Store(d.ctx.clone())
                || d.result != JudgmentResult::Store(d.ctx.clone())
            {
                return fail("the body and the loop must output the loop context itself".into());
            }
            if !is_order_complete(&d.ctx.as_type()) {
                return fail(format!("context {} is not order-complete", d.ctx.as_type()));
            }
        }
        Rule::Sampler => {
            let e = match &d.term.kind {
                TermKind::Sampler(e) => e,
                _ => return fail("term is not a sampler".into()),
            };
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("sampler takes one premise".into()),
            };
            let ty = p.result.as_type();
            if p.term != **e || !is_measure_type(&ty) {
                return fail("sampler needs a measure-typed premise".into());
            }
            if d.ctx != p.ctx || d.result != JudgmentResult::Type(Type::m(ty)) {
                return fail("conclusion must wrap the premise type in M".into());
            }
        }
        Rule::Sample => {
            let e = match &d.term.kind {
                TermKind::Sample(e) => e,
                _ => return fail("term is not a sample".into()),
            };
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("sample takes one premise".into()),
            };
            match p.result.as_type() {
                Type::MType(inner) if is_measure_type(&inner) => {
                    if p.term != **e || d.ctx != p.ctx || d.result != JudgmentResult::Type(*inner) {
                        return fail("conclusion must unwrap the M layer".into());
                    }
                }
                other => return fail(format!("premise has type {other}, not M of a measure type")),
            }
        }
        Rule::Observe => {
            let e = match &d.term.kind {
                TermKind::Observe(e) => e,
                _ => return fail("term is not an observe".into()),
            };
            let p = match d.premises.as_slice() {
                [p] => p,
                _ => return fail("observe takes one premise".into()),
            };
            let support = d.ctx.support();
            if support.len() != 1 || p.ctx != d.ctx {
                return fail("observe needs the singleton prior context on both sides".into());
            }
            let i = support[0];
            let (s, mu) = match d.ctx.get(i) {
                Type::Bayes(s, mu) => (*s, *mu),
                other => return fail(format!("slot x{i} has type {other}, not a Bayesian type")),
            };
            let ty = p.result.as_type();
            if p.term != **e || !is_measure_type(&ty) || !is_measure_type(&s) {
                return fail("observe needs measure types on both sides".into());
            }
            if !is_order_complete(&s) {
                return fail(format!("prior carrier {s} is not order-complete"));
            }
            let marginal = substitute(e, i, &mu).map_err(|err| err.to_string())?;
            let expect = Type::arrow(Type::bayes(ty, marginal), Type::bayes(s, mu));
            if d.result != JudgmentResult::Type(expect) {
                return fail("conclusion arrow does not match the substitution form".into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::parse;

    fn table() -> BuiltinTable {
        BuiltinTable::standard()
    }

    fn check(ctx: &Context, src: &str) -> Result<Derivation, TypeDiagnostic> {
        let t = parse(src).unwrap_or_else(|d| panic!("parse error in `{src}`: {}", d[0]));
        typecheck(ctx, &t, &table())
    }

    fn check_ok(ctx: &Context, src: &str) -> Derivation {
        let d = check(ctx, src).unwrap_or_else(|e| panic!("`{src}` failed to type: {e}"));
        validate_derivation(&d, &table(), &[])
            .unwrap_or_else(|m| panic!("validator rejected `{src}`: {m}"));
        d
    }

    fn diag_rule(ctx: &Context, src: &str) -> &'static str {
        match check(ctx, src) {
            Err(e) => e.rule,
            Ok(d) => panic!("`{src}` unexpectedly typed as {}", d.result),
        }
    }

    #[test]
    fn classifiers_follow_the_two_grammars() {
        let real = Type::real();
        assert!(is_measure_type(&real));
        assert!(is_order_complete(&real));
        let arrow = Type::arrow(real.clone(), real.clone());
        assert!(!is_measure_type(&arrow));
        let e = parse("sample(normal(0, 1))").unwrap();
        let bayes = Type::bayes(real.clone(), e.clone());
        assert!(is_order_complete(&bayes));
        assert!(is_order_complete(&Type::tensor(bayes.clone(), bayes.clone())));
        assert!(!is_order_complete(&Type::tensor(real.clone(), real.clone())));
        assert!(is_order_complete(&Type::m(bayes.clone())));
        assert!(is_order_complete(&Type::arrow(bayes.clone(), bayes.clone())));
        // Deeper nesting falls outside the order-complete grammar.
        assert!(!is_order_complete(&Type::m(Type::m(real.clone()))));
        assert!(is_measure_type(&Type::m(Type::m(real))));
    }

    #[test]
    fn subtyping_erases_priors_and_respects_variance() {
        let e = parse("sample(normal(0, 1))").unwrap();
        let real = Type::real();
        let breal = Type::bayes(real.clone(), e.clone());
        assert!(subtype(&breal, &real, &[]));
        assert!(!subtype(&real, &breal, &[]));
        // Contravariant domain, covariant codomain.
        let f1 = Type::arrow(real.clone(), breal.clone());
        let f2 = Type::arrow(breal.clone(), real.clone());
        assert!(subtype(&f1, &f2, &[]));
        assert!(!subtype(&f2, &f1, &[]));
        assert!(!subtype(&Type::Fin(2), &Type::Fin(3), &[]));
        // Tensor is monotone in both arguments.
        let t1 = Type::tensor(breal.clone(), breal.clone());
        let t2 = Type::tensor(real.clone(), real.clone());
        assert!(subtype(&t1, &t2, &[]));
    }

    #[test]
    fn declared_axioms_extend_the_relation_transitively() {
        let e1 = parse("beta_dist(2, 2)").unwrap();
        let e2 = parse("sample(normal(0, 1))").unwrap();
        let beta = Type::bayes(Type::real(), e1);
        let norm = Type::bayes(Type::real(), e2);
        let axioms = vec![(beta.clone(), norm.clone())];
        assert!(subtype(&beta, &norm, &axioms));
        assert!(!subtype(&norm, &beta, &axioms));
        // Through a tensor and down to the carrier by transitivity.
        assert!(subtype(
            &Type::tensor(beta.clone(), Type::real()),
            &Type::tensor(norm.clone(), Type::real()),
            &axioms
        ));
        assert!(subtype(&beta, &Type::real(), &axioms));
    }

    #[test]
    fn context_algebra_matches_the_heap_picture() {
        let real = Type::real();
        let boolean = Type::bool_ty();
        let g1 = Context::from_pairs([(1, real.clone())]);
        let g2 = Context::from_pairs([(2, boolean.clone())]);
        assert!(g1.compatible(&g2));
        let u = g1.union(&g2);
        assert_eq!(u.get(1), real.clone());
        assert_eq!(u.get(2), boolean.clone());
        assert_eq!(g1.diff(&g2), g1);
        let conflict = Context::from_pairs([(1, boolean)]);
        assert!(!g1.compatible(&conflict));
        assert_eq!(u.as_type(), Type::tensor(real, Type::bool_ty()));
        assert_eq!(Context::empty().as_type(), Type::unit());
    }

    #[test]
    fn gaussian_program_types_at_the_inference_arrow() {
        let d = check_ok(
            &Context::empty(),
            "let x0 = sample(normal(0, 1)) in observe(sample(normal(x0, 1)))",
        );
        let prior = parse("sample(normal(0, 1))").unwrap();
        let marginal = parse("sample(normal(sample(normal(0, 1)), 1))").unwrap();
        let expect = Type::arrow(
            Type::bayes(Type::real(), marginal),
            Type::bayes(Type::real(), prior),
        );
        assert_eq!(d.result, JudgmentResult::Type(expect));
        assert!(d.ctx.is_empty());
    }

    #[test]
    fn two_assignments_produce_the_paired_store() {
        let ctx = Context::from_pairs([(1, Type::real()), (2, Type::real())]);
        let d = check_ok(&ctx, "x1 := 3.5 ; x2 := 7.3");
        let store = Context::from_pairs([
            (1, Type::bayes(Type::real(), parse("3.5").unwrap())),
            (2, Type::bayes(Type::real(), parse("7.3").unwrap())),
        ]);
        assert_eq!(d.result, JudgmentResult::Store(store.clone()));
        assert_eq!(
            store.as_type(),
            Type::tensor(
                Type::bayes(Type::real(), parse("3.5").unwrap()),
                Type::bayes(Type::real(), parse("7.3").unwrap())
            )
        );
    }

    #[test]
    fn geometric_loop_types_with_the_threaded_prior() {
        let ctx = Context::from_pairs([(0, Type::bool_ty())]);
        let d = check_ok(
            &ctx,
            "x0 := sample(bernoulli(0.5)) ; while x0 do x0 := sample(bernoulli(0.5))",
        );
        let prior = parse("sample(bernoulli(0.5))").unwrap();
        let expect = Context::from_pairs([(0, Type::bayes(Type::bool_ty(), prior))]);
        assert_eq!(d.result, JudgmentResult::Store(expect));
    }

    #[test]
    fn assignment_overwrites_and_reads_are_linear() {
        // Overwriting a slot with a value of a new type is fine in
        // sequence; the store carries the latest prior.
        let ctx = Context::from_pairs([(0, Type::int())]);
        let d = check_ok(&ctx, "x0 := 1 ; x0 := 2");
        let expect = Context::from_pairs([(0, Type::bayes(Type::int(), parse("2").unwrap()))]);
        assert_eq!(d.result, JudgmentResult::Store(expect));

        // Reading a slot consumes it: the output store loses it.
        let ctx = Context::from_pairs([(1, Type::real()), (2, Type::real())]);
        let d = check_ok(&ctx, "x1 := 3.5 ; x2 := addr(x1, 1.0)");
        assert_eq!(
            d.result,
            JudgmentResult::Store(Context::from_pairs([(2, Type::real())]))
        );
    }

    #[test]
    fn literals_follow_the_expected_slot_type() {
        let ctx = Context::from_pairs([(0, Type::real())]);
        let d = check_ok(&ctx, "x0 := 1");
        assert_eq!(
            d.result,
            JudgmentResult::Store(Context::from_pairs([(
                0,
                Type::bayes(Type::real(), parse("1").unwrap())
            )]))
        );
    }

    #[test]
    fn function_application_beta_types() {
        let d = check_ok(&Context::empty(), "(fn x0 . addr(x0, 1.0))(2.5)");
        assert_eq!(d.result, JudgmentResult::Type(Type::real()));
        let d = check_ok(&Context::empty(), "(fn x0 . x0)(3.5)");
        assert_eq!(d.result, JudgmentResult::Type(Type::real()));
    }

    #[test]
    fn sampler_and_sample_wrap_and_unwrap() {
        let d = check_ok(&Context::empty(), "sampler(sample(bernoulli(0.5)))");
        assert_eq!(d.result, JudgmentResult::Type(Type::m(Type::bool_ty())));
        let d = check_ok(&Context::empty(), "sample(normal(0, 1))");
        assert_eq!(d.result, JudgmentResult::Type(Type::real()));
    }

    #[test]
    fn named_side_conditions_fire_on_ill_typed_programs() {
        let real_at = |i| Context::from_pairs([(i, Type::real())]);
        assert_eq!(
            diag_rule(&real_at(1), "let x0 = x1 in x1"),
            "LetOverlappingContexts"
        );
        assert_eq!(
            diag_rule(&Context::empty(), "let x0 = 3.5 in 1.0"),
            "LetBinderNotConsumed"
        );
        assert_eq!(
            diag_rule(
                &Context::from_pairs([(0, Type::real()), (1, Type::real())]),
                "observe(addr(x0, x1))"
            ),
            "ObserveContextNotSingleton"
        );
        assert_eq!(
            diag_rule(&real_at(0), "observe(x0)"),
            "ObserveNeedsBayesianContext"
        );
        assert_eq!(
            diag_rule(&Context::empty(), "sampler(fn x0 . addr(x0, 1.0))"),
            "SamplerNeedsMeasureType"
        );
        assert_eq!(diag_rule(&Context::empty(), "sample(3.5)"), "SampleNeedsMType");
        assert_eq!(
            diag_rule(
                &Context::from_pairs([(0, Type::int())]),
                "if true then x0 := 1 else x0 := 2"
            ),
            "IfContextMismatch"
        );
        assert_eq!(
            diag_rule(
                &Context::from_pairs([(0, Type::real()), (1, Type::real())]),
                "if ltr(x0, x1) then addr(x0, x1) else mulr(x0, x1)"
            ),
            "IfContextNotOrderComplete"
        );
        assert_eq!(
            diag_rule(
                &Context::from_pairs([(0, Type::bool_ty()), (1, Type::int())]),
                "while x0 do x1 := 2"
            ),
            "WhileContextMismatch"
        );
        assert_eq!(
            diag_rule(&real_at(0), "addr(x0, x0)"),
            "BuiltinOverlappingContexts"
        );
        assert_eq!(
            diag_rule(&real_at(0), "(fn x1 . addr(x1, x0))(x0)"),
            "AppOverlappingContexts"
        );
        assert_eq!(
            diag_rule(&real_at(0), "x0 := eqr(x0, 1.0)"),
            "AssignSlotTypeConflict"
        );
        assert_eq!(diag_rule(&Context::empty(), "foo(1)"), "UnknownBuiltin");
        assert_eq!(diag_rule(&Context::empty(), "5@3"), "FinConstantOutOfRange");
        assert_eq!(
            diag_rule(&Context::from_pairs([(0, Type::int())]), "3.5 ; x0 := 1"),
            "SeqNeedsStores"
        );
        assert_eq!(
            diag_rule(
                &Context::from_pairs([(0, Type::int()), (1, Type::real())]),
                "x0 := 1 ; x1 := addr(x0, 1.0)"
            ),
            "SeqContextsIncompatible"
        );
        assert_eq!(diag_rule(&Context::empty(), "fn x0 . x0"), "FnBinderUndetermined");
        assert_eq!(
            diag_rule(&Context::empty(), "x0"),
            "VariableTypeUndetermined"
        );
        assert_eq!(
            diag_rule(&Context::empty(), "normal(1.0)"),
            "BuiltinArityMismatch"
        );
        assert_eq!(
            diag_rule(&real_at(3), "addr(1.0, 2.0)"),
            "ContextMismatch"
        );
    }

    #[test]
    fn validator_rejects_tampered_derivations() {
        let mut d = check_ok(&Context::empty(), "addr(1.0, 2.0)");
        d.result = JudgmentResult::Type(Type::int());
        assert!(validate_derivation(&d, &table(), &[]).is_err());

        let mut d = check_ok(&Context::empty(), "sample(normal(0, 1))");
        d.ctx = Context::from_pairs([(7, Type::real())]);
        assert!(validate_derivation(&d, &table(), &[]).is_err());
    }

    #[test]
    fn builtin_table_round_trips_through_json_and_rejects_junk() {
        let t = table();
        let json = serde_json::to_string(&t.to_json()).unwrap();
        let back = BuiltinTable::from_json(&json).unwrap();
        assert_eq!(back.get("normal"), t.get("normal"));
        assert_eq!(back.get("uniform_fin3"), t.get("uniform_fin3"));
        assert!(BuiltinTable::from_json("{\"f\": {\"args\": [\"wat\"], \"ret\": \"real\"}}").is_err());
        assert!(BuiltinTable::from_json("[1, 2]").is_err());

        let custom = BuiltinTable::from_json(
            "{\"sin\": {\"args\": [\"real\"], \"ret\": \"real\"}, \"pair_flip\": {\"args\": [], \"ret\": \"M fin(4)\"}}",
        )
        .unwrap();
        assert_eq!(
            custom.get("sin"),
            Some(&BuiltinSig {
                args: vec![GroundTy::Real(1)],
                ret: BuiltinRet::Ground(GroundTy::Real(1))
            })
        );
    }

    #[test]
    fn derivations_export_stable_json() {
        let d = check_ok(&Context::empty(), "addr(1.0, 2.0)");
        let v = d.to_json();
        assert_eq!(v["rule"], "builtin");
        assert_eq!(v["result"], "real");
        assert_eq!(v["premises"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn observe_in_a_declared_bayesian_context() {
        let prior = parse("sample(bernoulli(0.5))").unwrap();
        let ctx = Context::from_pairs([(0, Type::bayes(Type::bool_ty(), prior.clone()))]);
        let d = check_ok(&ctx, "observe(not(x0))");
        let marginal = parse("not(sample(bernoulli(0.5)))").unwrap();
        assert_eq!(
            d.result,
            JudgmentResult::Type(Type::arrow(
                Type::bayes(Type::bool_ty(), marginal),
                Type::bayes(Type::bool_ty(), prior)
            ))
        );
    }
}
