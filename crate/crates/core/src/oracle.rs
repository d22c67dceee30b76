//! Independent verifiers. Everything here recomputes expected answers from
//! first principles, sharing no evaluation code with the operator semantics:
//! an exact trace enumeration for discrete programs, conjugate-Gaussian
//! closed forms gated by direct numerical integration, a brute-force lattice
//! meet, and a seeded generator of well-typed programs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::finspace::{fmt_data, AtomData, MeasureVec, RegOperator};
use crate::syntax::{Term, TermKind};
use crate::types::{Context, Type};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration cannot evaluate `{0}`")]
    Unsupported(String),
    #[error("variable x{0} is unbound")]
    Unbound(u32),
    #[error("builtin `{0}` applied to ill-shaped values")]
    BadArgs(String),
    #[error("observation `{0}` has zero marginal mass")]
    ImpossibleObservation(String),
    #[error("program is not of the form `let xi = prior in observe(model)`")]
    NotAPosteriorProgram,
    #[error("meet search only supports up to 4 atoms, got {0}")]
    MeetTooLarge(usize),
}

// ---------------------------------------------------------------------------
// Exact values and trace enumeration

/// A runtime value of the discrete fragment. Numbers are exact; no grid is
/// involved anywhere in the oracle.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Fin { value: u64, card: u64 },
    Nat(Vec<i64>),
    Real(Vec<f64>),
    Cov(Vec<Vec<f64>>),
    Pair(Box<Value>, Box<Value>),
    Dist(Vec<(Value, f64)>),
    Closure { param: u32, body: Term, env: BTreeMap<u32, Value> },
}

impl Value {
    pub fn unit() -> Value {
        Value::Fin { value: 0, card: 1 }
    }

    pub fn bool(b: bool) -> Value {
        Value::Fin { value: b as u64, card: 2 }
    }

    /// The zero of a slot type: false, the zero integer, or the origin.
    pub fn zero_of(ty: &Type) -> Option<Value> {
        match ty {
            Type::Fin(m) => Some(Value::Fin { value: 0, card: *m }),
            Type::Int(n) => Some(Value::Nat(vec![0; *n as usize])),
            Type::Real(n) => Some(Value::Real(vec![0.0; *n as usize])),
            _ => None,
        }
    }

    fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Fin { value, card: 2 } => Some(*value == 1),
            _ => None,
        }
    }

    fn as_scalar_int(&self) -> Option<i64> {
        match self {
            Value::Nat(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    fn as_scalar_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) if v.len() == 1 => Some(v[0]),
            Value::Nat(v) if v.len() == 1 => Some(v[0] as f64),
            _ => None,
        }
    }

    /// Canonical label, shared with the atom labels of interpreted spaces.
    pub fn label(&self) -> String {
        fn data(v: &Value) -> AtomData {
            match v {
                Value::Fin { card: 1, .. } => AtomData::Opaque("()".to_string()),
                Value::Fin { value, card } => AtomData::Fin { value: *value, card: *card },
                Value::Nat(ns) => AtomData::IntVec(ns.clone()),
                Value::Real(rs) => AtomData::RealVec(rs.clone()),
                Value::Cov(m) => AtomData::PosDef(m.clone()),
                Value::Pair(l, r) => AtomData::Pair(Box::new(data(l)), Box::new(data(r))),
                Value::Dist(_) => AtomData::Opaque("<dist>".to_string()),
                Value::Closure { .. } => AtomData::Opaque("<fn>".to_string()),
            }
        }
        fmt_data(&data(self))
    }
}

pub type StoreVal = BTreeMap<u32, Value>;

/// One enumerated execution: its probability, the value of the whole term,
/// and the final store.
#[derive(Clone, Debug)]
pub struct TraceOutcome {
    pub prob: f64,
    pub value: Value,
    pub store: StoreVal,
}

/// The exact joint over all executions. Probabilities sum to at most one;
/// the deficit is mass lost to loops cut off at the unrolling bound.
#[derive(Clone, Debug)]
pub struct TraceDistribution {
    pub outcomes: Vec<TraceOutcome>,
    pub residual: f64,
}

impl TraceDistribution {
    pub fn total_mass(&self) -> f64 {
        self.outcomes.iter().map(|o| o.prob).sum()
    }

    /// Collapses the outcomes to value labels.
    pub fn by_value(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for o in &self.outcomes {
            *m.entry(o.value.label()).or_insert(0.0) += o.prob;
        }
        m
    }

    /// Collapses the outcomes to the labels of the given store slots,
    /// paired left to right in increasing slot order.
    pub fn by_store(&self, slots: &[u32]) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for o in &self.outcomes {
            *m.entry(store_label(&o.store, slots)).or_insert(0.0) += o.prob;
        }
        m
    }
}

pub fn store_label(store: &StoreVal, slots: &[u32]) -> String {
    let mut vals: Vec<Value> = Vec::new();
    for i in slots {
        vals.push(store.get(i).cloned().unwrap_or_else(Value::unit));
    }
    match vals.len() {
        0 => Value::unit().label(),
        1 => vals[0].label(),
        _ => {
            let first = vals.remove(0);
            vals.into_iter()
                .fold(first, |acc, v| Value::Pair(Box::new(acc), Box::new(v)))
                .label()
        }
    }
}

struct Enumerator {
    max_depth: usize,
    residual: f64,
}

/// Exhaustively expands every random choice in `t`, starting from the given
/// store. Loops unroll at most `max_depth` times; cut-off mass is reported
/// as the residual.
pub fn enumerate(
    t: &Term,
    input: &StoreVal,
    max_depth: usize,
) -> Result<TraceDistribution, OracleError> {
    let mut en = Enumerator { max_depth, residual: 0.0 };
    let mut out = Vec::new();
    en.eval(t, input, 1.0, &mut out)?;
    Ok(TraceDistribution { outcomes: out, residual: en.residual })
}

impl Enumerator {
    fn eval(
        &mut self,
        t: &Term,
        env: &StoreVal,
        weight: f64,
        out: &mut Vec<TraceOutcome>,
    ) -> Result<(), OracleError> {
        if weight == 0.0 {
            return Ok(());
        }
        match &t.kind {
            TermKind::ConstFin { value, card } => {
                out.push(TraceOutcome {
                    prob: weight,
                    value: Value::Fin { value: *value, card: *card },
                    store: env.clone(),
                });
                Ok(())
            }
            TermKind::ConstNat(ns) => {
                let v = Value::Nat(ns.iter().map(|n| *n as i64).collect());
                out.push(TraceOutcome { prob: weight, value: v, store: env.clone() });
                Ok(())
            }
            TermKind::ConstReal(rs) => {
                out.push(TraceOutcome {
                    prob: weight,
                    value: Value::Real(rs.clone()),
                    store: env.clone(),
                });
                Ok(())
            }
            TermKind::ConstPosDef(m) => {
                out.push(TraceOutcome {
                    prob: weight,
                    value: Value::Cov(m.clone()),
                    store: env.clone(),
                });
                Ok(())
            }
            TermKind::Var(i) => {
                let v = env.get(i).cloned().ok_or(OracleError::Unbound(*i))?;
                out.push(TraceOutcome { prob: weight, value: v, store: env.clone() });
                Ok(())
            }
            TermKind::Builtin(name, args) => {
                let mut branches: Vec<(f64, Vec<Value>, StoreVal)> =
                    vec![(weight, Vec::new(), env.clone())];
                for arg in args {
                    let mut next = Vec::new();
                    for (w, vals, st) in branches {
                        let mut sub = Vec::new();
                        self.eval(arg, &st, w, &mut sub)?;
                        for o in sub {
                            let mut vs = vals.clone();
                            vs.push(o.value);
                            next.push((o.prob, vs, o.store));
                        }
                    }
                    branches = next;
                }
                for (w, vals, st) in branches {
                    let v = apply_builtin(name, &vals)?;
                    out.push(TraceOutcome { prob: w, value: v, store: st });
                }
                Ok(())
            }
            TermKind::Assign(i, rhs) => {
                let mut sub = Vec::new();
                self.eval(rhs, env, weight, &mut sub)?;
                for o in sub {
                    let mut st = o.store;
                    st.insert(*i, o.value.clone());
                    out.push(TraceOutcome { prob: o.prob, value: o.value, store: st });
                }
                Ok(())
            }
            TermKind::Seq(e1, e2) => {
                let mut sub = Vec::new();
                self.eval(e1, env, weight, &mut sub)?;
                for o in sub {
                    self.eval(e2, &o.store, o.prob, out)?;
                }
                Ok(())
            }
            TermKind::LetIn(i, value, body) => {
                let saved = env.get(i).cloned();
                let mut sub = Vec::new();
                self.eval(value, env, weight, &mut sub)?;
                for o in sub {
                    let mut st = o.store;
                    st.insert(*i, o.value);
                    let mut body_out = Vec::new();
                    self.eval(body, &st, o.prob, &mut body_out)?;
                    for mut b in body_out {
                        match &saved {
                            Some(v) => {
                                b.store.insert(*i, v.clone());
                            }
                            None => {
                                b.store.remove(i);
                            }
                        }
                        out.push(b);
                    }
                }
                Ok(())
            }
            TermKind::Fn(param, body) => {
                out.push(TraceOutcome {
                    prob: weight,
                    value: Value::Closure {
                        param: *param,
                        body: (**body).clone(),
                        env: env.clone(),
                    },
                    store: env.clone(),
                });
                Ok(())
            }
            TermKind::App(fun, arg) => {
                let mut args = Vec::new();
                self.eval(arg, env, weight, &mut args)?;
                for a in args {
                    let mut funs = Vec::new();
                    self.eval(fun, &a.store, a.prob, &mut funs)?;
                    for f in funs {
                        match f.value {
                            Value::Closure { param, body, env: cenv } => {
                                let mut st = cenv;
                                st.insert(param, a.value.clone());
                                let mut body_out = Vec::new();
                                self.eval(&body, &st, f.prob, &mut body_out)?;
                                for b in body_out {
                                    out.push(TraceOutcome {
                                        prob: b.prob,
                                        value: b.value,
                                        store: f.store.clone(),
                                    });
                                }
                            }
                            _ => {
                                return Err(OracleError::Unsupported(
                                    "application of a non-function".to_string(),
                                ))
                            }
                        }
                    }
                }
                Ok(())
            }
            TermKind::If(c, a, b) => {
                let mut conds = Vec::new();
                self.eval(c, env, weight, &mut conds)?;
                for o in conds {
                    let branch = o
                        .value
                        .as_bool()
                        .ok_or_else(|| OracleError::BadArgs("if".to_string()))?;
                    let chosen = if branch { a } else { b };
                    self.eval(chosen, &o.store, o.prob, out)?;
                }
                Ok(())
            }
            TermKind::While(c, body) => self.eval_while(c, body, env, weight, self.max_depth, out),
            TermKind::Sample(e) => {
                let mut sub = Vec::new();
                self.eval(e, env, weight, &mut sub)?;
                for o in sub {
                    match o.value {
                        Value::Dist(pairs) => {
                            for (v, p) in pairs {
                                if p > 0.0 {
                                    out.push(TraceOutcome {
                                        prob: o.prob * p,
                                        value: v,
                                        store: o.store.clone(),
                                    });
                                }
                            }
                        }
                        _ => return Err(OracleError::BadArgs("sample".to_string())),
                    }
                }
                Ok(())
            }
            TermKind::Sampler(e) => {
                // One branch per possible value, each carrying the point
                // mass at that value: the unit of the probability monad,
                // pushed forward.
                let mut sub = Vec::new();
                self.eval(e, env, weight, &mut sub)?;
                for o in sub {
                    out.push(TraceOutcome {
                        prob: o.prob,
                        value: Value::Dist(vec![(o.value, 1.0)]),
                        store: o.store,
                    });
                }
                Ok(())
            }
            TermKind::Observe(_) => Err(OracleError::Unsupported(
                "observe (use posterior_enumerate)".to_string(),
            )),
        }
    }

    fn eval_while(
        &mut self,
        c: &Term,
        body: &Term,
        env: &StoreVal,
        weight: f64,
        depth: usize,
        out: &mut Vec<TraceOutcome>,
    ) -> Result<(), OracleError> {
        if weight == 0.0 {
            return Ok(());
        }
        let mut conds = Vec::new();
        self.eval(c, env, weight, &mut conds)?;
        for o in conds {
            let branch = o
                .value
                .as_bool()
                .ok_or_else(|| OracleError::BadArgs("while".to_string()))?;
            if !branch {
                out.push(TraceOutcome {
                    prob: o.prob,
                    value: Value::unit(),
                    store: o.store,
                });
            } else if depth == 0 {
                self.residual += o.prob;
            } else {
                let mut body_out = Vec::new();
                self.eval(body, &o.store, o.prob, &mut body_out)?;
                for b in body_out {
                    self.eval_while(c, body, &b.store, b.prob, depth - 1, out)?;
                }
            }
        }
        Ok(())
    }
}

fn apply_builtin(name: &str, vals: &[Value]) -> Result<Value, OracleError> {
    let bad = || OracleError::BadArgs(name.to_string());
    let bool2 = |f: fn(bool, bool) -> bool| -> Result<Value, OracleError> {
        match (vals[0].as_bool(), vals[1].as_bool()) {
            (Some(a), Some(b)) => Ok(Value::bool(f(a, b))),
            _ => Err(bad()),
        }
    };
    let int2 = |f: fn(i64, i64) -> i64| -> Result<Value, OracleError> {
        match (vals[0].as_scalar_int(), vals[1].as_scalar_int()) {
            (Some(a), Some(b)) => Ok(Value::Nat(vec![f(a, b).max(0)])),
            _ => Err(bad()),
        }
    };
    let intcmp = |f: fn(&i64, &i64) -> bool| -> Result<Value, OracleError> {
        match (vals[0].as_scalar_int(), vals[1].as_scalar_int()) {
            (Some(a), Some(b)) => Ok(Value::bool(f(&a, &b))),
            _ => Err(bad()),
        }
    };
    let real2 = |f: fn(f64, f64) -> f64| -> Result<Value, OracleError> {
        match (vals[0].as_scalar_real(), vals[1].as_scalar_real()) {
            (Some(a), Some(b)) => Ok(Value::Real(vec![f(a, b)])),
            _ => Err(bad()),
        }
    };
    let realcmp = |f: fn(&f64, &f64) -> bool| -> Result<Value, OracleError> {
        match (vals[0].as_scalar_real(), vals[1].as_scalar_real()) {
            (Some(a), Some(b)) => Ok(Value::bool(f(&a, &b))),
            _ => Err(bad()),
        }
    };
    match name {
        "or" => bool2(|a, b| a || b),
        "and" => bool2(|a, b| a && b),
        "not" => match vals[0].as_bool() {
            Some(a) => Ok(Value::bool(!a)),
            None => Err(bad()),
        },
        "addi" => int2(|a, b| a + b),
        "muli" => int2(|a, b| a * b),
        // Negation truncates at zero: the integer type is the naturals.
        "negi" => match vals[0].as_scalar_int() {
            Some(a) => Ok(Value::Nat(vec![(-a).max(0)])),
            None => Err(bad()),
        },
        "eqi" => intcmp(|a, b| a == b),
        "lti" => intcmp(|a, b| a < b),
        "addr" => real2(|a, b| a + b),
        "mulr" => real2(|a, b| a * b),
        "negr" => match vals[0].as_scalar_real() {
            Some(a) => Ok(Value::Real(vec![-a])),
            None => Err(bad()),
        },
        "eqr" => realcmp(|a, b| a == b),
        "ltr" => realcmp(|a, b| a < b),
        "bernoulli" => {
            let p = vals[0].as_scalar_real().ok_or_else(bad)?.clamp(0.0, 1.0);
            Ok(Value::Dist(vec![
                (Value::bool(false), 1.0 - p),
                (Value::bool(true), p),
            ]))
        }
        _ if name.starts_with("uniform_fin") => {
            let m: u64 = name["uniform_fin".len()..].parse().map_err(|_| bad())?;
            let p = 1.0 / m as f64;
            Ok(Value::Dist(
                (0..m).map(|k| (Value::Fin { value: k, card: m }, p)).collect(),
            ))
        }
        "normal" => Err(OracleError::Unsupported(
            "normal (continuous; not in the enumeration fragment)".to_string(),
        )),
        other => Err(OracleError::Unsupported(format!("builtin `{other}`"))),
    }
}

/// Exact posterior for programs of the shape
/// `let xi = <prior> in observe(<model>)`: enumerates the prior, weights each
/// prior value by the model's probability of producing the observed label,
/// and renormalizes.
pub fn posterior_enumerate(
    t: &Term,
    observed_label: &str,
    max_depth: usize,
) -> Result<(Vec<(String, f64)>, f64), OracleError> {
    let (i, prior, model) = match &t.kind {
        TermKind::LetIn(i, prior, body) => match &body.kind {
            TermKind::Observe(model) => (*i, prior, model),
            _ => return Err(OracleError::NotAPosteriorProgram),
        },
        _ => return Err(OracleError::NotAPosteriorProgram),
    };
    let prior_dist = enumerate(prior, &StoreVal::new(), max_depth)?;
    let mut weighted: Vec<(String, f64)> = Vec::new();
    let mut marginal = 0.0;
    for o in &prior_dist.outcomes {
        let mut env = StoreVal::new();
        env.insert(i, o.value.clone());
        let model_dist = enumerate(model, &env, max_depth)?;
        let likelihood: f64 = model_dist
            .outcomes
            .iter()
            .filter(|m| m.value.label() == observed_label)
            .map(|m| m.prob)
            .sum();
        let mass = o.prob * likelihood;
        marginal += mass;
        let label = o.value.label();
        match weighted.iter_mut().find(|(l, _)| *l == label) {
            Some((_, w)) => *w += mass,
            None => weighted.push((label, mass)),
        }
    }
    if marginal <= 0.0 {
        return Err(OracleError::ImpossibleObservation(observed_label.to_string()));
    }
    for (_, w) in &mut weighted {
        *w /= marginal;
    }
    Ok((weighted, marginal))
}

// ---------------------------------------------------------------------------
// Conjugate-Gaussian closed forms, gated by numerical integration

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussParams {
    pub mean: f64,
    pub sd: f64,
}

pub fn gaussian_marginal(prior: GaussParams, likelihood_sd: f64) -> GaussParams {
    GaussParams {
        mean: prior.mean,
        sd: (prior.sd * prior.sd + likelihood_sd * likelihood_sd).sqrt(),
    }
}

pub fn gaussian_posterior(prior: GaussParams, likelihood_sd: f64, y: f64) -> GaussParams {
    let v0 = prior.sd * prior.sd;
    let v = likelihood_sd * likelihood_sd;
    GaussParams {
        mean: (y * v0 + prior.mean * v) / (v0 + v),
        sd: (v0 * v / (v0 + v)).sqrt(),
    }
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Composite Simpson rule over [lo, hi] with an even number of panels.
fn simpson(lo: f64, hi: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + k as f64 * h);
    }
    acc * h / 3.0
}

/// Mean and standard deviation of the posterior density computed directly
/// by quadrature, with no appeal to conjugacy.
pub fn posterior_moments_by_quadrature(
    prior: GaussParams,
    likelihood_sd: f64,
    y: f64,
) -> GaussParams {
    let lo = prior.mean - 10.0 * prior.sd;
    let hi = prior.mean + 10.0 * prior.sd;
    let n = 20_000;
    let dens = |x: f64| normal_pdf(x, prior.mean, prior.sd) * normal_pdf(y, x, likelihood_sd);
    let z = simpson(lo, hi, n, dens);
    let mean = simpson(lo, hi, n, |x| x * dens(x)) / z;
    let var = simpson(lo, hi, n, |x| (x - mean) * (x - mean) * dens(x)) / z;
    GaussParams { mean, sd: var.sqrt() }
}

/// Mean and standard deviation of the prior-predictive (marginal) density
/// m(y) = ∫ p(x) p(y|x) dx, computed pointwise by quadrature.
pub fn marginal_moments_by_quadrature(prior: GaussParams, likelihood_sd: f64) -> GaussParams {
    let xlo = prior.mean - 10.0 * prior.sd;
    let xhi = prior.mean + 10.0 * prior.sd;
    let spread = (prior.sd * prior.sd + likelihood_sd * likelihood_sd).sqrt();
    let ylo = prior.mean - 10.0 * spread;
    let yhi = prior.mean + 10.0 * spread;
    let nx = 4_000;
    let m = |y: f64| {
        simpson(xlo, xhi, nx, |x| {
            normal_pdf(x, prior.mean, prior.sd) * normal_pdf(y, x, likelihood_sd)
        })
    };
    let ny = 2_000;
    let z = simpson(ylo, yhi, ny, m);
    let mean = simpson(ylo, yhi, ny, |y| y * m(y)) / z;
    let var = simpson(ylo, yhi, ny, |y| (y - mean) * (y - mean) * m(y)) / z;
    GaussParams { mean, sd: var.sqrt() }
}

// ---------------------------------------------------------------------------
// Brute-force lattice meet

/// Searches the constraint polytope
/// { 0 ≤ γ' ≤ γ : (Eγ')(branch row) = (Eγ)(branch row) }
/// for the coordinatewise infimum, by exhaustive grid search with box
/// refinement down to a resolution well below 1e-4.
pub fn meet_bruteforce(
    e: &RegOperator,
    gamma: &MeasureVec,
    want_true: bool,
) -> Result<MeasureVec, OracleError> {
    let n = gamma.coeffs.len();
    if n > 4 {
        return Err(OracleError::MeetTooLarge(n));
    }
    let row = if want_true { 1 } else { 0 };
    let coeff: Vec<f64> = (0..n).map(|j| e.entry(row, j)).collect();
    let target: f64 = (0..n).map(|j| coeff[j] * gamma.coeffs[j]).sum();
    let eps = 1e-12 * (1.0 + target.abs());

    // A candidate value v for coordinate i extends to a feasible point of
    // { 0 <= g' <= g : sum_j coeff[j] g'[j] = target } exactly when the other
    // coordinates can absorb the remainder target - coeff[i] v, i.e. when
    // that remainder lies in [0, sum of the other coordinates' maxima].
    let feasible = |i: usize, v: f64| {
        let rest_max: f64 = (0..n)
            .filter(|j| *j != i)
            .map(|j| coeff[j] * gamma.coeffs[j])
            .sum();
        let remainder = target - coeff[i] * v;
        remainder >= -eps && remainder <= rest_max + eps
    };

    let k = 16usize;
    let mut best = gamma.coeffs.clone();
    for i in 0..n {
        // Refined grid scan from below for the least feasible value.
        let mut lo = 0.0f64;
        let mut hi = gamma.coeffs[i];
        let mut found = gamma.coeffs[i];
        for _round in 0..6 {
            let step = (hi - lo) / k as f64;
            let mut hit = None;
            for s in 0..=k {
                let v = lo + s as f64 * step;
                if feasible(i, v) {
                    hit = Some(v);
                    break;
                }
            }
            match hit {
                Some(v) => {
                    found = v;
                    hi = v;
                    lo = (v - step).max(0.0);
                }
                None => break,
            }
            if step == 0.0 {
                break;
            }
        }
        best[i] = if found.abs() < 1e-9 { 0.0 } else { found };
    }
    Ok(MeasureVec::new(gamma.space.clone(), best).expect("search keeps the dimension"))
}

// ---------------------------------------------------------------------------
// Random well-typed program generator

#[derive(Clone, Debug)]
pub struct GenProgram {
    pub ctx: Context,
    pub term: Term,
}

#[derive(Clone, Copy, PartialEq)]
enum SlotKind {
    Bool,
    Fin(u64),
    Int,
}

impl SlotKind {
    fn ty(&self) -> Type {
        match self {
            SlotKind::Bool => Type::bool_ty(),
            SlotKind::Fin(m) => Type::Fin(*m),
            SlotKind::Int => Type::int(),
        }
    }
}

fn t(kind: TermKind) -> Term {
    Term::synth(kind)
}

fn var(i: u32) -> Term {
    t(TermKind::Var(i))
}

fn nat(n: u64) -> Term {
    t(TermKind::ConstNat(vec![n]))
}

fn call(name: &str, args: Vec<Term>) -> Term {
    t(TermKind::Builtin(name.to_string(), args))
}

fn sample(e: Term) -> Term {
    t(TermKind::Sample(Box::new(e)))
}

fn assign(i: u32, e: Term) -> Term {
    t(TermKind::Assign(i, Box::new(e)))
}

fn bernoulli_term(rng: &mut ChaCha8Rng) -> Term {
    let p = [0.25, 0.5, 0.75][rng.gen_range(0..3)];
    sample(call("bernoulli", vec![t(TermKind::ConstReal(vec![p]))]))
}

/// A closed expression of the slot's ground type.
fn closed_expr(rng: &mut ChaCha8Rng, kind: SlotKind) -> Term {
    match kind {
        SlotKind::Bool => match rng.gen_range(0..4) {
            0 => t(TermKind::ConstFin { value: rng.gen_range(0..2), card: 2 }),
            1 => call(
                "not",
                vec![t(TermKind::ConstFin { value: rng.gen_range(0..2), card: 2 })],
            ),
            _ => bernoulli_term(rng),
        },
        SlotKind::Fin(m) => {
            if rng.gen_bool(0.6) && (2..=6).contains(&m) {
                sample(call(&format!("uniform_fin{m}"), vec![]))
            } else {
                t(TermKind::ConstFin { value: rng.gen_range(0..m), card: m })
            }
        }
        SlotKind::Int => match rng.gen_range(0..3) {
            0 => nat(rng.gen_range(0..6)),
            1 => call("addi", vec![nat(rng.gen_range(0..4)), nat(rng.gen_range(0..4))]),
            _ => nat(rng.gen_range(0..6)),
        },
    }
}

/// A store command whose context and output store are exactly the one slot.
fn slot_command(rng: &mut ChaCha8Rng, i: u32, kind: SlotKind, depth: usize) -> Term {
    let choice = if depth == 0 { 0 } else { rng.gen_range(0..10) };
    match (choice, kind) {
        (0..=3, _) => assign(i, closed_expr(rng, kind)),
        (4, SlotKind::Int) => assign(i, call("addi", vec![var(i), nat(rng.gen_range(1..3))])),
        (5, SlotKind::Bool) => {
            // Loop until the coin lands false.
            t(TermKind::While(
                Box::new(var(i)),
                Box::new(assign(i, bernoulli_term(rng))),
            ))
        }
        (5, SlotKind::Int) => {
            // Count up to a bound.
            t(TermKind::While(
                Box::new(call("lti", vec![var(i), nat(rng.gen_range(2..5))])),
                Box::new(assign(i, call("addi", vec![var(i), nat(1)]))),
            ))
        }
        (6 | 7, SlotKind::Bool) => t(TermKind::If(
            Box::new(var(i)),
            Box::new(slot_command(rng, i, kind, depth - 1)),
            Box::new(slot_command(rng, i, kind, depth - 1)),
        )),
        (6 | 7, SlotKind::Int) => t(TermKind::If(
            Box::new(call("eqi", vec![var(i), nat(rng.gen_range(0..4))])),
            Box::new(slot_command(rng, i, kind, depth - 1)),
            Box::new(slot_command(rng, i, kind, depth - 1)),
        )),
        (8 | 9, _) => t(TermKind::Seq(
            Box::new(slot_command(rng, i, kind, depth - 1)),
            Box::new(slot_command(rng, i, kind, depth - 1)),
        )),
        (_, _) => assign(i, closed_expr(rng, kind)),
    }
}

/// A closed value-level expression (bare type, empty context).
fn closed_value_program(rng: &mut ChaCha8Rng, depth: usize) -> Term {
    match rng.gen_range(0..8) {
        0 => {
            // let-bind a sampled boolean and consume it
            let body = match rng.gen_range(0..3) {
                0 => call("not", vec![var(9)]),
                1 => call("or", vec![var(9), t(TermKind::ConstFin { value: 1, card: 2 })]),
                _ => var(9),
            };
            t(TermKind::LetIn(9, Box::new(bernoulli_term(rng)), Box::new(body)))
        }
        1 => {
            let m = rng.gen_range(2..5);
            t(TermKind::LetIn(
                9,
                Box::new(sample(call(&format!("uniform_fin{m}"), vec![]))),
                Box::new(var(9)),
            ))
        }
        2 => sample(t(TermKind::Sampler(Box::new(closed_expr(rng, SlotKind::Int))))),
        3 if depth > 0 => {
            // A conditional value in the empty context. The condition must be
            // deterministic: a stochastic closed condition would not partition
            // the (one-point) state, and the conditional semantics then counts
            // overlapping mass twice.
            let kind = [SlotKind::Bool, SlotKind::Int, SlotKind::Fin(3)][rng.gen_range(0..3)];
            t(TermKind::If(
                Box::new(t(TermKind::ConstFin { value: rng.gen_range(0..2), card: 2 })),
                Box::new(closed_expr(rng, kind)),
                Box::new(closed_expr(rng, kind)),
            ))
        }
        4 => t(TermKind::App(
            Box::new(t(TermKind::Fn(
                8,
                Box::new(call("addi", vec![var(8), nat(rng.gen_range(0..3))])),
            ))),
            Box::new(nat(rng.gen_range(0..4))),
        )),
        5 => call(
            "eqi",
            vec![nat(rng.gen_range(0..3)), nat(rng.gen_range(0..3))],
        ),
        _ => sample(call("bernoulli", vec![t(TermKind::ConstReal(vec![0.5]))])),
    }
}

/// Deterministically generates `count` well-typed programs of the discrete
/// fragment. Conditions always partition the state, so the conditional
/// semantics never duplicates mass, and `observe` never appears.
pub fn generate_programs(seed: u64, count: usize, max_depth: usize) -> Vec<GenProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [SlotKind::Bool, SlotKind::Fin(3), SlotKind::Fin(4), SlotKind::Int];
    let table = crate::types::BuiltinTable::standard();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // Conditional branches duplicate mass when their shared context is
        // empty and the condition is stochastic, so value programs here keep
        // conditions deterministic; store programs read slots, which is
        // always a partition.
        let candidate = if rng.gen_bool(0.25) {
            let depth = rng.gen_range(0..=max_depth.min(2));
            let term = closed_value_program(&mut rng, depth);
            GenProgram { ctx: Context::empty(), term }
        } else {
            let nslots = rng.gen_range(1..=2u32);
            let mut ctx = Context::empty();
            let mut cmds = Vec::new();
            for i in 0..nslots {
                let kind = kinds[rng.gen_range(0..kinds.len())];
                ctx.set(i, kind.ty());
                let depth = rng.gen_range(1..=max_depth.min(3));
                cmds.push(slot_command(&mut rng, i, kind, depth));
            }
            let mut term = cmds.remove(0);
            for c in cmds {
                term = t(TermKind::Seq(Box::new(term), Box::new(c)));
            }
            GenProgram { ctx, term }
        };
        // Deep recursion can re-read a slot after a closed write gave it a
        // prior, which the assignment rule rejects; such draws are skipped so
        // the output stream holds only well-typed programs.
        if crate::types::typecheck(&candidate.ctx, &candidate.term, &table).is_ok() {
            out.push(candidate);
        }
    }
    out
}
