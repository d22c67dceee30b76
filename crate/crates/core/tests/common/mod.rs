//! Shared driver for the program corpus: every `corpus/*.oppl` file is
//! typechecked, enumerated exhaustively, and interpreted as an operator,
//! and the two distributions are compared label by label.
//!
//! Expectations live next to each program in a `.expected.json` sidecar
//! written by the enumeration side. Run the corpus test with REGENERATE=1
//! to rewrite the sidecars after adding or editing a program.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use oppl_core::oracle::{self, StoreVal, Value};
use oppl_core::{
    denote, parse, typecheck_open, BuiltinTable, Denotation, DiscretizationConfig,
    JudgmentResult, MeasureVec, TermKind,
};
use serde::{Deserialize, Serialize};

/// Loops unroll this many times in the enumeration; the corpus programs all
/// leave residual mass far below the comparison tolerance at this depth.
const ENUM_DEPTH: usize = 800;

#[derive(Serialize, Deserialize, Default)]
pub struct Expected {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<u32>,
    #[serde(default)]
    pub dist: BTreeMap<String, f64>,
    #[serde(default)]
    pub residual: f64,
}

pub struct CaseOutcome {
    pub name: String,
    pub kind: String,
    pub error: Option<String>,
}

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn corpus_programs() -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(corpus_dir())
        .expect("corpus directory")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "oppl"))
        .collect();
    files.sort();
    files
}

/// Total-variation style distance between an operator column and a labelled
/// distribution: coefficients are matched on atom labels, and any mass the
/// expectation holds on labels missing from the space counts in full.
pub fn label_distance(got: &MeasureVec, want: &BTreeMap<String, f64>) -> f64 {
    let mut err = 0.0;
    let mut seen = 0.0;
    for i in 0..got.coeffs.len() {
        let w = want.get(&got.space.atom_label(i)).copied().unwrap_or(0.0);
        err += (got.coeffs[i] - w).abs();
        seen += w;
    }
    err + (want.values().sum::<f64>() - seen).abs()
}

fn is_posterior(kind: &TermKind) -> bool {
    matches!(&kind, TermKind::LetIn(_, _, body) if matches!(&body.kind, TermKind::Observe(_)))
}

/// Every consumed slot is fed its zero: false, 0, or 0.0.
fn zero_inputs(derivation: &oppl_core::Derivation) -> Result<StoreVal, String> {
    let mut input = StoreVal::new();
    for i in derivation.ctx.support() {
        let ty = derivation.ctx.get(i);
        input.insert(
            i,
            Value::zero_of(&ty).ok_or_else(|| format!("no zero input for slot x{i}: {ty}"))?,
        );
    }
    Ok(input)
}

/// Column of the program's operator fed by the zero inputs: the dirac at
/// the joint atom whose label matches the zero store.
fn input_column(op: &oppl_core::RegOperator, derivation: &oppl_core::Derivation) -> Result<MeasureVec, String> {
    let input = zero_inputs(derivation)?;
    let label = oracle::store_label(&input, &derivation.ctx.support());
    let j = op
        .dom
        .find_label(&label)
        .ok_or_else(|| format!("input atom `{label}` missing from the domain grid"))?;
    Ok(op.column_vec(j))
}

fn map_distance(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let mut err = 0.0;
    for (k, va) in a {
        err += (va - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, vb) in b {
        if !a.contains_key(k) {
            err += vb.abs();
        }
    }
    err
}

fn enumerate_expected(
    term: &oppl_core::Term,
    derivation: &oppl_core::Derivation,
    observe: Option<String>,
) -> Result<Expected, String> {
    if is_posterior(&term.kind) {
        let label = observe.ok_or("posterior program needs an `observe` label in its sidecar")?;
        let (weighted, marginal) = oracle::posterior_enumerate(term, &label, ENUM_DEPTH)
            .map_err(|e| format!("enumeration failed: {e:?}"))?;
        return Ok(Expected {
            kind: "posterior".into(),
            observe: Some(label),
            marginal: Some(marginal),
            slots: Vec::new(),
            dist: weighted.into_iter().collect(),
            residual: 0.0,
        });
    }
    let input = zero_inputs(derivation)?;
    let trace = oracle::enumerate(term, &input, ENUM_DEPTH)
        .map_err(|e| format!("enumeration failed: {e:?}"))?;
    let slots: Vec<u32> = match &derivation.result {
        JudgmentResult::Store(s) => s.support(),
        JudgmentResult::Type(_) => Vec::new(),
    };
    let (kind, dist) = if slots.is_empty() {
        ("value", trace.by_value())
    } else {
        ("store", trace.by_store(&slots))
    };
    Ok(Expected {
        kind: kind.into(),
        observe: None,
        marginal: None,
        slots,
        dist,
        residual: trace.residual,
    })
}

fn check_one(path: &Path, tolerance: f64, regenerate: bool) -> Result<String, String> {
    let table = BuiltinTable::standard();
    let src = fs::read_to_string(path).map_err(|e| format!("read failed: {e}"))?;
    let term = parse(&src).map_err(|ds| {
        let msgs: Vec<String> = ds.iter().map(|d| d.to_string()).collect();
        format!("parse failed: {}", msgs.join("; "))
    })?;
    let derivation = typecheck_open(&term, &table).map_err(|e| format!("typecheck failed: {e}"))?;

    let sidecar = path.with_extension("expected.json");
    let stored: Option<Expected> = match fs::read_to_string(&sidecar) {
        Ok(text) => {
            Some(serde_json::from_str(&text).map_err(|e| format!("bad sidecar: {e}"))?)
        }
        Err(_) => None,
    };
    let observe = stored.as_ref().and_then(|s| s.observe.clone());
    let fresh = enumerate_expected(&term, &derivation, observe)?;

    let expected = if regenerate {
        let mut text = serde_json::to_string_pretty(&fresh).map_err(|e| e.to_string())?;
        text.push('\n');
        fs::write(&sidecar, text).map_err(|e| format!("write failed: {e}"))?;
        fresh
    } else {
        let stored = stored.ok_or("no sidecar; rerun with REGENERATE=1")?;
        let drift = map_distance(&stored.dist, &fresh.dist)
            + (stored.residual - fresh.residual).abs()
            + (stored.marginal.unwrap_or(0.0) - fresh.marginal.unwrap_or(0.0)).abs();
        if stored.kind != fresh.kind || drift > 1e-12 {
            return Err(format!(
                "sidecar no longer matches enumeration (drift {drift:.3e}); rerun with REGENERATE=1"
            ));
        }
        stored
    };

    let cfg = DiscretizationConfig {
        while_tolerance: 1e-12,
        ..DiscretizationConfig::default()
    };
    let (den, _report) = denote(&derivation, &cfg, &table).map_err(|e| format!("denote failed: {e}"))?;

    let err = match (expected.kind.as_str(), den) {
        ("posterior", Denotation::Curried { dom, mut parts }) => {
            if dom.atom_count() != 1 {
                return Err("posterior program should be closed".into());
            }
            let g = match parts.remove(0) {
                Denotation::Matrix(op) => op,
                other => return Err(format!("expected an operator, got {other:?}")),
            };
            let label = expected.observe.as_deref().unwrap_or_default();
            let y = g
                .dom
                .find_label(label)
                .ok_or_else(|| format!("observation `{label}` carries no marginal mass"))?;
            label_distance(&g.column_vec(y), &expected.dist)
        }
        (_, Denotation::Matrix(op)) => label_distance(&input_column(&op, &derivation)?, &expected.dist),
        (kind, other) => {
            return Err(format!("{kind} program produced a mismatched denotation {other:?}"))
        }
    };
    if err > tolerance {
        return Err(format!("operator and enumeration disagree by {err:.3e}"));
    }
    Ok(expected.kind)
}

/// Runs every corpus program and returns one outcome per file.
pub fn check_corpus(tolerance: f64) -> Vec<CaseOutcome> {
    let regenerate = std::env::var("REGENERATE").is_ok_and(|v| v == "1");
    corpus_programs()
        .iter()
        .map(|path| {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            match check_one(path, tolerance, regenerate) {
                Ok(kind) => CaseOutcome { name, kind, error: None },
                Err(e) => CaseOutcome { name, kind: String::new(), error: Some(e) },
            }
        })
        .collect()
}
