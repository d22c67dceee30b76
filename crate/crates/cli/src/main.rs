//! `oppl`: typecheck programs, evaluate them to distributions, condition on
//! observations, and run the self-verification suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use oppl_core::denote::{denote, verify_theorem11, Denotation, DiscretizationConfig, EvalReport};
use oppl_core::finspace::{tv_norm, FinSpace, MeasureVec, RegOperator};
use oppl_core::kernels::{bayes_invert, fr, mr, pushforward, rn_derivative, rr, Kernel};
use oppl_core::oracle;
use oppl_core::syntax::parse;
use oppl_core::types::{typecheck, typecheck_open, BuiltinTable, Derivation, JudgmentResult};

#[derive(Parser)]
#[command(name = "oppl", version, about = "Probabilistic language driver")]
struct Cli {
    /// Discretization settings as a JSON file
    /// (real_grid.{lo,hi,bins}, int_max, while_tolerance, while_max_iter).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write the output document to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and typecheck a program; print its type or store.
    Typecheck {
        file: PathBuf,
        /// Dump the full derivation tree as well.
        #[arg(long)]
        derivation: bool,
    },
    /// Evaluate a program against an input measure and print the output
    /// distribution. Without --input, closed programs read the unit measure
    /// and open slots read a point mass at their first atom.
    Run {
        file: PathBuf,
        /// Input measure document ({"space": [...], "coeffs": [...]}).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Condition a model program on an observed value and print the
    /// posterior over the prior's support.
    Posterior {
        file: PathBuf,
        /// Observed value: an atom label or a number to snap to the grid.
        #[arg(long)]
        observe: String,
    },
    /// Run the internal verification suites.
    Verify {
        #[arg(long, value_enum)]
        suite: Option<Suite>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    /// Positivity and norm bounds on randomly generated programs.
    Th11,
    /// Denotation versus exhaustive enumeration on discrete programs.
    Oracle,
    /// Bayesian inversion and duality round-trips on random kernels.
    Naturality,
}

/// Failure carrying its exit code: 1 for parse/type errors, 2 for
/// evaluation errors.
struct Failure {
    code: u8,
    message: String,
}

fn front(msg: impl Into<String>) -> Failure {
    Failure { code: 1, message: msg.into() }
}

fn eval_err(msg: impl Into<String>) -> Failure {
    Failure { code: 2, message: msg.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(f) => {
            eprintln!("oppl: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let result = match &cli.command {
        Command::Typecheck { file, derivation } => cmd_typecheck(file, *derivation),
        Command::Run { file, input } => cmd_run(file, input.as_deref(), &cfg),
        Command::Posterior { file, observe } => cmd_posterior(file, observe, &cfg),
        Command::Verify { suite } => return cmd_verify(*suite, &cfg),
    };
    match result {
        Ok(doc) => {
            let text = format!("{}\n", serde_json::to_string_pretty(&doc).unwrap());
            match &cli.out {
                Some(path) => {
                    if let Err(e) = fs::write(path, &text) {
                        eprintln!("oppl: cannot write {}: {e}", path.display());
                        return ExitCode::from(2);
                    }
                }
                None => print!("{text}"),
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("oppl: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<DiscretizationConfig, Failure> {
    match path {
        None => Ok(DiscretizationConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| eval_err(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| eval_err(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn load_program(path: &Path) -> Result<Derivation, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| front(format!("cannot read {}: {e}", path.display())))?;
    let term = parse(&text).map_err(|diags| {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        front(format!("{}: {}", path.display(), lines.join("; ")))
    })?;
    let table = BuiltinTable::standard();
    typecheck_open(&term, &table).map_err(|d| front(format!("{}: {d}", path.display())))
}

fn cmd_typecheck(path: &Path, with_derivation: bool) -> Result<Value, Failure> {
    let d = load_program(path)?;
    let ctx: serde_json::Map<String, Value> = d
        .ctx
        .iter()
        .map(|(i, t)| (format!("x{i}"), Value::String(t.to_string())))
        .collect();
    let mut doc = json!({
        "ctx": ctx,
        "result": d.result.to_string(),
    });
    if with_derivation {
        doc["derivation"] = d.to_json();
    }
    Ok(doc)
}

#[derive(Deserialize)]
struct MeasureDoc {
    space: Vec<String>,
    coeffs: Vec<f64>,
}

fn load_input(path: &Path, dom: &FinSpace) -> Result<MeasureVec, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| eval_err(format!("cannot read {}: {e}", path.display())))?;
    let doc: MeasureDoc = serde_json::from_str(&text)
        .map_err(|e| eval_err(format!("bad input document: {e}")))?;
    if doc.space != dom.atom_labels() {
        return Err(eval_err(format!(
            "input space does not match the program's context space ({} atoms expected)",
            dom.atom_count()
        )));
    }
    if doc.coeffs.len() != dom.atom_count() {
        return Err(eval_err("input coefficient count does not match its space"));
    }
    MeasureVec::new(dom.clone(), doc.coeffs).map_err(|e| eval_err(e.to_string()))
}

fn distribution_doc(out: &MeasureVec, input_mass: f64, report: &EvalReport) -> Value {
    // Masses never grow, so the deficit is what failed to terminate or was
    // lost to conditioning; tiny negative rounding is clipped.
    let residual = (input_mass - out.total_mass()).max(0.0);
    let residual = if residual < 1e-15 { 0.0 } else { residual };
    json!({
        "space": out.space.atom_labels(),
        "coeffs": out.coeffs,
        "residual_mass": residual,
        "clamped_mass": report.clamped_mass,
    })
}

fn cmd_run(
    path: &Path,
    input: Option<&Path>,
    cfg: &DiscretizationConfig,
) -> Result<Value, Failure> {
    let d = load_program(path)?;
    let table = BuiltinTable::standard();
    let (den, report) = denote(&d, cfg, &table).map_err(|e| eval_err(e.to_string()))?;
    for w in &report.warnings {
        eprintln!("oppl: warning: {w}");
    }
    match den {
        Denotation::Matrix(op) => {
            let mu = match input {
                Some(p) => load_input(p, &op.dom)?,
                None => MeasureVec::dirac(&op.dom, 0),
            };
            let out = op.apply(&mu);
            Ok(distribution_doc(&out, mu.total_mass(), &report))
        }
        Denotation::FormalMeasure(terms) => {
            // Closed measure-of-measures value: list the component
            // distributions with their weights.
            let parts: Vec<Value> = terms
                .iter()
                .map(|(w, dist)| {
                    json!({
                        "weight": w,
                        "space": dist.space.atom_labels(),
                        "coeffs": dist.coeffs,
                    })
                })
                .collect();
            let total: f64 = terms.iter().map(|(w, _)| w).sum();
            Ok(json!({
                "formal_terms": parts,
                "residual_mass": (1.0 - total).max(0.0),
                "clamped_mass": report.clamped_mass,
            }))
        }
        Denotation::Curried { .. } => Err(eval_err(
            "program denotes a function; use `posterior` to condition it",
        )),
    }
}

fn cmd_posterior(
    path: &Path,
    observe: &str,
    cfg: &DiscretizationConfig,
) -> Result<Value, Failure> {
    let d = load_program(path)?;
    let table = BuiltinTable::standard();
    let (den, report) = denote(&d, cfg, &table).map_err(|e| eval_err(e.to_string()))?;
    let g = match den {
        Denotation::Curried { dom, mut parts } if dom.atom_count() == 1 => {
            match parts.remove(0) {
                Denotation::Matrix(op) => op,
                _ => return Err(eval_err("conditioning produced a nested function")),
            }
        }
        Denotation::Curried { .. } => Err(eval_err(
            "program has free slots; posterior queries need a closed model",
        ))?,
        _ => {
            return Err(eval_err(
                "program does not denote a conditioning function (no observe?)",
            ))
        }
    };
    let (atom, snap) = find_observed_atom(&g.dom, observe)?;
    let post = g.column_vec(atom);
    let mut doc = distribution_doc(&post, 1.0, &report);
    doc["observed_atom"] = Value::String(g.dom.atom_label(atom));
    doc["snap_distance"] = json!(snap);
    Ok(doc)
}

/// Resolves an observed value to an atom of the marginal's support: first by
/// exact label, then numerically against real-valued atoms.
fn find_observed_atom(space: &FinSpace, observe: &str) -> Result<(usize, f64), Failure> {
    if let Some(i) = space.find_label(observe) {
        return Ok((i, 0.0));
    }
    if let Ok(y) = observe.parse::<f64>() {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..space.atom_count() {
            if let Some(x) = space.atom_data(i).as_real() {
                let dist = (x - y).abs();
                if best.map_or(true, |(_, b)| dist < b) {
                    best = Some((i, dist));
                }
            }
        }
        if let Some(found) = best {
            return Ok(found);
        }
    }
    Err(eval_err(format!(
        "observation `{observe}` has no mass under the model's marginal \
         (no matching atom in its support)"
    )))
}

// ---------------------------------------------------------------------------
// Verification suites

fn cmd_verify(suite: Option<Suite>, cfg: &DiscretizationConfig) -> ExitCode {
    let run_all = suite.is_none();
    let mut ok = true;
    if run_all || suite == Some(Suite::Th11) {
        ok &= print_suite("th11", suite_th11(cfg));
    }
    if run_all || suite == Some(Suite::Oracle) {
        ok &= print_suite("oracle", suite_oracle(cfg));
    }
    if run_all || suite == Some(Suite::Naturality) {
        ok &= print_suite("naturality", suite_naturality());
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn print_suite(name: &str, outcome: Result<String, String>) -> bool {
    match outcome {
        Ok(detail) => {
            println!("suite {name}: pass ({detail})");
            true
        }
        Err(detail) => {
            println!("suite {name}: FAIL ({detail})");
            false
        }
    }
}

/// Every generated program must denote a positive operator of norm at most
/// one, in every component of its denotation.
fn suite_th11(cfg: &DiscretizationConfig) -> Result<String, String> {
    let table = BuiltinTable::standard();
    let programs = oracle::generate_programs(0x7e11, 150, 5);
    for (k, p) in programs.iter().enumerate() {
        let d = typecheck(&p.ctx, &p.term, &table)
            .map_err(|e| format!("program {k} failed to typecheck: {e}"))?;
        let (den, _) = denote(&d, cfg, &table)
            .map_err(|e| format!("program {k} failed to evaluate: {e}"))?;
        let rep = verify_theorem11(&den);
        if !rep.pass {
            return Err(format!(
                "program {k} breaks the bound: {}",
                rep.witness.unwrap_or_default()
            ));
        }
    }
    Ok(format!(
        "{} programs, min entry >= -1e-12, regular norm <= 1+1e-9",
        programs.len()
    ))
}

/// Denotation agrees with exhaustive trace enumeration on discrete programs.
fn suite_oracle(cfg: &DiscretizationConfig) -> Result<String, String> {
    let table = BuiltinTable::standard();
    let programs = oracle::generate_programs(0x0bac1e, 80, 4);
    let mut compared = 0usize;
    for (k, p) in programs.iter().enumerate() {
        let d = typecheck(&p.ctx, &p.term, &table)
            .map_err(|e| format!("program {k} failed to typecheck: {e}"))?;
        let (den, _) = denote(&d, cfg, &table)
            .map_err(|e| format!("program {k} failed to evaluate: {e}"))?;
        let op = match den {
            Denotation::Matrix(op) => op,
            _ => continue,
        };
        let mut input = oracle::StoreVal::new();
        for (i, ty) in p.ctx.iter() {
            input.insert(*i, oracle::Value::zero_of(ty).ok_or("slot with no zero value")?);
        }
        let trace = match oracle::enumerate(&p.term, &input, 600) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let slots: Vec<u32> = match &d.result {
            JudgmentResult::Store(s) => s.support(),
            JudgmentResult::Type(_) => Vec::new(),
        };
        let expected = if slots.is_empty() {
            trace.by_value()
        } else {
            trace.by_store(&slots)
        };
        let got = op.column_vec(0);
        let mut err = 0.0;
        let mut seen = 0.0;
        for i in 0..got.coeffs.len() {
            let want = expected.get(&got.space.atom_label(i)).copied().unwrap_or(0.0);
            err += (got.coeffs[i] - want).abs();
            seen += want;
        }
        err += (expected.values().sum::<f64>() - seen).abs();
        if err > 1e-6 {
            return Err(format!("program {k} disagrees with enumeration by {err}"));
        }
        compared += 1;
    }
    Ok(format!("{compared} discrete programs within 1e-6 of enumeration"))
}

/// Bayesian inversion is an involution that recovers the prior, and the
/// Radon-Nikodym / functional-representation pairs invert each other.
fn suite_naturality() -> Result<String, String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xa7a11);
    let rounds = 100;
    for round in 0..rounds {
        let nx = rng.gen_range(1..=5usize);
        let ny = rng.gen_range(1..=5usize);
        let x = FinSpace::fin(nx as u64);
        let y = FinSpace::fin(ny as u64);
        let mut mu = MeasureVec::new(
            x.clone(),
            (0..nx).map(|_| rng.gen_range(0.05..1.0)).collect(),
        )
        .unwrap();
        let total = mu.total_mass();
        mu = mu.scale(1.0 / total);
        let f = Kernel::new(RegOperator::from_fn(&x, &y, |_, _| rng.gen_range(0.01..1.0)));
        let cols: Vec<MeasureVec> = (0..nx)
            .map(|j| {
                let c = f.column(j);
                let m = c.total_mass();
                c.scale(1.0 / m)
            })
            .collect();
        let f = Kernel::from_columns(&x, &cols);

        let nu = pushforward(&f, &mu);
        let finv = bayes_invert(&f, &mu).map_err(|e| format!("round {round}: {e:?}"))?;
        let back = pushforward(&finv, &nu);
        if tv_norm(&back.sub(&mu)) > 1e-12 {
            return Err(format!("round {round}: inversion does not recover the prior"));
        }
        let fback = bayes_invert(&finv, &nu).map_err(|e| format!("round {round}: {e:?}"))?;
        for xi in 0..nx {
            if mu.coeffs[xi] == 0.0 {
                continue;
            }
            let d = fback.column(xi).sub(&f.column(xi));
            if tv_norm(&d) > 1e-12 {
                return Err(format!("round {round}: double inversion drifts at {xi}"));
            }
        }

        // Radon-Nikodym then multiply-back, on a measure dominated by mu.
        let dominated = MeasureVec::new(
            x.clone(),
            mu.coeffs.iter().map(|c| c * rng.gen_range(0.0..2.0)).collect(),
        )
        .unwrap();
        let density = rn_derivative(&dominated, &mu).map_err(|e| format!("{e:?}"))?;
        let recovered = mr(&density, &mu);
        if tv_norm(&recovered.sub(&dominated)) > 1e-12 {
            return Err(format!("round {round}: rn/mr round-trip failed"));
        }
        let functional = fr(&mu);
        let diag = rr(&functional, &mu);
        if tv_norm(&diag.sub(&mu)) > 1e-12 {
            return Err(format!("round {round}: fr/rr round-trip failed"));
        }
    }
    Ok(format!("{rounds} random kernels, round-trips within 1e-12"))
}
