//! End-to-end acceptance checks, one test per shipped guarantee. Each test
//! prints a single summary line (visible with `--nocapture`) and fails loudly
//! when its tolerance is exceeded.

mod common;

use std::time::Instant;

use oppl_core::finspace::{tv_norm, FinSpace, MeasureVec, RegOperator};
use oppl_core::kernels::{bayes_invert, fr, mr, pushforward, rn_derivative, rr, Kernel};
use oppl_core::oracle::{self};
use oppl_core::{
    cond_restrict, denote, parse, typecheck, typecheck_open, verify_theorem11, BuiltinTable,
    Denotation, DiscretizationConfig, JudgmentResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn check(src: &str) -> oppl_core::Derivation {
    let table = BuiltinTable::standard();
    let term = parse(src).expect("parse");
    typecheck_open(&term, &table).expect("typecheck")
}

fn denote_matrix(src: &str, cfg: &DiscretizationConfig) -> RegOperator {
    let table = BuiltinTable::standard();
    let d = check(src);
    match denote(&d, cfg, &table).expect("denote").0 {
        Denotation::Matrix(op) => op,
        other => panic!("expected an operator denotation, got {other:?}"),
    }
}

/// Mass a normal law assigns to the grid bin centred at `x`, with the two
/// edge bins absorbing their tails. Mirrors the interpreter's binning so the
/// comparison isolates the conjugacy claim rather than the discretizer.
fn normal_bin_mass(x: f64, lo: f64, hi: f64, step: f64, mean: f64, sd: f64) -> f64 {
    let n = Normal::new(mean, sd).unwrap();
    let left = if x <= lo { 0.0 } else { n.cdf(x - step / 2.0) };
    let right = if x >= hi { 1.0 } else { n.cdf(x + step / 2.0) };
    right - left
}

fn gaussian_tv(col: &MeasureVec, cfg: &DiscretizationConfig, mean: f64, sd: f64) -> f64 {
    let g = &cfg.real_grid;
    let step = (g.hi - g.lo) / (g.bins as f64 - 1.0);
    let mut err = 0.0;
    let mut covered = 0.0;
    for i in 0..col.coeffs.len() {
        let x = col.space.atom_data(i).as_real().expect("real atom");
        let want = normal_bin_mass(x, g.lo, g.hi, step, mean, sd);
        err += (col.coeffs[i] - want).abs();
        covered += want;
    }
    err + (1.0 - covered).abs()
}

#[test]
fn criterion_1_gaussian_conjugacy() {
    let started = Instant::now();
    let cfg = DiscretizationConfig::default();

    let marginal = denote_matrix("sample(normal(sample(normal(0, 1)), 1))", &cfg);
    let tv_marginal = gaussian_tv(&marginal.column_vec(0), &cfg, 0.0, 2f64.sqrt());
    assert!(tv_marginal <= 2e-3, "marginal TV {tv_marginal:.3e} exceeds 2e-3");

    let table = BuiltinTable::standard();
    let d = check("let x0 = sample(normal(0, 1)) in observe(sample(normal(x0, 1)))");
    let g = match denote(&d, &cfg, &table).expect("denote").0 {
        Denotation::Curried { dom, mut parts } => {
            assert_eq!(dom.atom_count(), 1);
            match parts.remove(0) {
                Denotation::Matrix(op) => op,
                other => panic!("expected an operator value, got {other:?}"),
            }
        }
        other => panic!("expected a function denotation, got {other:?}"),
    };
    let y = g.dom.find_label("1").expect("observation atom");
    let tv_posterior = gaussian_tv(&g.column_vec(y), &cfg, 0.5, 0.5f64.sqrt());
    assert!(tv_posterior <= 2e-3, "posterior TV {tv_posterior:.3e} exceeds 2e-3");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:.2?}, limit 10s");
    println!(
        "criterion 1: PASS marginal TV {tv_marginal:.3e}, posterior TV {tv_posterior:.3e} (<= 2e-3), {elapsed:.2?}"
    );
}

#[test]
fn criterion_2_programs_denote_positive_contractions() {
    let started = Instant::now();
    let cfg = DiscretizationConfig::default();
    let table = BuiltinTable::standard();
    let programs = oracle::generate_programs(0x51ab_7e11, 500, 6);
    let mut worst_entry = 0.0f64;
    let mut worst_norm = 1.0f64;
    for (k, p) in programs.iter().enumerate() {
        let d = typecheck(&p.ctx, &p.term, &table)
            .unwrap_or_else(|e| panic!("program {k} failed to typecheck: {e}"));
        let (den, _) = denote(&d, &cfg, &table)
            .unwrap_or_else(|e| panic!("program {k} failed to evaluate: {e}"));
        let report = verify_theorem11(&den);
        assert!(
            report.pass,
            "program {k} violates positivity/contraction: {:?}",
            report.witness
        );
        worst_entry = worst_entry.min(report.worst_min_entry);
        worst_norm = worst_norm.max(report.worst_norm);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:.2?}, limit 5min");
    println!(
        "criterion 2: PASS 500 programs, min entry {worst_entry:.3e} (>= -1e-12), max norm {worst_norm:.12} (<= 1+1e-9), {elapsed:.2?}"
    );
}

#[test]
fn criterion_3_corpus_matches_enumeration() {
    let outcomes = common::check_corpus(1e-9);
    assert!(outcomes.len() >= 30, "corpus holds only {} programs", outcomes.len());
    let posteriors = outcomes.iter().filter(|o| o.kind == "posterior").count();
    assert!(posteriors >= 1, "corpus must include posterior programs");
    let failures: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.error.as_ref().map(|e| format!("  {}: {e}", o.name)))
        .collect();
    assert!(failures.is_empty(), "corpus failures:\n{}", failures.join("\n"));
    println!(
        "criterion 3: PASS {} programs ({} posteriors) within 1e-9 of enumeration",
        outcomes.len(),
        posteriors
    );
}

#[test]
fn criterion_4_bayesian_inversion_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce5504);
    let rounds = 100;
    for round in 0..rounds {
        let nx = rng.gen_range(1..=5usize);
        let ny = rng.gen_range(1..=5usize);
        let x = FinSpace::fin(nx as u64);
        let y = FinSpace::fin(ny as u64);
        let mut mu =
            MeasureVec::new(x.clone(), (0..nx).map(|_| rng.gen_range(0.05..1.0)).collect())
                .unwrap();
        let mass = mu.total_mass();
        mu = mu.scale(1.0 / mass);
        let raw = Kernel::new(RegOperator::from_fn(&x, &y, |_, _| rng.gen_range(0.01..1.0)));
        let cols: Vec<MeasureVec> = (0..nx)
            .map(|j| {
                let c = raw.column(j);
                let m = c.total_mass();
                c.scale(1.0 / m)
            })
            .collect();
        let f = Kernel::from_columns(&x, &cols);

        let nu = pushforward(&f, &mu);
        let finv = bayes_invert(&f, &mu).expect("inversion");
        let back = pushforward(&finv, &nu);
        for i in 0..nx {
            assert!(
                (back.coeffs[i] - mu.coeffs[i]).abs() <= 1e-12,
                "round {round}: prior not recovered at atom {i}"
            );
        }
        let fback = bayes_invert(&finv, &nu).expect("double inversion");
        for j in 0..nx {
            if mu.coeffs[j] == 0.0 {
                continue;
            }
            let a = fback.column(j);
            let b = f.column(j);
            for i in 0..ny {
                assert!(
                    (a.coeffs[i] - b.coeffs[i]).abs() <= 1e-12,
                    "round {round}: double inversion drifts at ({i},{j})"
                );
            }
        }
    }
    println!("criterion 4: PASS {rounds} (kernel, prior) pairs, both laws within 1e-12");
}

#[test]
fn criterion_5_representation_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e9f_0011);
    let rounds = 100;
    for round in 0..rounds {
        let n = rng.gen_range(1..=6usize);
        let sp = FinSpace::fin(n as u64);
        let mu =
            MeasureVec::new(sp.clone(), (0..n).map(|_| rng.gen_range(0.05..1.0)).collect())
                .unwrap();

        // density -> measure -> density
        let density =
            MeasureVec::new(sp.clone(), (0..n).map(|_| rng.gen_range(0.0..3.0)).collect())
                .unwrap();
        let nu = mr(&density, &mu);
        let back = rn_derivative(&nu, &mu).expect("derivative");
        for i in 0..n {
            assert!(
                (back.coeffs[i] - density.coeffs[i]).abs() <= 1e-12,
                "round {round}: rn(mr(d)) != d at atom {i}"
            );
        }
        // measure -> density -> measure
        let dominated = MeasureVec::new(
            sp.clone(),
            mu.coeffs.iter().map(|c| c * rng.gen_range(0.0..2.0)).collect(),
        )
        .unwrap();
        let d2 = rn_derivative(&dominated, &mu).expect("derivative");
        let recovered = mr(&d2, &mu);
        assert!(
            tv_norm(&recovered.sub(&dominated)) <= 1e-12,
            "round {round}: mr(rn(nu)) != nu"
        );

        // functional representation and back
        let functional = fr(&mu);
        let diag = rr(&functional, &mu);
        assert!(tv_norm(&diag.sub(&mu)) <= 1e-12, "round {round}: rr(fr(mu)) != mu");
        let phi = MeasureVec::new(sp.clone(), (0..n).map(|_| rng.gen_range(0.0..2.0)).collect())
            .unwrap();
        let back_phi = fr(&rr(&phi, &mu));
        for i in 0..n {
            assert!(
                (back_phi.coeffs[i] - phi.coeffs[i]).abs() <= 1e-12,
                "round {round}: fr(rr(phi)) != phi at atom {i}"
            );
        }
    }
    println!("criterion 5: PASS {rounds} RN/MR and FR/RR round trips within 1e-12");
}

#[test]
fn criterion_6_projective_norm_isometry() {
    use oppl_core::finspace::projective_norm_bruteforce;
    let mut rng = ChaCha8Rng::seed_from_u64(0x150_3717);
    let rounds = 50;
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let m = rng.gen_range(1..=3usize);
        let n = rng.gen_range(1..=3usize);
        let sp = FinSpace::tensor(&FinSpace::fin(m as u64), &FinSpace::fin(n as u64));
        let v = MeasureVec::new(
            sp,
            (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pi = projective_norm_bruteforce(&v, 9).expect("search");
        let tv = tv_norm(&v);
        let gap = (pi - tv).abs();
        assert!(gap <= 1e-6, "round {round}: projective {pi} vs tv {tv}");
        worst = worst.max(gap);
    }
    println!("criterion 6: PASS {rounds} tensors, worst |pi - tv| {worst:.3e} (<= 1e-6)");
}

#[test]
fn criterion_7_conditional_meet() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de_4a11);
    let bool_space = FinSpace::fin(2);
    let rounds = 100;
    for round in 0..rounds {
        let n = rng.gen_range(1..=4usize);
        let dom = FinSpace::fin(n as u64);
        let mut e = RegOperator::from_fn(&dom, &bool_space, |_, _| {
            if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        });
        for j in 0..n {
            let s = e.entry(0, j) + e.entry(1, j);
            if s > 0.0 {
                *e.entry_mut(0, j) /= s;
                *e.entry_mut(1, j) /= s;
            }
        }
        let gamma =
            MeasureVec::new(dom.clone(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
        for branch in [true, false] {
            let fast = cond_restrict(&e, branch).apply(&gamma);
            let slow = oracle::meet_bruteforce(&e, &gamma, branch).expect("search");
            for i in 0..n {
                assert!(
                    (fast.coeffs[i] - slow.coeffs[i]).abs() <= 1e-4,
                    "round {round} branch {branch} atom {i}: {} vs {}",
                    fast.coeffs[i],
                    slow.coeffs[i]
                );
            }
        }
    }

    // Measurable-set recovery: a deterministic test restricts a measure to
    // the set, exactly, coordinate by coordinate.
    let mut exact_checks = 0;
    for round in 0..rounds {
        let n = rng.gen_range(1..=6usize);
        let dom = FinSpace::fin(n as u64);
        let in_set: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let e = RegOperator::from_fn(&dom, &bool_space, |t, s| {
            if in_set[s] == (t == 1) {
                1.0
            } else {
                0.0
            }
        });
        let mu =
            MeasureVec::new(dom.clone(), (0..n).map(|_| rng.gen_range(0.0..2.0)).collect())
                .unwrap();
        let restricted = cond_restrict(&e, true).apply(&mu);
        for i in 0..n {
            let want = if in_set[i] { mu.coeffs[i] } else { 0.0 };
            assert!(
                restricted.coeffs[i] == want,
                "round {round}: restriction must be exact at atom {i}"
            );
            exact_checks += 1;
        }
    }
    println!(
        "criterion 7: PASS {rounds} meet searches within 1e-4, {exact_checks} exact set-restriction coordinates"
    );
}

#[test]
fn criterion_8_typing_goldens() {
    let gauss = check("let x0 = sample(normal(0, 1)) in observe(sample(normal(x0, 1)))");
    let got = gauss.result_type().to_string();
    let want =
        "((real, sample(normal(sample(normal(0, 1)), 1))) -> (real, sample(normal(0, 1))))";
    assert_eq!(got, want, "observation program type drifted");

    let pair = check("x1 := 3.5 ; x2 := 7.3");
    let store = match &pair.result {
        JudgmentResult::Store(s) => s.clone(),
        other => panic!("expected a store result, got {other}"),
    };
    assert_eq!(store.as_type().to_string(), "((real, 3.5) (x) (real, 7.3))");

    let table = BuiltinTable::standard();
    let negatives: &[(&str, &str)] = &[
        ("or(x0, x0)", "BuiltinOverlappingContexts"),
        ("x0 := sample(bernoulli(0.5)) ; x0 := not(x0)", "AssignSlotTypeConflict"),
        ("if x0 then x1 := true else x2 := true", "IfBranchTypeMismatch"),
        ("if sample(bernoulli(0.5)) then x0 := true else x0 := false", "IfContextMismatch"),
        ("while x0 do x1 := sample(bernoulli(0.5))", "WhileContextMismatch"),
        (
            "while and(x0, lti(x1, 3)) do (x0 := not(x0) ; x1 := addi(x1, 1))",
            "WhileContextNotOrderComplete",
        ),
        ("while x0 do not(x0)", "WhileBodyStoreMismatch"),
        ("eqi(1, bernoulli(0.5))", "TypeMismatch"),
        ("frobnicate(1)", "UnknownBuiltin"),
        ("addi(1)", "BuiltinArityMismatch"),
        ("x0", "VariableTypeUndetermined"),
        ("sample(3)", "SampleNeedsMType"),
        ("observe(sample(bernoulli(0.5)))", "ObserveContextNotSingleton"),
        ("let x3 = sample(bernoulli(0.5)) in true", "LetBinderNotConsumed"),
        ("fn x2 . x2", "FnBinderUndetermined"),
        ("3(4)", "AppNotAFunction"),
        ("x1 := 2 ; 5", "SeqNeedsStores"),
    ];
    for (src, rule) in negatives {
        let term = parse(src).expect("negative programs still parse");
        match typecheck_open(&term, &table) {
            Ok(d) => panic!("`{src}` should be rejected, got {}", d.result_type()),
            Err(e) => assert_eq!(
                e.rule, *rule,
                "`{src}` rejected for the wrong reason: [{}] {}",
                e.rule, e.message
            ),
        }
    }
    println!(
        "criterion 8: PASS observation + store goldens, {} rejections with named side conditions",
        negatives.len()
    );
}

#[test]
fn criterion_9_loop_convergence() {
    let table = BuiltinTable::standard();
    let cfg = DiscretizationConfig::default();

    let started = Instant::now();
    let d = check("x0 := sample(bernoulli(0.5)) ; while x0 do x0 := sample(bernoulli(0.5))");
    let (_, report) = denote(&d, &cfg, &table).expect("denote");
    let geometric_time = started.elapsed();
    let geometric_residual = report.loop_residual;
    assert!(
        geometric_residual <= 2f64.powi(-30),
        "geometric loop residual {geometric_residual} exceeds 2^-30"
    );
    assert!(geometric_time.as_secs_f64() < 1.0, "geometric loop took {geometric_time:.2?}");

    let started = Instant::now();
    let d = check("while or(x0, true) do x0 := true");
    let (_, report) = denote(&d, &cfg, &table).expect("denote");
    let divergent_time = started.elapsed();
    assert_eq!(report.loop_residual, 1.0, "divergent loop must keep all mass circulating");
    assert!(divergent_time.as_secs_f64() < 1.0, "divergent loop took {divergent_time:.2?}");

    println!(
        "criterion 9: PASS geometric residual {geometric_residual:.3e} (<= 2^-30) in {geometric_time:.2?}, divergent residual 1.0 in {divergent_time:.2?}"
    );
}
