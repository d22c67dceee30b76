//! Core library for the oppl probabilistic language: finite measure spaces
//! and regular operators, probability kernels with Bayesian inversion, the
//! term syntax, the linear type system, the operator denotational semantics,
//! and independent verification oracles.

pub mod denote;
pub mod finspace;
pub mod kernels;
pub mod syntax;
pub mod oracle;
pub mod types;

pub use finspace::{AtomData, FinSpace, MeasureVec, RegOperator};
pub use kernels::Kernel;
pub use syntax::{parse, pretty, SourceSpan, Term, TermKind};
pub use types::{
    is_measure_type, is_order_complete, subtype, typecheck, typecheck_open, typecheck_value,
    validate_derivation, BuiltinTable, Context, Derivation, JudgmentResult, Rule, Type,
    TypeDiagnostic,
};
pub use denote::{
    cond_restrict, denote, denote_builtin, interp_type, observe_op, verify_theorem11,
    Denotation, DenoteError, DiscretizationConfig, EvalReport, GridSpec, Theorem11Report,
};
