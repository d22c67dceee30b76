//! Finite atomic measure spaces and the regular operators between them.
//!
//! Every space is spanned by a finite list of labelled atoms; vectors are
//! coefficient rows over the atoms, ordered coordinatewise. The total
//! variation norm of a vector is the sum of absolute coefficients, and the
//! lattice operations (Hahn-Jordan decomposition, modulus, meets) all act
//! coordinatewise. Tensor products concatenate atom bases lexicographically
//! (left factor slowest), operator spaces are full matrix spaces with the
//! entrywise order, and bands are the sub-spaces spanned by the support of a
//! generating vector.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Typed payload carried by an atom, used when built-in operations need the
/// underlying value rather than the display label.
#[derive(Clone, Debug, PartialEq)]
pub enum AtomData {
    /// Element `value` of the finite type with `card` elements.
    Fin { value: u64, card: u64 },
    /// Tuple of grid integers; scalars are one-element tuples.
    IntVec(Vec<i64>),
    /// Tuple of grid reals; scalars are one-element tuples.
    RealVec(Vec<f64>),
    /// Positive semi-definite matrix (row-major, symmetric).
    PosDef(Vec<Vec<f64>>),
    /// Atom of a tensor space: pair of the factor atoms.
    Pair(Box<AtomData>, Box<AtomData>),
    /// Atom with no decodable payload (formal-measure and operator atoms).
    Opaque(String),
}

impl AtomData {
    pub fn real(x: f64) -> Self {
        AtomData::RealVec(vec![x])
    }

    pub fn int(n: i64) -> Self {
        AtomData::IntVec(vec![n])
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            AtomData::RealVec(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            AtomData::IntVec(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    pub fn as_fin(&self) -> Option<(u64, u64)> {
        match self {
            AtomData::Fin { value, card } => Some((*value, *card)),
            _ => None,
        }
    }
}

/// A labelled basis atom of a leaf space.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub label: String,
    pub data: AtomData,
}

/// Atom of a formal-measure space: a point named after the distribution it
/// stands for.
#[derive(Clone, Debug)]
pub struct FormalAtom {
    pub label: String,
    pub dist: MeasureVec,
}

#[derive(Debug)]
enum SpaceKind {
    /// Plain measure space over an explicit atom list.
    Atoms(Vec<Atom>),
    /// Formal measures over `inner`: atoms are materialised distributions.
    Formal { inner: FinSpace, atoms: Vec<FormalAtom> },
    /// Tensor product, left factor slowest in the atom ordering.
    Tensor(FinSpace, FinSpace),
    /// Principal band inside `ambient`, spanned by the atoms at `indices`.
    Band { ambient: FinSpace, indices: Vec<usize> },
    /// Full matrix space of operators `dom -> cod`, entrywise order.
    Operator { dom: FinSpace, cod: FinSpace },
}

/// A finite atomic space. Cloning is cheap (shared payload).
#[derive(Clone)]
pub struct FinSpace(Arc<SpaceKind>);

impl fmt::Debug for FinSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FinSpace({} atoms: {})", self.atom_count(), self.describe())
    }
}

/// Formats a real snapped to 12 decimals so grid labels stay readable.
pub fn fmt_real(x: f64) -> String {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        "0".to_string()
    } else {
        format!("{}", r)
    }
}

/// Canonical display form of an atom payload, used as the label wherever a
/// space is built from raw values.
pub fn fmt_data(d: &AtomData) -> String {
    match d {
        AtomData::Fin { value, .. } => format!("{value}"),
        AtomData::IntVec(v) if v.len() == 1 => format!("{}", v[0]),
        AtomData::IntVec(v) => {
            let parts: Vec<String> = v.iter().map(|n| n.to_string()).collect();
            format!("({})", parts.join(","))
        }
        AtomData::RealVec(v) if v.len() == 1 => fmt_real(v[0]),
        AtomData::RealVec(v) => {
            let parts: Vec<String> = v.iter().map(|x| fmt_real(*x)).collect();
            format!("({})", parts.join(","))
        }
        AtomData::PosDef(m) => {
            let rows: Vec<String> = m
                .iter()
                .map(|r| {
                    let es: Vec<String> = r.iter().map(|x| fmt_real(*x)).collect();
                    format!("[{}]", es.join(","))
                })
                .collect();
            format!("[{}]", rows.join(","))
        }
        AtomData::Pair(l, r) => format!("({},{})", fmt_data(l), fmt_data(r)),
        AtomData::Opaque(s) => s.clone(),
    }
}

impl FinSpace {
    pub fn measure(atoms: Vec<Atom>) -> Self {
        debug_assert!(
            {
                let mut labels: Vec<&str> = atoms.iter().map(|a| a.label.as_str()).collect();
                labels.sort_unstable();
                labels.windows(2).all(|w| w[0] != w[1])
            },
            "atom labels must be pairwise distinct"
        );
        FinSpace(Arc::new(SpaceKind::Atoms(atoms)))
    }

    /// The one-atom space spanned by the unit value.
    pub fn unit() -> Self {
        FinSpace::measure(vec![Atom {
            label: "()".to_string(),
            data: AtomData::Fin { value: 0, card: 1 },
        }])
    }

    /// Finite type with elements `0 .. m-1`.
    pub fn fin(m: u64) -> Self {
        let atoms = (0..m)
            .map(|v| Atom {
                label: v.to_string(),
                data: AtomData::Fin { value: v, card: m },
            })
            .collect();
        FinSpace::measure(atoms)
    }

    /// Integer grid `0 ..= max`.
    pub fn int_grid(max: u64) -> Self {
        let atoms = (0..=max)
            .map(|n| Atom {
                label: n.to_string(),
                data: AtomData::int(n as i64),
            })
            .collect();
        FinSpace::measure(atoms)
    }

    /// Evenly spaced real grid with both endpoints included.
    pub fn real_grid(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins >= 2 && hi > lo, "degenerate real grid");
        let step = (hi - lo) / (bins as f64 - 1.0);
        let atoms = (0..bins)
            .map(|k| {
                let x = ((lo + k as f64 * step) * 1e12).round() / 1e12;
                Atom {
                    label: fmt_real(x),
                    data: AtomData::real(x),
                }
            })
            .collect();
        FinSpace::measure(atoms)
    }

    pub fn formal(inner: FinSpace, atoms: Vec<FormalAtom>) -> Self {
        FinSpace(Arc::new(SpaceKind::Formal { inner, atoms }))
    }

    pub fn tensor(left: &FinSpace, right: &FinSpace) -> Self {
        FinSpace(Arc::new(SpaceKind::Tensor(left.clone(), right.clone())))
    }

    /// Tensor of a list of factors, folded left; the empty product is the
    /// unit space and a single factor is returned unwrapped.
    pub fn tensor_all(factors: &[FinSpace]) -> Self {
        match factors {
            [] => FinSpace::unit(),
            [one] => one.clone(),
            [first, rest @ ..] => rest
                .iter()
                .fold(first.clone(), |acc, f| FinSpace::tensor(&acc, f)),
        }
    }

    pub fn operator(dom: &FinSpace, cod: &FinSpace) -> Self {
        FinSpace(Arc::new(SpaceKind::Operator {
            dom: dom.clone(),
            cod: cod.clone(),
        }))
    }

    pub fn atom_count(&self) -> usize {
        match &*self.0 {
            SpaceKind::Atoms(a) => a.len(),
            SpaceKind::Formal { atoms, .. } => atoms.len(),
            SpaceKind::Tensor(l, r) => l.atom_count() * r.atom_count(),
            SpaceKind::Band { indices, .. } => indices.len(),
            SpaceKind::Operator { dom, cod } => dom.atom_count() * cod.atom_count(),
        }
    }

    pub fn atom_label(&self, i: usize) -> String {
        match &*self.0 {
            SpaceKind::Atoms(a) => a[i].label.clone(),
            SpaceKind::Formal { atoms, .. } => atoms[i].label.clone(),
            SpaceKind::Tensor(l, r) => {
                let n = r.atom_count();
                format!("({},{})", l.atom_label(i / n), r.atom_label(i % n))
            }
            SpaceKind::Band { ambient, indices } => ambient.atom_label(indices[i]),
            SpaceKind::Operator { dom, cod } => {
                let n = dom.atom_count();
                format!("[{}<-{}]", cod.atom_label(i / n), dom.atom_label(i % n))
            }
        }
    }

    pub fn atom_data(&self, i: usize) -> AtomData {
        match &*self.0 {
            SpaceKind::Atoms(a) => a[i].data.clone(),
            SpaceKind::Formal { atoms, .. } => AtomData::Opaque(atoms[i].label.clone()),
            SpaceKind::Tensor(l, r) => {
                let n = r.atom_count();
                AtomData::Pair(
                    Box::new(l.atom_data(i / n)),
                    Box::new(r.atom_data(i % n)),
                )
            }
            SpaceKind::Band { ambient, indices } => ambient.atom_data(indices[i]),
            SpaceKind::Operator { .. } => AtomData::Opaque(self.atom_label(i)),
        }
    }

    pub fn atom_labels(&self) -> Vec<String> {
        (0..self.atom_count()).map(|i| self.atom_label(i)).collect()
    }

    /// The distribution behind atom `i` of a formal-measure space.
    pub fn formal_dist(&self, i: usize) -> Option<&MeasureVec> {
        match &*self.0 {
            SpaceKind::Formal { atoms, .. } => Some(&atoms[i].dist),
            _ => None,
        }
    }

    pub fn formal_inner(&self) -> Option<&FinSpace> {
        match &*self.0 {
            SpaceKind::Formal { inner, .. } => Some(inner),
            _ => None,
        }
    }

    pub fn is_formal(&self) -> bool {
        matches!(&*self.0, SpaceKind::Formal { .. })
    }

    pub fn is_band(&self) -> bool {
        matches!(&*self.0, SpaceKind::Band { .. })
    }

    pub fn is_operator_space(&self) -> bool {
        matches!(&*self.0, SpaceKind::Operator { .. })
    }

    pub fn tensor_factors(&self) -> Option<(&FinSpace, &FinSpace)> {
        match &*self.0 {
            SpaceKind::Tensor(l, r) => Some((l, r)),
            _ => None,
        }
    }

    pub fn operator_parts(&self) -> Option<(&FinSpace, &FinSpace)> {
        match &*self.0 {
            SpaceKind::Operator { dom, cod } => Some((dom, cod)),
            _ => None,
        }
    }

    pub fn band_parts(&self) -> Option<(&FinSpace, &[usize])> {
        match &*self.0 {
            SpaceKind::Band { ambient, indices } => Some((ambient, indices)),
            _ => None,
        }
    }

    /// True when the space is an (abstract) L1 lattice: no operator-space
    /// constituent anywhere, so the norm is plainly the coefficient sum.
    pub fn is_al_like(&self) -> bool {
        match &*self.0 {
            SpaceKind::Atoms(_) | SpaceKind::Formal { .. } => true,
            SpaceKind::Tensor(l, r) => l.is_al_like() && r.is_al_like(),
            SpaceKind::Band { ambient, .. } => ambient.is_al_like(),
            SpaceKind::Operator { .. } => false,
        }
    }

    /// Index of the grid atom nearest to `x` together with the snap distance.
    /// Only meaningful on leaf spaces whose atoms carry scalar reals.
    pub fn nearest_real_atom(&self, x: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.atom_count() {
            if let Some(v) = self.atom_data(i).as_real() {
                let d = (v - x).abs();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            } else {
                return None;
            }
        }
        best
    }

    pub fn find_label(&self, label: &str) -> Option<usize> {
        (0..self.atom_count()).find(|&i| self.atom_label(i) == label)
    }

    fn describe(&self) -> String {
        match &*self.0 {
            SpaceKind::Atoms(_) => "atoms".to_string(),
            SpaceKind::Formal { .. } => "formal".to_string(),
            SpaceKind::Tensor(l, r) => format!("tensor({},{})", l.describe(), r.describe()),
            SpaceKind::Band { ambient, .. } => format!("band({})", ambient.describe()),
            SpaceKind::Operator { dom, cod } => {
                format!("op({},{})", dom.describe(), cod.describe())
            }
        }
    }
}

impl PartialEq for FinSpace {
    fn eq(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.0, &other.0) {
            return true;
        }
        match (&*self.0, &*other.0) {
            (SpaceKind::Atoms(a), SpaceKind::Atoms(b)) => a == b,
            (
                SpaceKind::Formal { inner: i1, atoms: a1 },
                SpaceKind::Formal { inner: i2, atoms: a2 },
            ) => {
                i1 == i2
                    && a1.len() == a2.len()
                    && a1.iter().zip(a2.iter()).all(|(x, y)| {
                        x.label == y.label && x.dist.coeffs == y.dist.coeffs
                    })
            }
            (SpaceKind::Tensor(l1, r1), SpaceKind::Tensor(l2, r2)) => l1 == l2 && r1 == r2,
            (
                SpaceKind::Band { ambient: m1, indices: i1 },
                SpaceKind::Band { ambient: m2, indices: i2 },
            ) => i1 == i2 && m1 == m2,
            (
                SpaceKind::Operator { dom: d1, cod: c1 },
                SpaceKind::Operator { dom: d2, cod: c2 },
            ) => d1 == d2 && c1 == c2,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum FinError {
    #[error("coefficient count {got} does not match atom count {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("operator shapes are incompatible: {0}")]
    ShapeMismatch(String),
    #[error("projective norm needs a tensor space with at most {max} atoms per factor")]
    FactorTooLarge { max: usize },
    #[error("projective-norm search did not converge within the iteration budget")]
    NoConvergence,
}

/// A vector over the atoms of a space; doubles as a measure, a density or a
/// dual functional depending on context.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureVec {
    pub space: FinSpace,
    pub coeffs: Vec<f64>,
}

impl MeasureVec {
    pub fn new(space: FinSpace, coeffs: Vec<f64>) -> Result<Self, FinError> {
        if coeffs.len() != space.atom_count() {
            return Err(FinError::DimensionMismatch {
                got: coeffs.len(),
                want: space.atom_count(),
            });
        }
        Ok(MeasureVec { space, coeffs })
    }

    pub fn zero(space: &FinSpace) -> Self {
        MeasureVec {
            coeffs: vec![0.0; space.atom_count()],
            space: space.clone(),
        }
    }

    pub fn dirac(space: &FinSpace, atom: usize) -> Self {
        let mut v = MeasureVec::zero(space);
        v.coeffs[atom] = 1.0;
        v
    }

    pub fn ones(space: &FinSpace) -> Self {
        MeasureVec {
            coeffs: vec![1.0; space.atom_count()],
            space: space.clone(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.coeffs.iter().sum()
    }

    pub fn is_positive(&self, tol: f64) -> bool {
        self.coeffs.iter().all(|&c| c >= -tol)
    }

    pub fn scale(&self, s: f64) -> Self {
        MeasureVec {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.space, other.space, "vector spaces differ");
        MeasureVec {
            space: self.space.clone(),
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// Atoms carrying a (strictly) nonzero coefficient.
    pub fn support_indices(&self) -> Vec<usize> {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Pairing of a vector with a dual functional on the same atom basis.
    pub fn pair(&self, functional: &MeasureVec) -> f64 {
        assert_eq!(self.space, functional.space, "pairing spaces differ");
        self.coeffs
            .iter()
            .zip(&functional.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.space == other.space
            && self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Norm of the vector in its space. Coincides with [`tv_norm`] on
    /// lattice-of-measures spaces; on operator spaces it is the regular
    /// operator norm of the reshaped matrix, and on mixed tensors the L1
    /// Bochner formula (sum over lattice atoms of the operator norms of the
    /// slices) applies.
    pub fn space_norm(&self) -> f64 {
        space_norm_rec(&self.space, &self.coeffs)
    }
}

fn space_norm_rec(space: &FinSpace, coeffs: &[f64]) -> f64 {
    if space.is_al_like() {
        return coeffs.iter().map(|c| c.abs()).sum();
    }
    match &*space.0 {
        SpaceKind::Operator { dom, cod } => {
            let n = dom.atom_count();
            let m = cod.atom_count();
            let mut worst = 0.0f64;
            for s in 0..n {
                let col: Vec<f64> = (0..m).map(|t| coeffs[t * n + s]).collect();
                worst = worst.max(space_norm_rec(cod, &col));
            }
            worst
        }
        SpaceKind::Tensor(l, r) => {
            let nl = l.atom_count();
            let nr = r.atom_count();
            if l.is_al_like() {
                (0..nl)
                    .map(|a| space_norm_rec(r, &coeffs[a * nr..(a + 1) * nr]))
                    .sum()
            } else if r.is_al_like() {
                (0..nr)
                    .map(|b| {
                        let slice: Vec<f64> = (0..nl).map(|a| coeffs[a * nr + b]).collect();
                        space_norm_rec(l, &slice)
                    })
                    .sum()
            } else {
                // Two operator-space factors: fall back to the coefficient
                // sum, an upper bound for the projective norm.
                coeffs.iter().map(|c| c.abs()).sum()
            }
        }
        SpaceKind::Band { ambient, indices } => {
            let mut full = vec![0.0; ambient.atom_count()];
            for (pos, &amb) in indices.iter().enumerate() {
                full[amb] = coeffs[pos];
            }
            space_norm_rec(ambient, &full)
        }
        _ => coeffs.iter().map(|c| c.abs()).sum(),
    }
}

/// Total variation norm: the sum of absolute coefficients.
pub fn tv_norm(v: &MeasureVec) -> f64 {
    v.coeffs.iter().map(|c| c.abs()).sum()
}

/// Splits a vector into its positive and negative parts; the two have
/// disjoint supports and their difference is the input.
pub fn hahn_jordan(v: &MeasureVec) -> (MeasureVec, MeasureVec) {
    let pos = MeasureVec {
        space: v.space.clone(),
        coeffs: v.coeffs.iter().map(|c| c.max(0.0)).collect(),
    };
    let neg = MeasureVec {
        space: v.space.clone(),
        coeffs: v.coeffs.iter().map(|c| (-c).max(0.0)).collect(),
    };
    (pos, neg)
}

/// Coordinatewise modulus `|v|`.
pub fn modulus(v: &MeasureVec) -> MeasureVec {
    let (p, n) = hahn_jordan(v);
    p.add(&n)
}

/// Tensor product of spaces (sugar over [`FinSpace::tensor`]).
pub fn tensor_space(left: &FinSpace, right: &FinSpace) -> FinSpace {
    FinSpace::tensor(left, right)
}

/// Outer product of vectors, living on the tensor of their spaces.
pub fn tensor_vec(u: &MeasureVec, v: &MeasureVec) -> MeasureVec {
    let space = FinSpace::tensor(&u.space, &v.space);
    let mut coeffs = Vec::with_capacity(u.coeffs.len() * v.coeffs.len());
    for a in &u.coeffs {
        for b in &v.coeffs {
            coeffs.push(a * b);
        }
    }
    MeasureVec { space, coeffs }
}

/// A linear operator between finite spaces, stored densely row-major
/// (`cod x dom`). "Regular" here is a property of the order structure: every
/// matrix is a difference of positive ones, and the regular norm below is the
/// norm of the entrywise modulus.
#[derive(Clone, Debug, PartialEq)]
pub struct RegOperator {
    pub dom: FinSpace,
    pub cod: FinSpace,
    pub entries: Vec<f64>,
}

impl RegOperator {
    pub fn zeros(dom: &FinSpace, cod: &FinSpace) -> Self {
        RegOperator {
            entries: vec![0.0; dom.atom_count() * cod.atom_count()],
            dom: dom.clone(),
            cod: cod.clone(),
        }
    }

    pub fn identity(space: &FinSpace) -> Self {
        let n = space.atom_count();
        let mut op = RegOperator::zeros(space, space);
        for i in 0..n {
            op.entries[i * n + i] = 1.0;
        }
        op
    }

    pub fn from_fn(dom: &FinSpace, cod: &FinSpace, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let (n, m) = (dom.atom_count(), cod.atom_count());
        let mut entries = Vec::with_capacity(n * m);
        for i in 0..m {
            for j in 0..n {
                entries.push(f(i, j));
            }
        }
        RegOperator {
            dom: dom.clone(),
            cod: cod.clone(),
            entries,
        }
    }

    pub fn from_columns(dom: &FinSpace, cod: &FinSpace, cols: &[Vec<f64>]) -> Self {
        assert_eq!(cols.len(), dom.atom_count());
        RegOperator::from_fn(dom, cod, |i, j| cols[j][i])
    }

    pub fn nrows(&self) -> usize {
        self.cod.atom_count()
    }

    pub fn ncols(&self) -> usize {
        self.dom.atom_count()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.ncols() + j]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let n = self.ncols();
        &mut self.entries[i * n + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.entry(i, j)).collect()
    }

    pub fn column_vec(&self, j: usize) -> MeasureVec {
        MeasureVec {
            space: self.cod.clone(),
            coeffs: self.column(j),
        }
    }

    pub fn apply(&self, v: &MeasureVec) -> MeasureVec {
        assert_eq!(v.space, self.dom, "operator applied to wrong space");
        let (m, n) = (self.nrows(), self.ncols());
        let mut out = vec![0.0; m];
        for (j, &c) in v.coeffs.iter().enumerate() {
            if c != 0.0 {
                for i in 0..m {
                    out[i] += self.entries[i * n + j] * c;
                }
            }
        }
        MeasureVec {
            space: self.cod.clone(),
            coeffs: out,
        }
    }

    /// `self . other`, skipping zero entries of `other` column-wise.
    pub fn compose(&self, other: &RegOperator) -> RegOperator {
        assert_eq!(
            other.cod, self.dom,
            "composition shapes differ: {:?} then {:?}",
            other.cod, self.dom
        );
        let m = self.nrows();
        let k = self.ncols();
        let n = other.ncols();
        let mut out = vec![0.0; m * n];
        let mut colbuf = vec![0.0; m];
        for kk in 0..k {
            let mut any = false;
            for i in 0..m {
                let e = self.entries[i * k + kk];
                colbuf[i] = e;
                any |= e != 0.0;
            }
            if !any {
                continue;
            }
            for j in 0..n {
                let w = other.entries[kk * n + j];
                if w != 0.0 {
                    for i in 0..m {
                        out[i * n + j] += colbuf[i] * w;
                    }
                }
            }
        }
        RegOperator {
            dom: other.dom.clone(),
            cod: self.cod.clone(),
            entries: out,
        }
    }

    pub fn add(&self, other: &RegOperator) -> RegOperator {
        assert_eq!(self.dom, other.dom);
        assert_eq!(self.cod, other.cod);
        RegOperator {
            dom: self.dom.clone(),
            cod: self.cod.clone(),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> RegOperator {
        RegOperator {
            dom: self.dom.clone(),
            cod: self.cod.clone(),
            entries: self.entries.iter().map(|e| e * s).collect(),
        }
    }

    pub fn is_positive(&self, tol: f64) -> bool {
        self.entries.iter().all(|&e| e >= -tol)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Regular norm: the norm of the entrywise modulus, i.e. the largest
    /// codomain norm over the columns. Equals the operator norm for positive
    /// operators between lattice-of-measures spaces.
    pub fn regular_norm(&self) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.ncols() {
            let col: Vec<f64> = self.column(j).iter().map(|e| e.abs()).collect();
            worst = worst.max(space_norm_rec(&self.cod, &col));
        }
        worst
    }

    /// Reinterprets the matrix as a vector of the operator space `[dom,cod]`.
    pub fn to_vec(&self) -> MeasureVec {
        MeasureVec {
            space: FinSpace::operator(&self.dom, &self.cod),
            coeffs: self.entries.clone(),
        }
    }

    /// Inverse of [`RegOperator::to_vec`] given the operator space.
    pub fn from_vec(v: &MeasureVec) -> Option<RegOperator> {
        let (dom, cod) = v.space.operator_parts()?;
        Some(RegOperator {
            dom: dom.clone(),
            cod: cod.clone(),
            entries: v.coeffs.clone(),
        })
    }

    /// Reorders codomain atoms: row `i` of the result is row `map[i]` of
    /// `self`. `new_cod` must have the same atom count.
    pub fn permute_cod(&self, new_cod: &FinSpace, map: &[usize]) -> RegOperator {
        assert_eq!(new_cod.atom_count(), self.nrows());
        let n = self.ncols();
        let mut entries = vec![0.0; self.entries.len()];
        for (i, &src) in map.iter().enumerate() {
            entries[i * n..(i + 1) * n].copy_from_slice(&self.entries[src * n..(src + 1) * n]);
        }
        RegOperator {
            dom: self.dom.clone(),
            cod: new_cod.clone(),
            entries,
        }
    }

    /// Reorders domain atoms: column `j` of the result is column `map[j]` of
    /// `self`.
    pub fn permute_dom(&self, new_dom: &FinSpace, map: &[usize]) -> RegOperator {
        assert_eq!(new_dom.atom_count(), self.ncols());
        let n = self.ncols();
        let m = self.nrows();
        let mut entries = vec![0.0; self.entries.len()];
        for i in 0..m {
            for (j, &src) in map.iter().enumerate() {
                entries[i * n + j] = self.entries[i * n + src];
            }
        }
        RegOperator {
            dom: new_dom.clone(),
            cod: self.cod.clone(),
            entries,
        }
    }
}

/// Kronecker product acting factor-wise on tensor spaces.
pub fn tensor_op(f: &RegOperator, g: &RegOperator) -> RegOperator {
    let dom = FinSpace::tensor(&f.dom, &g.dom);
    let cod = FinSpace::tensor(&f.cod, &g.cod);
    let (fr, fc) = (f.nrows(), f.ncols());
    let (gr, gc) = (g.nrows(), g.ncols());
    let mut entries = vec![0.0; fr * gr * fc * gc];
    let ncols = fc * gc;
    for i1 in 0..fr {
        for j1 in 0..fc {
            let fe = f.entries[i1 * fc + j1];
            if fe == 0.0 {
                continue;
            }
            for i2 in 0..gr {
                for j2 in 0..gc {
                    let ge = g.entries[i2 * gc + j2];
                    if ge != 0.0 {
                        entries[(i1 * gr + i2) * ncols + (j1 * gc + j2)] = fe * ge;
                    }
                }
            }
        }
    }
    RegOperator { dom, cod, entries }
}

/// The principal band of `mu` inside its space: the sub-space spanned by the
/// support atoms. A zero vector yields the zero-atom band.
pub fn band(space: &FinSpace, mu: &MeasureVec) -> FinSpace {
    assert_eq!(&mu.space, space);
    FinSpace(Arc::new(SpaceKind::Band {
        ambient: space.clone(),
        indices: mu.support_indices(),
    }))
}

/// Positive isometric inclusion of a band into its ambient space.
pub fn band_inclusion(band: &FinSpace) -> RegOperator {
    let (ambient, indices) = band.band_parts().expect("band space expected");
    let mut op = RegOperator::zeros(band, ambient);
    let n = band.atom_count();
    for (pos, &amb) in indices.iter().enumerate() {
        op.entries[amb * n + pos] = 1.0;
    }
    op
}

/// Projection of the ambient space onto the band of `mu` (coordinates off the
/// support are dropped).
pub fn band_restrict(space: &FinSpace, mu: &MeasureVec) -> RegOperator {
    let b = band(space, mu);
    let indices: Vec<usize> = b.band_parts().unwrap().1.to_vec();
    let n = space.atom_count();
    let mut op = RegOperator::zeros(space, &b);
    for (pos, &amb) in indices.iter().enumerate() {
        op.entries[pos * n + amb] = 1.0;
    }
    op
}

/// True when every support atom of `v` lies in the support of `mu`.
pub fn absolutely_continuous(v: &MeasureVec, mu: &MeasureVec) -> bool {
    v.coeffs
        .iter()
        .zip(&mu.coeffs)
        .all(|(&a, &b)| a == 0.0 || b != 0.0)
}

/// Order-continuous (Koethe) adjoint: the transpose matrix, characterised by
/// `<F u, phi> = <u, F* phi>` under the coordinatewise pairing.
pub fn kothe_adjoint(op: &RegOperator) -> RegOperator {
    let (m, n) = (op.nrows(), op.ncols());
    let mut entries = vec![0.0; n * m];
    for i in 0..m {
        for j in 0..n {
            entries[j * m + i] = op.entries[i * n + j];
        }
    }
    RegOperator {
        dom: op.cod.clone(),
        cod: op.dom.clone(),
        entries,
    }
}

/// A strictly positive functional on the space, returned as the dual vector
/// of its values on atoms: total mass on measure and formal spaces, products
/// on tensors, the ambient restriction on bands, and on operator spaces the
/// sup-construction evaluated at the matrix units.
pub fn strictly_positive_functional(space: &FinSpace) -> MeasureVec {
    let coeffs = match &*space.0 {
        SpaceKind::Atoms(a) => vec![1.0; a.len()],
        SpaceKind::Formal { atoms, .. } => vec![1.0; atoms.len()],
        SpaceKind::Tensor(l, r) => {
            let lf = strictly_positive_functional(l);
            let rf = strictly_positive_functional(r);
            let mut c = Vec::with_capacity(lf.coeffs.len() * rf.coeffs.len());
            for a in &lf.coeffs {
                for b in &rf.coeffs {
                    c.push(a * b);
                }
            }
            c
        }
        SpaceKind::Band { ambient, indices } => {
            let af = strictly_positive_functional(ambient);
            indices.iter().map(|&i| af.coeffs[i]).collect()
        }
        SpaceKind::Operator { dom, cod } => {
            let phi = strictly_positive_functional(dom);
            let psi = strictly_positive_functional(cod);
            let n = dom.atom_count();
            let m = cod.atom_count();
            let mut c = vec![0.0; n * m];
            for t in 0..m {
                for s in 0..n {
                    c[t * n + s] = psi.coeffs[t] / phi.coeffs[s];
                }
            }
            c
        }
    };
    MeasureVec {
        space: space.clone(),
        coeffs,
    }
}

/// The sup-construction functional on an operator space: for positive `t`,
/// the supremum of `psi(T s)` over positive `s` in the unit ball of `phi`,
/// which on a finite simplex is attained at scaled atoms; extended to all of
/// the space through the Hahn-Jordan parts.
pub fn chi(op: &RegOperator, phi: &MeasureVec, psi: &MeasureVec) -> f64 {
    let positive_part = |sign: f64| -> f64 {
        let mut best = 0.0f64;
        for s in 0..op.ncols() {
            let mut val = 0.0;
            for t in 0..op.nrows() {
                let e = op.entry(t, s);
                val += psi.coeffs[t] * if sign * e > 0.0 { sign * e } else { 0.0 };
            }
            best = best.max(val / phi.coeffs[s]);
        }
        best
    };
    positive_part(1.0) - positive_part(-1.0)
}

/// Brute-force projective norm of a tensor: multi-start local minimisation of
/// `sum_i |u_i| |v_i|` over exact decompositions `x = sum_i u_i (x) v_i`.
/// This is a test oracle; the lattice theory says the result must coincide
/// with the total variation norm on measure-space factors.
pub fn projective_norm_bruteforce(x: &MeasureVec, max_terms: usize) -> Result<f64, FinError> {
    let (left, right) = x
        .space
        .tensor_factors()
        .ok_or_else(|| FinError::ShapeMismatch("tensor space required".into()))?;
    let m = left.atom_count();
    let n = right.atom_count();
    if m > 3 || n > 3 {
        return Err(FinError::FactorTooLarge { max: 3 });
    }
    if tv_norm(x) == 0.0 {
        return Ok(0.0);
    }
    let k = m.min(max_terms);
    if k < m {
        return Err(FinError::NoConvergence);
    }

    // Parameters are the left factors u_1..u_m (an m x m matrix U); the right
    // factors are solved exactly from U V = M by Gaussian elimination, so the
    // decomposition constraint always holds and the objective is
    // f(U) = sum_i |U col i|_1 * |V row i|_1, bounded below by the TV norm.
    let matrix: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..n).map(|j| x.coeffs[i * n + j]).collect())
        .collect();

    let objective = |params: &[f64]| -> f64 {
        let u: Vec<Vec<f64>> = (0..m)
            .map(|i| params[i * m..(i + 1) * m].to_vec())
            .collect();
        match solve_multi(&u, &matrix) {
            Some(v) => {
                let mut total = 0.0;
                for i in 0..m {
                    let un: f64 = (0..m).map(|r| u[r][i].abs()).sum();
                    let vn: f64 = (0..n).map(|c| v[i][c].abs()).sum();
                    total += un * vn;
                }
                total
            }
            None => 1e12,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x70726f6a);
    let mut best = f64::INFINITY;
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut identity = vec![0.0; m * m];
    for i in 0..m {
        identity[i * m + i] = 1.0;
    }
    starts.push(identity);
    for _ in 0..24 {
        starts.push((0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    for start in starts {
        let (val, _) = nelder_mead(&objective, &start, 500, 1e-12);
        best = best.min(val);
    }
    if best > 1e11 {
        return Err(FinError::NoConvergence);
    }
    Ok(best)
}

/// Solves `U V = M` for `V` (U square), returning rows of V; None if U is
/// singular.
fn solve_multi(u: &[Vec<f64>], m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let dim = u.len();
    let cols = if dim == 0 { 0 } else { m[0].len() };
    // Augmented Gaussian elimination with partial pivoting.
    let mut a: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let mut row = u[i].clone();
            row.extend_from_slice(&m[i]);
            row
        })
        .collect();
    for col in 0..dim {
        let (pivot, pval) = (col..dim)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pval < 1e-10 {
            return None;
        }
        a.swap(col, pivot);
        let diag = a[col][col];
        for c in col..dim + cols {
            a[col][c] /= diag;
        }
        for r in 0..dim {
            if r != col && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in col..dim + cols {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..dim).map(|i| a[i][dim..].to_vec()).collect())
}

/// Plain Nelder-Mead simplex descent; returns the best value and point.
pub fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    max_iter: usize,
    tol: f64,
) -> (f64, Vec<f64>) {
    let dim = start.len();
    let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(dim + 1);
    simplex.push((f(start), start.to_vec()));
    for i in 0..dim {
        let mut p = start.to_vec();
        p[i] += if p[i].abs() > 1e-6 { 0.1 * p[i].abs() } else { 0.1 };
        simplex.push((f(&p), p));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
        if simplex[dim].0 - simplex[0].0 < tol {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|c| simplex[..dim].iter().map(|(_, p)| p[c]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|c| centroid[c] + (centroid[c] - worst.1[c]))
            .collect();
        let fr = f(&reflect);
        if fr < simplex[0].0 {
            let expand: Vec<f64> = (0..dim)
                .map(|c| centroid[c] + 2.0 * (centroid[c] - worst.1[c]))
                .collect();
            let fe = f(&expand);
            simplex[dim] = if fe < fr { (fe, expand) } else { (fr, reflect) };
        } else if fr < simplex[dim - 1].0 {
            simplex[dim] = (fr, reflect);
        } else {
            let contract: Vec<f64> = (0..dim)
                .map(|c| centroid[c] + 0.5 * (worst.1[c] - centroid[c]))
                .collect();
            let fc = f(&contract);
            if fc < worst.0 {
                simplex[dim] = (fc, contract);
            } else {
                let best = simplex[0].1.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> = (0..dim)
                        .map(|c| best[c] + 0.5 * (entry.1[c] - best[c]))
                        .collect();
                    *entry = (f(&shrunk), shrunk);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
    simplex[0].clone()
}
