//! Measure kernels between finite spaces: pushforward, disintegration along
//! a map, Bayesian inversion, and the density/measure/functional conversions
//! (rn, mr, fr, rr) together with the naturality law that ties them to
//! kernel inversion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finspace::{
    kothe_adjoint, tv_norm, Atom, AtomData, FinSpace, MeasureVec, RegOperator,
};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("measure lives on the wrong space")]
    SpaceMismatch,
    #[error("density undefined: atom `{atom}` carries mass outside the support of the base measure")]
    NotAbsolutelyContinuous { atom: String },
    #[error("expected a deterministic kernel (Dirac columns)")]
    NotDeterministic,
}

/// A measure kernel `dom -> M cod`, stored as the matrix whose column at a
/// domain atom is the measure that atom maps to. A probability kernel has
/// positive columns of unit mass; the uniform bound is the largest column
/// norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub op: RegOperator,
}

/// An object of the category of measure spaces with a distinguished positive
/// measure.
#[derive(Clone, Debug)]
pub struct KrnObject {
    pub space: FinSpace,
    pub mu: MeasureVec,
}

impl KrnObject {
    pub fn new(mu: MeasureVec) -> Self {
        debug_assert!(mu.is_positive(0.0));
        KrnObject {
            space: mu.space.clone(),
            mu,
        }
    }
}

impl Kernel {
    pub fn new(op: RegOperator) -> Self {
        Kernel { op }
    }

    pub fn dom(&self) -> &FinSpace {
        &self.op.dom
    }

    pub fn cod(&self) -> &FinSpace {
        &self.op.cod
    }

    pub fn column(&self, x: usize) -> MeasureVec {
        self.op.column_vec(x)
    }

    pub fn from_columns(dom: &FinSpace, columns: &[MeasureVec]) -> Self {
        assert_eq!(columns.len(), dom.atom_count());
        let cod = columns
            .first()
            .map(|c| c.space.clone())
            .unwrap_or_else(FinSpace::unit);
        let cols: Vec<Vec<f64>> = columns.iter().map(|c| c.coeffs.clone()).collect();
        Kernel {
            op: RegOperator::from_columns(dom, &cod, &cols),
        }
    }

    /// The kernel of a point map: each atom goes to the Dirac at its image.
    pub fn deterministic(dom: &FinSpace, cod: &FinSpace, map: &[usize]) -> Self {
        assert_eq!(map.len(), dom.atom_count());
        let mut op = RegOperator::zeros(dom, cod);
        let n = dom.atom_count();
        for (x, &y) in map.iter().enumerate() {
            op.entries[y * n + x] = 1.0;
        }
        Kernel { op }
    }

    pub fn identity(space: &FinSpace) -> Self {
        Kernel {
            op: RegOperator::identity(space),
        }
    }

    /// Uniform bound: the largest column mass.
    pub fn bound_k(&self) -> f64 {
        (0..self.op.ncols())
            .map(|x| tv_norm(&self.column(x)))
            .fold(0.0, f64::max)
    }

    pub fn is_probability(&self, tol: f64) -> bool {
        (0..self.op.ncols()).all(|x| {
            let col = self.column(x);
            col.is_positive(tol) && (col.total_mass() - 1.0).abs() <= tol
        })
    }

    /// Recovers the point map of a deterministic kernel.
    pub fn as_map(&self) -> Result<Vec<usize>, KernelError> {
        (0..self.op.ncols())
            .map(|x| {
                let col = self.column(x);
                let mut hit = None;
                for (y, &c) in col.coeffs.iter().enumerate() {
                    if c == 1.0 && hit.is_none() {
                        hit = Some(y);
                    } else if c != 0.0 {
                        return Err(KernelError::NotDeterministic);
                    }
                }
                hit.ok_or(KernelError::NotDeterministic)
            })
            .collect()
    }
}

/// Pushforward of a measure through a kernel: `nu(B) = sum_x f(x)(B) mu(x)`.
pub fn pushforward(f: &Kernel, mu: &MeasureVec) -> MeasureVec {
    f.op.apply(mu)
}

/// Disintegration of `mu` along a point map `g`: the kernel sending an image
/// point to its fiber, weighted by `mu` and normalised to a probability; the
/// column at an image of zero mass is the zero measure.
pub fn disintegrate(g: &Kernel, mu: &MeasureVec) -> Result<Kernel, KernelError> {
    if mu.space != *g.dom() {
        return Err(KernelError::SpaceMismatch);
    }
    let map = g.as_map()?;
    let ny = g.cod().atom_count();
    let mut fiber_mass = vec![0.0; ny];
    for (x, &y) in map.iter().enumerate() {
        fiber_mass[y] += mu.coeffs[x];
    }
    let mut op = RegOperator::zeros(g.cod(), g.dom());
    for (x, &y) in map.iter().enumerate() {
        if fiber_mass[y] > 0.0 {
            op.entries[x * ny + y] = mu.coeffs[x] / fiber_mass[y];
        }
    }
    Ok(Kernel { op })
}

/// Builds the projections of a product space as deterministic kernels.
fn product_projections(xs: &FinSpace, ys: &FinSpace) -> (Kernel, Kernel, FinSpace) {
    let prod = FinSpace::tensor(xs, ys);
    let ny = ys.atom_count();
    let n = prod.atom_count();
    let pi_x = Kernel::deterministic(&prod, xs, &(0..n).map(|i| i / ny).collect::<Vec<_>>());
    let pi_y = Kernel::deterministic(&prod, ys, &(0..n).map(|i| i % ny).collect::<Vec<_>>());
    (pi_x, pi_y, prod)
}

/// Bayesian inversion of a kernel with respect to a positive prior: forms
/// the joint measure on the product, disintegrates along the second
/// projection and pushes the fibers back through the first. Columns at
/// observations of zero marginal mass are zero.
pub fn bayes_invert(f: &Kernel, mu: &MeasureVec) -> Result<Kernel, KernelError> {
    if mu.space != *f.dom() {
        return Err(KernelError::SpaceMismatch);
    }
    let (pi_x, pi_y, prod) = product_projections(f.dom(), f.cod());
    let ny = f.cod().atom_count();
    let mut joint = MeasureVec::zero(&prod);
    for x in 0..f.dom().atom_count() {
        let w = mu.coeffs[x];
        if w != 0.0 {
            for y in 0..ny {
                joint.coeffs[x * ny + y] = f.op.entry(y, x) * w;
            }
        }
    }
    let fibers = disintegrate(&pi_y, &joint)?;
    Ok(Kernel {
        op: pi_x.op.compose(&fibers.op),
    })
}

/// Pointwise Radon-Nikodym derivative of `nu` against `mu`, zero off the
/// support of `mu`. Fails, naming the atom, if `nu` has mass where `mu` has
/// none.
pub fn rn_derivative(nu: &MeasureVec, mu: &MeasureVec) -> Result<MeasureVec, KernelError> {
    if nu.space != mu.space {
        return Err(KernelError::SpaceMismatch);
    }
    let mut density = MeasureVec::zero(&mu.space);
    for i in 0..mu.coeffs.len() {
        if mu.coeffs[i] != 0.0 {
            density.coeffs[i] = nu.coeffs[i] / mu.coeffs[i];
        } else if nu.coeffs[i] != 0.0 {
            return Err(KernelError::NotAbsolutelyContinuous {
                atom: mu.space.atom_label(i),
            });
        }
    }
    Ok(density)
}

/// Multiplies a density back into the base measure.
pub fn mr(density: &MeasureVec, mu: &MeasureVec) -> MeasureVec {
    assert_eq!(density.space, mu.space);
    MeasureVec {
        space: mu.space.clone(),
        coeffs: density
            .coeffs
            .iter()
            .zip(&mu.coeffs)
            .map(|(h, m)| h * m)
            .collect(),
    }
}

/// Integration-against-`mu` functional on function classes mod `mu`-null
/// sets; represented by its values on atom indicators, i.e. by `mu` itself.
pub fn fr(mu: &MeasureVec) -> MeasureVec {
    mu.clone()
}

/// Recovers the measure of a functional by evaluating it on indicators;
/// coordinates off the support of `mu` are null classes and read as zero.
pub fn rr(functional: &MeasureVec, mu: &MeasureVec) -> MeasureVec {
    assert_eq!(functional.space, mu.space);
    MeasureVec {
        space: mu.space.clone(),
        coeffs: functional
            .coeffs
            .iter()
            .zip(&mu.coeffs)
            .map(|(f, m)| if *m != 0.0 { *f } else { 0.0 })
            .collect(),
    }
}

/// Action of a kernel `g: Y -> M X` on densities over X, producing a density
/// over Y: `(h . g)(y) = sum_x h(x) g(y)(x)`. With `g` a Bayesian inverse
/// this is the right leg of the naturality square for rn.
pub fn l1_of_kernel(g: &Kernel, h: &MeasureVec) -> MeasureVec {
    kothe_adjoint(&g.op).apply(h)
}

/// Dense serialisation of a kernel for the model file format: atom labels of
/// both spaces plus the matrix rows (codomain-major).
#[derive(Debug, Serialize, Deserialize)]
pub struct KernelDoc {
    pub dom: Vec<String>,
    pub cod: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl KernelDoc {
    pub fn from_kernel(k: &Kernel) -> Self {
        let rows = (0..k.op.nrows())
            .map(|i| (0..k.op.ncols()).map(|j| k.op.entry(i, j)).collect())
            .collect();
        KernelDoc {
            dom: k.dom().atom_labels(),
            cod: k.cod().atom_labels(),
            matrix: rows,
        }
    }

    /// Rebuilds the kernel over label-only spaces.
    pub fn to_kernel(&self) -> Result<Kernel, KernelError> {
        let mk = |labels: &[String]| {
            FinSpace::measure(
                labels
                    .iter()
                    .map(|l| Atom {
                        label: l.clone(),
                        data: AtomData::Opaque(l.clone()),
                    })
                    .collect(),
            )
        };
        let dom = mk(&self.dom);
        let cod = mk(&self.cod);
        if self.matrix.len() != cod.atom_count()
            || self.matrix.iter().any(|r| r.len() != dom.atom_count())
        {
            return Err(KernelError::SpaceMismatch);
        }
        let entries: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        Ok(Kernel {
            op: RegOperator { dom, cod, entries },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coin_kernel() -> (Kernel, MeasureVec) {
        // a -> (0.9 heads, 0.1 tails), b -> (0.2, 0.8); uniform prior.
        let dom = FinSpace::measure(vec![
            Atom { label: "a".into(), data: AtomData::Opaque("a".into()) },
            Atom { label: "b".into(), data: AtomData::Opaque("b".into()) },
        ]);
        let cod = FinSpace::measure(vec![
            Atom { label: "heads".into(), data: AtomData::Opaque("heads".into()) },
            Atom { label: "tails".into(), data: AtomData::Opaque("tails".into()) },
        ]);
        let f = Kernel::from_columns(
            &dom,
            &[
                MeasureVec::new(cod.clone(), vec![0.9, 0.1]).unwrap(),
                MeasureVec::new(cod, vec![0.2, 0.8]).unwrap(),
            ],
        );
        let mu = MeasureVec::new(dom, vec![0.5, 0.5]).unwrap();
        (f, mu)
    }

    #[test]
    fn pushforward_mixes_columns() {
        let (f, mu) = coin_kernel();
        let nu = pushforward(&f, &mu);
        assert!((nu.coeffs[0] - 0.55).abs() < 1e-15);
        assert!((nu.coeffs[1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_preserves_measures() {
        let sp = FinSpace::fin(3);
        let mu = MeasureVec::new(sp.clone(), vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(pushforward(&Kernel::identity(&sp), &mu).coeffs, mu.coeffs);
    }

    #[test]
    fn deterministic_kernel_moves_point_masses() {
        let dom = FinSpace::fin(3);
        let cod = FinSpace::fin(2);
        let g = Kernel::deterministic(&dom, &cod, &[1, 0, 1]);
        let delta = MeasureVec::dirac(&dom, 2);
        assert_eq!(pushforward(&g, &delta).coeffs, vec![0.0, 1.0]);
    }

    #[test]
    fn pushforward_preserves_mass_of_probability_kernels() {
        let (f, mu) = coin_kernel();
        assert!(f.is_probability(0.0));
        assert!((tv_norm(&pushforward(&f, &mu)) - tv_norm(&mu)).abs() < 1e-15);
    }

    #[test]
    fn disintegration_normalises_fibers() {
        // Four two-bit words, mapped to their second bit.
        let labels = ["00", "01", "10", "11"];
        let dom = FinSpace::measure(
            labels
                .iter()
                .map(|l| Atom { label: l.to_string(), data: AtomData::Opaque(l.to_string()) })
                .collect(),
        );
        let cod = FinSpace::fin(2);
        let g = Kernel::deterministic(&dom, &cod, &[0, 1, 0, 1]);
        let mu = MeasureVec::new(dom, vec![0.25; 4]).unwrap();
        let inv = disintegrate(&g, &mu).unwrap();
        assert_eq!(inv.column(0).coeffs, vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(inv.column(1).coeffs, vec![0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn disintegration_of_injective_map_gives_diracs() {
        let dom = FinSpace::fin(3);
        let cod = FinSpace::fin(4);
        let g = Kernel::deterministic(&dom, &cod, &[2, 0, 3]);
        let mu = MeasureVec::new(dom.clone(), vec![0.2, 0.5, 0.3]).unwrap();
        let inv = disintegrate(&g, &mu).unwrap();
        for (x, &y) in [2usize, 0, 3].iter().enumerate() {
            assert_eq!(inv.column(y).coeffs, MeasureVec::dirac(&dom, x).coeffs);
        }
        // The never-hit observation gets the zero column.
        assert_eq!(inv.column(1).coeffs, vec![0.0; 3]);
    }

    #[test]
    fn disintegration_recovers_the_measure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..=6);
            let m = rng.gen_range(1..=4);
            let dom = FinSpace::fin(n as u64);
            let cod = FinSpace::fin(m as u64);
            let map: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let g = Kernel::deterministic(&dom, &cod, &map);
            let mu = MeasureVec::new(
                dom.clone(),
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let inv = disintegrate(&g, &mu).unwrap();
            let recovered = pushforward(&inv, &pushforward(&g, &mu));
            assert!(recovered.approx_eq(&mu, 1e-12));
        }
    }

    #[test]
    fn bayes_inversion_matches_joint_enumeration() {
        let (f, mu) = coin_kernel();
        let inv = bayes_invert(&f, &mu).unwrap();
        // Joint masses: (a,heads)=0.45, (b,heads)=0.10, (a,tails)=0.05,
        // (b,tails)=0.40; conditioning on heads gives 9/11 vs 2/11.
        let heads = inv.column(0);
        assert!((heads.coeffs[0] - 9.0 / 11.0).abs() < 1e-12);
        assert!((heads.coeffs[1] - 2.0 / 11.0).abs() < 1e-12);
        let tails = inv.column(1);
        assert!((tails.coeffs[0] - 0.05 / 0.45).abs() < 1e-12);
        assert!((tails.coeffs[1] - 0.40 / 0.45).abs() < 1e-12);
    }

    #[test]
    fn bayes_inversion_agrees_with_diagonal_matrix_identity() {
        let (f, mu) = coin_kernel();
        let nu = pushforward(&f, &mu);
        let inv = bayes_invert(&f, &mu).unwrap();
        // D_mu F^T D_nu^{-1}, column by column on the support of nu.
        for y in 0..2 {
            for x in 0..2 {
                let expect = mu.coeffs[x] * f.op.entry(y, x) / nu.coeffs[y];
                assert!((inv.op.entry(x, y) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bayes_inversion_is_an_involution_on_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let dom = FinSpace::fin(n as u64);
            let cod = FinSpace::fin(m as u64);
            let cols: Vec<MeasureVec> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    MeasureVec::new(cod.clone(), raw.iter().map(|c| c / s).collect()).unwrap()
                })
                .collect();
            let f = Kernel::from_columns(&dom, &cols);
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mu = MeasureVec::new(dom.clone(), raw.iter().map(|c| c / s).collect()).unwrap();
            let nu = pushforward(&f, &mu);

            let inv = bayes_invert(&f, &mu).unwrap();
            assert!(pushforward(&inv, &nu).approx_eq(&mu, 1e-12));
            let back = bayes_invert(&inv, &nu).unwrap();
            for x in 0..n {
                assert!(back.column(x).approx_eq(&f.column(x), 1e-12));
            }
            assert!(inv.is_probability(1e-12));
        }
    }

    #[test]
    fn rn_derivative_is_the_pointwise_ratio() {
        let sp = FinSpace::fin(2);
        let nu = MeasureVec::new(sp.clone(), vec![0.2, 0.8]).unwrap();
        let mu = MeasureVec::new(sp, vec![0.5, 0.5]).unwrap();
        let h = rn_derivative(&nu, &mu).unwrap();
        assert_eq!(h.coeffs, vec![0.4, 1.6]);
    }

    #[test]
    fn rn_derivative_names_the_offending_atom() {
        let sp = FinSpace::fin(3);
        let nu = MeasureVec::new(sp.clone(), vec![0.0, 0.3, 0.7]).unwrap();
        let mu = MeasureVec::new(sp, vec![0.5, 0.5, 0.0]).unwrap();
        match rn_derivative(&nu, &mu) {
            Err(KernelError::NotAbsolutelyContinuous { atom }) => assert_eq!(atom, "2"),
            other => panic!("expected absolute-continuity failure, got {other:?}"),
        }
    }

    #[test]
    fn density_and_measure_conversions_invert_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sp = FinSpace::fin(4);
        for _ in 0..20 {
            let mu = MeasureVec::new(
                sp.clone(),
                (0..4)
                    .map(|i| if i == 3 { 0.0 } else { rng.gen_range(0.05..1.0) })
                    .collect(),
            )
            .unwrap();
            // nu absolutely continuous against mu.
            let nu = mr(
                &MeasureVec::new(sp.clone(), (0..4).map(|_| rng.gen_range(0.0..2.0)).collect())
                    .unwrap(),
                &mu,
            );
            let h = rn_derivative(&nu, &mu).unwrap();
            assert!(mr(&h, &mu).approx_eq(&nu, 1e-12));
            // Round trip from the density side, on the support.
            let h2 = rn_derivative(&mr(&h, &mu), &mu).unwrap();
            assert!(h2.approx_eq(&h, 1e-12));
        }
    }

    #[test]
    fn functional_and_measure_conversions_invert_each_other() {
        let sp = FinSpace::fin(3);
        let mu = MeasureVec::new(sp.clone(), vec![0.5, 0.0, 0.5]).unwrap();
        assert!(rr(&fr(&mu), &mu).approx_eq(&mu, 1e-15));
        // A functional class mod mu-null sets is supported inside supp(mu).
        let f = MeasureVec::new(sp, vec![0.3, 0.0, 1.2]).unwrap();
        assert!(fr(&rr(&f, &mu)).approx_eq(&f, 1e-15));
    }

    #[test]
    fn rn_naturality_square_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..30 {
            let dom = FinSpace::fin(3);
            let cod = FinSpace::fin(3);
            let cols: Vec<MeasureVec> = (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    MeasureVec::new(cod.clone(), raw.iter().map(|c| c / s).collect()).unwrap()
                })
                .collect();
            let f = Kernel::from_columns(&dom, &cols);
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mu = MeasureVec::new(dom.clone(), raw.iter().map(|c| c / s).collect()).unwrap();
            let nu = pushforward(&f, &mu);
            let rho = mr(
                &MeasureVec::new(dom.clone(), (0..3).map(|_| rng.gen_range(0.0..2.0)).collect())
                    .unwrap(),
                &mu,
            );

            let lhs = rn_derivative(&pushforward(&f, &rho), &nu).unwrap();
            let inv = bayes_invert(&f, &mu).unwrap();
            let rhs = l1_of_kernel(&inv, &rn_derivative(&rho, &mu).unwrap());
            assert!(lhs.approx_eq(&rhs, 1e-12), "naturality square failed");
        }
    }

    #[test]
    fn kernel_doc_round_trips_through_json() {
        let (f, _) = coin_kernel();
        let doc = KernelDoc::from_kernel(&f);
        let json = serde_json::to_string(&doc).unwrap();
        let back: KernelDoc = serde_json::from_str(&json).unwrap();
        let k = back.to_kernel().unwrap();
        assert_eq!(k.op.entries, f.op.entries);
        assert_eq!(k.dom().atom_labels(), f.dom().atom_labels());
    }
}
