//! Velocity-space discretization: the global Maxwellian, a tensorized Hermite
//! Galerkin basis with Gauss-Hermite quadrature, the macroscopic projector,
//! and the high-order moment functionals for two-species distributions.
//!
//! Basis functions are `phi_a(xi) = h_{a1}(xi_1) h_{a2}(xi_2) h_{a3}(xi_3)
//! M^{1/2}(xi)` where `h_j` are probabilists' Hermite polynomials normalized
//! to unit L^2 norm against the unit Gaussian. Multi-indices are enumerated in
//! lexicographic order over `(a1, a2, a3)` with total degree `<= degree_cap`;
//! the ordering is stable and recorded in run manifests.
//!
//! All six collision invariants have polynomial degree `<= 2`, so the
//! macroscopic projector is exact in this basis rather than approximate.

use nalgebra::{ComplexField, DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::quadrature::gauss_hermite_prob;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("degree_cap must be >= 3 so the collision invariants and third-order moments are representable (got {0})")]
    DegreeTooSmall(usize),
    #[error("quad_order {quad_order} too coarse for degree_cap {degree_cap}; need at least degree_cap + 2")]
    QuadratureTooCoarse { quad_order: usize, degree_cap: usize },
    #[error("basis Gram matrix deviates from identity by {0:.3e}; quadrature inconsistent")]
    GramDeviation(f64),
}

/// Scalar bound used throughout: real (`f64`) or complex (`Complex<f64>`)
/// coefficients over an `f64` real field.
pub trait Scalar: ComplexField<RealField = f64> {}
impl<T: ComplexField<RealField = f64>> Scalar for T {}

pub(crate) fn from_f64<S: Scalar>(x: f64) -> S {
    S::from_real(x)
}

/// Dot of a real moment vector against a possibly complex coefficient vector
/// (no conjugation; the moment functionals are linear).
pub(crate) fn dot_rs<S: Scalar>(r: &DVector<f64>, v: &DVector<S>) -> S {
    let mut acc = S::zero();
    for i in 0..r.len() {
        acc += v[i].clone() * from_f64::<S>(r[i]);
    }
    acc
}

/// Normalized global Maxwellian `(2 pi)^{-3/2} exp(-|xi|^2 / 2)`.
pub fn maxwellian(xi: [f64; 3]) -> f64 {
    let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
    (std::f64::consts::TAU).powf(-1.5) * (-0.5 * r2).exp()
}

/// Values of the L^2-normalized probabilists' Hermite polynomials
/// `h_0 .. h_max_deg` at `x`.
pub(crate) fn hermite_values(x: f64, max_deg: usize) -> Vec<f64> {
    let mut h = vec![0.0; max_deg + 1];
    hermite_values_into(x, &mut h);
    h
}

fn hermite_values_into(x: f64, h: &mut [f64]) {
    h[0] = 1.0;
    if h.len() == 1 {
        return;
    }
    h[1] = x;
    for j in 1..h.len() - 1 {
        h[j + 1] = (x * h[j] - (j as f64).sqrt() * h[j - 1]) / ((j + 1) as f64).sqrt();
    }
}

/// Reusable buffers for repeated basis evaluation in hot loops.
pub(crate) struct EvalScratch {
    h1: Vec<f64>,
    h2: Vec<f64>,
    h3: Vec<f64>,
}

/// Two-species coefficient vector `u = [u_+, u_-]` in a shared basis.
///
/// Species signs are fixed metadata: charge matrix `q = diag(1, -1)` and the
/// column `q_1 = [1, -1]` enter the field coupling and the charge moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSpecies<S: Scalar> {
    pub plus: DVector<S>,
    pub minus: DVector<S>,
}

impl<S: Scalar> TwoSpecies<S> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            plus: DVector::zeros(dim),
            minus: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.plus.len()
    }

    /// Euclidean coefficient norm; by Parseval this is the `L^2_xi` norm.
    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_squared(&self) -> f64 {
        self.plus.norm_squared() + self.minus.norm_squared()
    }

    /// Component-wise sum `u_+ + u_-` (contraction against `[1, 1]`).
    pub fn species_sum(&self) -> DVector<S> {
        &self.plus + &self.minus
    }

    /// Charge contraction `u_+ - u_-` (against `q_1 = [1, -1]`).
    pub fn species_diff(&self) -> DVector<S> {
        &self.plus - &self.minus
    }

    pub fn scaled(&self, s: S) -> Self {
        Self {
            plus: self.plus.clone() * s.clone(),
            minus: self.minus.clone() * s,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            plus: &self.plus + &other.plus,
            minus: &self.minus + &other.minus,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            plus: &self.plus - &other.plus,
            minus: &self.minus - &other.minus,
        }
    }
}

/// Macroscopic coordinates of `P u`: densities `a_+, a_-`, bulk velocity `b`,
/// temperature perturbation `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState<S: Scalar> {
    pub a_plus: S,
    pub a_minus: S,
    pub b: Vector3<S>,
    pub c: S,
}

/// High-order moments of a single-species distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct HighMoments<S: Scalar> {
    pub theta: Matrix3<S>,
    pub lambda: Vector3<S>,
}

/// Truncated Hermite-function basis with its quadrature rule and the moment
/// machinery shared by every downstream module. Immutable once built; safe to
/// share read-only across threads.
#[derive(Debug, Clone)]
pub struct VelocityBasis {
    pub degree_cap: usize,
    pub quad_order: usize,
    /// Multi-indices in lexicographic order; `indices[m]` is the exponent
    /// triple of basis function `m`.
    pub indices: Vec<[usize; 3]>,
    /// Number of basis functions per species.
    pub dim: usize,
    /// Tensor Gauss-Hermite nodes for the unit-Gaussian measure (mass 1).
    pub quad_nodes: Vec<[f64; 3]>,
    pub quad_weights: Vec<f64>,
    /// `eval_table[(q, m)]` = value of polynomial factor `p_m` at node `q`.
    eval_table: DMatrix<f64>,
    // Moment vectors: component m is <psi, p_m>_M for the named weight psi.
    psi_mass: DVector<f64>,
    psi_xi: [DVector<f64>; 3],
    psi_energy: DVector<f64>,
    theta_vecs: [[DVector<f64>; 3]; 3],
    lambda_vecs: [DVector<f64>; 3],
    /// Galerkin matrices of multiplication by `xi_j`.
    xi_mult: [DMatrix<f64>; 3],
}

/// Builds the orthonormal basis; rejects `degree_cap < 3` (third-order
/// moments unrepresentable) and quadrature too coarse for the Gram check.
pub fn build_basis(degree_cap: usize, quad_order: usize) -> Result<VelocityBasis, BasisError> {
    if degree_cap < 3 {
        return Err(BasisError::DegreeTooSmall(degree_cap));
    }
    if quad_order < degree_cap + 2 {
        return Err(BasisError::QuadratureTooCoarse {
            quad_order,
            degree_cap,
        });
    }

    let mut indices = Vec::new();
    for a1 in 0..=degree_cap {
        for a2 in 0..=(degree_cap - a1) {
            for a3 in 0..=(degree_cap - a1 - a2) {
                indices.push([a1, a2, a3]);
            }
        }
    }
    let dim = indices.len();

    let rule = gauss_hermite_prob(quad_order);
    let n1 = rule.len();
    let mut quad_nodes = Vec::with_capacity(n1 * n1 * n1);
    let mut quad_weights = Vec::with_capacity(n1 * n1 * n1);
    for i in 0..n1 {
        for j in 0..n1 {
            for l in 0..n1 {
                quad_nodes.push([rule.nodes[i], rule.nodes[j], rule.nodes[l]]);
                quad_weights.push(rule.weights[i] * rule.weights[j] * rule.weights[l]);
            }
        }
    }

    let nq = quad_nodes.len();
    let mut eval_table = DMatrix::<f64>::zeros(nq, dim);
    for (q, node) in quad_nodes.iter().enumerate() {
        let h1 = hermite_values(node[0], degree_cap);
        let h2 = hermite_values(node[1], degree_cap);
        let h3 = hermite_values(node[2], degree_cap);
        for (m, idx) in indices.iter().enumerate() {
            eval_table[(q, m)] = h1[idx[0]] * h2[idx[1]] * h3[idx[2]];
        }
    }

    // Gram check: quadrature of p_a p_b against the Gaussian must be I.
    let mut max_dev: f64 = 0.0;
    for a in 0..dim {
        for b in a..dim {
            let mut g = 0.0;
            for q in 0..nq {
                g += quad_weights[q] * eval_table[(q, a)] * eval_table[(q, b)];
            }
            let target = if a == b { 1.0 } else { 0.0 };
            max_dev = max_dev.max((g - target).abs());
        }
    }
    if max_dev > 1e-12 {
        return Err(BasisError::GramDeviation(max_dev));
    }

    let moment = |f: &dyn Fn(&[f64; 3]) -> f64| -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        for m in 0..dim {
            let mut acc = 0.0;
            for q in 0..nq {
                acc += quad_weights[q] * eval_table[(q, m)] * f(&quad_nodes[q]);
            }
            v[m] = acc;
        }
        v
    };

    let psi_mass = moment(&|_| 1.0);
    let psi_xi = [moment(&|x| x[0]), moment(&|x| x[1]), moment(&|x| x[2])];
    let r2 = |x: &[f64; 3]| x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    let psi_energy = moment(&|x| r2(x) - 3.0);
    let theta_vecs = std::array::from_fn(|i| {
        std::array::from_fn(|j| moment(&|x| x[i] * x[j] - 1.0))
    });
    let lambda_vecs = std::array::from_fn(|i| moment(&|x| 0.1 * (r2(x) - 5.0) * x[i]));

    let mut xi_mult: [DMatrix<f64>; 3] = std::array::from_fn(|_| DMatrix::zeros(dim, dim));
    for axis in 0..3 {
        for a in 0..dim {
            for b in a..dim {
                let mut acc = 0.0;
                for q in 0..nq {
                    acc += quad_weights[q]
                        * eval_table[(q, a)]
                        * eval_table[(q, b)]
                        * quad_nodes[q][axis];
                }
                xi_mult[axis][(a, b)] = acc;
                xi_mult[axis][(b, a)] = acc;
            }
        }
    }

    Ok(VelocityBasis {
        degree_cap,
        quad_order,
        indices,
        dim,
        quad_nodes,
        quad_weights,
        eval_table,
        psi_mass,
        psi_xi,
        psi_energy,
        theta_vecs,
        lambda_vecs,
        xi_mult,
    })
}

impl VelocityBasis {
    pub(crate) fn eval_scratch(&self) -> EvalScratch {
        EvalScratch {
            h1: vec![0.0; self.degree_cap + 1],
            h2: vec![0.0; self.degree_cap + 1],
            h3: vec![0.0; self.degree_cap + 1],
        }
    }

    pub(crate) fn eval_polys_into(
        &self,
        xi: [f64; 3],
        scratch: &mut EvalScratch,
        out: &mut [f64],
    ) {
        hermite_values_into(xi[0], &mut scratch.h1);
        hermite_values_into(xi[1], &mut scratch.h2);
        hermite_values_into(xi[2], &mut scratch.h3);
        for (o, idx) in out.iter_mut().zip(&self.indices) {
            *o = scratch.h1[idx[0]] * scratch.h2[idx[1]] * scratch.h3[idx[2]];
        }
    }

    /// Values of all polynomial factors `p_m` at an arbitrary point.
    pub fn eval_polys(&self, xi: [f64; 3]) -> DVector<f64> {
        let h1 = hermite_values(xi[0], self.degree_cap);
        let h2 = hermite_values(xi[1], self.degree_cap);
        let h3 = hermite_values(xi[2], self.degree_cap);
        DVector::from_iterator(
            self.dim,
            self.indices
                .iter()
                .map(|idx| h1[idx[0]] * h2[idx[1]] * h3[idx[2]]),
        )
    }

    /// Quadrature projection `<psi, p_m>_M` of an arbitrary velocity
    /// polynomial; exact while `deg(psi) + degree_cap <= 2 quad_order - 1`.
    pub fn moment_vector(&self, psi: impl Fn(&[f64; 3]) -> f64) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        for m in 0..self.dim {
            let mut acc = 0.0;
            for q in 0..self.quad_nodes.len() {
                acc += self.quad_weights[q] * self.eval_table[(q, m)] * psi(&self.quad_nodes[q]);
            }
            v[m] = acc;
        }
        v
    }

    /// Galerkin matrix of multiplication by `xi_axis`.
    pub fn xi_mult_matrix(&self, axis: usize) -> &DMatrix<f64> {
        &self.xi_mult[axis]
    }

    /// `L^2_xi` norm by direct quadrature of the represented function; used to
    /// check Parseval against the coefficient norm.
    pub fn quadrature_norm(&self, u: &TwoSpecies<f64>) -> f64 {
        let mut acc = 0.0;
        for q in 0..self.quad_nodes.len() {
            let mut vp = 0.0;
            let mut vm = 0.0;
            for m in 0..self.dim {
                vp += self.eval_table[(q, m)] * u.plus[m];
                vm += self.eval_table[(q, m)] * u.minus[m];
            }
            acc += self.quad_weights[q] * (vp * vp + vm * vm);
        }
        acc.sqrt()
    }

    /// Macroscopic coordinates of `u`: `a_pm = <M^{1/2}, u_pm>`,
    /// `b_i = (1/2) <xi_i M^{1/2}, u_+ + u_->`,
    /// `c = (1/12) <(|xi|^2 - 3) M^{1/2}, u_+ + u_->`.
    pub fn macro_state<S: Scalar>(&self, u: &TwoSpecies<S>) -> MacroState<S> {
        let sum = u.species_sum();
        MacroState {
            a_plus: dot_rs(&self.psi_mass, &u.plus),
            a_minus: dot_rs(&self.psi_mass, &u.minus),
            b: Vector3::new(
                dot_rs(&self.psi_xi[0], &sum) * from_f64::<S>(0.5),
                dot_rs(&self.psi_xi[1], &sum) * from_f64::<S>(0.5),
                dot_rs(&self.psi_xi[2], &sum) * from_f64::<S>(0.5),
            ),
            c: dot_rs(&self.psi_energy, &sum) * from_f64::<S>(1.0 / 12.0),
        }
    }

    /// Coefficients of `P u` given its macroscopic coordinates.
    pub fn macro_coefficients<S: Scalar>(&self, m: &MacroState<S>) -> TwoSpecies<S> {
        let dim = self.dim;
        let mut plus = DVector::<S>::zeros(dim);
        let mut minus = DVector::<S>::zeros(dim);
        for i in 0..dim {
            let shared = m.b[0].clone() * from_f64::<S>(self.psi_xi[0][i])
                + m.b[1].clone() * from_f64::<S>(self.psi_xi[1][i])
                + m.b[2].clone() * from_f64::<S>(self.psi_xi[2][i])
                + m.c.clone() * from_f64::<S>(self.psi_energy[i]);
            plus[i] = m.a_plus.clone() * from_f64::<S>(self.psi_mass[i]) + shared.clone();
            minus[i] = m.a_minus.clone() * from_f64::<S>(self.psi_mass[i]) + shared;
        }
        TwoSpecies { plus, minus }
    }

    /// Splits `u` into macroscopic coordinates and the microscopic remainder
    /// `{I - P} u`; the remainder is orthogonal to the collision invariants.
    pub fn project_p<S: Scalar>(&self, u: &TwoSpecies<S>) -> (MacroState<S>, TwoSpecies<S>) {
        let macros = self.macro_state(u);
        let pu = self.macro_coefficients(&macros);
        let micro = u.sub(&pu);
        (macros, micro)
    }

    /// `Theta_{ij}(w) = <(xi_i xi_j - 1) M^{1/2}, w>`.
    pub fn theta_moment<S: Scalar>(&self, w: &DVector<S>) -> Matrix3<S> {
        Matrix3::from_fn(|i, j| dot_rs(&self.theta_vecs[i][j], w))
    }

    /// `Lambda_i(w) = (1/10) <(|xi|^2 - 5) xi_i M^{1/2}, w>`.
    pub fn lambda_moment<S: Scalar>(&self, w: &DVector<S>) -> Vector3<S> {
        Vector3::from_fn(|i, _| dot_rs(&self.lambda_vecs[i], w))
    }

    pub fn high_moments<S: Scalar>(&self, w: &DVector<S>) -> HighMoments<S> {
        HighMoments {
            theta: self.theta_moment(w),
            lambda: self.lambda_moment(w),
        }
    }

    /// Charge-current moment `G = <xi M^{1/2}, u_+ - u_->`.
    pub fn charge_current<S: Scalar>(&self, u: &TwoSpecies<S>) -> Vector3<S> {
        let diff = u.species_diff();
        Vector3::from_fn(|i, _| dot_rs(&self.psi_xi[i], &diff))
    }

    /// Orthonormal coefficient vectors spanning the collision-invariant space
    /// `N`, stacked as `[plus; minus]` vectors of length `2 dim`.
    pub fn null_space_stacked(&self) -> Vec<DVector<f64>> {
        let dim = self.dim;
        let stack = |p: &DVector<f64>, m: &DVector<f64>| {
            let mut v = DVector::zeros(2 * dim);
            v.rows_mut(0, dim).copy_from(p);
            v.rows_mut(dim, dim).copy_from(m);
            v
        };
        let zero = DVector::zeros(dim);
        let mut out = Vec::with_capacity(6);
        out.push(stack(&self.psi_mass, &zero));
        out.push(stack(&zero, &self.psi_mass));
        for axis in 0..3 {
            let v = &self.psi_xi[axis] * (1.0 / 2f64.sqrt());
            out.push(stack(&v, &v));
        }
        // (|xi|^2 - 3) M^{1/2} has norm^2 = 6 per species.
        let e = &self.psi_energy * (1.0 / 12f64.sqrt());
        out.push(stack(&e, &e));
        out
    }

    /// Moment vector of `(xi_i xi_j - 1) M^{1/2}`.
    pub fn theta_vec(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.theta_vecs[i][j]
    }

    /// Moment vector of `(1/10)(|xi|^2 - 5) xi_i M^{1/2}`.
    pub fn lambda_vec(&self, i: usize) -> &DVector<f64> {
        &self.lambda_vecs[i]
    }

    /// Coefficient vector of the polynomial `xi_j` (the moment weight
    /// `xi_j M^{1/2}`), reused by the field coupling and charge moments.
    pub fn psi_xi(&self, axis: usize) -> &DVector<f64> {
        &self.psi_xi[axis]
    }

    pub fn psi_mass(&self) -> &DVector<f64> {
        &self.psi_mass
    }

    pub fn psi_energy(&self) -> &DVector<f64> {
        &self.psi_energy
    }
}
