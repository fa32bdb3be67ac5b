//! Dense fallback for tiny systems: complex matrices, a hermitian Jacobi
//! eigensolver, and the dense density-matrix view of a sparse doubled state.
//!
//! Everything here is O(dim³) and deliberately simple; the cap keeps it in
//! the regime where that is instant. Positivity of large states is covered
//! structurally (all applied maps are completely positive), the dense check
//! exists to validate the small instances exactly.

use num_traits::Zero;

use crate::scalar::{Amplitude, Scalar};
use crate::state::{basis_index, Layer, SparseState, StateError};

/// Largest dense dimension the fallback will materialize.
pub const DENSE_CAP: usize = 4096;

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat<T: Scalar> {
    dim: usize,
    data: Vec<Amplitude<T>>,
}

impl<T: Scalar> CMat<T> {
    pub fn zeros(dim: usize) -> Self {
        CMat { dim, data: vec![Amplitude::zero(); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = Amplitude::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Amplitude<T>) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[Amplitude<T>] {
        &self.data
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "matrix dimensions differ");
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self[(i, k)];
                if aik.is_zero() {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] = out[(i, j)] + aik * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)].conj())
    }

    pub fn add_scaled(&self, coeff: Amplitude<T>, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "matrix dimensions differ");
        let mut out = self.clone();
        for (x, y) in out.data.iter_mut().zip(&other.data) {
            *x = *x + coeff * *y;
        }
        out
    }

    pub fn scale(&self, coeff: Amplitude<T>) -> Self {
        let mut out = self.clone();
        for x in out.data.iter_mut() {
            *x = *x * coeff;
        }
        out
    }

    pub fn kron(&self, other: &Self) -> Self {
        let (da, db) = (self.dim, other.dim);
        let mut out = Self::zeros(da * db);
        for i1 in 0..da {
            for j1 in 0..da {
                let a = self[(i1, j1)];
                if a.is_zero() {
                    continue;
                }
                for i2 in 0..db {
                    for j2 in 0..db {
                        out[(i1 * db + i2, j1 * db + j2)] = a * other[(i2, j2)];
                    }
                }
            }
        }
        out
    }

    pub fn trace(&self) -> Amplitude<T> {
        (0..self.dim).map(|i| self[(i, i)]).fold(Amplitude::zero(), |a, b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dim, other.dim, "matrix dimensions differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).norm())
            .fold(T::zero(), T::max)
    }

    /// Max-entry deviation of `U†U` from the identity.
    pub fn unitarity_defect(&self) -> T {
        self.adjoint().mul(self).max_abs_diff(&Self::identity(self.dim))
    }

    /// Max-entry deviation from the own adjoint.
    pub fn hermitian_defect(&self) -> T {
        self.max_abs_diff(&self.adjoint())
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for CMat<T> {
    type Output = Amplitude<T>;
    fn index(&self, (i, j): (usize, usize)) -> &Amplitude<T> {
        &self.data[i * self.dim + j]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for CMat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Amplitude<T> {
        &mut self.data[i * self.dim + j]
    }
}

/// Eigenvalues of a hermitian matrix, ascending, by cyclic complex Jacobi
/// rotations. The input is hermitized as (A + A†)/2 first, so a tiny
/// anti-hermitian perturbation does not derail the sweep.
pub fn hermitian_eigenvalues<T: Scalar>(m: &CMat<T>) -> Vec<T> {
    let n = m.dim();
    let mut a = m
        .add_scaled(Amplitude::new(T::one(), T::zero()), &m.adjoint())
        .scale(Amplitude::new(T::from_f64_lossy(0.5), T::zero()))
        .data;
    let scale = a.iter().map(|z| z.norm()).fold(T::zero(), T::max).max(T::one());
    let stop = scale * T::epsilon() * T::from_f64_lossy(32.0);
    for _sweep in 0..60 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].norm());
            }
        }
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let b = a[p * n + q];
                let absb = b.norm();
                if absb <= stop {
                    continue;
                }
                // Phase factor turning the 2x2 block real, then a standard
                // symmetric Jacobi rotation on it.
                let phase = b.conj() / Amplitude::new(absb, T::zero());
                let app = a[p * n + p].re;
                let aqq = a[q * n + q].re;
                let two = T::from_f64_lossy(2.0);
                let tau = (aqq - app) / (two * absb);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                let u11 = Amplitude::new(c, T::zero());
                let u12 = Amplitude::new(s, T::zero());
                let u21 = -phase * Amplitude::new(s, T::zero());
                let u22 = phase * Amplitude::new(c, T::zero());
                for k in 0..n {
                    let xp = a[k * n + p];
                    let xq = a[k * n + q];
                    a[k * n + p] = xp * u11 + xq * u21;
                    a[k * n + q] = xp * u12 + xq * u22;
                }
                for k in 0..n {
                    let yp = a[p * n + k];
                    let yq = a[q * n + k];
                    a[p * n + k] = u11.conj() * yp + u21.conj() * yq;
                    a[q * n + k] = u12.conj() * yp + u22.conj() * yq;
                }
                a[p * n + q] = Amplitude::zero();
                a[q * n + p] = Amplitude::zero();
                a[p * n + p] = Amplitude::new(a[p * n + p].re, T::zero());
                a[q * n + q] = Amplitude::new(a[q * n + q].re, T::zero());
            }
        }
    }
    let mut eigs: Vec<T> = (0..n).map(|i| a[i * n + i].re).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}

/// Dense view of a doubled-space state as the matrix ρ_ij, available when
/// |G|^E ≤ [`DENSE_CAP`].
#[derive(Clone, Debug)]
pub struct DenseDensity<T: Scalar> {
    mat: CMat<T>,
}

impl<T: Scalar> DenseDensity<T> {
    pub fn from_state(state: &SparseState<T>) -> Result<Self, StateError> {
        let ctx = state.ctx();
        let dim = match ctx.dense_dim() {
            Some(d) if d <= DENSE_CAP => d,
            Some(d) => return Err(StateError::DenseTooLarge { dim: d, cap: DENSE_CAP }),
            None => return Err(StateError::DenseTooLarge { dim: usize::MAX, cap: DENSE_CAP }),
        };
        let mut mat = CMat::zeros(dim);
        for &(config, amp) in state.entries() {
            let row = basis_index(ctx, config, Layer::Ket);
            let col = basis_index(ctx, config, Layer::Bra);
            mat[(row, col)] = mat[(row, col)] + amp;
        }
        Ok(DenseDensity { mat })
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    pub fn trace(&self) -> Amplitude<T> {
        self.mat.trace()
    }

    pub fn hermitian_defect(&self) -> T {
        self.mat.hermitian_defect()
    }

    /// max(0, −λ_min): zero exactly when the matrix is positive
    /// semidefinite (after hermitization).
    pub fn psd_defect(&self) -> T {
        let eigs = hermitian_eigenvalues(&self.mat);
        match eigs.first() {
            Some(&min) if min < T::zero() => -min,
            _ => T::zero(),
        }
    }

    pub fn eigenvalues(&self) -> Vec<T> {
        hermitian_eigenvalues(&self.mat)
    }
}
