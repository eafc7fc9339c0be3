//! Product-operator algebra on the electron (S) x nucleus (I) Hilbert space.
//!
//! Everything lives on the fixed 4x4 space with the electron as the left
//! Kronecker factor: `S_j = (sigma_j (x) sigma_0)/2`, `I_k = (sigma_0 (x)
//! sigma_k)/2`, `2 S_j I_k = (sigma_j (x) sigma_k)/2`. The fifteen traceless
//! product operators are trace-orthonormal, `tr(P_a P_b) = delta_ab`, which
//! makes the transfer efficiency a plain coefficient read-off.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix4, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
type M4 = Matrix4<C64>;

/// Hermiticity / anti-Hermiticity tolerance for validating inputs.
pub const HERM_TOL: f64 = 1e-10;
/// Unitarity guaranteed on outputs of [`matrix_exp`].
pub const UNITARY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("generator is not skew-Hermitian (deviation {deviation:.3e})")]
    NotSkewHermitian { deviation: f64 },
    #[error("target is not trace-normalized: tr(target^2) = {norm_sq:.12}")]
    UnnormalizedTarget { norm_sq: f64 },
    #[error("unknown operator label `{0}`")]
    UnknownLabel(String),
}

/// A 4x4 complex matrix on the two-spin space: a state, Hamiltonian or
/// propagator depending on context.
#[derive(Clone, Copy, PartialEq)]
pub struct Operator(M4);

impl Operator {
    pub fn from_matrix(m: M4) -> Self {
        Operator(m)
    }

    pub fn zeros() -> Self {
        Operator(M4::zeros())
    }

    pub fn identity() -> Self {
        Operator(M4::identity())
    }

    /// Kronecker product of two 2x2 blocks, electron factor on the left.
    pub fn kron(electron: &Matrix2<C64>, nucleus: &Matrix2<C64>) -> Self {
        Operator(electron.kronecker(nucleus))
    }

    pub fn matrix(&self) -> &M4 {
        &self.0
    }

    pub fn entry(&self, row: usize, col: usize) -> C64 {
        self.0[(row, col)]
    }

    pub fn adjoint(&self) -> Self {
        Operator(self.0.adjoint())
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn scale(&self, factor: C64) -> Self {
        Operator(self.0 * factor)
    }

    /// Largest entry magnitude.
    pub fn max_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `max |M - M^dagger|`.
    pub fn hermiticity_error(&self) -> f64 {
        (self.0 - self.0.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `max |U^dagger U - 1|`.
    pub fn unitarity_error(&self) -> f64 {
        (self.0.adjoint() * self.0 - M4::identity())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_error() <= tol
    }

    /// Eigenvalues of a Hermitian operator, ascending.
    pub fn hermitian_eigenvalues(&self) -> [f64; 4] {
        let eig = SymmetricEigen::new(self.0);
        let mut vals = [
            eig.eigenvalues[0],
            eig.eigenvalues[1],
            eig.eigenvalues[2],
            eig.eigenvalues[3],
        ];
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals
    }
}

impl fmt::Debug for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Operator [")?;
        for r in 0..4 {
            write!(f, "  ")?;
            for c in 0..4 {
                let z = self.0[(r, c)];
                write!(f, "{:+.4}{:+.4}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Add for Operator {
    type Output = Operator;
    fn add(self, rhs: Operator) -> Operator {
        Operator(self.0 + rhs.0)
    }
}

impl Sub for Operator {
    type Output = Operator;
    fn sub(self, rhs: Operator) -> Operator {
        Operator(self.0 - rhs.0)
    }
}

impl Mul for Operator {
    type Output = Operator;
    fn mul(self, rhs: Operator) -> Operator {
        Operator(self.0 * rhs.0)
    }
}

impl Mul<f64> for Operator {
    type Output = Operator;
    fn mul(self, rhs: f64) -> Operator {
        Operator(self.0 * C64::new(rhs, 0.0))
    }
}

impl Neg for Operator {
    type Output = Operator;
    fn neg(self) -> Operator {
        Operator(-self.0)
    }
}

fn pauli(idx: usize) -> Matrix2<C64> {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    match idx {
        0 => Matrix2::new(o, z, z, o),
        1 => Matrix2::new(z, o, o, z),
        2 => Matrix2::new(z, -i, i, z),
        3 => Matrix2::new(o, z, z, -o),
        _ => unreachable!(),
    }
}

fn proj(upper: bool) -> Matrix2<C64> {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    if upper {
        Matrix2::new(o, z, z, z)
    } else {
        Matrix2::new(z, z, z, o)
    }
}

/// Labels for the fifteen product operators plus the single-transition
/// constructions and the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisLabel {
    Sx,
    Sy,
    Sz,
    Ix,
    Iy,
    Iz,
    TwoSxIx,
    TwoSxIy,
    TwoSxIz,
    TwoSyIx,
    TwoSyIy,
    TwoSyIz,
    TwoSzIx,
    TwoSzIy,
    TwoSzIz,
    SAlpha,
    SBeta,
    SAlphaIy,
    SBetaIy,
    Identity,
}

impl BasisLabel {
    /// The fifteen traceless product operators (without the alpha/beta
    /// constructions and the identity).
    pub const PRODUCT_OPS: [BasisLabel; 15] = [
        BasisLabel::Sx,
        BasisLabel::Sy,
        BasisLabel::Sz,
        BasisLabel::Ix,
        BasisLabel::Iy,
        BasisLabel::Iz,
        BasisLabel::TwoSxIx,
        BasisLabel::TwoSxIy,
        BasisLabel::TwoSxIz,
        BasisLabel::TwoSyIx,
        BasisLabel::TwoSyIy,
        BasisLabel::TwoSyIz,
        BasisLabel::TwoSzIx,
        BasisLabel::TwoSzIy,
        BasisLabel::TwoSzIz,
    ];

    pub fn operator(self) -> Operator {
        basis_operator(self)
    }
}

impl fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BasisLabel::Sx => "S_x",
            BasisLabel::Sy => "S_y",
            BasisLabel::Sz => "S_z",
            BasisLabel::Ix => "I_x",
            BasisLabel::Iy => "I_y",
            BasisLabel::Iz => "I_z",
            BasisLabel::TwoSxIx => "2S_xI_x",
            BasisLabel::TwoSxIy => "2S_xI_y",
            BasisLabel::TwoSxIz => "2S_xI_z",
            BasisLabel::TwoSyIx => "2S_yI_x",
            BasisLabel::TwoSyIy => "2S_yI_y",
            BasisLabel::TwoSyIz => "2S_yI_z",
            BasisLabel::TwoSzIx => "2S_zI_x",
            BasisLabel::TwoSzIy => "2S_zI_y",
            BasisLabel::TwoSzIz => "2S_zI_z",
            BasisLabel::SAlpha => "S_a",
            BasisLabel::SBeta => "S_b",
            BasisLabel::SAlphaIy => "S_aI_y",
            BasisLabel::SBetaIy => "S_bI_y",
            BasisLabel::Identity => "1",
        };
        f.write_str(name)
    }
}

impl FromStr for BasisLabel {
    type Err = AlgebraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != ' ')
            .collect::<String>()
            .to_ascii_lowercase();
        let label = match key.as_str() {
            "sx" => BasisLabel::Sx,
            "sy" => BasisLabel::Sy,
            "sz" => BasisLabel::Sz,
            "ix" => BasisLabel::Ix,
            "iy" => BasisLabel::Iy,
            "iz" => BasisLabel::Iz,
            "2sxix" => BasisLabel::TwoSxIx,
            "2sxiy" => BasisLabel::TwoSxIy,
            "2sxiz" => BasisLabel::TwoSxIz,
            "2syix" => BasisLabel::TwoSyIx,
            "2syiy" => BasisLabel::TwoSyIy,
            "2syiz" => BasisLabel::TwoSyIz,
            "2szix" => BasisLabel::TwoSzIx,
            "2sziy" => BasisLabel::TwoSzIy,
            "2sziz" => BasisLabel::TwoSzIz,
            "sa" | "salpha" => BasisLabel::SAlpha,
            "sb" | "sbeta" => BasisLabel::SBeta,
            "saiy" | "salphaiy" => BasisLabel::SAlphaIy,
            "sbiy" | "sbetaiy" => BasisLabel::SBetaIy,
            "1" | "id" | "identity" => BasisLabel::Identity,
            _ => return Err(AlgebraError::UnknownLabel(s.to_string())),
        };
        Ok(label)
    }
}

/// Literal matrix for a basis label per the Kronecker-product definitions.
pub fn basis_operator(label: BasisLabel) -> Operator {
    let half = C64::new(0.5, 0.0);
    let m = match label {
        BasisLabel::Sx => pauli(1).kronecker(&pauli(0)) * half,
        BasisLabel::Sy => pauli(2).kronecker(&pauli(0)) * half,
        BasisLabel::Sz => pauli(3).kronecker(&pauli(0)) * half,
        BasisLabel::Ix => pauli(0).kronecker(&pauli(1)) * half,
        BasisLabel::Iy => pauli(0).kronecker(&pauli(2)) * half,
        BasisLabel::Iz => pauli(0).kronecker(&pauli(3)) * half,
        BasisLabel::TwoSxIx => pauli(1).kronecker(&pauli(1)) * half,
        BasisLabel::TwoSxIy => pauli(1).kronecker(&pauli(2)) * half,
        BasisLabel::TwoSxIz => pauli(1).kronecker(&pauli(3)) * half,
        BasisLabel::TwoSyIx => pauli(2).kronecker(&pauli(1)) * half,
        BasisLabel::TwoSyIy => pauli(2).kronecker(&pauli(2)) * half,
        BasisLabel::TwoSyIz => pauli(2).kronecker(&pauli(3)) * half,
        BasisLabel::TwoSzIx => pauli(3).kronecker(&pauli(1)) * half,
        BasisLabel::TwoSzIy => pauli(3).kronecker(&pauli(2)) * half,
        BasisLabel::TwoSzIz => pauli(3).kronecker(&pauli(3)) * half,
        BasisLabel::SAlpha => proj(true).kronecker(&pauli(0)),
        BasisLabel::SBeta => proj(false).kronecker(&pauli(0)),
        BasisLabel::SAlphaIy => proj(true).kronecker(&pauli(2)) * half,
        BasisLabel::SBetaIy => proj(false).kronecker(&pauli(2)) * half,
        BasisLabel::Identity => pauli(0).kronecker(&pauli(0)),
    };
    Operator(m)
}

/// Exponential of a skew-Hermitian generator via Hermitian eigendecomposition.
///
/// Writes `G = -iH` with `H` Hermitian, diagonalizes `H = V diag(l) V^dagger`
/// and returns `V diag(exp(-i l)) V^dagger`. Exact for the 4x4 size; the
/// result is unitary to [`UNITARY_TOL`].
pub fn matrix_exp(generator: &Operator) -> Result<Operator, AlgebraError> {
    let scale = generator.max_norm().max(1.0);
    let skew_err = (generator.0 + generator.0.adjoint())
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if skew_err > HERM_TOL * scale {
        return Err(AlgebraError::NotSkewHermitian {
            deviation: skew_err,
        });
    }
    // H = iG is Hermitian; symmetrize to scrub roundoff before decomposing.
    let h = (generator.0 * C64::new(0.0, 1.0) + (generator.0 * C64::new(0.0, 1.0)).adjoint())
        * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let mut d = M4::zeros();
    for k in 0..4 {
        let phase = -eig.eigenvalues[k];
        d[(k, k)] = C64::new(phase.cos(), phase.sin());
    }
    Ok(Operator(&eig.eigenvectors * d * eig.eigenvectors.adjoint()))
}

/// `U rho U^dagger`. Caller guarantees `U` unitary; Hermiticity and trace of
/// `rho` are preserved.
pub fn conjugate(u: &Operator, rho: &Operator) -> Operator {
    debug_assert!(u.is_unitary(1e-8), "conjugate: U is not unitary");
    Operator(u.0 * rho.0 * u.0.adjoint())
}

/// Hilbert-Schmidt inner product `tr(a^dagger b)`.
pub fn trace_inner(a: &Operator, b: &Operator) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for r in 0..4 {
        for c in 0..4 {
            acc += a.0[(r, c)].conj() * b.0[(r, c)];
        }
    }
    acc
}

/// Transfer efficiency: the coefficient of a trace-normalized `target` in
/// `rho`, i.e. `Re tr(target^dagger rho)`. Equals 1 iff `rho = target` for
/// normalized states.
pub fn transfer_efficiency(rho: &Operator, target: &Operator) -> Result<f64, AlgebraError> {
    let norm_sq = trace_inner(target, target).re;
    if (norm_sq - 1.0).abs() > 1e-8 {
        return Err(AlgebraError::UnnormalizedTarget { norm_sq });
    }
    Ok(trace_inner(target, rho).re)
}
