//! Representations of SO(n) for n ∈ {3, 5}.
//!
//! A [`Rep`] is an expression tree over the trivial and standard
//! representations closed under direct sums and tensor products. The Lie
//! algebra acts through [`Rep::generator_image`]; the group through
//! [`Rep::matrix`]. Equivariant linear maps between two representations are
//! the joint nullspace of the generator constraints ([`solve_equiv_basis`]).

mod basis;
mod mlp;

pub use basis::{cached_basis, solve_equiv_basis, EquivBasis};
pub use mlp::{EquivLinear, EquivMlp, HiddenSpec, MlpCache, MlpConfig};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RepNode {
    Trivial,
    Standard,
    Tensor(Box<RepNode>, Box<RepNode>),
    Sum(Box<RepNode>, Box<RepNode>),
    /// k-fold tensor power of the standard representation.
    Power(u32),
}

/// A representation of SO(n) with its dimension cached.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rep {
    n: usize,
    node: RepNode,
    dim: usize,
}

fn node_dim(node: &RepNode, n: usize) -> usize {
    match node {
        RepNode::Trivial => 1,
        RepNode::Standard => n,
        RepNode::Tensor(a, b) => node_dim(a, n) * node_dim(b, n),
        RepNode::Sum(a, b) => node_dim(a, n) + node_dim(b, n),
        RepNode::Power(k) => n.pow(*k),
    }
}

fn check_group(n: usize) -> Result<()> {
    if n == 3 || n == 5 {
        Ok(())
    } else {
        Err(Error::UnsupportedGroup(n))
    }
}

impl Rep {
    fn from_node(n: usize, node: RepNode) -> Self {
        let dim = node_dim(&node, n);
        Self { n, node, dim }
    }

    pub fn trivial(n: usize) -> Self {
        Self::from_node(n, RepNode::Trivial)
    }

    pub fn standard(n: usize) -> Self {
        Self::from_node(n, RepNode::Standard)
    }

    /// `standard^{⊗k}`; `k = 0` is the trivial representation.
    pub fn power(n: usize, k: u32) -> Self {
        match k {
            0 => Self::trivial(n),
            1 => Self::standard(n),
            _ => Self::from_node(n, RepNode::Power(k)),
        }
    }

    pub fn tensor(&self, other: &Rep) -> Result<Rep> {
        if self.n != other.n {
            return Err(Error::GroupMismatch(self.n, other.n));
        }
        Ok(Self::from_node(
            self.n,
            RepNode::Tensor(Box::new(self.node.clone()), Box::new(other.node.clone())),
        ))
    }

    pub fn sum(&self, other: &Rep) -> Result<Rep> {
        if self.n != other.n {
            return Err(Error::GroupMismatch(self.n, other.n));
        }
        Ok(Self::from_node(
            self.n,
            RepNode::Sum(Box::new(self.node.clone()), Box::new(other.node.clone())),
        ))
    }

    /// Direct sum of `k ≥ 1` copies.
    pub fn copies(&self, k: usize) -> Rep {
        assert!(k >= 1);
        let mut acc = self.clone();
        for _ in 1..k {
            acc = acc.sum(self).expect("same group");
        }
        acc
    }

    /// Tensor product with trivial factors dropped; powers of the standard
    /// representation are merged. Keeps basis caches small.
    pub fn tensor_simplified(&self, other: &Rep) -> Result<Rep> {
        if self.n != other.n {
            return Err(Error::GroupMismatch(self.n, other.n));
        }
        match (self.tensor_order(), other.tensor_order()) {
            (Some(0), _) => Ok(other.clone()),
            (_, Some(0)) => Ok(self.clone()),
            (Some(a), Some(b)) => Ok(Rep::power(self.n, a + b)),
            _ => self.tensor(other),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group(&self) -> usize {
        self.n
    }

    pub fn node(&self) -> &RepNode {
        &self.node
    }

    /// Tensor order if the representation is a pure power of the standard.
    pub fn tensor_order(&self) -> Option<u32> {
        match &self.node {
            RepNode::Trivial => Some(0),
            RepNode::Standard => Some(1),
            RepNode::Power(k) => Some(*k),
            _ => None,
        }
    }

    /// Derivative of the representation at the identity along `a`.
    pub fn generator_image(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.nrows() != self.n || a.ncols() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: a.nrows(),
            });
        }
        Ok(node_generator(&self.node, self.n, a))
    }

    /// Group representation matrix `ρ(t)` for `t ∈ SO(n)`.
    pub fn matrix(&self, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_special_orthogonal(t, self.n, 1e-9)?;
        Ok(node_matrix(&self.node, t))
    }

    /// `ρ(t)` for any orthogonal `t` (including reflections); no validation
    /// of the determinant.
    pub fn matrix_orthogonal(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        node_matrix(&self.node, t)
    }
}

fn node_generator(node: &RepNode, n: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
    match node {
        RepNode::Trivial => DMatrix::zeros(1, 1),
        RepNode::Standard => a.clone(),
        RepNode::Sum(x, y) => block_diag(&node_generator(x, n, a), &node_generator(y, n, a)),
        RepNode::Tensor(x, y) => {
            let dx = node_dim(x, n);
            let dy = node_dim(y, n);
            kron(&node_generator(x, n, a), &DMatrix::identity(dy, dy))
                + kron(&DMatrix::identity(dx, dx), &node_generator(y, n, a))
        }
        RepNode::Power(k) => {
            let k = *k as usize;
            let d = n.pow(k as u32);
            let mut acc = DMatrix::zeros(d, d);
            for pos in 0..k {
                let mut term = DMatrix::identity(1, 1);
                for f in 0..k {
                    let factor = if f == pos { a.clone() } else { DMatrix::identity(n, n) };
                    term = kron(&term, &factor);
                }
                acc += term;
            }
            acc
        }
    }
}

fn node_matrix(node: &RepNode, t: &DMatrix<f64>) -> DMatrix<f64> {
    match node {
        RepNode::Trivial => DMatrix::identity(1, 1),
        RepNode::Standard => t.clone(),
        RepNode::Sum(x, y) => block_diag(&node_matrix(x, t), &node_matrix(y, t)),
        RepNode::Tensor(x, y) => kron(&node_matrix(x, t), &node_matrix(y, t)),
        RepNode::Power(k) => {
            let mut acc = DMatrix::identity(1, 1);
            for _ in 0..*k {
                acc = kron(&acc, t);
            }
            acc
        }
    }
}

pub(crate) fn check_special_orthogonal(t: &DMatrix<f64>, n: usize, tol: f64) -> Result<()> {
    if t.nrows() != n || t.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: t.nrows(),
        });
    }
    let orth = (t.transpose() * t - DMatrix::identity(n, n)).abs().max();
    let det = t.determinant();
    if orth > tol || (det - 1.0).abs() > tol {
        return Err(Error::NotARotation {
            orthogonality: orth,
            det,
        });
    }
    Ok(())
}

/// Kronecker product with row-major block layout: `(a ⊗ b)[(i,k),(j,l)] = a[i,j] b[k,l]`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar + br, ac + bc);
    out.view_mut((0, 0), (ar, ac)).copy_from(a);
    out.view_mut((ar, ac), (br, bc)).copy_from(b);
    out
}

/// Standard basis `E_ij − E_ji`, `i < j`, of so(n).
pub fn generators(n: usize) -> Result<Vec<DMatrix<f64>>> {
    check_group(n)?;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut a = DMatrix::zeros(n, n);
            a[(i, j)] = 1.0;
            a[(j, i)] = -1.0;
            out.push(a);
        }
    }
    Ok(out)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = a * scale;
    let mut term = DMatrix::identity(n, n);
    let mut acc = DMatrix::identity(n, n);
    for k in 1..=18 {
        term = &term * &x / k as f64;
        acc += &term;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let gens = generators(n).unwrap();
        let mut a = DMatrix::zeros(n, n);
        for g in &gens {
            a += g * rng.gen_range(-2.0..2.0);
        }
        matrix_exp(&a)
    }

    #[test]
    fn generator_counts() {
        assert_eq!(generators(3).unwrap().len(), 3);
        assert_eq!(generators(5).unwrap().len(), 10);
        assert!(generators(4).is_err());
        for g in generators(5).unwrap() {
            assert_eq!(&g + g.transpose(), DMatrix::zeros(5, 5));
        }
    }

    #[test]
    fn exp_of_generator_is_plane_rotation() {
        let g12 = &generators(3).unwrap()[0];
        let theta = 0.7f64;
        let r = matrix_exp(&(g12 * theta));
        // E_01 - E_10 generates rotation by -θ in the standard (x, y) orientation:
        // d/dθ (x, y) = (y, -x).
        let (s, c) = theta.sin_cos();
        let expected = DMatrix::from_row_slice(3, 3, &[c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0]);
        assert!((r - expected).abs().max() < 1e-14);
    }

    #[test]
    fn generator_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = &generators(5).unwrap()[3];
        assert_eq!(Rep::trivial(5).generator_image(a).unwrap(), DMatrix::zeros(1, 1));
        assert_eq!(&Rep::standard(5).generator_image(a).unwrap(), a);

        // finite-difference oracle on ρ(exp(sA)) for std ⊗ std
        let rep = Rep::standard(5).tensor(&Rep::standard(5)).unwrap();
        let h = 1e-5;
        let plus = rep.matrix(&matrix_exp(&(a * h))).unwrap();
        let minus = rep.matrix(&matrix_exp(&(a * -h))).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let exact = rep.generator_image(a).unwrap();
        assert!((fd - &exact).abs().max() < 1e-9);
        let i5 = DMatrix::identity(5, 5);
        assert_eq!(exact, kron(a, &i5) + kron(&i5, a));

        // power(2) agrees with the tensor expression
        let p2 = Rep::power(5, 2);
        assert_eq!(p2.generator_image(a).unwrap(), rep.generator_image(a).unwrap());
        let t = random_rotation(5, &mut rng);
        assert!((p2.matrix(&t).unwrap() - rep.matrix(&t).unwrap()).abs().max() < 1e-15);
    }

    #[test]
    fn homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reps = [
            Rep::trivial(5),
            Rep::standard(5),
            Rep::power(5, 2),
            Rep::standard(5).sum(&Rep::trivial(5)).unwrap().tensor(&Rep::standard(5)).unwrap(),
        ];
        for rep in &reps {
            let id = rep.matrix(&DMatrix::identity(5, 5)).unwrap();
            assert_eq!(id, DMatrix::identity(rep.dim(), rep.dim()));
            for _ in 0..10 {
                let a = random_rotation(5, &mut rng);
                let b = random_rotation(5, &mut rng);
                let lhs = rep.matrix(&(&a * &b)).unwrap();
                let rhs = rep.matrix(&a).unwrap() * rep.matrix(&b).unwrap();
                assert!((lhs - rhs).abs().max() < 1e-10);
            }
        }
        let t = random_rotation(3, &mut rng);
        assert_eq!(Rep::standard(3).matrix(&t).unwrap(), t);
    }

    #[test]
    fn rejects_invalid_elements() {
        let refl = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, -1.0]));
        assert!(Rep::standard(5).matrix(&refl).is_err());
        assert!(Rep::standard(5).matrix(&DMatrix::identity(3, 3)).is_err());
        assert!(Rep::standard(5).tensor(&Rep::standard(3)).is_err());
    }

    #[test]
    fn dimensions() {
        let r = Rep::standard(5).copies(4).sum(&Rep::trivial(5).copies(8)).unwrap();
        assert_eq!(r.dim(), 28);
        assert_eq!(Rep::power(5, 2).dim(), 25);
        assert_eq!(Rep::standard(3).tensor(&Rep::standard(3)).unwrap().dim(), 9);
    }
}
