use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use super::{generators, kron, Rep};
use crate::error::{Error, Result};

/// Orthonormal bases for equivariant weights `ρ_in → ρ_out` and biases in `ρ_out`.
#[derive(Debug, Clone)]
pub struct EquivBasis {
    pub d_in: usize,
    pub d_out: usize,
    /// `d_out × d_in` matrices, orthonormal under the Frobenius product.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl EquivBasis {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Orthonormal basis of the nullspace of `c`, using the rank rule
/// `σ < 1e-9·max(σ_max, 1)`.
fn nullspace(c: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = c.ncols();
    // pad so the SVD returns a full right basis
    let c = if c.nrows() < n {
        let mut padded = DMatrix::zeros(n, n);
        padded.view_mut((0, 0), c.shape()).copy_from(c);
        padded
    } else {
        c.clone()
    };
    let svd = c.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let tol = 1e-9 * smax.max(1.0);
    let mut out = Vec::new();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s < tol {
            let mut v: DVector<f64> = vt.row(k).transpose();
            // deterministic sign: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            out.push(v);
        }
    }
    out
}

pub fn solve_equiv_basis(rep_in: &Rep, rep_out: &Rep) -> Result<EquivBasis> {
    if rep_in.group() != rep_out.group() {
        return Err(Error::GroupMismatch(rep_in.group(), rep_out.group()));
    }
    let n = rep_in.group();
    let (di, dout) = (rep_in.dim(), rep_out.dim());
    let gens = generators(n)?;
    let block = dout * di;
    let mut c = DMatrix::zeros(gens.len() * block, block);
    let mut cb = DMatrix::zeros(gens.len() * dout, dout);
    let id_in = DMatrix::identity(di, di);
    let id_out = DMatrix::identity(dout, dout);
    for (k, a) in gens.iter().enumerate() {
        let d_in = rep_in.generator_image(a)?;
        let d_out = rep_out.generator_image(a)?;
        // row-major vec: vec(A W B) = (A ⊗ Bᵀ) vec(W)
        let ck = kron(&d_out, &id_in) - kron(&id_out, &d_in.transpose());
        c.view_mut((k * block, 0), (block, block)).copy_from(&ck);
        cb.view_mut((k * dout, 0), (dout, dout)).copy_from(&d_out);
    }
    let weights = nullspace(&c)
        .into_iter()
        .map(|v| DMatrix::from_row_slice(dout, di, v.as_slice()))
        .collect();
    let biases = nullspace(&cb);
    Ok(EquivBasis {
        d_in: di,
        d_out: dout,
        weights,
        biases,
    })
}

type Cache = Mutex<HashMap<(Rep, Rep), Arc<EquivBasis>>>;

fn cache() -> &'static Cache {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// [`solve_equiv_basis`] memoized per `(rep_in, rep_out)`.
pub fn cached_basis(rep_in: &Rep, rep_out: &Rep) -> Result<Arc<EquivBasis>> {
    let key = (rep_in.clone(), rep_out.clone());
    if let Some(b) = cache().lock().expect("basis cache poisoned").get(&key) {
        return Ok(b.clone());
    }
    let basis = Arc::new(solve_equiv_basis(rep_in, rep_out)?);
    cache()
        .lock()
        .expect("basis cache poisoned")
        .insert(key, basis.clone());
    Ok(basis)
}
