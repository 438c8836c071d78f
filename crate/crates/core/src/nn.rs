//! Small building blocks shared by the learnable modules: parameter
//! initialisation and affine / layer-norm application on a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackgroup_nd::{glorot_uniform, Bindings, ParameterStore, Tape, Tensor, Var};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Seeded parameter registration. Weights are Glorot-uniform, biases zero,
/// layer-norm gains one.
pub struct Init<'a> {
    store: &'a mut ParameterStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParameterStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.store
            .insert(format!("{name}.w"), glorot_uniform(fan_in, fan_out, &mut self.rng))?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out))?;
        Ok(())
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{name}.gain"), Tensor::ones(1, dim))?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(1, dim))?;
        Ok(())
    }

    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.store.insert(name, glorot_uniform(rows, cols, &mut self.rng))?;
        Ok(())
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.store.insert(name, value)?;
        Ok(())
    }
}

/// `x W + b` with parameters `{name}.w`, `{name}.b`.
pub fn linear(t: &mut Tape, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let xw = t.matmul(x, p[format!("{name}.w").as_str()])?;
    Ok(t.add_row(xw, p[format!("{name}.b").as_str()])?)
}

/// Row layer norm followed by the per-column affine `{name}.gain`, `{name}.bias`.
pub fn layer_norm(t: &mut Tape, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let z = t.layer_norm_rows(x, LN_EPS);
    let z = t.mul_row(z, p[format!("{name}.gain").as_str()])?;
    Ok(t.add_row(z, p[format!("{name}.bias").as_str()])?)
}

/// Constant `n x n` tensor from a nalgebra matrix.
pub fn tensor_from_matrix(m: &nalgebra::DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Constant `n*n x 1` column, row `i*n + j` holding `m[(i, j)]`.
pub fn pair_column(m: &nalgebra::DMatrix<f64>) -> Tensor {
    let n = m.nrows();
    Tensor::from_fn(n * n, 1, |r, _| m[(r / n, r % n)])
}

pub fn matrix_from_tensor(t: &Tensor) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j))
}
