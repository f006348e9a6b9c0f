use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor2;

/// `(l+1) × A` consecutive actions, one row per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub values: Tensor2,
}

impl ActionChunk {
    pub fn new(values: Tensor2) -> Result<Self> {
        values.ensure_finite("action chunk")?;
        Ok(Self { values })
    }

    pub fn zeros(steps: usize, action_dim: usize) -> Self {
        Self { values: Tensor2::zeros(steps, action_dim) }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor2::from_rows(rows)?)
    }

    pub fn steps(&self) -> usize {
        self.values.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn action(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Row-major flattening into a `1 × (steps·A)` row.
    pub fn flatten(&self) -> Tensor2 {
        Tensor2::row_vector(self.values.data())
    }

    pub fn check_shape(&self, steps: usize, action_dim: usize) -> Result<()> {
        if self.values.shape() != (steps, action_dim) {
            return shape_err(format!(
                "chunk is {}x{}, expected {steps}x{action_dim}",
                self.values.rows(),
                self.values.cols()
            ));
        }
        Ok(())
    }
}

/// One point on the denoising path: `noisy = τ·a + (1−τ)·ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseState {
    tau: f64,
    pub noisy: ActionChunk,
}

impl DenoiseState {
    pub fn new(tau: f64, noisy: ActionChunk) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { tau, noisy })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("tau {tau} outside [0, 1]")));
    }
    Ok(())
}
