use crate::error::Result;
use crate::linalg;
use crate::model::{Instance, Model, Payload};
use crate::Error;

/// `l(x, theta) = 0.5 * |theta - x|^2`. Hessian is the identity, which makes
/// trajectories and co-states available in closed form.
#[derive(Debug, Clone)]
pub struct QuadraticToy {
    dim: usize,
}

impl QuadraticToy {
    pub fn new(dim: usize) -> Self {
        QuadraticToy { dim }
    }

    fn features<'a>(&self, x: &'a Instance) -> Result<&'a [f64]> {
        match &x.payload {
            Payload::Features(f) => {
                linalg::check_len(f.len(), self.dim, "quadratic toy instance")?;
                Ok(f)
            }
            Payload::Tokens(_) => Err(Error::config("quadratic toy expects feature payloads")),
        }
    }
}

impl Model for QuadraticToy {
    fn num_params(&self) -> usize {
        self.dim
    }

    fn check_instance(&self, x: &Instance) -> Result<()> {
        self.features(x).map(|_| ())
    }

    fn loss(&self, x: &Instance, theta: &[f64]) -> Result<f64> {
        let f = self.features(x)?;
        Ok(0.5 * theta.iter().zip(f).map(|(t, c)| (t - c) * (t - c)).sum::<f64>())
    }

    fn grad_acc(&self, x: &Instance, theta: &[f64], weight: f64, out: &mut [f64]) -> Result<()> {
        let f = self.features(x)?;
        for ((o, t), c) in out.iter_mut().zip(theta).zip(f) {
            *o += weight * (t - c);
        }
        Ok(())
    }

    fn has_exact_hvp(&self) -> bool {
        true
    }

    fn hvp_acc(&self, _x: &Instance, _theta: &[f64], v: &[f64], weight: f64, out: &mut [f64]) -> Result<()> {
        linalg::axpy(weight, v, out);
        Ok(())
    }
}
