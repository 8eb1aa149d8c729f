use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum tolerance for [`QualityScores`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex: one non-negative weight per instance,
/// summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QualityScores(Vec<f64>);

impl QualityScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("quality scores"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numerical(format!("quality score {i} is {v}, outside the simplex")));
        }
        let sum = sorted_sum(&values);
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Numerical(format!("quality scores sum to {sum}, not 1")));
        }
        Ok(QualityScores(values))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        QualityScores(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for QualityScores {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for QualityScores {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        QualityScores::new(v)
    }
}

impl From<QualityScores> for Vec<f64> {
    fn from(q: QualityScores) -> Vec<f64> {
        q.0
    }
}

fn sort_desc(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    u
}

/// Sum in descending-value order, so the result does not depend on the
/// order of the input.
fn sorted_sum(v: &[f64]) -> f64 {
    sort_desc(v).iter().sum()
}

/// Euclidean projection onto `{g >= 0, sum g = 1}` by sort-and-threshold.
///
/// Inputs that are already feasible (non-negative, sum within a few ulps of
/// one) are returned unchanged, which makes the map exactly idempotent.
pub fn project_simplex(v: &[f64]) -> Result<QualityScores> {
    if v.is_empty() {
        return Err(Error::Empty("projection input"));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("cannot project non-finite value {x}")));
    }
    let u = sort_desc(v);
    let total: f64 = u.iter().sum();
    let feasible_tol = 4.0 * f64::EPSILON * v.len() as f64;
    if u[u.len() - 1] >= 0.0 && (total - 1.0).abs() <= feasible_tol {
        return Ok(QualityScores(v.to_vec()));
    }

    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut rho_sum = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        if uk - (cumsum - 1.0) / (k + 1) as f64 > 0.0 {
            rho = k + 1;
            rho_sum = cumsum;
        }
    }
    // rho >= 1 always: for k = 1 the condition reads 1 > 0.
    let tau = (rho_sum - 1.0) / rho as f64;
    let mut out: Vec<f64> = v.iter().map(|x| (x - tau).max(0.0)).collect();
    let s = sorted_sum(&out);
    out.iter_mut().for_each(|x| *x /= s);
    Ok(QualityScores(out))
}
