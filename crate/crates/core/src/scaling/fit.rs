//! Small dense solvers: Levenberg-Marquardt for the offset power laws and
//! BFGS for the Huber objective.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LmResult {
    pub params: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `|r(x)|^2` where `eval` returns residuals and the Jacobian
/// (one row per residual). Damping is scaled by `diag(J'J)`.
pub(crate) fn levenberg_marquardt<F>(eval: F, x0: &[f64], max_iter: usize) -> LmResult
where
    F: Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>),
{
    let p = x0.len();
    let mut x = x0.to_vec();
    let (mut r, mut jac) = eval(&x);
    let mut sse: f64 = r.iter().map(|v| v * v).sum();
    if !sse.is_finite() {
        return LmResult { params: x, sse, iterations: 0, converged: false };
    }
    let mut mu = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let m = r.len();
        let j = DMatrix::from_fn(m, p, |i, k| jac[i][k]);
        let a = j.tr_mul(&j);
        let g = j.tr_mul(&DVector::from_vec(r.clone()));
        if g.amax() == 0.0 || sse == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while mu < 1e20 {
            let mut damped = a.clone();
            for k in 0..p {
                damped[(k, k)] += mu * a[(k, k)].max(1e-300);
            }
            let Some(step) = damped.clone().cholesky().map(|c| c.solve(&(-&g))).or_else(|| damped.lu().solve(&(-&g))) else {
                mu *= 4.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let (rt, jt) = eval(&trial);
            let st: f64 = rt.iter().map(|v| v * v).sum();
            if st.is_finite() && st < sse {
                let small_step = step.iter().zip(&x).all(|(d, v)| d.abs() <= 1e-15 * v.abs().max(1e-300));
                let small_gain = sse - st <= 1e-15 * sse;
                x = trial;
                r = rt;
                jac = jt;
                sse = st;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                if small_step || small_gain {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // no downhill step at any damping: stationary to working precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LmResult { params: x, sse, iterations: it, converged }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub steps: usize,
    pub converged: bool,
}

/// BFGS with an Armijo backtracking line search. The inverse Hessian starts
/// (and restarts) at `lr * I`. Stops once an accepted step changes the
/// objective by less than `tol`, or after `max_steps`.
pub(crate) fn bfgs<F>(fg: F, x0: &[f64], lr: f64, tol: f64, max_steps: usize) -> BfgsResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let reset = || DMatrix::<f64>::identity(n, n) * lr;
    let mut h = reset();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g0) = fg(x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut steps = 0;
    let mut converged = false;
    while steps < max_steps {
        steps += 1;
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = reset();
            p = -(&h * &g);
            slope = g.dot(&p);
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }
        let mut t = 1.0;
        let mut found = None;
        for _ in 0..60 {
            let xn = &x + &p * t;
            let (fnew, gnew) = fg(xn.as_slice());
            if fnew.is_finite() && fnew <= f + 1e-4 * t * slope {
                found = Some((xn, fnew, DVector::from_vec(gnew)));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = found else {
            converged = true;
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        let df = f - fnew;
        x = xn;
        f = fnew;
        g = gn;
        if df < tol {
            converged = true;
            break;
        }
    }
    BfgsResult {
        x: x.iter().copied().collect(),
        f,
        steps,
        converged,
    }
}
