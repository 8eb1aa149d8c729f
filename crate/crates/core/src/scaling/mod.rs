//! Loss-surface fitting `L(N, D) = E + A/N^alpha + B/D^beta`, reducible-loss
//! power laws, cumulative-loss helpers and FLOPs accounting.

mod fit;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use fit::{bfgs, levenberg_marquardt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub n: f64,
    pub d: f64,
    pub l: f64,
}

impl LossPoint {
    pub fn new(n: f64, d: f64, l: f64) -> Result<Self> {
        let p = LossPoint { n, d, l };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.n > 0.0 && self.d > 0.0 && self.l > 0.0) || !(self.n.is_finite() && self.d.is_finite() && self.l.is_finite()) {
            return Err(Error::config(format!("loss point needs positive finite N, D, L: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Huber objective at the returned constants.
    pub objective: f64,
    /// Huber objective at the two-stage initialization.
    pub init_objective: f64,
    pub steps: usize,
    pub converged: bool,
}

impl ScalingFit {
    pub fn from_constants(a: f64, b: f64, e: f64, alpha: f64, beta: f64) -> Self {
        ScalingFit {
            a,
            b,
            e,
            alpha,
            beta,
            objective: f64::NAN,
            init_objective: f64::NAN,
            steps: 0,
            converged: true,
        }
    }

    /// `[ln A, ln B, ln E, alpha, beta]`.
    pub fn log_params(&self) -> [f64; 5] {
        [self.a.ln(), self.b.ln(), self.e.ln(), self.alpha, self.beta]
    }
}

/// Constants reported for conventionally trained models.
pub const CONVENTIONAL: ScalingFit = ScalingFit {
    a: 8.09e2,
    b: 7.50e5,
    e: 2.829,
    alpha: 0.397,
    beta: 0.651,
    objective: f64::NAN,
    init_objective: f64::NAN,
    steps: 0,
    converged: true,
};

/// Constants reported for models trained on selected data.
pub const SELECTED: ScalingFit = ScalingFit {
    a: 6.21e3,
    b: 1.76e5,
    e: 2.829,
    alpha: 0.518,
    beta: 0.585,
    objective: f64::NAN,
    init_objective: f64::NAN,
    steps: 0,
    converged: true,
};

pub fn predict_loss(fit: &ScalingFit, n: f64, d: f64) -> f64 {
    fit.e + fit.a / n.powf(fit.alpha) + fit.b / d.powf(fit.beta)
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

fn check_points(points: &[LossPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("loss points"));
    }
    points.iter().try_for_each(LossPoint::validate)
}

/// Huber penalty of the log-space residual
/// `LSE(a - alpha ln N, b - beta ln D, e) - ln L`, summed over points, and
/// its gradient in `[a, b, e, alpha, beta]`.
fn huber_lse_with_grad(params: &[f64], points: &[LossPoint], delta: f64) -> (f64, Vec<f64>) {
    let [a, b, e, alpha, beta] = [params[0], params[1], params[2], params[3], params[4]];
    let mut f = 0.0;
    let mut g = vec![0.0; 5];
    for p in points {
        let (ln_n, ln_d) = (p.n.ln(), p.d.ln());
        let z = [a - alpha * ln_n, b - beta * ln_d, e];
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex = z.map(|v| (v - zmax).exp());
        let sum: f64 = ex.iter().sum();
        let lse = zmax + sum.ln();
        let r = lse - p.l.ln();
        f += huber(r, delta);
        let h = huber_grad(r, delta);
        let w = ex.map(|v| h * v / sum);
        g[0] += w[0];
        g[1] += w[1];
        g[2] += w[2];
        g[3] -= w[0] * ln_n;
        g[4] -= w[1] * ln_d;
    }
    (f, g)
}

/// Sum of Huber penalties of log-space residuals; `params` are
/// `[a, b, e, alpha, beta]` with `A = exp(a)` etc.
pub fn huber_lse_objective(params: &[f64; 5], points: &[LossPoint], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("huber delta must be > 0, got {delta}")));
    }
    check_points(points)?;
    Ok(huber_lse_with_grad(params, points, delta).0)
}

/// Result of fitting `y = E + B x^{-beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetPowerFit {
    pub e: f64,
    pub b: f64,
    pub beta: f64,
    pub residual_norm: f64,
    pub converged: bool,
    /// The power-law term vanished (flat data); `beta` is meaningless.
    pub degenerate: bool,
}

pub const MULTI_STARTS: usize = 8;

/// `(E, B)` by linear least squares for a fixed exponent.
fn linear_offset_power(xs: &[f64], ys: &[f64], beta: f64) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    let (mut su, mut suu, mut sy, mut suy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let u = x.powf(-beta);
        su += u;
        suu += u * u;
        sy += y;
        suy += u * y;
    }
    let det = n * suu - su * su;
    if !(det.abs() > 0.0) {
        return None;
    }
    let b = (n * suy - su * sy) / det;
    let e = (sy - b * su) / n;
    Some((e, b))
}

fn offset_power_residuals(xs: &[f64], ys: &[f64], p: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (e, b, beta) = (p[0], p[1], p[2]);
    let mut r = Vec::with_capacity(xs.len());
    let mut j = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(ys) {
        let u = x.powf(-beta);
        r.push(e + b * u - y);
        j.push(vec![1.0, u, -b * u * x.ln()]);
    }
    (r, j)
}

/// Fits `y = E + B x^{-beta}` by Levenberg-Marquardt from eight starts with
/// `beta` log-spaced over `[0.1, 1]`; the lowest residual wins, ties going
/// to the earlier start.
pub fn fit_offset_power(xs: &[f64], ys: &[f64]) -> Result<OffsetPowerFit> {
    crate::linalg::check_len(ys.len(), xs.len(), "power-law targets")?;
    let mut distinct = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 || xs.iter().chain(ys).any(|v| !v.is_finite()) || xs.iter().any(|x| *x <= 0.0) {
        return Err(Error::config("power-law fit needs >= 3 distinct positive abscissae and finite data"));
    }
    let mut best: Option<fit::LmResult> = None;
    for k in 0..MULTI_STARTS {
        let beta0 = 10f64.powf(-1.0 + k as f64 / (MULTI_STARTS - 1) as f64);
        let Some((e0, b0)) = linear_offset_power(xs, ys, beta0) else {
            continue;
        };
        let res = levenberg_marquardt(|p| offset_power_residuals(xs, ys, p), &[e0, b0, beta0], 500);
        if res.sse.is_finite() && best.as_ref().is_none_or(|b| res.sse < b.sse) {
            best = Some(res);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("power-law fit failed from every start".into()))?;
    let (e, b, beta) = (best.params[0], best.params[1], best.params[2]);
    let scale = ys.iter().map(|y| y.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let term = xs.iter().map(|x| (b * x.powf(-beta)).abs()).fold(0.0, f64::max);
    Ok(OffsetPowerFit {
        e,
        b,
        beta,
        residual_norm: best.sse.sqrt(),
        converged: best.converged,
        degenerate: !(term > 1e-9 * scale) || !beta.is_finite(),
    })
}

/// Per-model-size data scaling curve `L(D) = E' + B0 / D^beta0`.
pub fn fit_data_scaling(points: &[LossPoint]) -> Result<OffsetPowerFit> {
    check_points(points)?;
    if points.len() < 4 {
        return Err(Error::config(format!("data scaling fit needs >= 4 points, got {}", points.len())));
    }
    let ds: Vec<f64> = points.iter().map(|p| p.d).collect();
    let ls: Vec<f64> = points.iter().map(|p| p.l).collect();
    fit_offset_power(&ds, &ls)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingFitOptions {
    pub delta: f64,
    pub lr: f64,
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for ScalingFitOptions {
    fn default() -> Self {
        ScalingFitOptions {
            delta: 1e-3,
            lr: 0.05,
            tol: 1e-10,
            max_steps: 10_000,
        }
    }
}

/// Two-stage fit: per-`N` data curves, a model-size curve through their
/// offsets, then BFGS on the Huber objective from the combined
/// initialization.
pub fn fit_scaling_law(points: &[LossPoint], options: &ScalingFitOptions) -> Result<ScalingFit> {
    check_points(points)?;
    if !(options.delta > 0.0 && options.lr > 0.0) {
        return Err(Error::config("scaling fit needs delta > 0 and lr > 0"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.n.total_cmp(&b.n).then(a.d.total_cmp(&b.d)).then(a.l.total_cmp(&b.l)));
    let mut groups: BTreeMap<u64, Vec<LossPoint>> = BTreeMap::new();
    for p in &sorted {
        groups.entry(p.n.to_bits()).or_default().push(*p);
    }
    if groups.len() < 2 {
        return Err(Error::config("scaling fit needs at least two model sizes"));
    }
    let mut ns = Vec::new();
    let mut offsets = Vec::new();
    let mut bs = Vec::new();
    let mut betas = Vec::new();
    for (bits, group) in &groups {
        let mut ds: Vec<u64> = group.iter().map(|p| p.d.to_bits()).collect();
        ds.dedup();
        if ds.len() < 4 {
            return Err(Error::config(format!(
                "model size {} has {} distinct D values, need >= 4",
                f64::from_bits(*bits),
                ds.len()
            )));
        }
        let f = fit_data_scaling(group)?;
        ns.push(f64::from_bits(*bits));
        offsets.push(f.e);
        bs.push(f.b);
        betas.push(f.beta);
    }
    let (e0, a0, alpha0) = if ns.len() >= 3 {
        let m = fit_offset_power(&ns, &offsets)?;
        (m.e, m.b, m.beta)
    } else {
        // two sizes cannot pin three constants; fix the exponent at the data one
        let alpha0 = betas.iter().sum::<f64>() / betas.len() as f64;
        let (e, a) = linear_offset_power(&ns, &offsets, alpha0)
            .ok_or_else(|| Error::Numerical("model-size curve is singular".into()))?;
        (e, a, alpha0)
    };
    let floor = sorted.iter().map(|p| p.l).fold(f64::INFINITY, f64::min);
    let mean_b = bs.iter().sum::<f64>() / bs.len() as f64;
    let init = [
        a0.max(1e-12).ln(),
        mean_b.max(1e-12).ln(),
        if e0 > 0.0 { e0.ln() } else { (0.5 * floor).ln() },
        alpha0,
        betas.iter().sum::<f64>() / betas.len() as f64,
    ];
    let (init_objective, _) = huber_lse_with_grad(&init, &sorted, options.delta);
    let res = bfgs(
        |x| huber_lse_with_grad(x, &sorted, options.delta),
        &init,
        options.lr,
        options.tol,
        options.max_steps,
    );
    let (x, objective) = if res.f <= init_objective { (res.x, res.f) } else { (init.to_vec(), init_objective) };
    let fit = ScalingFit {
        a: x[0].exp(),
        b: x[1].exp(),
        e: x[2].exp(),
        alpha: x[3],
        beta: x[4],
        objective,
        init_objective,
        steps: res.steps,
        converged: res.converged,
    };
    if ![fit.a, fit.b, fit.e, fit.alpha, fit.beta].iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("scaling fit produced non-finite constants: {fit:?}")));
    }
    Ok(fit)
}

/// `sum_t J(theta_t)` over a recorded loss curve.
pub fn compute_auc(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Empty("loss curve"));
    }
    Ok(losses.iter().sum())
}

/// `L(t) = C / t^c + L_irre`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    #[serde(rename = "C")]
    pub c_const: f64,
    pub c: f64,
    pub l_irre: f64,
    pub residual_norm: f64,
    pub converged: bool,
    /// `C <= 0` or `c <= 0`: the curve is not a decaying power law.
    pub infeasible: bool,
}

impl PowerLawFit {
    pub fn predict(&self, t: f64) -> f64 {
        self.c_const / t.powf(self.c) + self.l_irre
    }

    /// `integral_{t0}^{t1} C / t^c dt`.
    pub fn reducible_auc(&self, t0: f64, t1: f64) -> f64 {
        if (self.c - 1.0).abs() < 1e-12 {
            self.c_const * (t1 / t0).ln()
        } else {
            self.c_const * (t1.powf(1.0 - self.c) - t0.powf(1.0 - self.c)) / (1.0 - self.c)
        }
    }
}

/// Fits the reducible-loss power law to `losses[t - 1] = L(t)` for `t > t0`,
/// keeping `L_irre >= 0`.
pub fn fit_reducible_power_law(losses: &[f64], t0: usize) -> Result<PowerLawFit> {
    let ts: Vec<f64> = (t0 + 1..=losses.len()).map(|t| t as f64).collect();
    if ts.len() < 4 {
        return Err(Error::config(format!("need >= 4 losses after step {t0}, got {}", ts.len())));
    }
    let ys = &losses[t0..];
    let mut f = fit_offset_power(&ts, ys)?;
    if f.e < 0.0 {
        // refit on the boundary L_irre = 0
        let eval = |p: &[f64]| {
            let (r, j) = offset_power_residuals(&ts, ys, &[0.0, p[0], p[1]]);
            (r, j.into_iter().map(|row| vec![row[1], row[2]]).collect())
        };
        let res = levenberg_marquardt(eval, &[f.b.abs().max(1e-12), f.beta], 500);
        f = OffsetPowerFit {
            e: 0.0,
            b: res.params[0],
            beta: res.params[1],
            residual_norm: res.sse.sqrt(),
            converged: res.converged,
            degenerate: f.degenerate,
        };
    }
    Ok(PowerLawFit {
        c_const: f.b,
        c: f.beta,
        l_irre: f.e,
        residual_norm: f.residual_norm,
        converged: f.converged,
        infeasible: !(f.b > 0.0 && f.beta > 0.0) || f.degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsConfig {
    /// Target model parameters.
    pub n: f64,
    /// Pre-training tokens.
    pub d: f64,
    pub n_prx: f64,
    pub d_prx: f64,
    pub n_score: f64,
    /// Proxy checkpoints solved.
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub solver: f64,
    pub scorer: f64,
    pub selection: f64,
    pub pretraining: f64,
}

impl FlopsEstimate {
    pub fn total(&self) -> f64 {
        self.solver + self.scorer + self.selection + self.pretraining
    }
}

/// Stage costs with forward `2ND` and backward `4ND`:
/// proxy pre-training `6 N_prx D`; each solver pass costs forward 6, reverse
/// 12 and update 6 per proxy token; scorer fitting `6 N_score D_prx`,
/// inference `2 N_score D`; selection runs on CPU and is counted as 0.
pub fn estimate_flops(c: &FlopsConfig) -> Result<FlopsEstimate> {
    let vals = [c.n, c.d, c.n_prx, c.d_prx, c.n_score, c.m];
    if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::config(format!("FLOPs inputs must be finite and >= 0: {c:?}")));
    }
    Ok(FlopsEstimate {
        solver: 6.0 * c.n_prx * c.d + 24.0 * c.m * c.n_prx * c.d_prx,
        scorer: 6.0 * c.n_score * c.d_prx + 2.0 * c.n_score * c.d,
        selection: 0.0,
        pretraining: 6.0 * c.n * c.d,
    })
}

/// Reads `N,D,L` rows (header required).
pub fn read_loss_points(path: &Path) -> Result<Vec<LossPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_loss_points(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn parse_loss_points(text: &str) -> Result<Vec<LossPoint>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or(Error::Empty("loss point file"))?
        .split(',')
        .map(|s| s.trim().to_owned())
        .collect();
    if header != ["N", "D", "L"] {
        return Err(Error::config(format!("expected header `N,D,L`, got {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<f64> = l
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::config(format!("row {}: {e}", i + 2)))?;
            match cols[..] {
                [n, d, loss] => LossPoint::new(n, d, loss),
                _ => Err(Error::config(format!("row {}: expected 3 columns", i + 2))),
            }
        })
        .collect()
}

pub fn points_digest(points: &[LossPoint]) -> String {
    let mut h = Sha256::new();
    for p in points {
        for v in [p.n, p.d, p.l] {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Fit plus provenance, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFitDocument {
    pub fit: ScalingFit,
    pub options: ScalingFitOptions,
    pub num_points: usize,
    pub input_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn asymptote_is_e() {
        assert!((predict_loss(&CONVENTIONAL, 1e300, 1e300) - CONVENTIONAL.e).abs() < 1e-12);
    }

    #[test]
    fn huber_regimes() {
        let d = 1e-3;
        assert_eq!(huber(0.5e-3, d), 0.5 * 0.25e-6);
        assert!((huber(2e-3, d) - 1.5 * d * d).abs() < 1e-20);
        let params = CONVENTIONAL.log_params();
        let pts: Vec<LossPoint> = [(1e8, 1e9), (1e9, 1e10)]
            .iter()
            .map(|&(n, dd)| LossPoint::new(n, dd, predict_loss(&CONVENTIONAL, n, dd)).unwrap())
            .collect();
        assert!(huber_lse_objective(&params, &pts, d).unwrap() < 1e-28);
        assert!(huber_lse_objective(&params, &pts, 0.0).is_err());
        let off = [LossPoint::new(1e8, 1e9, predict_loss(&CONVENTIONAL, 1e8, 1e9) * 2e-3f64.exp()).unwrap()];
        assert!((huber_lse_objective(&params, &off, d).unwrap() - 1.5 * d * d).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let pts: Vec<LossPoint> = (0..12)
            .map(|i| {
                let n = 1e8 * (1 + i % 3) as f64;
                let d = 1e9 * (1 + i) as f64;
                LossPoint::new(n, d, predict_loss(&SELECTED, n, d) * (1.0 + 0.01 * ((i % 5) as f64 - 2.0))).unwrap()
            })
            .collect();
        let x = [6.0, 12.0, 1.0, 0.4, 0.6];
        let (_, g) = huber_lse_with_grad(&x, &pts, 1e-3);
        for k in 0..5 {
            let h = 1e-6;
            let mut p = x;
            let mut m = x;
            p[k] += h;
            m[k] -= h;
            let fd = (huber_lse_with_grad(&p, &pts, 1e-3).0 - huber_lse_with_grad(&m, &pts, 1e-3).0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-3), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn offset_power_round_trip() {
        let ds: Vec<f64> = (1..=20).map(|i| 2.5e9 * i as f64).collect();
        let ls: Vec<f64> = ds.iter().map(|d| 3.1 + 7.5e5 / d.powf(0.651)).collect();
        let f = fit_offset_power(&ds, &ls).unwrap();
        assert!((f.e - 3.1).abs() / 3.1 < 1e-4);
        assert!((f.b - 7.5e5).abs() / 7.5e5 < 1e-4);
        assert!((f.beta - 0.651).abs() / 0.651 < 1e-4);
        assert!(!f.degenerate);
    }

    #[test]
    fn flat_losses_are_degenerate() {
        let pts: Vec<LossPoint> = (1..=6).map(|i| LossPoint::new(1e8, 1e9 * i as f64, 3.0).unwrap()).collect();
        assert!(fit_data_scaling(&pts).unwrap().degenerate);
        assert!(fit_data_scaling(&pts[..3]).is_err());
    }

    #[test]
    fn power_law_round_trip_and_flags() {
        let losses: Vec<f64> = (1..=200).map(|t| 2.0 / (t as f64).sqrt() + 1.0).collect();
        let f = fit_reducible_power_law(&losses, 10).unwrap();
        assert!((f.c_const - 2.0).abs() / 2.0 < 1e-4);
        assert!((f.c - 0.5).abs() / 0.5 < 1e-4);
        assert!((f.l_irre - 1.0).abs() < 1e-4);
        assert!(!f.infeasible);
        let rising: Vec<f64> = (1..=50).map(|t| 1.0 + 0.01 * t as f64).collect();
        assert!(fit_reducible_power_law(&rising, 5).unwrap().infeasible);
        assert!(fit_reducible_power_law(&losses[..12], 10).is_err());
    }

    #[test]
    fn irreducible_floor_never_negative() {
        // pure power law with a slight downward offset pulls L_irre below 0
        let losses: Vec<f64> = (1..=100).map(|t| 3.0 / (t as f64).powf(0.7) - 0.01).collect();
        let f = fit_reducible_power_law(&losses, 0).unwrap();
        assert!(f.l_irre >= 0.0);
    }

    #[test]
    fn analytic_auc_matches_dense_sum() {
        let f = PowerLawFit { c_const: 2.0, c: 0.5, l_irre: 1.0, residual_norm: 0.0, converged: true, infeasible: false };
        let (t0, t1) = (10usize, 10_000usize);
        let reducible: Vec<f64> = (t0 + 1..=t1).map(|t| f.predict(t as f64) - f.l_irre).collect();
        let dense = compute_auc(&reducible).unwrap();
        let exact = f.reducible_auc(t0 as f64, t1 as f64);
        assert!((dense - exact).abs() / exact < 0.01);
    }

    #[test]
    fn auc_basics() {
        assert_eq!(compute_auc(&[1.0, 1.0, 1.0]).unwrap(), 3.0);
        assert!(compute_auc(&[]).is_err());
        assert_eq!(compute_auc(&[0.25; 8]).unwrap(), 2.0);
    }

    #[test]
    fn flops_examples() {
        let base = FlopsConfig { n: 1.7e9, d: 50e9, n_prx: 160e6, d_prx: 1.64e8, n_score: 125e6, m: 5.0 };
        let f = estimate_flops(&base).unwrap();
        assert!((f.solver - 5.11488e19).abs() / 5.11488e19 < 1e-12);
        assert!((f.solver - 0.49e20).abs() / 0.49e20 < 0.1);
        assert!((f.pretraining - 5.1e20).abs() / 5.1e20 < 1e-12);
        assert_eq!(f.selection, 0.0);
        let m0 = estimate_flops(&FlopsConfig { m: 0.0, ..base }).unwrap();
        assert_eq!(m0.solver, 6.0 * base.n_prx * base.d);
    }

    #[test]
    fn csv_parsing() {
        let pts = parse_loss_points("N,D,L\n1e8,1e9,3.5\n2e8, 2e9, 3.2\n").unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].d, 2e9);
        assert!(parse_loss_points("N,L\n1,2\n").is_err());
        assert!(parse_loss_points("N,D,L\n1,2,-3\n").is_err());
    }

    proptest! {
        #[test]
        fn predict_decreasing(n in 1e6f64..1e12, d in 1e6f64..1e13, k in 1.01f64..10.0) {
            for fit in [CONVENTIONAL, SELECTED] {
                let l = predict_loss(&fit, n, d);
                prop_assert!(predict_loss(&fit, n * k, d) < l);
                prop_assert!(predict_loss(&fit, n, d * k) < l);
                prop_assert!(l > fit.e);
            }
        }

        #[test]
        fn flops_linear(scale in 0.1f64..10.0, which in 0usize..6) {
            let base = FlopsConfig { n: 1.7e9, d: 50e9, n_prx: 160e6, d_prx: 1.64e8, n_score: 125e6, m: 5.0 };
            let mut scaled = base;
            match which {
                0 => scaled.n *= scale,
                1 => scaled.d *= scale,
                2 => scaled.n_prx *= scale,
                3 => scaled.d_prx *= scale,
                4 => scaled.n_score *= scale,
                _ => scaled.m *= scale,
            }
            // each stage is affine in every single count
            let f0 = estimate_flops(&base).unwrap().total();
            let mut zero = base;
            match which {
                0 => zero.n = 0.0,
                1 => zero.d = 0.0,
                2 => zero.n_prx = 0.0,
                3 => zero.d_prx = 0.0,
                4 => zero.n_score = 0.0,
                _ => zero.m = 0.0,
            }
            let fz = estimate_flops(&zero).unwrap().total();
            let fs = estimate_flops(&scaled).unwrap().total();
            let expect = fz + scale * (f0 - fz);
            prop_assert!((fs - expect).abs() <= 1e-12 * expect.abs());
        }
    }
}
