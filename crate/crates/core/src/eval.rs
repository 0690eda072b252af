//! Toy Fréchet video distance, self-consistency gap, solver-order checks,
//! multi-step target accuracy and the static-prediction feature diagnostic.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::consistency::{Condition, ConsistencyModel};
use crate::diffusion::{
    pf_ode_drift, solve_pf_ode, GaussianAnalytic, NoiseSchedule, SolverMethod, TimeGrid, DEFAULT_KAPPA,
};
use crate::discriminator::Backbone;
use crate::distill::{cfg_phi_hat, multistep_solve_target, GaussianTeacher, Teacher};
use crate::error::{Error, Result};
use crate::seeds;
use crate::toyworld::{from_model_space, LatentCodec};

pub const MIN_FVD_CLIPS: usize = 64;
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrechetReport {
    pub distance: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    #[serde(skip)]
    pub cov_a: Vec<f64>,
    #[serde(skip)]
    pub cov_b: Vec<f64>,
    /// A ridge was added because a covariance was (near) singular.
    pub ridge_applied: bool,
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DMatrix::from_row_slice(n, d, &v))
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    (mean, cov)
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn near_singular(cov: &DMatrix<f64>, n: usize) -> bool {
    if n <= cov.nrows() {
        return true;
    }
    let e = sym_eigen(cov).eigenvalues;
    let max = e.iter().cloned().fold(0.0, f64::max);
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    min <= 1e-12 * max.max(1e-300)
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` from moments.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let s = psd_sqrt(cov_a);
    let inner = &s * cov_b * &s;
    let tr_sqrt: f64 = sym_eigen(&inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between two embedding sets `(n, d)`.
pub fn frechet_from_embeddings(a: &Tensor, b: &Tensor) -> Result<FrechetReport> {
    let (ma, mb) = (to_matrix(a)?, to_matrix(b)?);
    if ma.ncols() != mb.ncols() {
        return Err(Error::Contract(format!(
            "embedding widths differ: {} vs {}",
            ma.ncols(),
            mb.ncols()
        )));
    }
    let (mu_a, mut cov_a) = moments(&ma);
    let (mu_b, mut cov_b) = moments(&mb);
    let ridge = near_singular(&cov_a, ma.nrows()) || near_singular(&cov_b, mb.nrows());
    if ridge {
        let eye = DMatrix::<f64>::identity(cov_a.nrows(), cov_a.nrows()) * RIDGE;
        cov_a += &eye;
        cov_b += &eye;
    }
    let distance = frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b);
    Ok(FrechetReport {
        distance,
        n_a: ma.nrows(),
        n_b: mb.nrows(),
        mean_a: mu_a.iter().copied().collect(),
        mean_b: mu_b.iter().copied().collect(),
        cov_a: cov_a.iter().copied().collect(),
        cov_b: cov_b.iter().copied().collect(),
        ridge_applied: ridge,
    })
}

/// Toy-FVD between two sets of pixel clips `(n, t, c, h, w)` in `[0, 1]`.
pub fn toy_fvd(backbone: &Backbone, real: &Tensor, generated: &Tensor) -> Result<FrechetReport> {
    for (what, set) in [("real", real), ("generated", generated)] {
        let n = set.dim(0)?;
        if n < MIN_FVD_CLIPS {
            return Err(Error::Contract(format!(
                "{what} set has {n} clips; toy-FVD needs at least {MIN_FVD_CLIPS}"
            )));
        }
    }
    let ea = embed_in_chunks(backbone, real)?;
    let eb = embed_in_chunks(backbone, generated)?;
    frechet_from_embeddings(&ea, &eb)
}

fn embed_in_chunks(backbone: &Backbone, clips: &Tensor) -> Result<Tensor> {
    let n = clips.dim(0)?;
    let mut parts = Vec::new();
    let mut i = 0;
    while i < n {
        let len = 64.min(n - i);
        parts.push(backbone.embed_clips(&clips.narrow(0, i, len)?)?);
        i += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Model-space latents to pixels in `[0, 1]`, without clamping.
pub fn latents_to_pixels(latents: &Tensor) -> Result<Tensor> {
    LatentCodec::default().decode(&from_model_space(latents)?)
}

/// States of guided teacher PF-ODE trajectories at every point of `grid`,
/// from the top down: `(t, x_t)` pairs.
pub fn teacher_trajectories(
    teacher: &dyn Teacher,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    cond: &Condition,
    x_top: &Tensor,
    guidance: f64,
) -> Result<Vec<(f64, Tensor)>> {
    let pts = grid.points();
    let mut x = x_top.clone();
    let mut out = vec![(pts[pts.len() - 1], x.clone())];
    let b = x.dim(0)?;
    for w in pts.windows(2).rev() {
        let (t_to, t_from) = (w[0], w[1]);
        let v = cfg_phi_hat(teacher, &x, &vec![t_from; b], cond, guidance)?.detach();
        x = (x + (v * (t_to - t_from))?)?;
        out.push((t_to, x.clone()));
    }
    debug_assert!(schedule.kappa <= pts[0]);
    Ok(out)
}

/// Mean over adjacent trajectory pairs of the per-sample RMS difference
/// `f(x_t, t) - f(x_t', t')`.
pub fn self_consistency_gap(cf: &dyn ConsistencyModel, trajectory: &[(f64, Tensor)], cond: &Condition) -> Result<f64> {
    if trajectory.len() < 2 {
        return Ok(0.0);
    }
    let outputs = trajectory
        .iter()
        .map(|(t, x)| Ok(cf.apply(x, &vec![*t; x.dim(0)?], cond)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for w in outputs.windows(2) {
        let d = (&w[0] - &w[1])?.to_dtype(DType::F64)?;
        let b = d.dim(0)?;
        let rms = d.sqr()?.reshape((b, ()))?.mean(1)?.sqrt()?.mean_all()?.to_scalar::<f64>()?;
        total += rms;
    }
    Ok(total / (outputs.len() - 1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFitReport {
    pub method: String,
    pub grid_sizes: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub sup_errors: Vec<f64>,
    pub slope: f64,
    /// 95% confidence half-width of the slope.
    pub half_width: f64,
    /// Errors did not decrease strictly with the grid size.
    pub non_monotone: bool,
}

/// Least-squares slope of `log y` on `log x` and its 95% half-width.
pub fn fit_log_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if lx.len() < 3 {
        return (slope, f64::NAN);
    }
    let resid: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let se = (resid / (n - 2.0) / sxx).sqrt();
    // two-sided 97.5% Student-t quantiles for 1..=8 degrees of freedom, then normal
    let tq = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306];
    let q = tq.get(lx.len() - 3).copied().unwrap_or(1.96);
    (slope, q * se)
}

/// Gaussian with the spread used for the solver-order check: wide enough
/// that the trajectories stay in the asymptotic regime at coarse grids.
pub fn theorem_gaussian() -> Result<GaussianAnalytic> {
    GaussianAnalytic::new(vec![0.5, -1.0, 2.0], vec![64.0, 100.0, 144.0], DEFAULT_KAPPA)
}

pub const THEOREM_PROBES: usize = 512;

/// Solver-chained consistency estimates against the exact map on a
/// Gaussian, sup over every grid start point and `probes` probe samples.
pub fn verify_theorem_a1(method: SolverMethod, grid_sizes: &[usize], probes: usize, seed: u64) -> Result<SlopeFitReport> {
    let schedule = NoiseSchedule::default();
    let g = theorem_gaussian()?;
    let field = {
        let g = g.clone();
        move |x: &Tensor, t: f64| pf_ode_drift(&schedule, x, t, &g.score(x, t)?)
    };
    let mut rng = seeds::rng_for(seed, "theorem-probes");
    let x_top = g.sample(&mut rng, (probes, 3), schedule.t_max, DType::F64)?;
    let mut errors = Vec::with_capacity(grid_sizes.len());
    for &n in grid_sizes {
        let grid = TimeGrid::for_schedule(&schedule, n)?;
        let mut sup: f64 = 0.0;
        for start in 1..=n {
            let t = grid.t(start);
            let x = g.trajectory(&x_top, schedule.t_max, t)?;
            let times = grid.descending(0, start)?;
            let est = solve_pf_ode(&x, &times, &field, method)?;
            let exact = g.consistency(&x, t)?;
            let per_probe = (est - exact)?.sqr()?.sum(1)?.sqrt()?.max(0)?.to_scalar::<f64>()?;
            sup = sup.max(per_probe);
        }
        errors.push(sup);
    }
    let steps: Vec<f64> = grid_sizes
        .iter()
        .map(|&n| (schedule.t_max - schedule.kappa) / n as f64)
        .collect();
    let non_monotone = errors.windows(2).any(|w| !(w[1] < w[0]));
    let (slope, half_width) = if grid_sizes.len() >= 2 {
        fit_log_slope(&steps, &errors)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SlopeFitReport {
        method: format!("{method:?}").to_lowercase(),
        grid_sizes: grid_sizes.to_vec(),
        step_sizes: steps,
        sup_errors: errors,
        slope,
        half_width,
        non_monotone,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultistepRow {
    pub m: usize,
    pub endpoint_rms: f64,
}

/// Endpoint error of the `m`-step target solve across a fixed gap
/// `t_lo <- t_hi` on a Gaussian with exact score.
pub fn multistep_vs_singlestep_report(m_values: &[usize], t_lo: f64, t_hi: f64, seed: u64) -> Result<Vec<MultistepRow>> {
    let schedule = NoiseSchedule::default();
    let g = GaussianAnalytic::new(vec![0.5, -0.3, 0.1], vec![0.8, 2.0, 0.3], DEFAULT_KAPPA)?;
    let teacher = GaussianTeacher {
        gaussian: g.clone(),
        schedule,
    };
    let mut rng = seeds::rng_for(seed, "multistep-probes");
    let x = g.sample(&mut rng, (256, 3), t_hi, DType::F64)?;
    let exact = g.trajectory(&x, t_hi, t_lo)?;
    let mut rows = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let err = if t_hi == t_lo {
            0.0
        } else {
            let grid = TimeGrid::from_points(
                (0..=m).map(|i| t_lo + (t_hi - t_lo) * i as f64 / m as f64).collect(),
            )?;
            let n = vec![0usize; 256];
            let out = multistep_solve_target(&teacher, &x, &grid, &n, m, &Condition::none(), 1.0)?;
            (out - &exact)?.sqr()?.mean_all()?.sqrt()?.to_scalar::<f64>()?
        };
        rows.push(MultistepRow { m, endpoint_rms: err });
    }
    Ok(rows)
}

/// Concatenated backbone feature maps of decoded model-space latents.
pub fn feature_maps(backbone: &Backbone, latents: &Tensor) -> Result<Tensor> {
    let px = latents_to_pixels(latents)?;
    let (b, t, c, h, w) = px.dims5()?;
    let frames = px.to_dtype(DType::F32)?.reshape((b * t, c, h, w))?.affine(2.0, -1.0)?;
    let feats = backbone
        .features(&frames)?
        .into_iter()
        .map(|f| Ok(f.reshape((b, ()))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&feats, 1)?)
}

pub fn feature_mse(backbone: &Backbone, a: &Tensor, b: &Tensor) -> Result<f64> {
    let fa = feature_maps(backbone, a)?;
    let fb = feature_maps(backbone, b)?;
    Ok((fa - fb)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDiagnosticRow {
    pub label: String,
    /// Prediction vs the first frame replicated over time.
    pub pred_vs_input: f64,
    /// Prediction vs the stage's training target.
    pub pred_vs_target: f64,
}

impl FeatureDiagnosticRow {
    pub fn new(label: &str, backbone: &Backbone, pred: &Tensor, target: &Tensor, x0: &Tensor) -> Result<Self> {
        let (b, t, c, h, w) = x0.dims5()?;
        let replicated = x0.narrow(1, 0, 1)?.broadcast_as((b, t, c, h, w))?.contiguous()?;
        Ok(Self {
            label: label.to_string(),
            pred_vs_input: feature_mse(backbone, pred, &replicated)?,
            pred_vs_target: feature_mse(backbone, pred, target)?,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.pred_vs_target / self.pred_vs_input
    }
}

/// Writes `header` and `rows` as CSV.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Synthetic embedding sets with prescribed diagonal moments, for checking
/// the Fréchet implementation against its closed form.
pub fn diagonal_gaussian_embeddings(mean: &[f64], std: &[f64], n: usize, seed: u64) -> Result<Tensor> {
    let d = mean.len();
    let z = seeds::randn(&mut seeds::rng_from(seed), (n, d), DType::F64)?;
    let m = Tensor::from_vec(mean.to_vec(), (1, d), &Device::Cpu)?;
    let s = Tensor::from_vec(std.to_vec(), (1, d), &Device::Cpu)?;
    Ok(z.broadcast_mul(&s)?.broadcast_add(&m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::GaussianConsistency;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = diagonal_gaussian_embeddings(&[0.0, 1.0, 2.0], &[1.0, 0.5, 2.0], 200, 1).unwrap();
        let r = frechet_from_embeddings(&a, &a).unwrap();
        assert!(r.distance.abs() < 1e-8, "{}", r.distance);
        assert!(!r.ridge_applied);
    }

    #[test]
    fn diagonal_closed_form() {
        // covariances injected directly: sum (m1-m2)^2 + (s1-s2)^2 per axis
        let mu_a = DVector::from_vec(vec![0.0f64, 1.0, -2.0]);
        let mu_b = DVector::from_vec(vec![0.5, 1.0, 0.0]);
        let sa = [1.0f64, 2.0, 0.5];
        let sb = [2.0f64, 2.0, 1.5];
        let cov_a = DMatrix::from_diagonal(&DVector::from_vec(sa.iter().map(|s| s * s).collect()));
        let cov_b = DMatrix::from_diagonal(&DVector::from_vec(sb.iter().map(|s| s * s).collect()));
        let expected: f64 = (0..3)
            .map(|i| (mu_a[i] - mu_b[i]).powi(2) + (sa[i] - sb[i]).powi(2))
            .sum();
        let got = frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b);
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        let swapped = frechet_distance(&mu_b, &cov_b, &mu_a, &cov_a);
        assert!((got - swapped).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariant_and_ridge_flagged() {
        let a = diagonal_gaussian_embeddings(&[0.0; 4], &[1.0; 4], 100, 2).unwrap();
        let b = diagonal_gaussian_embeddings(&[0.3; 4], &[1.2; 4], 100, 3).unwrap();
        let idx: Vec<u32> = (0..100u32).rev().collect();
        let b_perm = b.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu).unwrap(), 0).unwrap();
        let d1 = frechet_from_embeddings(&a, &b).unwrap().distance;
        let d2 = frechet_from_embeddings(&a, &b_perm).unwrap().distance;
        assert!((d1 - d2).abs() < 1e-9);
        let small = diagonal_gaussian_embeddings(&[0.0; 4], &[1.0; 4], 3, 4).unwrap();
        assert!(frechet_from_embeddings(&small, &small).unwrap().ridge_applied);
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let (s, hw) = fit_log_slope(&x, &y);
        assert!((s - 1.5).abs() < 1e-12);
        assert!(hw < 1e-9);
    }

    #[test]
    fn single_interval_reduces_to_one_step() {
        let r = verify_theorem_a1(SolverMethod::Euler, &[1], 16, 0).unwrap();
        let s = NoiseSchedule::default();
        let g = theorem_gaussian().unwrap();
        let x_top = g
            .sample(&mut seeds::rng_for(0, "theorem-probes"), (16, 3), s.t_max, DType::F64)
            .unwrap();
        let v = pf_ode_drift(&s, &x_top, s.t_max, &g.score(&x_top, s.t_max).unwrap()).unwrap();
        let one = (&x_top + (v * (s.kappa - s.t_max)).unwrap()).unwrap();
        let exact = g.consistency(&x_top, s.t_max).unwrap();
        let e = (one - exact).unwrap().sqr().unwrap().sum(1).unwrap().sqrt().unwrap().max(0).unwrap();
        assert_eq!(r.sup_errors[0], e.to_scalar::<f64>().unwrap());
    }

    #[test]
    fn multistep_error_decreases_and_zero_gap_is_exact() {
        let rows = multistep_vs_singlestep_report(&[1, 2, 3, 4, 5], 1.6, 5.6, 0).unwrap();
        assert!(rows.windows(2).all(|w| w[1].endpoint_rms < w[0].endpoint_rms), "{rows:?}");
        let zero = multistep_vs_singlestep_report(&[1, 5], 2.0, 2.0, 0).unwrap();
        assert!(zero.iter().all(|r| r.endpoint_rms == 0.0));
    }

    #[test]
    fn oracle_gap_is_negligible() {
        let g = GaussianAnalytic::new(vec![0.2, -0.1], vec![0.5, 1.0], DEFAULT_KAPPA).unwrap();
        let schedule = NoiseSchedule::default();
        let teacher = GaussianTeacher { gaussian: g.clone(), schedule };
        let grid = TimeGrid::uniform(DEFAULT_KAPPA, 80.0, 100).unwrap();
        let x = g.sample(&mut seeds::rng_from(1), (32, 2), 80.0, DType::F64).unwrap();
        let traj = teacher_trajectories(&teacher, &schedule, &grid, &Condition::none(), &x, 1.0).unwrap();
        // exact map evaluated on the exact-trajectory states
        let exact_traj: Vec<(f64, Tensor)> = traj
            .iter()
            .map(|(t, _)| (*t, g.trajectory(&x, 80.0, *t).unwrap()))
            .collect();
        let gap = self_consistency_gap(&GaussianConsistency::new(g), &exact_traj, &Condition::none()).unwrap();
        assert!(gap < 1e-6, "{gap}");
    }
}
