//! Noise schedule and deterministic DDIM stepping.
//!
//! Timesteps are 1-based, `t ∈ [1, T]`, with `alpha_bar(0) = 1` standing for
//! the clean sample. Noise predictions come from [`OracleDenoiser`], which
//! knows the true forward noise, so every DDIM identity holds to rounding.

use crate::error::{AsiError, Result};
use crate::numeric::Matrix;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step betas.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(AsiError::config("timesteps", "must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(AsiError::config("beta", format!("{b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar` for `t = 1..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(AsiError::Index { t, max: self.len() }),
        }
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps` timesteps.
/// A single-step schedule uses `beta_start`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(AsiError::config("timesteps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(AsiError::config(
            "beta",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
        ));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// One point of a latent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub t: usize,
    pub x: Matrix,
}

/// Closed-form stand-in for a trained noise predictor: always answers with
/// the noise that was actually injected.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub true_noise: Matrix,
    pub true_x0: Matrix,
}

impl OracleDenoiser {
    pub fn new(true_x0: Matrix, true_noise: Matrix) -> Result<Self> {
        true_x0.expect_same_shape("OracleDenoiser", &true_noise)?;
        Ok(Self { true_noise, true_x0 })
    }

    pub fn predict_noise(&self, x_t: &Matrix, _t: usize) -> Result<&Matrix> {
        x_t.expect_same_shape("OracleDenoiser::predict_noise", &self.true_noise)?;
        Ok(&self.true_noise)
    }
}

fn lincomb(op: &'static str, a: f64, x: &Matrix, b: f64, y: &Matrix) -> Result<Matrix> {
    x.expect_same_shape(op, y)?;
    let data = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(xv, yv)| a * xv + b * yv)
        .collect();
    Matrix::from_kernel(op, x.rows(), x.cols(), data)
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise(x0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    let ab = sched.alpha_bar(t)?;
    lincomb("forward_noise", ab.sqrt(), x0, (1.0 - ab).sqrt(), eps)
}

/// `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &Matrix, eps_pred: &Matrix, t: usize, sched: &NoiseSchedule) -> Result<Matrix> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(AsiError::SingularSchedule(t));
    }
    x_t.expect_same_shape("predict_x0", eps_pred)?;
    let (scale, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_pred.as_slice())
        .map(|(x, e)| (x - noise * e) / scale)
        .collect();
    Matrix::from_kernel("predict_x0", x_t.rows(), x_t.cols(), data)
}

/// DDIM update from `t` to `t_prev`:
/// `sqrt(ab_prev) x0_pred + sqrt(1 - ab_prev - sigma²) eps_pred + sigma z`.
///
/// `z` is required exactly when `sigma > 0`.
pub fn ddim_step(
    x_t: &Matrix,
    eps_pred: &Matrix,
    t: usize,
    t_prev: usize,
    sigma: f64,
    z: Option<&Matrix>,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    if t_prev >= t {
        return Err(AsiError::config("t_prev", format!("{t_prev} must be below t = {t}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(AsiError::InvalidSigma { sigma, residual: f64::NAN });
    }
    let ab_prev = sched.alpha_bar(t_prev)?;
    let residual = 1.0 - ab_prev - sigma * sigma;
    if residual < 0.0 {
        return Err(AsiError::InvalidSigma { sigma, residual });
    }
    let x0 = predict_x0(x_t, eps_pred, t, sched)?;
    let det = lincomb("ddim_step", ab_prev.sqrt(), &x0, residual.sqrt(), eps_pred)?;
    match (sigma > 0.0, z) {
        (false, _) => Ok(det),
        (true, Some(z)) => lincomb("ddim_step", 1.0, &det, sigma, z),
        (true, None) => Err(AsiError::config("z", "sigma > 0 needs a noise sample")),
    }
}

/// Deterministic inverse of [`ddim_step`] with `sigma = 0`: from `t_prev` up to `t`.
pub fn ddim_invert_step(
    x_prev: &Matrix,
    eps_pred: &Matrix,
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    if t_prev >= t {
        return Err(AsiError::config("t", format!("{t} must be above t_prev = {t_prev}")));
    }
    let x0 = predict_x0(x_prev, eps_pred, t_prev, sched)?;
    forward_noise(&x0, t, eps_pred, sched)
}

/// `steps + 1` increasing timesteps from 0 to `T`, evenly strided.
pub fn timestep_sequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > total {
        return Err(AsiError::config("steps", format!("{steps} exceeds schedule length {total}")));
    }
    if steps == 0 {
        return Ok(vec![0]);
    }
    Ok((0..=steps).map(|k| k * total / steps).collect())
}

/// Latent trajectory from `x0` (t = 0) up to `x_T`, length `steps + 1`.
pub fn ddim_invert(
    x0: &Matrix,
    denoiser: &OracleDenoiser,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<LatentState>> {
    let ts = timestep_sequence(sched.len(), steps)?;
    let mut out = Vec::with_capacity(ts.len());
    out.push(LatentState { t: 0, x: x0.clone() });
    for pair in ts.windows(2) {
        let prev = &out.last().expect("trajectory is non-empty").x;
        let eps = denoiser.predict_noise(prev, pair[0])?;
        let x = ddim_invert_step(prev, eps, pair[0], pair[1], sched)?;
        out.push(LatentState { t: pair[1], x });
    }
    Ok(out)
}

/// Deterministic generation from `x_T` down to t = 0, length `steps + 1`.
pub fn ddim_generate(
    x_top: &Matrix,
    denoiser: &OracleDenoiser,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<LatentState>> {
    let ts = timestep_sequence(sched.len(), steps)?;
    let mut out = Vec::with_capacity(ts.len());
    out.push(LatentState {
        t: *ts.last().expect("sequence is non-empty"),
        x: x_top.clone(),
    });
    for pair in ts.windows(2).rev() {
        let cur = &out.last().expect("trajectory is non-empty").x;
        let eps = denoiser.predict_noise(cur, pair[1])?;
        let x = ddim_step(cur, eps, pair[1], pair[0], 0.0, None, sched)?;
        out.push(LatentState { t: pair[0], x });
    }
    Ok(out)
}

/// Inverts `x0` and generates back; returns the max absolute roundtrip error.
pub fn roundtrip_error(x0: &Matrix, noise: &Matrix, sched: &NoiseSchedule, steps: usize) -> Result<f64> {
    let denoiser = OracleDenoiser::new(x0.clone(), noise.clone())?;
    let up = ddim_invert(x0, &denoiser, sched, steps)?;
    let down = ddim_generate(&up.last().expect("trajectory is non-empty").x, &denoiser, sched, steps)?;
    Ok(down.last().expect("trajectory is non-empty").x.max_abs_diff(x0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{randn_matrix, Rng};

    fn scalar(v: f64) -> Matrix {
        Matrix::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        let s = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars()[0] <= 1.0);
        assert!((s.betas()[49] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(3, 0.0, 0.2).is_err());
        assert!(make_schedule(3, 0.3, 0.2).is_err());
        assert!(make_schedule(3, 0.1, 1.0).is_err());
        assert!(matches!(
            make_schedule(3, 0.1, 0.2).unwrap().alpha_bar(4),
            Err(AsiError::Index { t: 4, max: 3 })
        ));
    }

    #[test]
    fn forward_noise_examples() {
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let x = forward_noise(&scalar(1.0), 1, &scalar(2.0), &s).unwrap();
        assert!((x.get(0, 0) - 2.232_050_807_568_877).abs() < 1e-12);

        let x0 = scalar(3.0);
        assert_eq!(forward_noise(&x0, 0, &scalar(5.0), &s).unwrap(), x0);
        let x = forward_noise(&x0, 1, &scalar(0.0), &s).unwrap();
        assert_eq!(x.get(0, 0), 0.5 * 3.0);
        assert!(forward_noise(&x0, 2, &scalar(0.0), &s).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let s = make_schedule(1, 0.36, 0.36).unwrap();
        let x0 = predict_x0(&scalar(2.0), &scalar(0.5), 1, &s).unwrap();
        assert!((x0.get(0, 0) - 2.125).abs() < 1e-12);
        let x0 = predict_x0(&scalar(2.0), &scalar(0.0), 1, &s).unwrap();
        assert!((x0.get(0, 0) - 2.5).abs() < 1e-12);

        let sched = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = Rng::new(1);
        let x0 = randn_matrix(&mut rng, 4, 5).unwrap();
        let eps = randn_matrix(&mut rng, 4, 5).unwrap();
        for t in 0..=50 {
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            assert!(predict_x0(&xt, &eps, t, &sched).unwrap().max_abs_diff(&x0) < 1e-10);
        }
    }

    #[test]
    fn singular_schedule_is_reported() {
        // alpha_bar underflows to zero after enough near-one betas
        let s = NoiseSchedule::from_betas(vec![0.9999; 100]).unwrap();
        assert_eq!(s.alpha_bar(100).unwrap(), 0.0);
        assert!(matches!(
            predict_x0(&scalar(1.0), &scalar(0.0), 100, &s),
            Err(AsiError::SingularSchedule(100))
        ));
    }

    #[test]
    fn ddim_step_lands_on_forward_trajectory() {
        let sched = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = Rng::new(2);
        let x0 = randn_matrix(&mut rng, 3, 3).unwrap();
        let eps = randn_matrix(&mut rng, 3, 3).unwrap();
        for t in 1..=50 {
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            let prev = ddim_step(&xt, &eps, t, t - 1, 0.0, None, &sched).unwrap();
            let want = forward_noise(&x0, t - 1, &eps, &sched).unwrap();
            assert!(prev.max_abs_diff(&want) < 1e-10);
        }
        let xt = forward_noise(&x0, 10, &eps, &sched).unwrap();
        let terminal = ddim_step(&xt, &eps, 10, 0, 0.0, None, &sched).unwrap();
        assert_eq!(terminal, predict_x0(&xt, &eps, 10, &sched).unwrap());
    }

    #[test]
    fn ddim_step_scalar_with_sigma() {
        let sched = make_schedule(2, 0.1, 0.2).unwrap();
        let (xt, e, sigma, z) = (1.3, -0.4, 0.2, 0.7);
        let got = ddim_step(&scalar(xt), &scalar(e), 2, 1, sigma, Some(&scalar(z)), &sched).unwrap();
        // direct evaluation with ab_2 = 0.72, ab_1 = 0.9
        let x0 = (xt - (1.0f64 - 0.72).sqrt() * e) / 0.72f64.sqrt();
        let want = 0.9f64.sqrt() * x0 + (1.0f64 - 0.9 - sigma * sigma).sqrt() * e + sigma * z;
        assert!((got.get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn ddim_step_errors() {
        let sched = make_schedule(2, 0.1, 0.2).unwrap();
        let x = scalar(1.0);
        assert!(matches!(
            ddim_step(&x, &x, 2, 1, 0.5, Some(&x), &sched),
            Err(AsiError::InvalidSigma { .. })
        ));
        assert!(ddim_step(&x, &x, 1, 1, 0.0, None, &sched).is_err());
        assert!(ddim_step(&x, &x, 2, 1, 0.1, None, &sched).is_err());
    }

    #[test]
    fn inversion_bookkeeping() {
        let sched = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = Rng::new(3);
        let x0 = randn_matrix(&mut rng, 2, 2).unwrap();
        let den = OracleDenoiser::new(x0.clone(), randn_matrix(&mut rng, 2, 2).unwrap()).unwrap();
        let traj = ddim_invert(&x0, &den, &sched, 0).unwrap();
        assert_eq!(traj, vec![LatentState { t: 0, x: x0.clone() }]);
        for steps in [1, 7, 25, 50] {
            let traj = ddim_invert(&x0, &den, &sched, steps).unwrap();
            assert_eq!(traj.len(), steps + 1);
            assert_eq!(traj.last().unwrap().t, 50);
        }
        assert!(ddim_invert(&x0, &den, &sched, 51).is_err());
    }

    #[test]
    fn roundtrip_and_per_step_inverse() {
        let sched = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = Rng::new(4);
        let x0 = randn_matrix(&mut rng, 8, 8).unwrap();
        let eps = randn_matrix(&mut rng, 8, 8).unwrap();
        assert!(roundtrip_error(&x0, &eps, &sched, 50).unwrap() < 1e-6);

        let den = OracleDenoiser::new(x0.clone(), eps.clone()).unwrap();
        let up = ddim_invert(&x0, &den, &sched, 50).unwrap();
        for w in up.windows(2) {
            let down = ddim_step(&w[1].x, &eps, w[1].t, w[0].t, 0.0, None, &sched).unwrap();
            assert!(down.max_abs_diff(&w[0].x) < 1e-8);
        }
    }

    #[test]
    fn forward_noise_preserves_variance() {
        let sched = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = Rng::new(5);
        let x0 = randn_matrix(&mut rng, 100, 100).unwrap();
        let eps = randn_matrix(&mut rng, 100, 100).unwrap();
        let var = |m: &Matrix| {
            let n = m.as_slice().len() as f64;
            let mu = m.as_slice().iter().sum::<f64>() / n;
            m.as_slice().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n
        };
        let v0 = var(&x0);
        for t in [1, 10, 25, 50] {
            let ab = sched.alpha_bar(t).unwrap();
            let want = ab * v0 + (1.0 - ab);
            let got = var(&forward_noise(&x0, t, &eps, &sched).unwrap());
            assert!((got - want).abs() / want < 0.05, "t={t} got {got} want {want}");
        }
    }
}
