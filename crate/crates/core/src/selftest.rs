//! Runtime invariant checks, grouped by module, used by `asi selftest`.

use crate::adablending::{adain, blend, covariance, extract_spatial_mask, head_distance, select_top_n, BlendConfig, MaskBlock};
use crate::ddim::{make_schedule, predict_x0, forward_noise, roundtrip_error, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::harness::{run_pipeline, ExperimentConfig};
use crate::numeric::{matmul, randn_matrix, softmax_rows, Rng};
use crate::sica::{attention_weights, siamese_attend, FeatureMap};

type Check = fn(&mut Rng) -> Result<(), String>;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub error: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: crate::AsiError) -> String {
    e.to_string()
}

fn map(rng: &mut Rng, h: usize, m: usize, d: usize) -> Result<FeatureMap, String> {
    FeatureMap::split_heads(&randn_matrix(rng, m, h * d).map_err(e2s)?, h).map_err(e2s)
}

fn matmul_associative(rng: &mut Rng) -> Result<(), String> {
    for _ in 0..20 {
        let a = randn_matrix(rng, 3, 4).map_err(e2s)?;
        let b = randn_matrix(rng, 4, 5).map_err(e2s)?;
        let c = randn_matrix(rng, 5, 2).map_err(e2s)?;
        let l = matmul(&matmul(&a, &b).map_err(e2s)?, &c).map_err(e2s)?;
        let r = matmul(&a, &matmul(&b, &c).map_err(e2s)?).map_err(e2s)?;
        let scale = l.as_slice().iter().map(|v| v.abs()).fold(1.0, f64::max);
        ensure(l.max_abs_diff(&r) / scale < 1e-9, || "matmul not associative".into())?;
    }
    Ok(())
}

fn softmax_normalised(rng: &mut Rng) -> Result<(), String> {
    for _ in 0..20 {
        let m = randn_matrix(rng, 4, 7).map_err(e2s)?.scale(1e4).map_err(e2s)?;
        let s = softmax_rows(&m);
        for r in 0..4 {
            let total: f64 = s.row(r).iter().sum();
            ensure((total - 1.0).abs() < 1e-9, || format!("row sum {total}"))?;
        }
    }
    Ok(())
}

fn rng_reproducible(_: &mut Rng) -> Result<(), String> {
    let (mut a, mut b) = (Rng::new(123), Rng::new(123));
    let same = (0..10_000).all(|_| a.normal().to_bits() == b.normal().to_bits());
    ensure(same, || "streams diverged".into())
}

fn sica_properties(rng: &mut Rng) -> Result<(), String> {
    let q = map(rng, 3, 5, 4)?;
    let (k_s, v_s, k_c, v_c) = (map(rng, 3, 4, 4)?, map(rng, 3, 4, 4)?, map(rng, 3, 6, 4)?, map(rng, 3, 6, 4)?);
    let (f_s, f_c) = siamese_attend(&q, &k_s, &v_s, &k_c, &v_c).map_err(e2s)?;
    let v3 = FeatureMap::new(3, 4, 4, v_s.as_slice().iter().map(|v| v * 3.0).collect()).map_err(e2s)?;
    let (g_s, g_c) = siamese_attend(&q, &k_s, &v3, &k_c, &v_c).map_err(e2s)?;
    let lin = g_s.as_slice().iter().zip(f_s.as_slice()).all(|(a, b)| (a - 3.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
    ensure(lin, || "style track not linear in values".into())?;
    ensure(g_c == f_c, || "content track changed".into())?;
    for i in 0..3 {
        let w = attention_weights(&q.head(i), &k_s.head(i)).map_err(e2s)?;
        for r in 0..5 {
            let total: f64 = w.row(r).iter().sum();
            ensure((total - 1.0).abs() < 1e-9, || format!("attention row sum {total}"))?;
        }
    }
    let (s2, c2) = siamese_attend(&q, &k_c, &v_c, &k_s, &v_s).map_err(e2s)?;
    ensure(s2 == f_c && c2 == f_s, || "swapping tracks did not swap outputs".into())
}

fn covariance_symmetric(rng: &mut Rng) -> Result<(), String> {
    for _ in 0..20 {
        let f = randn_matrix(rng, 9, 4).map_err(e2s)?;
        let c = covariance(&f).map_err(e2s)?;
        ensure(c == c.transpose(), || "covariance not symmetric".into())?;
        let g = randn_matrix(rng, 9, 4).map_err(e2s)?;
        let l = head_distance(&f, &g).map_err(e2s)?;
        ensure(l >= 0.0 && l == head_distance(&g, &f).map_err(e2s)?, || "distance not symmetric".into())?;
        ensure(head_distance(&f, &f).map_err(e2s)? == 0.0, || "self distance nonzero".into())?;
    }
    Ok(())
}

fn top_n_count(rng: &mut Rng) -> Result<(), String> {
    for n in 0..=8 {
        let ell: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let m = select_top_n(&ell, n).map_err(e2s)?;
        ensure(m.count() == n, || format!("selected {} of {n}", m.count()))?;
        let min_sel = m.selected_indices().iter().map(|&i| ell[i]).fold(f64::INFINITY, f64::min);
        let max_rest = (0..8).filter(|i| !m.selected[*i]).map(|i| ell[i]).fold(f64::NEG_INFINITY, f64::max);
        ensure(n == 0 || n == 8 || min_sel >= max_rest, || "selection is not top-n".into())?;
    }
    Ok(())
}

fn spatial_threshold(rng: &mut Rng) -> Result<(), String> {
    let cfg = BlendConfig::default();
    let f = map(rng, 2, 10, 3)?;
    let mask = extract_spatial_mask(&f, &cfg);
    for i in 0..2 {
        let head = f.head(i);
        for c in 0..3 {
            let col = head.column(c);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (p, v) in col.iter().enumerate() {
                ensure(mask.head_bits(i)[p * 3 + c] == (*v <= cfg.alpha * max), || "threshold mismatch".into())?;
            }
        }
    }
    Ok(())
}

fn adain_moments(rng: &mut Rng) -> Result<(), String> {
    for _ in 0..20 {
        let c = randn_matrix(rng, 12, 3).map_err(e2s)?;
        let s = randn_matrix(rng, 12, 3).map_err(e2s)?.scale(2.5).map_err(e2s)?;
        let out = adain(&c, &s, 1e-5).map_err(e2s)?;
        for ch in 0..3 {
            let stats = |v: Vec<f64>| {
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                (mu, (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
            };
            let (mo, so) = stats(out.column(ch));
            let (ms, ss) = stats(s.column(ch));
            ensure((mo - ms).abs() < 1e-6 && (so - ss).abs() < 1e-4, || "moments not transferred".into())?;
        }
    }
    Ok(())
}

fn blend_selects(rng: &mut Rng) -> Result<(), String> {
    let (f_c, f_s) = (map(rng, 2, 6, 3)?, map(rng, 2, 6, 3)?);
    let bits: Vec<bool> = (0..36).map(|_| rng.uniform() < 0.5).collect();
    let mask = MaskBlock::new(2, 6, 3, bits).map_err(e2s)?;
    let cfg = BlendConfig::default();
    let out = blend(&f_c, &f_s, &mask, &cfg).map_err(e2s)?;
    for i in 0..2 {
        let styled = adain(&f_c.head(i), &f_s.head(i), cfg.eps).map_err(e2s)?;
        for (k, &b) in mask.head_bits(i).iter().enumerate() {
            let want = if b { styled.as_slice()[k] } else { f_c.head_slice(i)[k] };
            ensure(out.head_slice(i)[k].to_bits() == want.to_bits(), || "blend introduced a third value".into())?;
        }
    }
    Ok(())
}

fn ddim_identities(rng: &mut Rng) -> Result<(), String> {
    let sched = make_schedule(50, DEFAULT_BETA_START, DEFAULT_BETA_END).map_err(e2s)?;
    let x0 = randn_matrix(rng, 6, 6).map_err(e2s)?;
    let eps = randn_matrix(rng, 6, 6).map_err(e2s)?;
    for t in 0..=50 {
        let xt = forward_noise(&x0, t, &eps, &sched).map_err(e2s)?;
        let back = predict_x0(&xt, &eps, t, &sched).map_err(e2s)?;
        ensure(back.max_abs_diff(&x0) < 1e-10, || format!("predict_x0 off at t={t}"))?;
    }
    let err = roundtrip_error(&x0, &eps, &sched, 50).map_err(e2s)?;
    ensure(err < 1e-6, || format!("roundtrip error {err}"))
}

fn harness_preservation(_: &mut Rng) -> Result<(), String> {
    let cfg = ExperimentConfig {
        timesteps: 5,
        ..ExperimentConfig::default()
    };
    let report = run_pipeline(&cfg).map_err(e2s)?;
    ensure(report.preserved_mse == 0.0, || format!("preserved_mse {}", report.preserved_mse))?;
    let floor = cfg.blend.n as f64 / cfg.heads as f64;
    ensure(report.blended_fraction >= floor, || "blended fraction below n/h".into())?;
    let again = run_pipeline(&cfg).map_err(e2s)?;
    ensure(again == report, || "run is not deterministic".into())
}

const CHECKS: &[(&str, &str, Check)] = &[
    ("numeric", "matmul associativity", matmul_associative),
    ("numeric", "softmax rows sum to one", softmax_normalised),
    ("numeric", "rng reproducibility", rng_reproducible),
    ("sica", "track isolation and symmetry", sica_properties),
    ("adablending", "covariance and distance symmetry", covariance_symmetric),
    ("adablending", "top-n selection", top_n_count),
    ("adablending", "spatial threshold", spatial_threshold),
    ("adablending", "adain moment transfer", adain_moments),
    ("adablending", "blend exact selection", blend_selects),
    ("ddim", "prediction and roundtrip identities", ddim_identities),
    ("harness", "preservation and determinism", harness_preservation),
];

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = Rng::new(seed);
    CHECKS
        .iter()
        .map(|(module, name, check)| CheckOutcome {
            module,
            name,
            error: check(&mut rng).err(),
        })
        .collect()
}
