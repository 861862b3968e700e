//! Seeded end-to-end pipeline on synthetic features.
//!
//! A run draws a spatial latent, a prompt pair and one set of attention
//! weights per layer, DDIM-inverts the latent with the oracle denoiser and
//! walks the deterministic generation trajectory back down. At every
//! timestep `t = T..1` the current latent is used as the spatial input of
//! each configured layer, which is routed through [`asi_layer`].
//!
//! Draw order from `Rng::new(seed)`: spatial latent `m x hd`, forward noise
//! `m x hd`, content prompt `L x hd`, style offset `L x hd`, then for each
//! layer `w_q`, `w_k`, `w_v` (`hd x hd`, scaled by `1/sqrt(hd)`).

mod config;
mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::ExperimentConfig;
pub use report::{ell_csv, RunReport, StepMetrics};

use crate::adablending::{asi_layer, head_distances, AsiOutput, MaskBlock};
use crate::ddim::{ddim_generate, ddim_invert, make_schedule, OracleDenoiser, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::dump;
use crate::error::{AsiError, Result};
use crate::numeric::{randn_matrix, Matrix, Rng};
use crate::sica::{project_kv, project_q, siamese_attend, AttentionParams, PromptEmbedding};

#[derive(Debug, Clone)]
pub struct SyntheticInputs {
    pub spatial: Matrix,
    pub noise: Matrix,
    pub content_prompt: PromptEmbedding,
    pub style_prompt: PromptEmbedding,
    /// One parameter set per layer.
    pub layers: Vec<AttentionParams>,
}

pub fn synth_inputs(cfg: &ExperimentConfig) -> Result<SyntheticInputs> {
    cfg.validate()?;
    let (m, hd, l) = (cfg.positions, cfg.model_dim(), cfg.tokens);
    let mut rng = Rng::new(cfg.seed);
    let spatial = randn_matrix(&mut rng, m, hd)?;
    let noise = randn_matrix(&mut rng, m, hd)?;
    let content = randn_matrix(&mut rng, l, hd)?;
    let offset = randn_matrix(&mut rng, l, hd)?;
    let style = if cfg.perturbation == 0.0 {
        content.clone()
    } else {
        content.add(&offset.scale(cfg.perturbation)?)?
    };
    let w_scale = 1.0 / (hd as f64).sqrt();
    let layers = (0..cfg.layers_per_step)
        .map(|_| {
            let mut w = || randn_matrix(&mut rng, hd, hd)?.scale(w_scale);
            let (w_q, w_k, w_v) = (w()?, w()?, w()?);
            AttentionParams::new(w_q, w_k, w_v, cfg.heads)
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticInputs {
        spatial,
        noise,
        content_prompt: PromptEmbedding::new(content)?,
        style_prompt: PromptEmbedding::new(style)?,
        layers,
    })
}

/// One layer application: ASI when enabled, otherwise the content branch
/// passed through with an all-zero fused mask.
fn apply_layer(cfg: &ExperimentConfig, spatial: &Matrix, inputs: &SyntheticInputs, params: &AttentionParams) -> Result<AsiOutput> {
    let q = project_q(spatial, params)?;
    let (k_s, v_s) = project_kv(&inputs.style_prompt, params)?;
    let (k_c, v_c) = project_kv(&inputs.content_prompt, params)?;
    if cfg.apply_asi {
        return asi_layer(&q, &k_s, &v_s, &k_c, &v_c, &cfg.blend);
    }
    let (f_s, f_c) = siamese_attend(&q, &k_s, &v_s, &k_c, &v_c)?;
    let ell = head_distances(&f_s, &f_c)?;
    let [h, m, d] = f_c.dims();
    Ok(AsiOutput {
        f_out: f_c.clone(),
        ell,
        head_mask: crate::adablending::HeadMask {
            selected: vec![false; h],
        },
        spatial_mask: MaskBlock::filled(h, m, d, false),
        fused_mask: MaskBlock::filled(h, m, d, false),
        f_s,
        f_c,
    })
}

/// Sum of squared `F_out - F_c` over fused-mask zeros, and their count.
fn preserved_error(out: &AsiOutput) -> (f64, usize) {
    out.f_out
        .as_slice()
        .iter()
        .zip(out.f_c.as_slice())
        .zip(out.fused_mask.bits())
        .filter(|(_, &b)| !b)
        .fold((0.0, 0), |(s, n), ((o, c), _)| (s + (o - c) * (o - c), n + 1))
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    let inputs = synth_inputs(cfg)?;
    let sched = make_schedule(cfg.timesteps, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    let denoiser = OracleDenoiser::new(inputs.spatial.clone(), inputs.noise.clone())?;
    let inverted = ddim_invert(&inputs.spatial, &denoiser, &sched, cfg.timesteps)?;
    let top = &inverted.last().expect("trajectory is non-empty").x;
    let generated = ddim_generate(top, &denoiser, &sched, cfg.timesteps)?;

    let layers = cfg.layers_per_step as f64;
    let mut steps = Vec::with_capacity(cfg.timesteps);
    let (mut sq_err, mut preserved, mut blended, mut spatial_kept) = (0.0, 0usize, 0usize, 0usize);
    let mut total = 0usize;
    let mut last = None;
    for state in generated.iter().filter(|s| s.t >= 1) {
        let mut ell = vec![0.0; cfg.heads];
        let (mut step_err, mut step_preserved, mut step_fraction) = (0.0, 0usize, 0.0);
        for params in &inputs.layers {
            let out = apply_layer(cfg, &state.x, &inputs, params)?;
            for (acc, e) in ell.iter_mut().zip(&out.ell) {
                *acc += e / layers;
            }
            let (err, count) = preserved_error(&out);
            step_err += err;
            step_preserved += count;
            step_fraction += out.fused_mask.fraction() / layers;
            blended += out.fused_mask.ones();
            spatial_kept += out.spatial_mask.bits().len() - out.spatial_mask.ones();
            total += out.fused_mask.bits().len();
            last = Some(out);
        }
        sq_err += step_err;
        preserved += step_preserved;
        steps.push(StepMetrics {
            step: state.t,
            ell,
            blended_fraction: step_fraction,
            preserved_mse: mean_or_zero(step_err, step_preserved),
        });
    }

    let last = last.expect("at least one timestep and one layer");
    let output_feature_path = match &cfg.dump_dir {
        Some(dir) => Some(write_outputs(dir, &inverted, &sched, &last)?),
        None => None,
    };
    let report = RunReport {
        steps,
        preserved_mse: mean_or_zero(sq_err, preserved),
        blended_fraction: blended as f64 / total as f64,
        spatial_preserved_fraction: if cfg.apply_asi {
            spatial_kept as f64 / total as f64
        } else {
            0.0
        },
        output_feature_path,
    };
    if let Some(dir) = &cfg.dump_dir {
        dump::write_bytes(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    }
    Ok(report)
}

fn mean_or_zero(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Writes the final-layer masks, features, head distances, mask images and
/// the inversion trajectory. Returns the path of the output features.
fn write_outputs(
    dir: &Path,
    trajectory: &[crate::ddim::LatentState],
    sched: &crate::ddim::NoiseSchedule,
    last: &AsiOutput,
) -> Result<PathBuf> {
    write_masks(dir, last)?;
    let dims = last.f_c.dims();
    dump::write_tensor(&dir.join("f_s.asit"), &dims, last.f_s.as_slice())?;
    dump::write_tensor(&dir.join("f_c.asit"), &dims, last.f_c.as_slice())?;
    let out_path = dir.join("features_out.asit");
    dump::write_tensor(&out_path, &dims, last.f_out.as_slice())?;
    write_trajectory(&dir.join("trajectory"), trajectory, sched)?;
    Ok(out_path)
}

/// `step_<t>.asit` per state plus `manifest.csv` with `t,alpha_bar,file`.
pub fn write_trajectory(
    dir: &Path,
    trajectory: &[crate::ddim::LatentState],
    sched: &crate::ddim::NoiseSchedule,
) -> Result<()> {
    dump::ensure_dir(dir)?;
    let mut manifest = String::from("t,alpha_bar,file\n");
    for state in trajectory {
        let file = format!("step_{}.asit", state.t);
        let (r, c) = state.x.shape();
        dump::write_tensor(&dir.join(&file), &[r, c], state.x.as_slice())?;
        manifest.push_str(&format!("{},{},{}\n", state.t, sched.alpha_bar(state.t)?, file));
    }
    dump::write_bytes(&dir.join("manifest.csv"), manifest.as_bytes())
}

/// Parameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    N,
    Alpha,
    Seed,
    Perturbation,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::N => "n",
            SweepParam::Alpha => "alpha",
            SweepParam::Seed => "seed",
            SweepParam::Perturbation => "perturbation",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = AsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepParam::N),
            "alpha" => Ok(SweepParam::Alpha),
            "seed" => Ok(SweepParam::Seed),
            "perturbation" => Ok(SweepParam::Perturbation),
            other => Err(AsiError::config(
                "param",
                format!("cannot sweep `{other}`; expected n, alpha, seed or perturbation"),
            )),
        }
    }
}

/// One run per value, executed concurrently; reports keep the input order.
///
/// With a dump directory each run writes into `<dump_dir>/<param>_<index>`
/// and the combined table goes to `<dump_dir>/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[String]) -> Result<Vec<RunReport>> {
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = cfg.clone();
            c.set(param.key(), v)?;
            if let Some(dir) = &cfg.dump_dir {
                c.dump_dir = Some(dir.join(format!("{}_{i}", param.key())));
            }
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = configs
        .par_iter()
        .map(run_pipeline)
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.dump_dir {
        dump::ensure_dir(dir)?;
        dump::write_bytes(&dir.join("sweep.csv"), sweep_csv(param, values, &reports).as_bytes())?;
    }
    Ok(reports)
}

pub fn sweep_csv(param: SweepParam, values: &[String], reports: &[RunReport]) -> String {
    let mut out = String::from("param,value,blended_fraction,spatial_preserved_fraction,preserved_mse\n");
    for (v, r) in values.iter().zip(reports) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            param.key(),
            v.trim(),
            r.blended_fraction,
            r.spatial_preserved_fraction,
            r.preserved_mse
        ));
    }
    out
}

/// Single ASI layer on the first generation step, for mask inspection.
pub fn single_layer(cfg: &ExperimentConfig) -> Result<AsiOutput> {
    let inputs = synth_inputs(cfg)?;
    apply_layer(cfg, &inputs.spatial, &inputs, &inputs.layers[0])
}

/// Writes the three masks of one layer as dumps plus per-head PGMs.
pub fn write_masks(dir: &Path, out: &AsiOutput) -> Result<Vec<PathBuf>> {
    dump::ensure_dir(dir)?;
    let dims = out.f_c.dims();
    let [heads, positions, head_dim] = dims;
    let mut written = Vec::new();
    let head_dense = out.head_mask.materialize(positions, head_dim);
    for (name, mask) in [
        ("mask_head", &head_dense),
        ("mask_spatial", &out.spatial_mask),
        ("mask_all", &out.fused_mask),
    ] {
        let path = dir.join(format!("{name}.asit"));
        dump::write_tensor(&path, &dims, &mask.to_values())?;
        written.push(path);
        for i in 0..heads {
            let path = dir.join(format!("{name}_head{i}.pgm"));
            dump::write_bytes(&path, &dump::encode_pgm(head_dim, positions, mask.head_bits(i)))?;
            written.push(path);
        }
    }
    let path = dir.join("ell.csv");
    dump::write_bytes(&path, ell_csv(&out.ell).as_bytes())?;
    written.push(path);
    Ok(written)
}
