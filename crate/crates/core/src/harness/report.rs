use std::fmt::Write as _;
use std::path::PathBuf;

/// Metrics of one denoising step, averaged over the step's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// Timestep `t` the features were computed at.
    pub step: usize,
    pub ell: Vec<f64>,
    pub blended_fraction: f64,
    pub preserved_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub steps: Vec<StepMetrics>,
    /// Mean squared `F_out - F_c` over all coordinates with fused mask 0.
    pub preserved_mse: f64,
    /// Mean of the fused mask over every layer application.
    pub blended_fraction: f64,
    /// Mean of `1 - M_spatial` over every layer application.
    pub spatial_preserved_fraction: f64,
    pub output_feature_path: Option<PathBuf>,
}

impl RunReport {
    pub fn per_step_ell(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.ell.as_slice())
    }

    /// `report.csv`: `step,ell_0..ell_{h-1},blended_fraction,preserved_mse`.
    pub fn to_csv(&self) -> String {
        let heads = self.steps.first().map_or(0, |s| s.ell.len());
        let mut out = String::from("step");
        for i in 0..heads {
            let _ = write!(out, ",ell_{i}");
        }
        out.push_str(",blended_fraction,preserved_mse\n");
        for s in &self.steps {
            let _ = write!(out, "{}", s.step);
            for e in &s.ell {
                let _ = write!(out, ",{e}");
            }
            let _ = writeln!(out, ",{},{}", s.blended_fraction, s.preserved_mse);
        }
        out
    }
}

/// `head_index,ell` rows.
pub fn ell_csv(ell: &[f64]) -> String {
    let mut out = String::from("head_index,ell\n");
    for (i, e) in ell.iter().enumerate() {
        let _ = writeln!(out, "{i},{e}");
    }
    out
}
