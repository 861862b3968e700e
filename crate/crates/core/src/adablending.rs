//! Adaptive content-style blending.
//!
//! Given the style and content outputs of the siamese attention, two binary
//! masks decide where style is blended in:
//!
//! * the head mask keeps the `n` heads whose style/content feature
//!   covariances differ most (all positions of those heads blend);
//! * the spatial mask preserves strongly activated content coordinates,
//!   those strictly above `alpha` times the per-channel spatial maximum.
//!
//! The masks are OR-fused (`1` = blend, `0` = preserve) and the blend picks,
//! per coordinate, either the AdaIN-restyled content value or the untouched
//! content value.

use crate::error::{AsiError, Result};
use crate::numeric::Matrix;
use crate::sica::{siamese_attend, FeatureMap};

pub const DEFAULT_TOP_HEADS: usize = 6;
pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How the head and spatial masks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Or,
    /// Not part of the published method; blends only where both masks agree.
    And,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Or => "or",
            Fusion::And => "and",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = AsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" => Ok(Fusion::Or),
            "and" => Ok(Fusion::And),
            other => Err(AsiError::config("fusion", format!("expected `or` or `and`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    /// Number of heads selected by covariance distance.
    pub n: usize,
    /// Spatial threshold coefficient.
    pub alpha: f64,
    /// Lower bound on the content standard deviation used by AdaIN.
    pub eps: f64,
    pub fusion: Fusion,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_TOP_HEADS,
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
            fusion: Fusion::Or,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.n > heads {
            return Err(AsiError::config("n", format!("{} exceeds head count {heads}", self.n)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(AsiError::config("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(AsiError::config("eps", format!("must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-head selection flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadMask {
    pub selected: Vec<bool>,
}

impl HeadMask {
    pub fn heads(&self) -> usize {
        self.selected.len()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.heads()).filter(|&i| self.selected[i]).collect()
    }

    /// Dense form: selected heads become all-ones slices.
    pub fn materialize(&self, positions: usize, head_dim: usize) -> MaskBlock {
        let per_head = positions * head_dim;
        let bits = self
            .selected
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, per_head))
            .collect();
        MaskBlock {
            heads: self.heads(),
            positions,
            head_dim,
            bits,
        }
    }
}

/// Dense binary mask of shape `heads x positions x head_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBlock {
    heads: usize,
    positions: usize,
    head_dim: usize,
    bits: Vec<bool>,
}

pub type SpatialMask = MaskBlock;
pub type FusedMask = MaskBlock;

impl MaskBlock {
    pub fn new(heads: usize, positions: usize, head_dim: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != heads * positions * head_dim {
            return Err(AsiError::shape(
                "MaskBlock::new",
                format!("{heads}x{positions}x{head_dim}"),
                bits.len(),
            ));
        }
        Ok(Self {
            heads,
            positions,
            head_dim,
            bits,
        })
    }

    pub fn filled(heads: usize, positions: usize, head_dim: usize, value: bool) -> Self {
        Self {
            heads,
            positions,
            head_dim,
            bits: vec![value; heads * positions * head_dim],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.heads, self.positions, self.head_dim]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn head_bits(&self, i: usize) -> &[bool] {
        let n = self.positions * self.head_dim;
        &self.bits[i * n..(i + 1) * n]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mean of the mask, in `[0, 1]`.
    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.ones() as f64 / self.bits.len() as f64
        }
    }

    /// Values as exact `0.0` / `1.0`.
    pub fn to_values(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.heads, self.positions, self.head_dim)
    }
}

/// Sample covariance `(FᵀF - (1ᵀF)ᵀ(1ᵀF) / m) / (m - 1)` of an `m x d` block.
pub fn covariance(f: &Matrix) -> Result<Matrix> {
    let (m, d) = f.shape();
    if m < 2 {
        return Err(AsiError::Degenerate {
            op: "covariance",
            reason: format!("need at least 2 positions, got {m}"),
        });
    }
    let sums = f.column_sums();
    let inv_m = 1.0 / m as f64;
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let mut gram = 0.0;
            for r in 0..m {
                let row = f.row(r);
                gram += row[a] * row[b];
            }
            let v = (gram - inv_m * sums[a] * sums[b]) / (m - 1) as f64;
            out[a * d + b] = v;
            out[b * d + a] = v;
        }
    }
    Matrix::from_kernel("covariance", d, d, out)
}

/// Covariance distance `‖Cov_s - Cov_c‖²_F / (4 d²)`.
pub fn head_distance(f_s_head: &Matrix, f_c_head: &Matrix) -> Result<f64> {
    f_s_head.expect_same_shape("head_distance", f_c_head)?;
    let d = f_s_head.cols() as f64;
    let diff = covariance(f_s_head)?.sub(&covariance(f_c_head)?)?;
    Ok(diff.frobenius_sq() / (4.0 * d * d))
}

fn check_maps(op: &'static str, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(AsiError::shape(op, a.shape_str(), b.shape_str()));
    }
    Ok(())
}

/// Covariance distance of every head.
pub fn head_distances(f_s: &FeatureMap, f_c: &FeatureMap) -> Result<Vec<f64>> {
    check_maps("head_distances", f_s, f_c)?;
    (0..f_s.heads())
        .map(|i| head_distance(&f_s.head(i), &f_c.head(i)))
        .collect()
}

/// Indices of the `n` largest distances; ties go to the lower head index.
pub fn select_top_n(ell: &[f64], n: usize) -> Result<HeadMask> {
    if n > ell.len() {
        return Err(AsiError::config("n", format!("{n} exceeds head count {}", ell.len())));
    }
    let mut order: Vec<usize> = (0..ell.len()).collect();
    // stable sort keeps ascending index among equal distances
    order.sort_by(|&a, &b| ell[b].total_cmp(&ell[a]));
    let mut selected = vec![false; ell.len()];
    for &i in &order[..n] {
        selected[i] = true;
    }
    Ok(HeadMask { selected })
}

pub fn extract_head_mask(f_s: &FeatureMap, f_c: &FeatureMap, cfg: &BlendConfig) -> Result<HeadMask> {
    if cfg.n > f_s.heads() {
        return Err(AsiError::config("n", format!("{} exceeds head count {}", cfg.n, f_s.heads())));
    }
    select_top_n(&head_distances(f_s, f_c)?, cfg.n)
}

/// Zero exactly where `f_c` strictly exceeds `alpha` times its per-head,
/// per-channel maximum over positions.
///
/// The threshold is applied as written for non-positive maxima too, where
/// `alpha < 1` puts it above every value and the channel stays all ones.
pub fn extract_spatial_mask(f_c: &FeatureMap, cfg: &BlendConfig) -> SpatialMask {
    let (m, d) = (f_c.positions(), f_c.head_dim());
    let mut bits = Vec::with_capacity(f_c.as_slice().len());
    for i in 0..f_c.heads() {
        let slice = f_c.head_slice(i);
        let mut peak = vec![f64::NEG_INFINITY; d];
        for p in 0..m {
            for (c, v) in slice[p * d..(p + 1) * d].iter().enumerate() {
                peak[c] = peak[c].max(*v);
            }
        }
        let tau: Vec<f64> = peak.iter().map(|p| cfg.alpha * p).collect();
        for p in 0..m {
            for (c, v) in slice[p * d..(p + 1) * d].iter().enumerate() {
                bits.push(*v <= tau[c]);
            }
        }
    }
    MaskBlock {
        heads: f_c.heads(),
        positions: m,
        head_dim: d,
        bits,
    }
}

/// Elementwise OR of the materialised head mask and the spatial mask.
pub fn fuse_masks(head: &HeadMask, spatial: &SpatialMask) -> Result<FusedMask> {
    fuse_masks_with(head, spatial, Fusion::Or)
}

pub fn fuse_masks_with(head: &HeadMask, spatial: &SpatialMask, fusion: Fusion) -> Result<FusedMask> {
    if head.heads() != spatial.heads {
        return Err(AsiError::shape("fuse_masks", head.heads(), spatial.shape_str()));
    }
    let dense = head.materialize(spatial.positions, spatial.head_dim);
    let bits = dense
        .bits
        .iter()
        .zip(&spatial.bits)
        .map(|(&h, &s)| match fusion {
            Fusion::Or => h || s,
            Fusion::And => h && s,
        })
        .collect();
    Ok(MaskBlock { bits, ..dense })
}

fn moments(values: impl Iterator<Item = f64> + Clone, m: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / m as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
    (mean, var.sqrt())
}

/// Per-channel AdaIN: content normalised by its own mean and population
/// standard deviation, then rescaled to the style moments.
///
/// The content deviation is floored at `eps` before dividing.
pub fn adain(f_c_head: &Matrix, f_s_head: &Matrix, eps: f64) -> Result<Matrix> {
    f_c_head.expect_same_shape("adain", f_s_head)?;
    let (m, d) = f_c_head.shape();
    if m == 0 {
        return Err(AsiError::Degenerate {
            op: "adain",
            reason: "no positions".into(),
        });
    }
    let fc = f_c_head.as_slice();
    let fs = f_s_head.as_slice();
    let mut out = vec![0.0; m * d];
    for c in 0..d {
        let (mu_c, sigma_c) = moments((0..m).map(|p| fc[p * d + c]), m);
        let (mu_s, sigma_s) = moments((0..m).map(|p| fs[p * d + c]), m);
        let denom = sigma_c.max(eps);
        for p in 0..m {
            out[p * d + c] = sigma_s * ((fc[p * d + c] - mu_c) / denom) + mu_s;
        }
    }
    Matrix::from_kernel("adain", m, d, out)
}

/// Picks the AdaIN value where the mask is 1 and the content value where it is 0.
pub fn blend(f_c: &FeatureMap, f_s: &FeatureMap, mask: &FusedMask, cfg: &BlendConfig) -> Result<FeatureMap> {
    check_maps("blend", f_c, f_s)?;
    if mask.dims() != f_c.dims() {
        return Err(AsiError::shape("blend", f_c.shape_str(), mask.shape_str()));
    }
    let mut heads = Vec::with_capacity(f_c.heads());
    for i in 0..f_c.heads() {
        let content = f_c.head(i);
        let styled = adain(&content, &f_s.head(i), cfg.eps)?;
        let data = content
            .as_slice()
            .iter()
            .zip(styled.as_slice())
            .zip(mask.head_bits(i))
            .map(|((&c, &s), &b)| if b { s } else { c })
            .collect();
        heads.push(Matrix::new(f_c.positions(), f_c.head_dim(), data)?);
    }
    FeatureMap::from_heads(heads)
}

/// Everything one ASI layer computes.
#[derive(Debug, Clone)]
pub struct AsiOutput {
    pub f_out: FeatureMap,
    pub f_s: FeatureMap,
    pub f_c: FeatureMap,
    pub ell: Vec<f64>,
    pub head_mask: HeadMask,
    pub spatial_mask: SpatialMask,
    pub fused_mask: FusedMask,
}

/// Siamese attention followed by mask extraction, fusion and blending.
pub fn asi_layer(
    q: &FeatureMap,
    k_s: &FeatureMap,
    v_s: &FeatureMap,
    k_c: &FeatureMap,
    v_c: &FeatureMap,
    cfg: &BlendConfig,
) -> Result<AsiOutput> {
    cfg.validate(q.heads())?;
    let (f_s, f_c) = siamese_attend(q, k_s, v_s, k_c, v_c)?;
    let ell = head_distances(&f_s, &f_c)?;
    let head_mask = select_top_n(&ell, cfg.n)?;
    let spatial_mask = extract_spatial_mask(&f_c, cfg);
    let fused_mask = fuse_masks_with(&head_mask, &spatial_mask, cfg.fusion)?;
    let f_out = blend(&f_c, &f_s, &fused_mask, cfg)?;
    Ok(AsiOutput {
        f_out,
        f_s,
        f_c,
        ell,
        head_mask,
        spatial_mask,
        fused_mask,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numeric::{randn_matrix, Rng};
    use proptest::prelude::*;

    /// Two-pass covariance: centre rows, accumulate outer products.
    fn centered_covariance(f: &Matrix) -> Matrix {
        let (m, d) = f.shape();
        let mean: Vec<f64> = f.column_sums().iter().map(|s| s / m as f64).collect();
        let mut out = vec![0.0; d * d];
        for r in 0..m {
            let dev: Vec<f64> = f.row(r).iter().zip(&mean).map(|(v, mu)| v - mu).collect();
            for a in 0..d {
                for b in 0..d {
                    out[a * d + b] += dev[a] * dev[b];
                }
            }
        }
        Matrix::new(d, d, out.into_iter().map(|v| v / (m - 1) as f64).collect()).unwrap()
    }

    fn map_from_heads(heads: &[&[&[f64]]]) -> FeatureMap {
        FeatureMap::from_heads(heads.iter().map(|h| Matrix::from_rows(h).unwrap()).collect()).unwrap()
    }

    fn cfg(n: usize, alpha: f64) -> BlendConfig {
        BlendConfig {
            n,
            alpha,
            ..BlendConfig::default()
        }
    }

    #[test]
    fn covariance_examples() {
        let same = Matrix::from_rows(&[[1.5, -2.0], [1.5, -2.0], [1.5, -2.0]]).unwrap();
        assert_eq!(covariance(&same).unwrap(), Matrix::zeros(2, 2));

        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let want = Matrix::from_rows(&[[4.0, 4.0], [4.0, 4.0]]).unwrap();
        assert!(covariance(&f).unwrap().max_abs_diff(&want) < 1e-12);
        assert!(centered_covariance(&f).max_abs_diff(&want) < 1e-12);

        let permuted = Matrix::from_rows(&[[5.0, 6.0], [1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(covariance(&permuted).unwrap(), covariance(&f).unwrap());
    }

    #[test]
    fn covariance_needs_two_positions() {
        let err = covariance(&Matrix::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, AsiError::Degenerate { .. }));
    }

    #[test]
    fn head_distance_examples() {
        let f = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(head_distance(&f, &f).unwrap(), 0.0);
        let flat = Matrix::filled(3, 2, 7.0);
        assert!((head_distance(&f, &flat).unwrap() - 4.0).abs() < 1e-12);
        assert!(head_distance(&f, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn head_distance_is_quartic_in_deviation_scale() {
        let mut rng = Rng::new(21);
        let a = randn_matrix(&mut rng, 6, 3).unwrap();
        let b = randn_matrix(&mut rng, 6, 3).unwrap();
        let base = head_distance(&a, &b).unwrap();
        for c in [2.0, 0.5] {
            let scaled = head_distance(&a.scale(c).unwrap(), &b.scale(c).unwrap()).unwrap();
            assert!((scaled - base * c.powi(4)).abs() < 1e-12 * (1.0 + scaled));
        }
    }

    #[test]
    fn top_n_selection() {
        let m = select_top_n(&[0.5, 0.1, 0.9], 2).unwrap();
        assert_eq!(m.selected_indices(), vec![0, 2]);
        assert_eq!(select_top_n(&[0.5, 0.1, 0.9], 3).unwrap().count(), 3);
        assert_eq!(select_top_n(&[0.5, 0.1, 0.9], 0).unwrap().count(), 0);
        assert_eq!(select_top_n(&[0.5, 0.5, 0.1], 1).unwrap().selected_indices(), vec![0]);
        assert!(select_top_n(&[0.5], 2).is_err());
    }

    #[test]
    fn head_mask_materializes_constant_slices() {
        let m = HeadMask {
            selected: vec![true, false],
        };
        let dense = m.materialize(2, 3);
        assert!(dense.head_bits(0).iter().all(|&b| b));
        assert!(dense.head_bits(1).iter().all(|&b| !b));
    }

    #[test]
    fn extract_head_mask_rejects_large_n() {
        let f = FeatureMap::new(2, 3, 1, vec![0.0, 1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        assert!(matches!(
            extract_head_mask(&f, &f, &cfg(3, 0.7)),
            Err(AsiError::Config { .. })
        ));
    }

    #[test]
    fn spatial_mask_examples() {
        let f = map_from_heads(&[&[&[1.0], &[0.5], &[0.8]]]);
        assert_eq!(extract_spatial_mask(&f, &cfg(0, 0.7)).bits(), &[false, true, false]);

        // alpha = 1: the maximum itself is not strictly above the threshold
        let f = map_from_heads(&[&[&[1.0], &[0.5], &[0.8]]]);
        assert_eq!(extract_spatial_mask(&f, &cfg(0, 1.0)).bits(), &[true, true, true]);

        let f = map_from_heads(&[&[&[2.0], &[2.0], &[2.0]]]);
        assert_eq!(extract_spatial_mask(&f, &cfg(0, 0.7)).bits(), &[false, false, false]);

        // negative maximum: threshold lies above every value
        let f = map_from_heads(&[&[&[-1.0], &[-3.0], &[-2.0]]]);
        assert_eq!(extract_spatial_mask(&f, &cfg(0, 0.7)).bits(), &[true, true, true]);
    }

    #[test]
    fn spatial_mask_is_per_head_and_channel() {
        let f = map_from_heads(&[&[&[1.0, 10.0], &[0.1, 9.0]], &[&[4.0, 0.0], &[5.0, 1.0]]]);
        let m = extract_spatial_mask(&f, &cfg(0, 0.7));
        assert_eq!(m.head_bits(0), &[false, false, true, false]);
        assert_eq!(m.head_bits(1), &[false, true, false, false]);
    }

    #[test]
    fn fusion_semantics() {
        let spatial = MaskBlock::new(2, 2, 1, vec![true, false, false, true]).unwrap();
        let head = HeadMask {
            selected: vec![true, false],
        };
        let or = fuse_masks(&head, &spatial).unwrap();
        assert_eq!(or.head_bits(0), &[true, true]);
        assert_eq!(or.head_bits(1), spatial.head_bits(1));
        let and = fuse_masks_with(&head, &spatial, Fusion::And).unwrap();
        assert_eq!(and.bits(), &[true, false, false, false]);
        let bad = HeadMask {
            selected: vec![true],
        };
        assert!(fuse_masks(&bad, &spatial).is_err());
    }

    #[test]
    fn adain_examples() {
        let c = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        let s = Matrix::from_rows(&[[10.0], [14.0]]).unwrap();
        let out = adain(&c, &s, DEFAULT_EPS).unwrap();
        assert!((out.get(0, 0) - 10.0).abs() < 1e-12);
        assert!((out.get(1, 0) - 14.0).abs() < 1e-12);

        let flat = Matrix::from_rows(&[[5.0], [5.0]]).unwrap();
        let out = adain(&flat, &s, DEFAULT_EPS).unwrap();
        assert_eq!(out.as_slice(), &[12.0, 12.0]);

        let mut rng = Rng::new(2);
        let x = randn_matrix(&mut rng, 10, 4).unwrap();
        assert!(adain(&x, &x, DEFAULT_EPS).unwrap().max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn blend_boundaries() {
        let mut rng = Rng::new(4);
        let f_c = FeatureMap::split_heads(&randn_matrix(&mut rng, 5, 6).unwrap(), 2).unwrap();
        let f_s = FeatureMap::split_heads(&randn_matrix(&mut rng, 5, 6).unwrap(), 2).unwrap();
        let c = BlendConfig::default();

        let keep = blend(&f_c, &f_s, &MaskBlock::filled(2, 5, 3, false), &c).unwrap();
        assert_eq!(keep, f_c);

        let all = blend(&f_c, &f_s, &MaskBlock::filled(2, 5, 3, true), &c).unwrap();
        for i in 0..2 {
            assert_eq!(all.head(i), adain(&f_c.head(i), &f_s.head(i), c.eps).unwrap());
        }

        let mask = MaskBlock::new(2, 5, 3, (0..30).map(|i| i % 3 == 0).collect()).unwrap();
        let same = blend(&f_c, &f_c, &mask, &c).unwrap();
        assert!(same.max_abs_diff(&f_c) < 1e-6);

        assert!(blend(&f_c, &f_s, &MaskBlock::filled(2, 5, 2, true), &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BlendConfig::default().validate(8).is_ok());
        assert!(BlendConfig::default().validate(4).is_err());
        assert!(cfg(0, -1.0).validate(4).is_err());
        assert!(BlendConfig { eps: 0.0, ..cfg(0, 0.7) }.validate(4).is_err());
        assert_eq!("or".parse::<Fusion>().unwrap(), Fusion::Or);
        assert!("xor".parse::<Fusion>().is_err());
    }

    fn random_map(rng: &mut Rng, h: usize, m: usize, d: usize) -> FeatureMap {
        FeatureMap::split_heads(&randn_matrix(rng, m, h * d).unwrap(), h).unwrap()
    }

    /// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi rotations.
    fn min_eigenvalue(a: &Matrix) -> f64 {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i][j] * m[i][j]).sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[k][p], m[k][q]);
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[p][k], m[q][k]);
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i][i]).fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn covariance_symmetric_psd(seed in any::<u64>(), m in 2usize..20, d in 1usize..6) {
            let f = randn_matrix(&mut Rng::new(seed), m, d).unwrap();
            let cov = covariance(&f).unwrap();
            prop_assert_eq!(&cov, &cov.transpose());
            prop_assert!(cov.max_abs_diff(&centered_covariance(&f)) < 1e-9);
            prop_assert!(min_eigenvalue(&cov) >= -1e-9);
        }

        #[test]
        fn head_distance_symmetric_and_translation_invariant(
            seed in any::<u64>(), m in 2usize..12, d in 1usize..5, shift in -50.0f64..50.0,
        ) {
            let mut rng = Rng::new(seed);
            let a = randn_matrix(&mut rng, m, d).unwrap();
            let b = randn_matrix(&mut rng, m, d).unwrap();
            let l = head_distance(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l, head_distance(&b, &a).unwrap());
            let offsets: Vec<f64> = (0..d).map(|c| shift * (c as f64 + 1.0)).collect();
            let rows: Vec<Vec<f64>> = (0..m).map(|r| a.row(r).iter().zip(&offsets).map(|(v, o)| v + o).collect()).collect();
            let moved = Matrix::from_rows(&rows).unwrap();
            prop_assert!((head_distance(&moved, &b).unwrap() - l).abs() < 1e-9);
        }

        #[test]
        fn head_selection_matches_sort_and_is_scale_invariant(
            seed in any::<u64>(), h in 1usize..9, n_frac in 0.0f64..=1.0, scale in 0.1f64..10.0,
        ) {
            let mut rng = Rng::new(seed);
            let f_s = random_map(&mut rng, h, 6, 3);
            let f_c = random_map(&mut rng, h, 6, 3);
            let n = ((h as f64) * n_frac).round() as usize;
            let mask = extract_head_mask(&f_s, &f_c, &cfg(n, 0.7)).unwrap();
            prop_assert_eq!(mask.count(), n);

            let ell = head_distances(&f_s, &f_c).unwrap();
            let mut pairs: Vec<(f64, usize)> = ell.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = pairs[..n].iter().map(|p| p.1).collect();
            want.sort_unstable();
            prop_assert_eq!(mask.selected_indices(), want);

            let s = |f: &FeatureMap| FeatureMap::new(h, 6, 3, f.as_slice().iter().map(|v| v * scale).collect()).unwrap();
            let rescaled = extract_head_mask(&s(&f_s), &s(&f_c), &cfg(n, 0.7)).unwrap();
            prop_assert_eq!(rescaled, mask);
        }

        #[test]
        fn spatial_mask_zeroes_positive_argmax(seed in any::<u64>(), alpha in 0.01f64..0.99) {
            let f_c = random_map(&mut Rng::new(seed), 3, 7, 4);
            let mask = extract_spatial_mask(&f_c, &cfg(0, alpha));
            for i in 0..3 {
                let head = f_c.head(i);
                for c in 0..4 {
                    let col = head.column(c);
                    let (arg, max) = col.iter().enumerate().fold((0, f64::MIN), |acc, (p, &v)| if v > acc.1 { (p, v) } else { acc });
                    for (p, &v) in col.iter().enumerate() {
                        prop_assert_eq!(mask.head_bits(i)[p * 4 + c], v <= alpha * max);
                    }
                    if max > 0.0 {
                        prop_assert!(!mask.head_bits(i)[arg * 4 + c]);
                    }
                }
            }
        }

        #[test]
        fn blend_is_exact_selection(seed in any::<u64>(), density in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let f_c = random_map(&mut rng, 2, 5, 3);
            let f_s = random_map(&mut rng, 2, 5, 3);
            let bits: Vec<bool> = (0..30).map(|_| rng.uniform() < density).collect();
            let mask = MaskBlock::new(2, 5, 3, bits).unwrap();
            let c = BlendConfig::default();
            let out = blend(&f_c, &f_s, &mask, &c).unwrap();
            for i in 0..2 {
                let styled = adain(&f_c.head(i), &f_s.head(i), c.eps).unwrap();
                for (k, &b) in mask.head_bits(i).iter().enumerate() {
                    let want = if b { styled.as_slice()[k] } else { f_c.head_slice(i)[k] };
                    prop_assert_eq!(out.head_slice(i)[k].to_bits(), want.to_bits());
                }
            }
        }

        #[test]
        fn adain_transfers_moments(seed in any::<u64>(), m in 2usize..30, shift in -5.0f64..5.0, spread in 0.01f64..5.0) {
            let mut rng = Rng::new(seed);
            let c = randn_matrix(&mut rng, m, 3).unwrap();
            let s = randn_matrix(&mut rng, m, 3).unwrap().scale(spread).unwrap();
            let s = s.add(&Matrix::filled(m, 3, shift)).unwrap();
            let out = adain(&c, &s, DEFAULT_EPS).unwrap();
            for ch in 0..3 {
                let (_, sd_c) = moments(c.column(ch).into_iter(), m);
                if sd_c <= 1e-3 {
                    continue;
                }
                let (mu_o, sd_o) = moments(out.column(ch).into_iter(), m);
                let (mu_s, sd_s) = moments(s.column(ch).into_iter(), m);
                prop_assert!((mu_o - mu_s).abs() < 1e-6);
                prop_assert!((sd_o - sd_s).abs() < 1e-4);
            }
        }
    }
}
