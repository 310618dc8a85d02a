//! Registration objective: local normalized cross-correlation plus a
//! first-order smoothness penalty on the displacement field.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the smoothness term.
    pub lambda_smooth: f64,
    /// Side of the cubic correlation window (odd).
    pub ncc_window: usize,
    /// Added to the NCC denominator.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_smooth: 1.0,
            ncc_window: 9,
            epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window % 2 == 0 {
            return Err(Error::config(format!(
                "field `ncc_window` must be odd, got {}",
                self.ncc_window
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("field `ncc_epsilon` must be positive"));
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::config("field `lambda_smooth` must be non-negative"));
        }
        Ok(())
    }
}

/// Negated mean of the squared local correlation between `fixed` and
/// `warped` (both `[N, C, D, H, W]`).
///
/// For each voxel, with sums over its window restricted to the volume and
/// `n` the number of in-bounds voxels:
///
/// ```text
/// cross = Σ IJ − Σ I · Σ J / n
/// var_I = Σ I² − (Σ I)² / n
/// cc    = cross² / (var_I · var_J + ε)
/// ```
///
/// Windows with no variance contribute 0. The result lies in `[−1, 0]`.
pub fn ncc_loss(g: &mut Graph, fixed: Var, warped: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let fs = g.value(fixed).shape().to_vec();
    if fs != g.value(warped).shape() {
        return Err(Error::input(format!(
            "fixed shape {fs:?} differs from warped shape {:?}",
            g.value(warped).shape()
        )));
    }
    let [n, c, d, h, w] = g.value(fixed).dims5()?;
    let counts = kernels::box_counts([d, h, w], cfg.ncc_window);
    let inv: Vec<f64> = (0..n * c).flat_map(|_| counts.iter().map(|k| 1.0 / k)).collect();
    let inv_n = g.constant(Tensor::new(fs, inv)?);

    let win = cfg.ncc_window;
    let i2 = g.mul(fixed, fixed)?;
    let j2 = g.mul(warped, warped)?;
    let ij = g.mul(fixed, warped)?;
    let i_sum = g.box_sum(fixed, win)?;
    let j_sum = g.box_sum(warped, win)?;
    let i2_sum = g.box_sum(i2, win)?;
    let j2_sum = g.box_sum(j2, win)?;
    let ij_sum = g.box_sum(ij, win)?;

    let centered = |g: &mut Graph, second: Var, a: Var, b: Var| -> Result<Var> {
        let ab = g.mul(a, b)?;
        let ab_n = g.mul(ab, inv_n)?;
        g.sub(second, ab_n)
    };
    let cross = centered(g, ij_sum, i_sum, j_sum)?;
    let i_var = centered(g, i2_sum, i_sum, i_sum)?;
    let j_var = centered(g, j2_sum, j_sum, j_sum)?;

    let num = g.mul(cross, cross)?;
    let den = g.mul(i_var, j_var)?;
    let den = g.add_scalar(den, cfg.epsilon);
    let cc = g.div(num, den)?;
    let m = g.mean(cc);
    Ok(g.scale(m, -1.0))
}

/// Sum over the three spatial axes of the squared forward differences of
/// `field` (`[N, 3, D, H, W]`), each averaged over batch and difference
/// positions and summed over the components.
pub fn smooth_loss(g: &mut Graph, field: Var) -> Result<Var> {
    let dims = g.value(field).dims5()?;
    let mut total: Option<Var> = None;
    for axis in 2..5 {
        if dims[axis] < 2 {
            continue;
        }
        let d = g.diff(field, axis)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        let positions: usize = dims[0] * g.value(d).shape()[2..].iter().product::<usize>();
        let term = g.scale(s, 1.0 / positions as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// `ncc_loss(fixed, warp(moving, field)) + λ · smooth_loss(field)`.
pub fn total_loss(g: &mut Graph, fixed: Var, moving: Var, field: Var, cfg: &LossConfig) -> Result<Var> {
    let warped = g.warp(moving, field)?;
    let sim = ncc_loss(g, fixed, warped, cfg)?;
    if cfg.lambda_smooth == 0.0 {
        return Ok(sim);
    }
    let reg = smooth_loss(g, field)?;
    let reg = g.scale(reg, cfg.lambda_smooth);
    g.add(sim, reg)
}

/// Evaluates [`ncc_loss`] on plain tensors.
pub fn ncc_value(fixed: &Tensor, warped: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fixed.clone());
    let w = g.constant(warped.clone());
    let l = ncc_loss(&mut g, f, w, cfg)?;
    Ok(g.value(l).item())
}

/// Evaluates [`smooth_loss`] on a plain tensor.
pub fn smooth_value(field: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(field.clone());
    let l = smooth_loss(&mut g, f)?;
    Ok(g.value(l).item())
}

/// Evaluates [`total_loss`] on plain tensors.
pub fn total_value(fixed: &Tensor, moving: &Tensor, field: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fixed.clone());
    let m = g.constant(moving.clone());
    let u = g.constant(field.clone());
    let l = total_loss(&mut g, f, m, u, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| scale * rng.random::<f64>())
    }

    #[test]
    fn perfect_correlation() {
        let f = random(&[1, 1, 8, 8, 8], 1, 10.0);
        let l = ncc_value(&f, &f, &LossConfig::default()).unwrap();
        assert!((l + 1.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn constant_windows_do_not_produce_nan() {
        let f = Tensor::full(&[1, 1, 6, 6, 6], 0.3);
        let l = ncc_value(&f, &f, &LossConfig::default()).unwrap();
        assert!(l.abs() < 1e-20, "{l}");
    }

    #[test]
    fn unit_slope_field_has_unit_smoothness() {
        let dims = [1, 3, 5, 4, 6];
        let v = 5 * 4 * 6;
        let f = Tensor::from_fn(&dims, |i| if i < v { (i / 24) as f64 } else { 0.0 });
        assert!((smooth_value(&f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_pure_similarity() {
        let f = random(&[1, 1, 8, 8, 8], 2, 1.0);
        let m = random(&[1, 1, 8, 8, 8], 3, 1.0);
        let u = random(&[1, 3, 8, 8, 8], 4, 0.5);
        let cfg = LossConfig {
            lambda_smooth: 0.0,
            ..Default::default()
        };
        let warped = kernels::warp(&m, &u).unwrap();
        assert_eq!(total_value(&f, &m, &u, &cfg).unwrap(), ncc_value(&f, &warped, &cfg).unwrap());
    }

    #[test]
    fn even_window_rejected() {
        let f = Tensor::zeros(&[1, 1, 4, 4, 4]);
        let cfg = LossConfig {
            ncc_window: 4,
            ..Default::default()
        };
        assert!(ncc_value(&f, &f, &cfg).is_err());
    }
}
