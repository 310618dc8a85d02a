//! Applying displacement fields to volumes and label maps.
//!
//! A field `u` stores, per voxel `p`, a displacement in voxel units along
//! d, h, w. Warping samples the moving image at `p + u(p)`; samples beyond
//! the volume clamp to the border.

use crate::data::{voxels, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Per-voxel displacement, stored channel-major as `[3, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl DeformationField {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::input(format!("field dims {dims:?} must be positive")));
        }
        if data.len() != 3 * voxels(dims) {
            return Err(Error::input(format!(
                "field dims {dims:?} need {} values, got {}",
                3 * voxels(dims),
                data.len()
            )));
        }
        Ok(DeformationField { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        DeformationField::new(dims, vec![0.0; 3 * voxels(dims)]).expect("positive dims")
    }

    /// Field whose displacement at voxel `p` is `f(p)`.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let v = voxels(dims);
        let [_, h, w] = dims;
        let mut data = vec![0.0; 3 * v];
        for i in 0..v {
            let u = f([i / (h * w), (i / w) % h, i % w]);
            for c in 0..3 {
                data[c * v + i] = u[c];
            }
        }
        DeformationField { dims, data }
    }

    /// Component `c` as a `[D, H, W]` slice.
    pub fn component(&self, c: usize) -> &[f64] {
        let v = voxels(self.dims);
        &self.data[c * v..(c + 1) * v]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `[1, 3, D, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 3, d, h, w], self.data.clone()).expect("field tensor shape")
    }

    /// Accepts `[1, 3, D, H, W]` or `[3, D, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = match *t.shape() {
            [1, 3, d, h, w] | [3, d, h, w] => [d, h, w],
            _ => {
                return Err(Error::input(format!(
                    "expected a [1, 3, D, H, W] field tensor, got {:?}",
                    t.shape()
                )))
            }
        };
        DeformationField::new(dims, t.data().to_vec())
    }
}

/// Coordinate grid `[3, D, H, W]` with `grid[c][p]` the coordinate of `p`
/// along axis `c`.
pub fn identity_grid(dims: [usize; 3]) -> Tensor {
    let [d, h, w] = dims;
    let v = voxels(dims);
    Tensor::from_fn(&[3, d, h, w], |i| {
        let (c, p) = (i / v, i % v);
        [p / (h * w), (p / w) % h, p % w][c] as f64
    })
}

/// Trilinear warp `moving ∘ (id + u)`.
pub fn warp_volume(moving: &Volume, field: &DeformationField) -> Result<Volume> {
    if moving.dims != field.dims {
        return Err(Error::input(format!(
            "volume dims {:?} differ from field dims {:?}",
            moving.dims, field.dims
        )));
    }
    let out = kernels::warp(&moving.to_tensor(), &field.to_tensor())?;
    let mut v = Volume::from_tensor(&out)?;
    v.spacing = moving.spacing;
    Ok(v)
}

/// Nearest-neighbour warp of categorical labels.
pub fn warp_labels(labels: &LabelMap, field: &DeformationField) -> Result<LabelMap> {
    if labels.dims != field.dims {
        return Err(Error::input(format!(
            "label dims {:?} differ from field dims {:?}",
            labels.dims, field.dims
        )));
    }
    LabelMap::new(labels.dims, kernels::warp_nearest(&labels.data, labels.dims, &field.data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_coordinates() {
        let g = identity_grid([2, 2, 2]);
        assert_eq!(&g.data()[..8], &[0., 0., 0., 0., 1., 1., 1., 1.]);
        assert_eq!(&g.data()[16..], &[0., 1., 0., 1., 0., 1., 0., 1.]);
        let g = identity_grid([3, 4, 5]);
        assert_eq!(g.data().iter().cloned().fold(0.0, f64::max), 4.0);
    }

    #[test]
    fn dims_mismatch_is_input_error() {
        let v = Volume::zeros([4, 4, 4]);
        let f = DeformationField::zeros([4, 4, 5]);
        assert!(matches!(warp_volume(&v, &f), Err(Error::Input(_))));
    }

    #[test]
    fn labels_shift_by_one_voxel() {
        let dims = [4, 3, 3];
        let labels = LabelMap::new(dims, (0..36).map(|i| (i / 9) as u32).collect()).unwrap();
        let f = DeformationField::from_fn(dims, |_| [1.0, 0.0, 0.0]);
        let out = warp_labels(&labels, &f).unwrap();
        for i in 0..36 {
            let z = i / 9;
            assert_eq!(out.data[i], (z + 1).min(3) as u32);
        }
    }
}
