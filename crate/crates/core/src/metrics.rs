//! Label overlap and deformation regularity.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::data::{voxels, LabelMap};
use crate::error::{Error, Result};
use crate::warp::DeformationField;

fn check_dims(x: &LabelMap, y: &LabelMap) -> Result<()> {
    if x.dims != y.dims {
        return Err(Error::input(format!(
            "label dims {:?} differ from {:?}",
            x.dims, y.dims
        )));
    }
    Ok(())
}

/// Dice overlap `2|X ∩ Y| / (|X| + |Y|)` of the voxels carrying `label`;
/// 1 when neither map contains it.
pub fn dice(x: &LabelMap, y: &LabelMap, label: u32) -> Result<f64> {
    check_dims(x, y)?;
    let (mut nx, mut ny, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (ia, ib) = (a == label, b == label);
        nx += ia as usize;
        ny += ib as usize;
        both += (ia && ib) as usize;
    }
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (nx + ny) as f64)
}

/// Per-label Dice over the non-background labels of `fixed`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub per_label: BTreeMap<u32, f64>,
    pub mean: f64,
}

/// Averages [`dice`] over every non-zero label present in `fixed`.
pub fn mean_dice(fixed: &LabelMap, other: &LabelMap) -> Result<DiceReport> {
    check_dims(fixed, other)?;
    let labels: Vec<u32> = fixed.labels().into_iter().filter(|&l| l != 0).collect();
    if labels.is_empty() {
        return Err(Error::input("fixed label map has no non-background labels"));
    }
    let mut per_label = BTreeMap::new();
    for &l in &labels {
        per_label.insert(l, dice(fixed, other, l)?);
    }
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport { per_label, mean })
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `det(I + ∇u)` at every voxel: central differences inside, one-sided
/// differences on the faces, zero derivative along unit-length axes.
pub fn jacobian_determinants(field: &DeformationField) -> Vec<f64> {
    let dims = field.dims;
    let [d, h, w] = dims;
    let v = voxels(dims);
    let strides = [h * w, w, 1];
    let mut out = Vec::with_capacity(v);
    for p in 0..v {
        let q = [p / (h * w), (p / w) % h, p % w];
        let mut j = [[0.0; 3]; 3];
        for (b, &len) in [d, h, w].iter().enumerate() {
            let s = strides[b];
            let (lo, hi, span) = if len < 2 {
                (p, p, 1.0)
            } else if q[b] == 0 {
                (p, p + s, 1.0)
            } else if q[b] == len - 1 {
                (p - s, p, 1.0)
            } else {
                (p - s, p + s, 2.0)
            };
            for (a, row) in j.iter_mut().enumerate() {
                let u = field.component(a);
                row[b] = (u[hi] - u[lo]) / span;
            }
        }
        for (a, row) in j.iter_mut().enumerate() {
            row[a] += 1.0;
        }
        out.push(det3(j));
    }
    out
}

/// Fraction of voxels (within `mask` when given) whose Jacobian determinant
/// is ≤ 0.
pub fn jacobian_nonpositive_fraction(field: &DeformationField, mask: Option<&[bool]>) -> Result<f64> {
    let dets = jacobian_determinants(field);
    if let Some(m) = mask {
        if m.len() != dets.len() {
            return Err(Error::input(format!(
                "mask has {} voxels, field has {}",
                m.len(),
                dets.len()
            )));
        }
    }
    let (mut total, mut folded) = (0usize, 0usize);
    for (i, &det) in dets.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        total += 1;
        folded += (det <= 0.0) as usize;
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(folded as f64 / total as f64)
}

/// Evaluation summary of one registration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_label: BTreeMap<u32, f64>,
    pub mean_dice: f64,
    pub nonpositive_jacobian_fraction: f64,
}

impl MetricReport {
    pub fn compute(fixed: &LabelMap, warped: &LabelMap, field: &DeformationField) -> Result<Self> {
        if field.dims != fixed.dims {
            return Err(Error::input(format!(
                "field dims {:?} differ from label dims {:?}",
                field.dims, fixed.dims
            )));
        }
        let d = mean_dice(fixed, warped)?;
        Ok(MetricReport {
            per_label: d.per_label,
            mean_dice: d.mean,
            nonpositive_jacobian_fraction: jacobian_nonpositive_fraction(field, None)?,
        })
    }

    /// One header row and one value row: `mean_dice,jac_fraction,dice_<label>...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let to_err = |e: csv::Error| Error::input(format!("writing metrics CSV: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["mean_dice".to_string(), "jac_fraction".to_string()];
        header.extend(self.per_label.keys().map(|l| format!("dice_{l}")));
        w.write_record(&header).map_err(to_err)?;
        let mut row = vec![self.mean_dice.to_string(), self.nonpositive_jacobian_fraction.to_string()];
        row.extend(self.per_label.values().map(f64::to_string));
        w.write_record(&row).map_err(to_err)?;
        w.flush().map_err(|e| Error::input(format!("writing metrics CSV: {e}")))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let bad = |m: String| Error::input(format!("metrics CSV: {m}"));
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let row = r
            .records()
            .next()
            .ok_or_else(|| bad("no data row".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| bad(format!("missing column {i}")))?
                .parse()
                .map_err(|_| bad(format!("column `{}` is not a number", &header[i])))
        };
        if header.get(0) != Some("mean_dice") || header.get(1) != Some("jac_fraction") {
            return Err(bad("expected columns `mean_dice,jac_fraction,...`".into()));
        }
        let mut per_label = BTreeMap::new();
        for i in 2..header.len() {
            let l: u32 = header[i]
                .strip_prefix("dice_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("unexpected column `{}`", &header[i])))?;
            per_label.insert(l, num(i)?);
        }
        Ok(MetricReport {
            per_label,
            mean_dice: num(0)?,
            nonpositive_jacobian_fraction: num(1)?,
        })
    }
}
