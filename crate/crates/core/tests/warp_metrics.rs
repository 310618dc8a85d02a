mod common;

use std::collections::BTreeSet;

use common::{random_labels, random_volume};
use tetranet::data::{LabelMap, Volume};
use tetranet::metrics::{dice, jacobian_nonpositive_fraction, mean_dice, MetricReport};
use tetranet::warp::{identity_grid, warp_labels, warp_volume, DeformationField};

fn shifted(dims: [usize; 3], axis: usize, amount: f64) -> DeformationField {
    DeformationField::from_fn(dims, |_| {
        let mut u = [0.0; 3];
        u[axis] = amount;
        u
    })
}

#[test]
fn zero_field_is_bit_exact_identity() {
    let m = random_volume([8, 9, 10], 1);
    let out = warp_volume(&m, &DeformationField::zeros(m.dims)).unwrap();
    assert_eq!(out.data, m.data);
    let l = random_labels([8, 9, 10], 3, 2);
    assert_eq!(warp_labels(&l, &DeformationField::zeros(l.dims)).unwrap(), l);
}

#[test]
fn linear_ramp_under_half_voxel_shift() {
    let dims = [8, 8, 8];
    for axis in 0..3 {
        let ramp = Volume::from_fn(dims, |p| p[axis] as f64);
        let out = warp_volume(&ramp, &shifted(dims, axis, 0.5)).unwrap();
        for (i, &v) in out.data.iter().enumerate() {
            let p = [i / 64, (i / 8) % 8, i % 8];
            if p[axis] < 7 {
                assert!((v - (p[axis] as f64 + 0.5)).abs() < 1e-12, "axis {axis} at {p:?}: {v}");
            } else {
                // Sampling past the last voxel clamps to the border value.
                assert!((v - 7.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_volume_is_invariant() {
    let dims = [8, 8, 8];
    let c = Volume::from_fn(dims, |_| 0.37);
    let mut k = 0.0;
    let field = DeformationField::from_fn(dims, |p| {
        k += 0.013;
        [(k * 3.1f64).sin() * 2.5, (p[0] as f64).cos() * 1.7, -k]
    });
    let out = warp_volume(&c, &field).unwrap();
    assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
}

#[test]
fn identity_grid_spans_the_volume() {
    let g = identity_grid([2, 3, 4]);
    assert_eq!(g.shape(), &[3, 2, 3, 4]);
    for (c, hi) in [1.0, 2.0, 3.0].iter().enumerate() {
        let comp = &g.data()[c * 24..(c + 1) * 24];
        assert_eq!(comp.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(comp.iter().copied().fold(f64::NEG_INFINITY, f64::max), *hi);
    }
    let g2 = identity_grid([2, 2, 2]);
    assert_eq!(&g2.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn integer_translation_matches_shift_oracle() {
    let dims = [6, 7, 5];
    let l = random_labels(dims, 4, 9);
    for axis in 0..3 {
        for amount in [-2i64, 1, 3] {
            let out = warp_labels(&l, &shifted(dims, axis, amount as f64)).unwrap();
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let mut src = [z as i64, y as i64, x as i64];
                        src[axis] = (src[axis] + amount).clamp(0, dims[axis] as i64 - 1);
                        let s = (src[0] as usize * dims[1] + src[1] as usize) * dims[2] + src[2] as usize;
                        let i = (z * dims[1] + y) * dims[2] + x;
                        assert_eq!(out.data[i], l.data[s]);
                    }
                }
            }
        }
    }
}

#[test]
fn warped_labels_stay_within_input_labels() {
    let dims = [8, 8, 8];
    let l = LabelMap::new(dims, (0..512).map(|i| [0, 2, 5][i % 3]).collect()).unwrap();
    let field = DeformationField::from_fn(dims, |p| [0.3 * p[2] as f64, -1.7, (p[0] as f64 * 0.9).sin() * 3.0]);
    let out = warp_labels(&l, &field).unwrap();
    let allowed: BTreeSet<u32> = l.labels().into_iter().collect();
    assert!(out.data.iter().all(|v| allowed.contains(v)));
}

#[test]
fn dice_matches_brute_force_counts() {
    let dims = [16, 16, 16];
    for seed in 0..5 {
        let x = random_labels(dims, 3, seed);
        let y = random_labels(dims, 3, seed + 100);
        let mut sum = 0.0;
        for label in 1..=3 {
            let mut a = 0u64;
            let mut b = 0u64;
            let mut both = 0u64;
            for i in 0..x.data.len() {
                a += (x.data[i] == label) as u64;
                b += (y.data[i] == label) as u64;
                both += (x.data[i] == label && y.data[i] == label) as u64;
            }
            let expected = (2 * both) as f64 / (a + b) as f64;
            assert_eq!(dice(&x, &y, label).unwrap(), expected);
            sum += expected;
        }
        assert_eq!(mean_dice(&x, &y).unwrap().mean, sum / 3.0);
    }
}

#[test]
fn dice_reference_values() {
    let dims = [4, 4, 4];
    let mut x = vec![0u32; 64];
    let mut y = vec![0u32; 64];
    x[..8].fill(1);
    y[4..12].fill(1);
    let (x, y) = (LabelMap::new(dims, x).unwrap(), LabelMap::new(dims, y).unwrap());
    assert_eq!(dice(&x, &y, 1).unwrap(), 0.5);
    assert_eq!(dice(&x, &x, 1).unwrap(), 1.0);
    let bg = LabelMap::new(dims, vec![0; 64]).unwrap();
    assert_eq!(mean_dice(&x, &bg).unwrap().mean, 0.0);
    assert!(mean_dice(&bg, &x).is_err());
}

#[test]
fn analytic_folding_field() {
    let dims = [6, 6, 6];
    let fold = DeformationField::from_fn(dims, |p| [-1.5 * p[0] as f64, 0.0, 0.0]);
    assert_eq!(jacobian_nonpositive_fraction(&fold, None).unwrap(), 1.0);
    for det in tetranet::metrics::jacobian_determinants(&fold) {
        assert!((det + 0.5).abs() < 1e-12);
    }
    assert_eq!(jacobian_nonpositive_fraction(&DeformationField::zeros(dims), None).unwrap(), 0.0);
}

#[test]
fn gentle_random_field_never_folds() {
    // With every partial derivative below 0.1 in magnitude, each row of
    // I + ∇u is strictly diagonally dominant, so the determinant is positive.
    let dims = [12, 12, 12];
    for seed in 0..5u64 {
        let s = seed as f64;
        let field = DeformationField::from_fn(dims, |p| {
            let [z, y, x] = p.map(|c| c as f64);
            [
                0.4 * ((0.2 * x + s).sin() + (0.15 * z).cos()),
                0.4 * (0.2 * y - s).cos(),
                0.4 * (0.2 * z + 0.1 * x).sin(),
            ]
        });
        assert_eq!(jacobian_nonpositive_fraction(&field, None).unwrap(), 0.0);
    }
}

#[test]
fn metric_report_csv_round_trip() {
    let x = random_labels([8, 8, 8], 3, 1);
    let y = random_labels([8, 8, 8], 3, 2);
    let field = DeformationField::from_fn([8, 8, 8], |p| [-1.5 * p[0] as f64, 0.0, 0.0]);
    let r = MetricReport::compute(&x, &y, &field).unwrap();
    assert_eq!(r.nonpositive_jacobian_fraction, 1.0);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(MetricReport::read_csv(&buf[..]).unwrap(), r);
}
