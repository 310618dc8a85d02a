//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_checks_per_input: Option<usize>,
    pub seed: u64,
    /// Lower bound on the gradient scale used to normalize errors.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
            max_checks_per_input: None,
            seed: 0,
            scale_floor: 1e-10,
        }
    }
}

/// Result for one checked input tensor.
///
/// `max_rel_error` is the largest absolute disagreement between analytic
/// and numeric derivative, divided by the largest gradient magnitude of the
/// tensor (never below `scale_floor`).
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub scale: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub label: String,
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, c| m.max(c.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.label,
            self.max_rel_error(),
            self.tolerance
        )
    }
}

fn evaluate<F>(inputs: &[(String, Tensor)], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    Ok(g.value(root).item())
}

/// Compares the gradients of the scalar built by `build` against central
/// differences, input by input.
pub fn gradcheck<F>(
    label: &str,
    inputs: &[(String, Tensor)],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<(String, Tensor)> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let indices: Vec<usize> = match cfg.max_checks_per_input {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut max_abs: f64 = 0.0;
        let mut num_scale: f64 = 0.0;
        for &j in &indices {
            let orig = t.data()[j];
            work[i].1.data_mut()[j] = orig + cfg.step;
            let plus = evaluate(&work, &build)?;
            work[i].1.data_mut()[j] = orig - cfg.step;
            let minus = evaluate(&work, &build)?;
            work[i].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            num_scale = num_scale.max(numeric.abs());
            max_abs = max_abs.max((numeric - analytic[i].data()[j]).abs());
        }
        let scale = analytic[i].max_abs().max(num_scale).max(cfg.scale_floor);
        checks.push(InputCheck {
            name: name.clone(),
            checked: indices.len(),
            max_abs_error: max_abs,
            scale,
            max_rel_error: max_abs / scale,
        });
    }
    Ok(GradReport {
        label: label.to_string(),
        tolerance: cfg.tolerance,
        inputs: checks,
    })
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element carries a
/// distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(g.value(y).shape(), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Checks every differentiable operator on small random inputs.
pub fn operator_suite(cfg: &GradCheckConfig) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(shape, lo, hi, &mut rng);
    let named = |v: Vec<(&str, Tensor)>| -> Vec<(String, Tensor)> {
        v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };
    let mut cases: Vec<(&str, Vec<(String, Tensor)>, Builder)> = Vec::new();

    cases.push((
        "conv3d",
        named(vec![
            ("x", r(&[1, 2, 5, 5, 5], -1.0, 1.0)),
            ("w", r(&[3, 2, 3, 3, 3], -1.0, 1.0)),
            ("b", r(&[3], -1.0, 1.0)),
        ]),
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, 1)
        }),
    ));
    cases.push((
        "conv3d stride 2",
        named(vec![
            ("x", r(&[1, 2, 6, 6, 6], -1.0, 1.0)),
            ("w", r(&[2, 2, 3, 3, 3], -1.0, 1.0)),
        ]),
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], None, 2, 1)?;
            project(g, y, 2)
        }),
    ));
    cases.push((
        "conv_transpose3d",
        named(vec![
            ("x", r(&[1, 3, 3, 3, 3], -1.0, 1.0)),
            ("w", r(&[3, 2, 2, 2, 2], -1.0, 1.0)),
            ("b", r(&[2], -1.0, 1.0)),
        ]),
        Box::new(|g, v| {
            let y = g.conv_transpose3d(v[0], v[1], Some(v[2]), 2)?;
            project(g, y, 3)
        }),
    ));
    cases.push((
        "maxpool3d",
        named(vec![("x", r(&[1, 2, 4, 4, 4], -1.0, 1.0))]),
        Box::new(|g, v| {
            let y = g.maxpool3d(v[0], 2, 2)?;
            project(g, y, 4)
        }),
    ));
    cases.push((
        "relu",
        named(vec![("x", r(&[1, 2, 3, 3, 3], -1.0, 1.0))]),
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 5)
        }),
    ));
    cases.push((
        "concat",
        named(vec![("a", r(&[1, 2, 3, 3, 3], -1.0, 1.0)), ("b", r(&[1, 3, 3, 3, 3], -1.0, 1.0))]),
        Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            project(g, y, 6)
        }),
    ));
    let pair = |r: &mut dyn FnMut(&[usize], f64, f64) -> Tensor, lo: f64| {
        named(vec![("a", r(&[2, 3, 4], -1.0, 1.0)), ("b", r(&[2, 3, 4], lo, lo + 1.0))])
    };
    cases.push((
        "add",
        pair(&mut r, -1.0),
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 7)
        }),
    ));
    cases.push((
        "sub",
        pair(&mut r, -1.0),
        Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 8)
        }),
    ));
    cases.push((
        "mul",
        pair(&mut r, -1.0),
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 9)
        }),
    ));
    cases.push((
        "div",
        pair(&mut r, 1.0),
        Box::new(|g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 10)
        }),
    ));
    cases.push((
        "scale + add_scalar",
        named(vec![("x", r(&[2, 3, 4], -1.0, 1.0))]),
        Box::new(|g, v| {
            let y = g.scale(v[0], -2.5);
            let y = g.add_scalar(y, 0.75);
            project(g, y, 11)
        }),
    ));
    cases.push((
        "sum + mean",
        named(vec![("x", r(&[2, 3, 4], -1.0, 1.0))]),
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean(sq);
            let s = g.sum(v[0]);
            let s = g.scale(s, 0.3);
            g.add(m, s)
        }),
    ));
    cases.push((
        "box_sum",
        named(vec![("x", r(&[1, 2, 5, 4, 6], -1.0, 1.0))]),
        Box::new(|g, v| {
            let y = g.box_sum(v[0], 3)?;
            project(g, y, 12)
        }),
    ));
    cases.push((
        "diff",
        named(vec![("x", r(&[1, 3, 4, 5, 3], -1.0, 1.0))]),
        Box::new(|g, v| {
            let mut acc: Option<Var> = None;
            for axis in 2..5 {
                let d = g.diff(v[0], axis)?;
                let p = project(g, d, 13 + axis as u64)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, p)?,
                    None => p,
                });
            }
            Ok(acc.expect("three axes"))
        }),
    ));
    cases.push((
        "warp",
        named(vec![
            ("image", r(&[1, 2, 5, 5, 5], 0.0, 1.0)),
            ("field", r(&[1, 3, 5, 5, 5], -1.3, 1.3)),
        ]),
        Box::new(|g, v| {
            let y = g.warp(v[0], v[1])?;
            project(g, y, 20)
        }),
    ));
    cases.push((
        "conv -> relu -> mean",
        named(vec![
            ("x", r(&[1, 2, 4, 4, 4], -1.0, 1.0)),
            ("w", r(&[3, 2, 3, 3, 3], -0.5, 0.5)),
            ("b", r(&[3], -0.1, 0.1)),
        ]),
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
            let y = g.relu(y);
            Ok(g.mean(y))
        }),
    ));
    let loss_cfg = crate::losses::LossConfig {
        ncc_window: 3,
        ..Default::default()
    };
    let lc = loss_cfg.clone();
    cases.push((
        "ncc loss",
        named(vec![("fixed", r(&[1, 1, 5, 5, 5], 0.0, 1.0)), ("warped", r(&[1, 1, 5, 5, 5], 0.0, 1.0))]),
        Box::new(move |g, v| crate::losses::ncc_loss(g, v[0], v[1], &lc)),
    ));
    cases.push((
        "smooth loss",
        named(vec![("field", r(&[1, 3, 4, 5, 3], -1.0, 1.0))]),
        Box::new(|g, v| crate::losses::smooth_loss(g, v[0])),
    ));
    let lc = loss_cfg;
    cases.push((
        "total loss",
        named(vec![
            ("fixed", r(&[1, 1, 5, 5, 5], 0.0, 1.0)),
            ("moving", r(&[1, 1, 5, 5, 5], 0.0, 1.0)),
            ("field", r(&[1, 3, 5, 5, 5], -1.3, 1.3)),
        ]),
        Box::new(move |g, v| crate::losses::total_loss(g, v[0], v[1], v[2], &lc)),
    ));

    cases
        .into_iter()
        .map(|(label, inputs, build)| gradcheck(label, &inputs, build, cfg))
        .collect()
}

/// Finite-difference step for [`network_check`]. The loss has kinks from
/// ReLU, max pooling and trilinear cell boundaries; a small step keeps the
/// central difference inside one smooth piece.
pub const NETWORK_STEP: f64 = 1e-6;

/// Checks the full registration loss of a small two-level network at
/// `scale³` against finite differences in its parameters.
pub fn network_check(scale: usize, cfg: &GradCheckConfig) -> Result<GradReport> {
    use crate::arch::{build_model, ModelConfig};
    use crate::losses::{total_loss, LossConfig};
    use crate::nn::Bindings;

    let model_cfg = ModelConfig {
        decoder_levels: 2,
        ..ModelConfig::with_widths(&[3, 4])
    };
    model_cfg.check_input_dims([scale; 3])?;
    let mut model = build_model(&model_cfg, cfg.seed)?;
    // Trilinear sampling has kinks at integer offsets, where the near-zero
    // initial field sits. Shift it to fractional offsets and let it vary.
    {
        let params = model.params_mut();
        if let Some(b) = params.get_mut("head.bias") {
            b.data_mut().copy_from_slice(&[0.3, -0.35, 0.4]);
        }
        if let Some(w) = params.get_mut("head.weight") {
            w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(99));
    let shape = [1, 1, scale, scale, scale];
    let fixed = random_tensor(&shape, 0.0, 1.0, &mut rng);
    let moving = random_tensor(&shape, 0.0, 1.0, &mut rng);
    let input = crate::tensor::kernels::concat_channels(&[&fixed, &moving])?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let inputs: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let loss_cfg = LossConfig::default();
    gradcheck(
        &format!("network loss {scale}^3"),
        &inputs,
        |g, vars| {
            let p = Bindings::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let x = g.constant(input.clone());
            let f = g.constant(fixed.clone());
            let m = g.constant(moving.clone());
            let field = model.forward_graph(g, &p, x)?;
            total_loss(g, f, m, field, &loss_cfg)
        },
        cfg,
    )
}
