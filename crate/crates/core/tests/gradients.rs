mod common;

use common::random_tensor;
use tetranet::autograd::{CustomOp, Graph, Var};
use tetranet::gradcheck::{gradcheck, network_check, operator_suite, GradCheckConfig, NETWORK_STEP};
use tetranet::{Result, Tensor};

/// Elementwise cube with a configurable backward rule.
struct Cube {
    corrupt: bool,
}

impl CustomOp for Cube {
    fn name(&self) -> &str {
        "cube"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let k = if self.corrupt { 2.0 } else { 3.0 };
        let d = x.data().iter().zip(grad.data()).map(|(x, g)| k * x * x * g).collect();
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

fn cube_sum(corrupt: bool) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> {
    move |g: &mut Graph, v: &[Var]| {
        let x = g.value(v[0]).clone();
        let y = Tensor::new(x.shape().to_vec(), x.data().iter().map(|a| a * a * a).collect())?;
        let c = g.custom(&[v[0]], y, Box::new(Cube { corrupt }));
        Ok(g.sum(c))
    }
}

#[test]
fn every_operator_passes() {
    let reports = operator_suite(&GradCheckConfig::default()).unwrap();
    assert!(reports.len() >= 15);
    for r in &reports {
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn correct_custom_rule_passes() {
    let x = vec![("x".to_string(), random_tensor(&[2, 3, 4], 7, 1.0))];
    let r = gradcheck("cube", &x, cube_sum(false), &GradCheckConfig::default()).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let x = vec![("x".to_string(), random_tensor(&[2, 3, 4], 7, 1.0))];
    let r = gradcheck("cube", &x, cube_sum(true), &GradCheckConfig::default()).unwrap();
    assert!(!r.passed(), "{r}");
    assert!(r.max_rel_error() > 0.1);
}

#[test]
fn network_loss_passes_on_a_subsample() {
    let cfg = GradCheckConfig {
        step: NETWORK_STEP,
        tolerance: 1e-4,
        max_checks_per_input: Some(4),
        seed: 1,
        ..Default::default()
    };
    let r = network_check(8, &cfg).unwrap();
    assert!(r.passed(), "{r}");
    assert!(r.inputs.len() > 20);
}

#[test]
fn composite_conv_relu_mean_matches_differences() {
    let inputs = vec![
        ("x".to_string(), random_tensor(&[1, 2, 5, 5, 5], 1, 1.0)),
        ("w".to_string(), random_tensor(&[3, 2, 3, 3, 3], 2, 0.5)),
        ("b".to_string(), random_tensor(&[3], 3, 0.1)),
    ];
    let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
        let r = g.relu(y);
        Ok(g.mean(r))
    };
    let r = gradcheck("conv relu mean", &inputs, build, &GradCheckConfig::default()).unwrap();
    assert!(r.passed(), "{r}");
}
