//! Parameter registry and the convolutional building blocks.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extra factor applied to the field head's initial weights so an
/// untrained network predicts a near-identity warp.
pub const FIELD_HEAD_INIT_SCALE: f64 = 1e-3;

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bindings {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Anything that owns parameters in a [`ParamStore`].
pub trait Module {
    /// Names of the parameters this module registered.
    fn param_names(&self) -> Vec<String>;

    /// Draws fresh initial values for this module's parameters.
    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()>;
}

/// Re-initializes one module from a seed.
pub fn init_params(module: &dyn Module, store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.init(store, &mut rng)
}

fn fill_uniform(store: &mut ParamStore, name: &str, bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let t = store
        .get_mut(name)
        .ok_or_else(|| Error::config(format!("parameter `{name}` missing from store")))?;
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    Ok(())
}

fn fill_zero(store: &mut ParamStore, name: &str) -> Result<()> {
    let t = store
        .get_mut(name)
        .ok_or_else(|| Error::config(format!("parameter `{name}` missing from store")))?;
    t.data_mut().fill(0.0);
    Ok(())
}

/// How a layer's initial weight range is chosen from its fan-in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitGain {
    /// Followed by ReLU: uniform in ±√(6 / fan_in).
    Relu,
    /// No activation: uniform in ±√(3 / fan_in), times the extra factor.
    Linear(f64),
}

impl InitGain {
    fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitGain::Relu => (6.0 / fan_in as f64).sqrt(),
            InitGain::Linear(s) => s * (3.0 / fan_in as f64).sqrt(),
        }
    }
}

/// One zero-padded, stride-1 cubic convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub gain: InitGain,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: InitGain,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel % 2 == 0 {
            return Err(Error::config(format!(
                "{prefix}: invalid conv {in_channels}->{out_channels} with kernel {kernel}"
            )));
        }
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.register(&weight, Tensor::zeros(&[out_channels, in_channels, kernel, kernel, kernel]))?;
        store.register(&bias, Tensor::zeros(&[out_channels]))?;
        Ok(Conv {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            gain,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let (w, b) = (p.get(&self.weight)?, p.get(&self.bias)?);
        g.conv3d(x, w, Some(b), 1, self.kernel / 2)
    }
}

impl Module for Conv {
    fn param_names(&self) -> Vec<String> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = self.in_channels * self.kernel.pow(3);
        fill_uniform(store, &self.weight, self.gain.bound(fan_in), rng)?;
        fill_zero(store, &self.bias)
    }
}

/// Two 3×3×3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(ConvBlock {
            conv1: Conv::new(store, &format!("{prefix}.conv1"), in_channels, out_channels, 3, InitGain::Relu)?,
            conv2: Conv::new(store, &format!("{prefix}.conv2"), out_channels, out_channels, 3, InitGain::Relu)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        Ok(g.relu(h))
    }
}

impl Module for ConvBlock {
    fn param_names(&self) -> Vec<String> {
        let mut v = self.conv1.param_names();
        v.extend(self.conv2.param_names());
        v
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.conv2.init(store, rng)
    }
}

/// Learned upsampling: transposed convolution with kernel = stride = `factor`.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
}

impl UpBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        factor: usize,
    ) -> Result<Self> {
        if factor < 2 {
            return Err(Error::config(format!("{prefix}: upsampling factor must be >= 2")));
        }
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.register(&weight, Tensor::zeros(&[in_channels, out_channels, factor, factor, factor]))?;
        store.register(&bias, Tensor::zeros(&[out_channels]))?;
        Ok(UpBlock {
            weight,
            bias,
            in_channels,
            out_channels,
            factor,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let (w, b) = (p.get(&self.weight)?, p.get(&self.bias)?);
        g.conv_transpose3d(x, w, Some(b), self.factor)
    }
}

impl Module for UpBlock {
    fn param_names(&self) -> Vec<String> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        // Kernel and stride coincide, so each output voxel sees `in_channels` inputs.
        fill_uniform(store, &self.weight, InitGain::Linear(1.0).bound(self.in_channels), rng)?;
        fill_zero(store, &self.bias)
    }
}

/// Densely connected conv-ReLU layers: layer `i` sees the block input and
/// the outputs of layers `0..i`, and the block returns all of them
/// concatenated.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<Conv>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        growth: usize,
        n_layers: usize,
    ) -> Result<Self> {
        if growth == 0 || n_layers == 0 {
            return Err(Error::config(format!("{prefix}: dense block needs growth and layers >= 1")));
        }
        let layers = (0..n_layers)
            .map(|i| {
                Conv::new(
                    store,
                    &format!("{prefix}.layer{i}"),
                    in_channels + i * growth,
                    growth,
                    3,
                    InitGain::Relu,
                )
            })
            .collect::<Result<_>>()?;
        Ok(DenseBlock {
            layers,
            in_channels,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                x
            } else {
                g.concat(&features)?
            };
            let h = layer.forward(g, p, input)?;
            features.push(g.relu(h));
        }
        g.concat(&features)
    }
}

impl Module for DenseBlock {
    fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(Module::param_names).collect()
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }
}

/// Maps decoder features to the 3-channel displacement field; no activation.
#[derive(Clone, Debug)]
pub struct FieldHead {
    pub conv: Conv,
}

impl FieldHead {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize) -> Result<Self> {
        Ok(FieldHead {
            conv: Conv::new(
                store,
                prefix,
                in_channels,
                3,
                3,
                InitGain::Linear(FIELD_HEAD_INIT_SCALE),
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        self.conv.forward(g, p, x)
    }
}

impl Module for FieldHead {
    fn param_names(&self) -> Vec<String> {
        self.conv.param_names()
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv.init(store, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(store: &ParamStore, x: Tensor, f: impl Fn(&mut Graph, &Bindings, Var) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = f(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn conv_block_shape_contract() {
        let mut store = ParamStore::new();
        let b = ConvBlock::new(&mut store, "b", 2, 16).unwrap();
        init_params(&b, &mut store, 1).unwrap();
        let y = run(&store, Tensor::full(&[1, 2, 16, 16, 16], 0.5), |g, p, x| b.forward(g, p, x)).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 16, 16]);
    }

    #[test]
    fn up_block_doubles_extent() {
        let mut store = ParamStore::new();
        let u = UpBlock::new(&mut store, "u", 4, 6, 2).unwrap();
        init_params(&u, &mut store, 1).unwrap();
        let y = run(&store, Tensor::full(&[1, 4, 4, 4, 4], 1.0), |g, p, x| u.forward(g, p, x)).unwrap();
        assert_eq!(y.shape(), &[1, 6, 8, 8, 8]);
    }

    #[test]
    fn dense_block_channel_bookkeeping() {
        let mut store = ParamStore::new();
        let d = DenseBlock::new(&mut store, "d", 8, 4, 3).unwrap();
        assert_eq!(d.out_channels(), 8 + 3 * 4);
        init_params(&d, &mut store, 2).unwrap();
        let y = run(&store, Tensor::full(&[1, 8, 4, 4, 4], 0.1), |g, p, x| d.forward(g, p, x)).unwrap();
        assert_eq!(y.shape(), &[1, 20, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let b = ConvBlock::new(&mut store, "b", 3, 4).unwrap();
        let err = run(&store, Tensor::zeros(&[1, 2, 4, 4, 4]), |g, p, x| b.forward(g, p, x)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut a = ParamStore::new();
        let block = ConvBlock::new(&mut a, "b", 2, 4).unwrap();
        let mut b = a.clone();
        init_params(&block, &mut a, 7).unwrap();
        init_params(&block, &mut b, 7).unwrap();
        assert_eq!(a, b);
        init_params(&block, &mut b, 8).unwrap();
        assert_ne!(a, b);
        assert!(a.get("b.conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_head_starts_near_identity() {
        // Empirical bound over 100 seeds on random non-negative features.
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut store = ParamStore::new();
            let head = FieldHead::new(&mut store, "head", 16).unwrap();
            init_params(&head, &mut store, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = Tensor::from_fn(&[1, 16, 6, 6, 6], |_| rng.random_range(0.0..1.0));
            let y = run(&store, x, |g, p, x| head.forward(g, p, x)).unwrap();
            assert_eq!(y.shape()[1], 3);
            worst = worst.max(y.max_abs());
        }
        assert!(worst < 0.1, "max displacement {worst}");
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = ParamStore::new();
        Conv::new(&mut store, "c", 1, 1, 3, InitGain::Relu).unwrap();
        assert!(Conv::new(&mut store, "c", 1, 1, 3, InitGain::Relu).is_err());
    }
}
