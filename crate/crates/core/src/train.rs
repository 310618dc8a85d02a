//! Adam training, checkpoints, two-stage pretraining and ablation runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::arch::{build_model, Dec2Variant, ModelConfig, TetrahedronNet, MODEL_KEYS};
use crate::autograd::Graph;
use crate::data::{pair_seed, Dataset, RegistrationPair};
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{jacobian_nonpositive_fraction, mean_dice};
use crate::nn::ParamStore;
use crate::tensor::{kernels, Tensor};
use crate::warp::{warp_labels, DeformationField};

pub const TRAIN_KEYS: [&str; 12] = [
    "lr",
    "beta1",
    "beta2",
    "eps",
    "epochs",
    "batch_size",
    "lambda_smooth",
    "ncc_window",
    "ncc_epsilon",
    "seed",
    "pretrain_epochs",
    "val_every",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Only 1 is supported.
    pub batch_size: usize,
    pub lambda_smooth: f64,
    pub ncc_window: usize,
    pub ncc_epsilon: f64,
    /// Seeds parameter initialization and the per-epoch shuffle.
    pub seed: u64,
    /// Stage-1 length of two-stage training; `None` means `epochs / 2`.
    pub pretrain_epochs: Option<usize>,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            batch_size: 1,
            lambda_smooth: 1.0,
            ncc_window: 9,
            ncc_epsilon: 1e-5,
            seed: 0,
            pretrain_epochs: None,
            val_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("field `lr` must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("field `beta1` must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("field `beta2` must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("field `eps` must be positive"));
        }
        if self.epochs < 1 {
            return Err(Error::config("field `epochs` must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::config(format!(
                "field `batch_size`: only 1 is supported, got {}",
                self.batch_size
            )));
        }
        if self.val_every < 1 {
            return Err(Error::config("field `val_every` must be at least 1"));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_smooth: self.lambda_smooth,
            ncc_window: self.ncc_window,
            epsilon: self.ncc_epsilon,
        }
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs / 2).max(1)
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut d = KvDocument::new();
        d.push("lr", self.lr);
        d.push("beta1", self.beta1);
        d.push("beta2", self.beta2);
        d.push("eps", self.eps);
        d.push("epochs", self.epochs);
        d.push("batch_size", self.batch_size);
        d.push("lambda_smooth", self.lambda_smooth);
        d.push("ncc_window", self.ncc_window);
        d.push("ncc_epsilon", self.ncc_epsilon);
        d.push("seed", self.seed);
        if let Some(p) = self.pretrain_epochs {
            d.push("pretrain_epochs", p);
        }
        d.push("val_every", self.val_every);
        d
    }

    /// Reads training fields from `doc`, ignoring keys it does not own.
    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let mut c = TrainConfig::default();
        macro_rules! read {
            ($($field:ident),*) => {
                $(if let Some(v) = doc.parse_opt(stringify!($field))? { c.$field = v; })*
            };
        }
        read!(lr, beta1, beta2, eps, epochs, batch_size, lambda_smooth, ncc_window, ncc_epsilon, seed, val_every);
        c.pretrain_epochs = doc.parse_opt("pretrain_epochs")?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().to_string().as_bytes()))
    }
}

/// Parses a combined model + training config file. Unknown keys are
/// rejected with the key named.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let doc = KvDocument::parse(text)?;
    let allowed: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS.iter()).copied().collect();
    doc.check_keys(&allowed)?;
    Ok((ModelConfig::from_kv(&doc)?, TrainConfig::from_kv(&doc)?))
}

pub fn read_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub type Gradients = IndexMap<String, Tensor>;

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for name in params.names() {
        if !grads.contains_key(name) {
            return Err(Error::Usage(format!("no gradient for parameter `{name}`")));
        }
        if !state.m.contains_key(name) {
            return Err(Error::Usage(format!("optimizer has no state for parameter `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != p.shape() {
            return Err(Error::Usage(format!("gradient shape mismatch for `{name}`")));
        }
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Loss of one pair and its gradient for every parameter.
pub fn loss_and_grads(model: &TetrahedronNet, pair: &RegistrationPair, loss: &LossConfig) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let fixed = pair.fixed.to_tensor();
    let moving = pair.moving.to_tensor();
    let input = kernels::concat_channels(&[&fixed, &moving])?;
    let x = g.constant(input);
    let f = g.constant(fixed);
    let m = g.constant(moving);
    let field = model.forward_graph(&mut g, &p, x)?;
    let l = total_loss(&mut g, f, m, field, loss)?;
    let value = g.value(l).item();
    if !value.is_finite() {
        return Ok((value, Gradients::new()));
    }
    g.backward(l)?;
    let grads = p
        .iter()
        .map(|(name, v)| {
            let grad = g
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
            (name.to_string(), grad)
        })
        .collect();
    Ok((value, grads))
}

/// Registration quality over a set of labelled pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean Dice between fixed and unwarped moving labels.
    pub dice_before: f64,
    /// Mean Dice between fixed and warped moving labels.
    pub dice_after: f64,
    pub jac_fraction: f64,
    pub pairs: usize,
}

/// Registers every labelled pair in `pairs` and averages the metrics.
pub fn evaluate(model: &TetrahedronNet, pairs: &[RegistrationPair]) -> Result<Evaluation> {
    let mut acc = [0.0; 3];
    let mut n = 0;
    for pair in pairs {
        let (Some(fl), Some(ml)) = (&pair.fixed_labels, &pair.moving_labels) else {
            continue;
        };
        let field = DeformationField::from_tensor(&model.predict(&pair.fixed.to_tensor(), &pair.moving.to_tensor())?)?;
        acc[0] += mean_dice(fl, ml)?.mean;
        acc[1] += mean_dice(fl, &warp_labels(ml, &field)?)?.mean;
        acc[2] += jacobian_nonpositive_fraction(&field, None)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("no labelled pairs to evaluate"));
    }
    let k = n as f64;
    Ok(Evaluation {
        dice_before: acc[0] / k,
        dice_after: acc[1] / k,
        jac_fraction: acc[2] / k,
        pairs: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_mean_dice: Option<f64>,
    pub jac_fraction: Option<f64>,
}

pub const EPOCH_LOG_HEADER: [&str; 4] = ["epoch", "loss", "val_mean_dice", "jac_fraction"];

impl EpochRecord {
    fn csv_row(&self) -> [String; 4] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.epoch.to_string(),
            self.loss.to_string(),
            opt(self.val_mean_dice),
            opt(self.jac_fraction),
        ]
    }
}

/// Reads an epoch log CSV.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let bad = |m: String| Error::io(path, m);
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let opt = |i: usize| -> Result<Option<f64>> {
            match rec.get(i) {
                None | Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad(format!("column `{}`: bad value `{s}`", EPOCH_LOG_HEADER[i]))),
            }
        };
        out.push(EpochRecord {
            epoch: rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("column `epoch`: bad value".into()))?,
            loss: opt(1)?.ok_or_else(|| bad("column `loss` is empty".into()))?,
            val_mean_dice: opt(2)?,
            jac_fraction: opt(3)?,
        });
    }
    Ok(out)
}

struct EpochLogWriter {
    w: csv::Writer<fs::File>,
    path: PathBuf,
}

impl EpochLogWriter {
    fn create(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        if !exists {
            w.write_record(EPOCH_LOG_HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(EpochLogWriter {
            w,
            path: path.to_path_buf(),
        })
    }

    fn push(&mut self, r: &EpochRecord) -> Result<()> {
        self.w.write_record(r.csv_row()).map_err(|e| Error::io(&self.path, e))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Model, optimizer state and epoch counter of one training run.
#[derive(Debug)]
pub struct Trainer {
    pub model: TetrahedronNet,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Directory for `epochs.csv`, `final/` and `best/`; nothing is written
    /// when `None`.
    pub dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Order in which the training pairs are visited in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(seed, epoch)));
    idx
}

impl Trainer {
    pub fn new(model: TetrahedronNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            cfg,
            adam,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Fresh model initialized from `cfg.seed`.
    pub fn from_configs(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Trainer::new(build_model(model_cfg, cfg.seed)?, cfg.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut model = build_model(&ck.model_cfg, ck.train_cfg.seed)?;
        ck.load_params_into(&mut model)?;
        let adam = ck.adam.clone().unwrap_or_else(|| AdamState::new(model.params()));
        Trainer::new(model, ck.train_cfg.clone()).map(|mut t| {
            t.adam = adam;
            t.epoch = ck.epoch;
            t
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_cfg: self.model.config().clone(),
            train_cfg: self.cfg.clone(),
            epoch: self.epoch,
            params: self.model.params().clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// One Adam step on one pair; returns the loss before the update.
    pub fn step(&mut self, pair: &RegistrationPair) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.model, pair, &self.cfg.loss_config())?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} in epoch {} on pair `{}`",
                self.epoch + 1,
                pair.name
            )));
        }
        adam_step(self.model.params_mut(), &grads, &mut self.adam, &self.cfg)?;
        Ok(loss)
    }

    /// One pass over the training pairs in seeded order; validates when due.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let mut total = 0.0;
        for i in epoch_order(self.cfg.seed, epoch, data.train.len()) {
            total += self.step(&data.train[i])?;
        }
        let loss = total / data.train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite mean loss in epoch {epoch}")));
        }
        let due = epoch % self.cfg.val_every == 0 || epoch == self.cfg.epochs;
        let labelled_val = data.val.iter().any(|p| p.fixed_labels.is_some() && p.moving_labels.is_some());
        let (val_mean_dice, jac_fraction) = if due && labelled_val {
            let e = evaluate(&self.model, &data.val)?;
            (Some(e.dice_after), Some(e.jac_fraction))
        } else {
            (None, None)
        };
        self.epoch = epoch;
        let rec = EpochRecord {
            epoch,
            loss,
            val_mean_dice,
            jac_fraction,
        };
        self.log.push(rec);
        Ok(rec)
    }

    /// Trains until `cfg.epochs` epochs are complete. Writes the epoch log,
    /// the final checkpoint and, with validation data, the best-validation
    /// checkpoint.
    pub fn train(&mut self, data: &Dataset, out: &TrainOutput) -> Result<()> {
        data.validate()?;
        let mut writer = match &out.dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(EpochLogWriter::create(&dir.join("epochs.csv"), self.epoch > 0)?)
            }
            None => None,
        };
        let mut best = self
            .log
            .iter()
            .filter_map(|r| r.val_mean_dice)
            .fold(f64::NEG_INFINITY, f64::max);
        while self.epoch < self.cfg.epochs {
            let rec = self.run_epoch(data)?;
            if out.verbose {
                eprintln!(
                    "epoch {:>4}  loss {:+.6}{}",
                    rec.epoch,
                    rec.loss,
                    rec.val_mean_dice
                        .map(|d| format!("  val dice {d:.4}  jac {:.4}", rec.jac_fraction.unwrap_or(0.0)))
                        .unwrap_or_default()
                );
            }
            if let Some(w) = writer.as_mut() {
                w.push(&rec)?;
            }
            if let (Some(dir), Some(d)) = (&out.dir, rec.val_mean_dice) {
                if d > best {
                    best = d;
                    self.checkpoint().save(&dir.join("best"))?;
                }
            }
        }
        if let Some(dir) = &out.dir {
            self.checkpoint().save(&dir.join("final"))?;
        }
        Ok(())
    }
}

/// Parameters, optimizer moments and configs of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

const CHECKPOINT_FORMAT: &str = "tetranet-checkpoint-1";

fn write_blob<'a>(path: &Path, tensors: impl Iterator<Item = &'a Tensor>) -> Result<()> {
    let bytes: Vec<u8> = tensors.flat_map(|t| t.data().iter().flat_map(|x| x.to_le_bytes())).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shapes: &[(String, Vec<usize>)]) -> Result<IndexMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            total,
            bytes.len()
        )));
    }
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    shapes
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data: Vec<f64> = vals.by_ref().take(n).collect();
            Ok((name.clone(), Tensor::new(shape.clone(), data)?))
        })
        .collect()
}

impl Checkpoint {
    /// Writes `manifest.txt`, `model.cfg`, `train.cfg` and raw little-endian
    /// blobs (`params.bin`, plus `adam_m.bin` / `adam_v.bin`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = KvDocument::new();
        manifest.push("format", CHECKPOINT_FORMAT);
        manifest.push("epoch", self.epoch);
        manifest.push("train_config_hash", self.train_cfg.hash());
        if let Some(a) = &self.adam {
            manifest.push("adam_step", a.step);
        }
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            manifest.push("param", format!("{name} {}", dims.join(" ")));
        }
        manifest.write(&dir.join("manifest.txt"))?;
        self.model_cfg.to_kv().write(&dir.join("model.cfg"))?;
        self.train_cfg.to_kv().write(&dir.join("train.cfg"))?;
        write_blob(&dir.join("params.bin"), self.params.iter().map(|(_, t)| t))?;
        if let Some(a) = &self.adam {
            write_blob(&dir.join("adam_m.bin"), a.m.values())?;
            write_blob(&dir.join("adam_v.bin"), a.v.values())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck_err = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
        if !dir.join("manifest.txt").exists() {
            return Err(ck_err("no manifest.txt (not a checkpoint directory)".into()));
        }
        let manifest = KvDocument::read(&dir.join("manifest.txt"))?;
        if manifest.get("format") != Some(CHECKPOINT_FORMAT) {
            return Err(ck_err(format!("field `format`: expected {CHECKPOINT_FORMAT}")));
        }
        let model_cfg = ModelConfig::from_kv(&KvDocument::read(&dir.join("model.cfg"))?)?;
        let train_cfg = TrainConfig::from_kv(&KvDocument::read(&dir.join("train.cfg"))?)?;
        let hash = manifest.require("train_config_hash")?;
        if hash != train_cfg.hash() {
            return Err(ck_err("field `train_config_hash` does not match train.cfg".into()));
        }
        let epoch = manifest.parse_req("epoch")?;
        let shapes: Vec<(String, Vec<usize>)> = manifest
            .get_all("param")
            .map(|line| {
                let mut parts = line.split_whitespace();
                let name = parts.next().ok_or_else(|| ck_err("empty `param` entry".into()))?;
                let shape = parts
                    .map(|s| s.parse().map_err(|_| ck_err(format!("param `{name}`: bad extent `{s}`"))))
                    .collect::<Result<Vec<usize>>>()?;
                Ok((name.to_string(), shape))
            })
            .collect::<Result<_>>()?;
        let mut params = ParamStore::new();
        for (name, t) in read_blob(&dir.join("params.bin"), &shapes)? {
            params
                .register(&name, t)
                .map_err(|_| ck_err(format!("parameter `{name}` listed twice")))?;
        }
        let adam = match manifest.parse_opt::<u64>("adam_step")? {
            Some(step) => Some(AdamState {
                step,
                m: read_blob(&dir.join("adam_m.bin"), &shapes)?,
                v: read_blob(&dir.join("adam_v.bin"), &shapes)?,
            }),
            None => None,
        };
        Ok(Checkpoint {
            model_cfg,
            train_cfg,
            epoch,
            params,
            adam,
        })
    }

    /// Copies parameters into `model`, which must have exactly the same
    /// parameter names and shapes.
    pub fn load_params_into(&self, model: &mut TetrahedronNet) -> Result<()> {
        let target = model.params_mut();
        let mismatch = target.len() != self.params.len()
            || target
                .iter()
                .any(|(n, t)| self.params.get(n).map(|s| s.shape() != t.shape()).unwrap_or(true));
        if mismatch {
            let missing: Vec<&str> = target.names().filter(|n| !self.params.contains(n)).take(3).collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint parameters do not match the model config (first missing: {missing:?})"
            )));
        }
        for (n, t) in target.iter_mut() {
            *t = self.params.get(n).expect("checked").clone();
        }
        Ok(())
    }

    pub fn model(&self) -> Result<TetrahedronNet> {
        let mut m = build_model(&self.model_cfg, self.train_cfg.seed)?;
        self.load_params_into(&mut m)?;
        Ok(m)
    }
}

/// Copies the encoder and first-decoder parameters of a one-level model
/// into a deeper model. The one-level model's head and its full-resolution
/// final stage have no counterpart and are dropped; any other name mismatch
/// is an error.
pub fn transfer_pretrained(stage1: &TetrahedronNet, full: &mut TetrahedronNet) -> Result<Vec<String>> {
    let l = stage1.config().scales;
    let dropped_prefixes = ["head.".to_string(), format!("dec1.{l}.")];
    let src = stage1.params();
    let dst = full.params_mut();
    let mut copied = Vec::new();
    for (name, t) in src.iter() {
        if dropped_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
            continue;
        }
        let target = dst
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained parameter `{name}` has no counterpart")))?;
        if target.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("pretrained parameter `{name}` changed shape")));
        }
        *target = t.clone();
        copied.push(name.to_string());
    }
    let expected = dst
        .names()
        .filter(|n| n.starts_with("enc.") || n.starts_with("dec1."))
        .count();
    if copied.len() != expected {
        return Err(Error::Checkpoint(format!(
            "full model has {expected} encoder/first-decoder parameters, pretrained model supplied {}",
            copied.len()
        )));
    }
    Ok(copied)
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub stage1: Trainer,
    pub stage2: Trainer,
    /// Evaluation of a fresh, untrained full model.
    pub untrained: Evaluation,
    /// Evaluation of the full model right after the transfer, before any
    /// stage-2 update.
    pub stage2_start: Evaluation,
}

fn eval_pairs(data: &Dataset) -> &[RegistrationPair] {
    if data.val.iter().any(|p| p.fixed_labels.is_some()) {
        &data.val
    } else {
        &data.train
    }
}

/// Two-stage training: `pretrain_epochs` epochs of the one-level model,
/// then the full model, initialized from the pretrained encoder and first
/// decoder, for `epochs` epochs with all parameters trainable.
pub fn pretrain_then_extend(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<PretrainOutcome> {
    if model_cfg.decoder_levels < 2 {
        return Err(Error::config("pretraining needs `decoder_levels` >= 2"));
    }
    let sub = |name: &str| TrainOutput {
        dir: out.dir.as_ref().map(|d| d.join(name)),
        verbose: out.verbose,
    };
    let stage1_cfg = ModelConfig {
        decoder_levels: 1,
        ..model_cfg.clone()
    };
    let mut stage1 = Trainer::from_configs(
        &stage1_cfg,
        &TrainConfig {
            epochs: cfg.pretrain_epochs(),
            ..cfg.clone()
        },
    )?;
    if out.verbose {
        eprintln!("stage 1: encoder + first decoder, {} epochs", stage1.cfg.epochs);
    }
    stage1.train(data, &sub("stage1"))?;

    let mut full = build_model(model_cfg, cfg.seed)?;
    let pairs = eval_pairs(data);
    let untrained = evaluate(&full, pairs)?;
    transfer_pretrained(&stage1.model, &mut full)?;
    let stage2_start = evaluate(&full, pairs)?;
    let mut stage2 = Trainer::new(full, cfg.clone())?;
    if out.verbose {
        eprintln!("stage 2: full model, {} epochs", stage2.cfg.epochs);
    }
    stage2.train(data, &sub("stage2"))?;
    Ok(PretrainOutcome {
        stage1,
        stage2,
        untrained,
        stage2_start,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationSuite {
    Pretrain,
    EncSkips,
    Levels,
    Dec2Variant,
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(AblationSuite::Pretrain),
            "enc_skips" => Ok(AblationSuite::EncSkips),
            "levels" => Ok(AblationSuite::Levels),
            "dec2_variant" => Ok(AblationSuite::Dec2Variant),
            _ => Err(Error::config(format!(
                "unknown ablation suite `{s}` (expected pretrain, enc_skips, levels or dec2_variant)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub mean_dice: f64,
    pub jac_fraction: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::input(format!("writing ablation CSV: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config", "mean_dice", "jac_fraction", "param_count"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.config.clone(),
                r.mean_dice.to_string(),
                r.jac_fraction.to_string(),
                r.param_count.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::input(e.to_string()))
    }

    pub fn get(&self, config: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == config)
    }
}

/// Model configurations compared by a suite, labelled.
pub fn ablation_configs(suite: AblationSuite, base: &ModelConfig) -> Vec<(String, ModelConfig, bool)> {
    match suite {
        AblationSuite::Pretrain => vec![
            ("no_pretrain".into(), base.clone(), false),
            ("pretrain".into(), base.clone(), true),
        ],
        AblationSuite::EncSkips => Dec2Variant::ALL
            .iter()
            .flat_map(|&v| {
                [true, false].map(|on| {
                    (
                        format!("{v}/skips_{}", if on { "on" } else { "off" }),
                        ModelConfig {
                            dec2_variant: v,
                            use_encoder_skips_in_dec2: on,
                            ..base.clone()
                        },
                        false,
                    )
                })
            })
            .collect(),
        AblationSuite::Levels => (1..=4)
            .map(|l| {
                (
                    format!("levels_{l}"),
                    ModelConfig {
                        decoder_levels: l,
                        ..base.clone()
                    },
                    false,
                )
            })
            .collect(),
        AblationSuite::Dec2Variant => Dec2Variant::ALL
            .iter()
            .map(|&v| {
                (
                    v.to_string(),
                    ModelConfig {
                        dec2_variant: v,
                        ..base.clone()
                    },
                    false,
                )
            })
            .collect(),
    }
}

/// Trains every configuration of `suite` with the same seed and schedule
/// and reports Dice on the validation pairs (training pairs when there is
/// no labelled validation split).
pub fn run_ablation(
    suite: AblationSuite,
    data: &Dataset,
    base: &ModelConfig,
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    let mut cache: BTreeMap<String, AblationRow> = BTreeMap::new();
    for (label, model_cfg, pretrain) in ablation_configs(suite, base) {
        let key = format!("{:?}{pretrain}", model_cfg.to_kv().to_string());
        if let Some(r) = cache.get(&key) {
            table.rows.push(AblationRow {
                config: label,
                ..r.clone()
            });
            continue;
        }
        let sub = TrainOutput {
            dir: out.dir.as_ref().map(|d| d.join(label.replace('/', "_"))),
            verbose: out.verbose,
        };
        if out.verbose {
            eprintln!("ablation run `{label}`");
        }
        let model = if pretrain {
            pretrain_then_extend(data, &model_cfg, cfg, &sub)?.stage2.model
        } else {
            let mut t = Trainer::from_configs(&model_cfg, cfg)?;
            t.train(data, &sub)?;
            t.model
        };
        let e = evaluate(&model, eval_pairs(data))?;
        let row = AblationRow {
            config: label,
            mean_dice: e.dice_after,
            jac_fraction: e.jac_fraction,
            param_count: model.param_count(),
        };
        cache.insert(key, row.clone());
        table.rows.push(row);
    }
    Ok(table)
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>10} {:>12} {:>12}", "config", "mean_dice", "jac_fraction", "params")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>10.4} {:>12.5} {:>12}",
                r.config, r.mean_dice, r.jac_fraction, r.param_count
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_adam_step_by_hand() {
        let mut params = ParamStore::new();
        params.register("p", Tensor::full(&[1], 1.0)).unwrap();
        let mut state = AdamState::new(&params);
        let grads: Gradients = [("p".to_string(), Tensor::full(&[1], 1.0))].into_iter().collect();
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((params.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ParamStore::new();
        params.register("p", Tensor::full(&[3], 0.5)).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads: Gradients = [("p".to_string(), Tensor::zeros(&[3]))].into_iter().collect();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut params = ParamStore::new();
        params.register("p", Tensor::full(&[1], 1.0)).unwrap();
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &Gradients::new(), &mut state, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn config_parsing() {
        let (m, t) = parse_config("enc_channels: 4 8\nepochs: 3\ndec2_variant: unet3p\n").unwrap();
        assert_eq!(m.scales, 2);
        assert_eq!(m.dec_channels, vec![8, 4]);
        assert_eq!(t.epochs, 3);
        assert_eq!(t.pretrain_epochs(), 1);
        let err = parse_config("dec2_variant: vnet\n").unwrap_err();
        assert!(err.to_string().contains("dec2_variant"));
        let err = parse_config("learning_rate: 1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(parse_config("batch_size: 2\n").is_err());
    }

    #[test]
    fn train_config_round_trip_and_hash() {
        let c = TrainConfig {
            pretrain_epochs: Some(7),
            seed: 11,
            ..Default::default()
        };
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
    }

    #[test]
    fn epoch_order_depends_on_epoch_only() {
        assert_eq!(epoch_order(3, 5, 8), epoch_order(3, 5, 8));
        let mut o = epoch_order(3, 6, 8);
        o.sort();
        assert_eq!(o, (0..8).collect::<Vec<_>>());
    }
}
