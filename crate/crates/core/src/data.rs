//! Volumes, label maps and displacement fields on disk, plus the synthetic
//! phantom generator and dataset splits.
//!
//! Every object is stored as a pair of files: a `.hdr` text header in the
//! `key: value` grammar and a `.raw` little-endian body, channel-major.
//!
//! ```text
//! dims: 32 32 32
//! spacing: 1 1 1
//! channels: 1
//! dtype: f64le
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::metrics::jacobian_nonpositive_fraction;
use crate::tensor::Tensor;
use crate::warp::DeformationField;

pub(crate) fn voxels(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Scalar 3D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Voxel size in millimetres along d, h, w.
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::input(format!("volume dims {dims:?} must be positive")));
        }
        if data.len() != voxels(dims) {
            return Err(Error::input(format!(
                "volume dims {dims:?} need {} values, got {}",
                voxels(dims),
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume::new(dims, vec![0.0; voxels(dims)]).expect("positive dims")
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let [_, h, w] = dims;
        let data = (0..voxels(dims)).map(|i| f([i / (h * w), (i / w) % h, i % w])).collect();
        Volume::new(dims, data).expect("generated volume matches dims")
    }

    pub fn at(&self, p: [usize; 3]) -> f64 {
        self.data[(p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]]
    }

    /// `[1, 1, D, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 1, d, h, w], self.data.clone()).expect("volume tensor shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, d, h, w] = t.dims5()?;
        if n != 1 || c != 1 {
            return Err(Error::input(format!("expected a [1, 1, D, H, W] tensor, got {:?}", t.shape())));
        }
        Volume::new([d, h, w], t.data().to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, body) = read_object(path, 1, Dtype::F64)?;
        Ok(Volume {
            dims: header.dims,
            spacing: header.spacing,
            data: body.into_f64(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_object(path, self.dims, self.spacing, 1, Body::F64(&self.data))
    }
}

/// Integer label grid; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::input(format!("label dims {dims:?} must be positive")));
        }
        if data.len() != voxels(dims) {
            return Err(Error::input(format!(
                "label dims {dims:?} need {} values, got {}",
                voxels(dims),
                data.len()
            )));
        }
        Ok(LabelMap { dims, data })
    }

    /// Sorted distinct labels, background included if present.
    pub fn labels(&self) -> Vec<u32> {
        let mut v = self.data.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, body) = read_object(path, 1, Dtype::U32)?;
        LabelMap::new(header.dims, body.into_u32())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_object(path, self.dims, [1.0; 3], 1, Body::U32(&self.data))
    }
}

impl DeformationField {
    pub fn read(path: &Path) -> Result<Self> {
        let (header, body) = read_object(path, 3, Dtype::F64)?;
        DeformationField::new(header.dims, body.into_f64())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_object(path, self.dims, [1.0; 3], 3, Body::F64(&self.data))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F64,
    U32,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64le",
            Dtype::U32 => "u32le",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U32 => 4,
        }
    }
}

enum Body<'a> {
    F64(&'a [f64]),
    U32(&'a [u32]),
}

enum OwnedBody {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl OwnedBody {
    fn into_f64(self) -> Vec<f64> {
        match self {
            OwnedBody::F64(v) => v,
            OwnedBody::U32(_) => unreachable!("dtype checked on read"),
        }
    }

    fn into_u32(self) -> Vec<u32> {
        match self {
            OwnedBody::U32(v) => v,
            OwnedBody::F64(_) => unreachable!("dtype checked on read"),
        }
    }
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
}

/// Header and body paths for an object path given with or without extension.
pub fn object_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("hdr"), path.with_extension("raw"))
}

fn header_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::io(path, msg)
}

fn read_object(path: &Path, channels: usize, dtype: Dtype) -> Result<(Header, OwnedBody)> {
    let (hdr_path, raw_path) = object_paths(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let doc = KvDocument::parse(&text).map_err(|e| header_err(&hdr_path, e))?;
    let list3 = |key: &str| -> Result<Vec<String>> {
        let v: Vec<String> = doc
            .get(key)
            .ok_or_else(|| header_err(&hdr_path, format!("missing field `{key}`")))?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if v.len() != 3 {
            return Err(header_err(&hdr_path, format!("field `{key}` needs 3 values, got {}", v.len())));
        }
        Ok(v)
    };
    let mut dims = [0usize; 3];
    for (d, s) in dims.iter_mut().zip(list3("dims")?) {
        *d = s
            .parse()
            .ok()
            .filter(|&d: &usize| d > 0)
            .ok_or_else(|| header_err(&hdr_path, format!("field `dims`: invalid extent `{s}`")))?;
    }
    let mut spacing = [1.0; 3];
    if doc.get("spacing").is_some() {
        for (sp, s) in spacing.iter_mut().zip(list3("spacing")?) {
            *sp = s
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite() && *v > 0.0)
                .ok_or_else(|| header_err(&hdr_path, format!("field `spacing`: invalid value `{s}`")))?;
        }
    }
    let ch: usize = doc.parse_req("channels").map_err(|e| header_err(&hdr_path, e))?;
    if ch != channels {
        return Err(header_err(
            &hdr_path,
            format!("field `channels`: expected {channels}, got {ch}"),
        ));
    }
    let dt = doc.require("dtype").map_err(|e| header_err(&hdr_path, e))?;
    if dt != dtype.name() {
        return Err(header_err(
            &hdr_path,
            format!("field `dtype`: unsupported `{dt}` (expected {})", dtype.name()),
        ));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = voxels(dims) * channels;
    if bytes.len() != expected * dtype.size() {
        let found = bytes.len() as f64 / dtype.size() as f64;
        return Err(Error::io(
            &raw_path,
            format!(
                "length mismatch: field `dims` {} {} {} with {channels} channel(s) expects {expected} values, found {found}",
                dims[0], dims[1], dims[2]
            ),
        ));
    }
    let body = match dtype {
        Dtype::F64 => OwnedBody::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
        Dtype::U32 => OwnedBody::U32(
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect(),
        ),
    };
    Ok((Header { dims, spacing }, body))
}

fn write_object(path: &Path, dims: [usize; 3], spacing: [f64; 3], channels: usize, body: Body<'_>) -> Result<()> {
    let (hdr_path, raw_path) = object_paths(path);
    let mut doc = KvDocument::new();
    doc.push_list("dims", &dims);
    doc.push_list("spacing", &spacing);
    doc.push("channels", channels);
    let (dtype, bytes) = match body {
        Body::F64(v) => (Dtype::F64, v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()),
        Body::U32(v) => (Dtype::U32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    doc.push("dtype", dtype.name());
    doc.write(&hdr_path)?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Parameters of one synthetic registration pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub seed: u64,
    /// Largest displacement of the true field, in voxels.
    pub field_amplitude: f64,
    /// Gaussian smoothing of the random field, in voxels.
    pub field_smoothness: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            n_blobs: 6,
            seed: 0,
            field_amplitude: 4.0,
            field_smoothness: 4.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("phantom dims must be positive"));
        }
        if self.n_blobs == 0 {
            return Err(Error::config("phantom needs at least one blob"));
        }
        if !(self.field_amplitude >= 0.0 && self.field_amplitude.is_finite()) {
            return Err(Error::config("field amplitude must be finite and non-negative"));
        }
        if !(self.field_smoothness > 0.0 && self.field_smoothness.is_finite()) {
            return Err(Error::config("field smoothness sigma must be positive"));
        }
        Ok(())
    }
}

/// A generated pair with its ground truth. `true_field` registers `moving`
/// onto `fixed`: `warp(moving, true_field) ≈ fixed`.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub fixed: Volume,
    pub fixed_labels: LabelMap,
    pub moving: Volume,
    pub moving_labels: LabelMap,
    pub true_field: DeformationField,
}

#[derive(Clone, Debug)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    peak: f64,
}

/// Analytic phantom: Gaussian blobs over a faint periodic texture.
#[derive(Clone, Debug)]
struct Scene {
    blobs: Vec<Blob>,
    texture_period: [f64; 3],
    texture_phase: [f64; 3],
}

const TEXTURE_AMPLITUDE: f64 = 0.08;

impl Scene {
    fn random(dims: [usize; 3], n_blobs: usize, rng: &mut ChaCha8Rng) -> Self {
        let min_dim = *dims.iter().min().expect("three dims") as f64;
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                center: dims.map(|d| rng.random_range(0.25..0.75) * (d as f64 - 1.0)),
                sigma: rng.random_range(0.08..0.14) * min_dim,
                peak: rng.random_range(0.5..0.9),
            })
            .collect();
        Scene {
            blobs,
            texture_period: [0; 3].map(|_| rng.random_range(5.0..9.0)),
            texture_phase: [0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    fn blob_value(b: &Blob, x: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|a| (x[a] - b.center[a]).powi(2)).sum();
        b.peak * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
    }

    fn intensity(&self, x: [f64; 3]) -> f64 {
        let mut tex = 1.0;
        for a in 0..3 {
            tex *= (std::f64::consts::TAU * x[a] / self.texture_period[a] + self.texture_phase[a]).sin();
        }
        let v = TEXTURE_AMPLITUDE * (0.5 + 0.5 * tex) + self.blobs.iter().map(|b| Self::blob_value(b, x)).sum::<f64>();
        v.clamp(0.0, 1.0)
    }

    /// Blob `i` claims `x` as label `i + 1` when it exceeds half its peak;
    /// overlaps go to the blob with the larger relative response.
    fn label(&self, x: [f64; 3]) -> u32 {
        let mut best = 0;
        let mut best_rel = 0.5;
        for (i, b) in self.blobs.iter().enumerate() {
            let rel = Self::blob_value(b, x) / b.peak;
            if rel > best_rel {
                best_rel = rel;
                best = i as u32 + 1;
            }
        }
        best
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one grid with edge replication.
fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let [d, h, w] = dims;
    let mut tmp = vec![0.0; data.len()];
    for (len, step) in [(w, 1), (h, w), (d, h * w)] {
        for start in 0..data.len() / len {
            let origin = (start / step) * len * step + start % step;
            for i in 0..len as isize {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let src = (i + j as isize - r).clamp(0, len as isize - 1) as usize;
                    acc += kv * data[origin + src * step];
                }
                tmp[origin + i as usize * step] = acc;
            }
        }
        data.copy_from_slice(&tmp);
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn random_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> DeformationField {
    let dims = spec.dims;
    let v = voxels(dims);
    let mut data: Vec<f64> = (0..3 * v).map(|_| rng.sample(StandardNormal)).collect();
    for c in 0..3 {
        gaussian_blur(&mut data[c * v..(c + 1) * v], dims, spec.field_smoothness);
    }
    // Fade to zero towards the border so samples stay inside the volume.
    let margin = (2.0 * spec.field_amplitude).max(1.0);
    let [_, h, w] = dims;
    for p in 0..v {
        let q = [p / (h * w), (p / w) % h, p % w];
        let edge = (0..3)
            .map(|a| (q[a] as f64).min((dims[a] - 1 - q[a]) as f64))
            .fold(f64::INFINITY, f64::min);
        let taper = smoothstep(edge / margin);
        for c in 0..3 {
            data[c * v + p] *= taper;
        }
    }
    let peak = data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let s = spec.field_amplitude / peak;
        data.iter_mut().for_each(|x| *x *= s);
    }
    DeformationField::new(dims, data).expect("field shape")
}

/// Trilinear sample of all three field components at a continuous point,
/// clamped to the grid.
fn sample_field(field: &DeformationField, x: [f64; 3]) -> [f64; 3] {
    let dims = field.dims;
    let v = voxels(dims);
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let c = x[a].clamp(0.0, hi);
        i0[a] = if dims[a] == 1 { 0 } else { (c.floor() as usize).min(dims[a] - 2) };
        f[a] = c - i0[a] as f64;
    }
    let mut out = [0.0; 3];
    for corner in 0..8 {
        let b = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut wgt = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = (i0[a] + b[a]).min(dims[a] - 1);
            wgt *= if b[a] == 1 { f[a] } else { 1.0 - f[a] };
        }
        if wgt == 0.0 {
            continue;
        }
        let p = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        for (c, o) in out.iter_mut().enumerate() {
            *o += wgt * field.data[c * v + p];
        }
    }
    out
}

/// Solves `v(q) = −u(q + v(q))` by fixed-point iteration, so that
/// `q ↦ q + v(q)` inverts `p ↦ p + u(p)`.
fn invert_field(u: &DeformationField) -> DeformationField {
    let dims = u.dims;
    let v = voxels(dims);
    let [_, h, w] = dims;
    let mut inv = vec![0.0; 3 * v];
    for p in 0..v {
        let q = [(p / (h * w)) as f64, ((p / w) % h) as f64, (p % w) as f64];
        let mut s = [0.0; 3];
        for _ in 0..60 {
            let x = [q[0] + s[0], q[1] + s[1], q[2] + s[2]];
            let next = sample_field(u, x).map(|c| -c);
            let delta = (0..3).map(|a| (next[a] - s[a]).abs()).fold(0.0, f64::max);
            s = next;
            if delta < 1e-12 {
                break;
            }
        }
        for c in 0..3 {
            inv[c * v + p] = s[c];
        }
    }
    DeformationField::new(dims, inv).expect("field shape")
}

/// Generates a phantom pair with a fold-free ground-truth deformation.
///
/// The moving image is the analytic scene evaluated at `q + v(q)`, where
/// `v` inverts the true field, so no interpolation error enters the pair
/// itself. Fields are redrawn until their Jacobian determinant is positive
/// everywhere.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene::random(spec.dims, spec.n_blobs, &mut rng);
    let dims = spec.dims;
    let coords = |p: [usize; 3]| p.map(|c| c as f64);
    let fixed = Volume::from_fn(dims, |p| scene.intensity(coords(p)));
    let fixed_labels = LabelMap::new(
        dims,
        (0..voxels(dims))
            .map(|i| scene.label(coords(unravel(i, dims))))
            .collect(),
    )?;

    if spec.field_amplitude == 0.0 {
        return Ok(Phantom {
            moving: fixed.clone(),
            moving_labels: fixed_labels.clone(),
            fixed,
            fixed_labels,
            true_field: DeformationField::zeros(dims),
        });
    }

    const MAX_TRIES: usize = 100;
    let mut accepted = None;
    for _ in 0..MAX_TRIES {
        let field = random_field(spec, &mut rng);
        if jacobian_nonpositive_fraction(&field, None)? == 0.0 {
            accepted = Some(field);
            break;
        }
    }
    let true_field = accepted.ok_or_else(|| {
        Error::Generation(format!(
            "no fold-free field after {MAX_TRIES} draws (amplitude {}, sigma {})",
            spec.field_amplitude, spec.field_smoothness
        ))
    })?;
    let inverse = invert_field(&true_field);
    let v = voxels(dims);
    let displaced = |i: usize| {
        let q = coords(unravel(i, dims));
        [0, 1, 2].map(|a| q[a] + inverse.data[a * v + i])
    };
    let moving = Volume::new(dims, (0..v).map(|i| scene.intensity(displaced(i))).collect())?;
    let moving_labels = LabelMap::new(dims, (0..v).map(|i| scene.label(displaced(i))).collect())?;
    Ok(Phantom {
        fixed,
        fixed_labels,
        moving,
        moving_labels,
        true_field,
    })
}

fn unravel(i: usize, dims: [usize; 3]) -> [usize; 3] {
    let [_, h, w] = dims;
    [i / (h * w), (i / w) % h, i % w]
}

/// Seed of pair `index` in a dataset generated from `seed`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// `count` phantoms whose seeds derive from `spec.seed`.
pub fn generate_phantoms(spec: &PhantomSpec, count: usize) -> Result<Vec<Phantom>> {
    (0..count)
        .map(|i| {
            generate_phantom(&PhantomSpec {
                seed: pair_seed(spec.seed, i),
                ..spec.clone()
            })
        })
        .collect()
}

/// Disjoint train / validation / test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles `items` with `seed` and cuts them by `ratios` (train, val,
/// test), distributing rounding remainders by largest fraction.
pub fn make_split<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<Split<T>> {
    if items.is_empty() {
        return Err(Error::input("cannot split an empty list"));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = items.len();
    let exact = ratios.map(|r| r * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut rest = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| items[i].clone()).collect();
    Ok(Split {
        train: take(0..sizes[0]),
        val: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..n),
    })
}

/// A fixed/moving pair prepared for training or evaluation.
#[derive(Clone, Debug)]
pub struct RegistrationPair {
    pub name: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: Option<LabelMap>,
    pub moving_labels: Option<LabelMap>,
}

impl RegistrationPair {
    pub fn from_phantom(name: impl Into<String>, p: &Phantom) -> Self {
        RegistrationPair {
            name: name.into(),
            fixed: p.fixed.clone(),
            moving: p.moving.clone(),
            fixed_labels: Some(p.fixed_labels.clone()),
            moving_labels: Some(p.moving_labels.clone()),
        }
    }

    fn check(&self) -> Result<()> {
        if self.fixed.dims != self.moving.dims {
            return Err(Error::input(format!(
                "pair `{}`: fixed dims {:?} differ from moving dims {:?}",
                self.name, self.fixed.dims, self.moving.dims
            )));
        }
        for l in self.fixed_labels.iter().chain(&self.moving_labels) {
            if l.dims != self.fixed.dims {
                return Err(Error::input(format!("pair `{}`: label dims {:?} differ from image", self.name, l.dims)));
            }
        }
        Ok(())
    }
}

/// Training and validation pairs.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<RegistrationPair>,
    pub val: Vec<RegistrationPair>,
    pub test: Vec<RegistrationPair>,
}

pub const PAIR_FILES: [&str; 5] = ["fixed", "moving", "fixed_labels", "moving_labels", "true_field"];

impl Dataset {
    pub fn from_phantoms(train: &[Phantom], val: &[Phantom]) -> Self {
        let named = |prefix: &str, ps: &[Phantom]| {
            ps.iter()
                .enumerate()
                .map(|(i, p)| RegistrationPair::from_phantom(format!("{prefix}{i:03}"), p))
                .collect()
        };
        Dataset {
            train: named("train", train),
            val: named("val", val),
            test: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::input("dataset has no training pairs"));
        }
        let dims = self.train[0].fixed.dims;
        for p in self.train.iter().chain(&self.val).chain(&self.test) {
            p.check()?;
            if p.fixed.dims != dims {
                return Err(Error::input(format!(
                    "pair `{}` has dims {:?}, expected {dims:?}",
                    p.name, p.fixed.dims
                )));
            }
        }
        Ok(())
    }

    /// Reads a dataset written by [`write_phantom_dataset`]. Label files are
    /// optional per pair.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = KvDocument::read(&dir.join("manifest.txt"))?;
        let load_pair = |name: &str| -> Result<RegistrationPair> {
            let pd = dir.join(name);
            let opt_labels = |f: &str| -> Result<Option<LabelMap>> {
                let p = pd.join(f);
                if p.with_extension("hdr").exists() {
                    LabelMap::read(&p).map(Some)
                } else {
                    Ok(None)
                }
            };
            Ok(RegistrationPair {
                name: name.to_string(),
                fixed: Volume::read(&pd.join("fixed"))?,
                moving: Volume::read(&pd.join("moving"))?,
                fixed_labels: opt_labels("fixed_labels")?,
                moving_labels: opt_labels("moving_labels")?,
            })
        };
        let load_all = |key: &str| -> Result<Vec<RegistrationPair>> { manifest.get_all(key).map(load_pair).collect() };
        let ds = Dataset {
            train: load_all("train")?,
            val: load_all("val")?,
            test: load_all("test")?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Writes `count` phantom pairs under `dir/pair_NNN/` and a `manifest.txt`
/// listing the split.
pub fn write_phantom_dataset(dir: &Path, spec: &PhantomSpec, count: usize, ratios: [f64; 3]) -> Result<Split<String>> {
    if count == 0 {
        return Err(Error::input("need at least one pair"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..count).map(|i| format!("pair_{i:03}")).collect();
    for (i, name) in names.iter().enumerate() {
        let p = generate_phantom(&PhantomSpec {
            seed: pair_seed(spec.seed, i),
            ..spec.clone()
        })?;
        let pd = dir.join(name);
        fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
        p.fixed.write(&pd.join("fixed"))?;
        p.moving.write(&pd.join("moving"))?;
        p.fixed_labels.write(&pd.join("fixed_labels"))?;
        p.moving_labels.write(&pd.join("moving_labels"))?;
        p.true_field.write(&pd.join("true_field"))?;
    }
    let split = make_split(&names, ratios, spec.seed)?;
    let mut doc = KvDocument::new();
    doc.push_list("dims", &spec.dims);
    doc.push("n_blobs", spec.n_blobs);
    doc.push("seed", spec.seed);
    doc.push("amplitude", spec.field_amplitude);
    doc.push("sigma", spec.field_smoothness);
    for (key, list) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for n in list {
            doc.push(key, n);
        }
    }
    doc.write(&dir.join("manifest.txt"))?;
    Ok(split)
}
