//! Learned kernel estimator: neighbourhood pre-processing, the
//! permutation-invariant kernel network and the weighted-sum estimate.
//!
//! The network has a shared per-photon feature extractor (9 -> 32 -> 32 -> 32),
//! a pooled context (channelwise max and mean, 64 channels) plus a count
//! channel `k/K`, and a per-photon predictor (97 -> 64 -> 32 -> 1) that emits
//! one kernel weight per photon. The direct-estimation variant replaces the
//! predictor with a head on the context alone (65 -> 64 -> 32 -> 3).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::estimators::{front_facing, pm_estimate, Kernel, ShadingPoint};
use crate::exec::Exec;
use crate::math::{Rgb, RngStream, Vec3};
use crate::photon_map::{Neighborhood, PhotonMap};
use crate::tracer::{read_u32, read_u64};

pub const INPUT_CHANNELS: usize = 9;
pub const FEATURE_CHANNELS: usize = 32;
pub const CONTEXT_CHANNELS: usize = 2 * FEATURE_CHANNELS;
pub const EXTRACTOR_DIMS: [usize; 4] = [INPUT_CHANNELS, 32, 32, FEATURE_CHANNELS];
pub const PREDICTOR_DIMS: [usize; 4] = [FEATURE_CHANNELS + CONTEXT_CHANNELS + 1, 64, 32, 1];
pub const DIRECT_HEAD_DIMS: [usize; 4] = [CONTEXT_CHANNELS + 1, 64, 32, 3];
/// Offset `a` of the contribution mapping.
pub const CONTRIBUTION_OFFSET: f64 = 0.01;

const MODEL_VERSION: u32 = 1;

/// Maps HDR flux to `[-1, 1)` per channel: `t = x / (x + 1)` with
/// `x = ln(u + a) - ln(a)`, followed by `2t - 1`.
pub fn map_contribution(u: Rgb, a: f64) -> Result<Rgb> {
    if !(a > 0.0) {
        return invalid(format!("contribution offset must be positive, got {a}"));
    }
    let mut out = [0.0; 3];
    for (o, c) in out.iter_mut().zip(u.to_array()) {
        if !(c >= 0.0) {
            return invalid(format!("contribution must be non-negative, got {c}"));
        }
        let x = (c + a).ln() - a.ln();
        *o = 2.0 * (x / (x + 1.0)) - 1.0;
    }
    Ok(Vec3::from_array(out))
}

/// Network input for one shading point: one row per front-facing
/// neighbour, in neighbourhood order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    /// `k x 9`: local position / r, local direction, mapped flux.
    pub rows: Array2<f64>,
    /// Raw flux of each row, used by the weighted sum.
    pub flux: Vec<Rgb>,
    pub r: f64,
    /// Configured neighbour count `K`.
    pub k_max: usize,
}

impl NetInput {
    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    /// Count channel fed to the predictor.
    pub fn count_channel(&self) -> f64 {
        self.k() as f64 / self.k_max.max(1) as f64
    }
}

/// Transforms a neighbourhood into the shading point's local frame with
/// positions scaled by the bandwidth.
pub fn preprocess(map: &PhotonMap, sp: &ShadingPoint, nb: &Neighborhood, k_max: usize) -> Result<NetInput> {
    if !(nb.r > 0.0) || !nb.r.is_finite() {
        return Err(Error::Degenerate(format!("bandwidth {} is not positive", nb.r)));
    }
    let ff: Vec<_> = front_facing(map, nb, sp.normal).collect();
    let mut rows = Array2::zeros((ff.len(), INPUT_CHANNELS));
    let mut flux = Vec::with_capacity(ff.len());
    for (mut row, n) in rows.outer_iter_mut().zip(&ff) {
        let p = map.photon(n.index);
        let pos = sp.frame.to_local(p.position) / nb.r;
        let dir = sp.frame.dir_to_local(p.direction);
        let c = map_contribution(p.flux, CONTRIBUTION_OFFSET)?;
        for (j, v) in pos.to_array().into_iter().chain(dir.to_array()).chain(c.to_array()).enumerate() {
            row[j] = v;
        }
        flux.push(p.flux);
    }
    Ok(NetInput { rows, flux, r: nb.r, k_max })
}

/// Fully connected layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Layer {
        Layer { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    /// Uniform in `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Layer {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..=bound));
        Layer { w, b: Array1::zeros(fan_out) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

fn dims_to_shapes(dims: &[usize; 4]) -> [(usize, usize); 3] {
    [(dims[0], dims[1]), (dims[1], dims[2]), (dims[2], dims[3])]
}

/// Shapes of the six layers of the kernel network.
pub fn kernel_shapes() -> Vec<(usize, usize)> {
    let mut v = dims_to_shapes(&EXTRACTOR_DIMS).to_vec();
    v.extend(dims_to_shapes(&PREDICTOR_DIMS));
    v
}

/// Shapes of the six layers of the direct-estimation network.
pub fn direct_shapes() -> Vec<(usize, usize)> {
    let mut v = dims_to_shapes(&EXTRACTOR_DIMS).to_vec();
    v.extend(dims_to_shapes(&DIRECT_HEAD_DIMS));
    v
}

/// Per-photon features after the three extractor layers.
fn extract(layers: &[Layer], x: ArrayView2<f64>) -> Array2<f64> {
    let h = relu(layers[0].forward(x));
    let h = relu(layers[1].forward(h.view()));
    relu(layers[2].forward(h.view()))
}

/// Max-pool and mean-pool of the features, concatenated.
fn pool(f: &Array2<f64>) -> Array1<f64> {
    let mut ctx = Array1::zeros(CONTEXT_CHANNELS);
    if f.nrows() == 0 {
        return ctx;
    }
    for (c, col) in f.axis_iter(Axis(1)).enumerate() {
        ctx[c] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ctx[FEATURE_CHANNELS + c] = col.sum() / f.nrows() as f64;
    }
    ctx
}

/// Parameters shared by both network variants.
pub trait Model {
    fn layers(&self) -> &[Layer];
    fn layers_mut(&mut self) -> &mut [Layer];
    /// Neighbour count the model was built for.
    fn k(&self) -> usize;

    fn param_count(&self) -> usize {
        self.layers().iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    fn set_flat_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut it = p.iter();
        for l in self.layers_mut() {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().unwrap());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelNet {
    pub k: usize,
    pub layers: Vec<Layer>,
}

impl Model for KernelNet {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
    fn k(&self) -> usize {
        self.k
    }
}

impl KernelNet {
    /// Glorot-initialised network. The final bias starts at one, so a fresh
    /// network is the uniform kernel plus small perturbations.
    pub fn new(k: usize, rng: &mut RngStream) -> KernelNet {
        let mut net = KernelNet::glorot(k, rng);
        net.layers[5].b.fill(1.0);
        net
    }

    /// Glorot weights with every bias zero.
    pub fn glorot(k: usize, rng: &mut RngStream) -> KernelNet {
        KernelNet { k, layers: kernel_shapes().into_iter().map(|(i, o)| Layer::glorot(i, o, rng)).collect() }
    }

    pub fn zeros(k: usize) -> KernelNet {
        KernelNet { k, layers: kernel_shapes().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect() }
    }

    /// The network whose output is exactly one for every photon.
    pub fn constant_one(k: usize) -> KernelNet {
        let mut net = KernelNet::zeros(k);
        net.layers[5].b.fill(1.0);
        net
    }

    /// One kernel weight per input row.
    pub fn forward(&self, input: &NetInput) -> Vec<f64> {
        let k = input.k();
        if k == 0 {
            return Vec::new();
        }
        let f = extract(&self.layers[..3], input.rows.view());
        let ctx = pool(&f);
        let l = &self.layers[3];
        // the first predictor layer splits into a per-photon part and a
        // per-point part computed once
        let shared = ctx.dot(&l.w.slice(s![FEATURE_CHANNELS..FEATURE_CHANNELS + CONTEXT_CHANNELS, ..]))
            + &l.w.row(FEATURE_CHANNELS + CONTEXT_CHANNELS) * input.count_channel()
            + &l.b;
        let h = relu(f.dot(&l.w.slice(s![..FEATURE_CHANNELS, ..])) + &shared);
        let h = relu(self.layers[4].forward(h.view()));
        let out = self.layers[5].forward(h.view());
        out.column(0).to_vec()
    }

    /// Learned radiance estimate at `sp` from its `k` nearest photons.
    pub fn estimate(&self, map: &PhotonMap, sp: &ShadingPoint) -> Rgb {
        let nb = map.knn(sp.position, self.k);
        match preprocess(map, sp, &nb, self.k) {
            Ok(input) => weighted_estimate(&input, &self.forward(&input), sp.albedo, map.emitted()),
            Err(e) => {
                log::warn!("learned estimate falls back to uniform kernel: {e}");
                pm_estimate(map, sp, self.k, Kernel::Uniform)
            }
        }
    }

    pub fn estimate_many(&self, map: &PhotonMap, sps: &[ShadingPoint], exec: Exec) -> Vec<Rgb> {
        exec.map_slice(sps, |sp| self.estimate(map, sp))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_model(self, path)
    }

    pub fn read(path: &Path) -> Result<KernelNet> {
        let (k, layers) = read_model(path, &kernel_shapes())?;
        Ok(KernelNet { k, layers })
    }
}

/// `rho / (pi N) * sum_i (w_i / (pi r^2)) phi_i`. With all weights equal to
/// one this is bit-identical to the uniform-kernel estimate.
pub fn weighted_estimate(input: &NetInput, weights: &[f64], albedo: Rgb, emitted: u64) -> Rgb {
    let base = Kernel::Uniform.weight(0.0, input.r);
    let mut sum = Vec3::ZERO;
    for (phi, w) in input.flux.iter().zip(weights) {
        sum += *phi * (w * base);
    }
    albedo.mul_elem(sum) / (PI * emitted as f64)
}

/// Per-point scale turning the kernel-weighted flux sum into radiance.
pub fn radiance_scale(albedo: Rgb, r: f64, emitted: u64) -> Rgb {
    albedo * (Kernel::Uniform.weight(0.0, r) / (PI * emitted as f64))
}

/// Ablation network: regresses the kernel-weighted flux sum directly from
/// the pooled context.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectNet {
    pub k: usize,
    pub layers: Vec<Layer>,
}

impl Model for DirectNet {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
    fn k(&self) -> usize {
        self.k
    }
}

impl DirectNet {
    pub fn new(k: usize, rng: &mut RngStream) -> DirectNet {
        DirectNet { k, layers: direct_shapes().into_iter().map(|(i, o)| Layer::glorot(i, o, rng)).collect() }
    }

    /// Predicted flux sum, one RGB triple per shading point.
    pub fn forward(&self, input: &NetInput) -> Rgb {
        let f = extract(&self.layers[..3], input.rows.view());
        let mut x = Array2::zeros((1, CONTEXT_CHANNELS + 1));
        x.slice_mut(s![0, ..CONTEXT_CHANNELS]).assign(&pool(&f));
        x[[0, CONTEXT_CHANNELS]] = input.count_channel();
        let h = relu(self.layers[3].forward(x.view()));
        let h = relu(self.layers[4].forward(h.view()));
        let out = self.layers[5].forward(h.view());
        Vec3::new(out[[0, 0]], out[[0, 1]], out[[0, 2]])
    }

    pub fn estimate(&self, map: &PhotonMap, sp: &ShadingPoint) -> Rgb {
        let nb = map.knn(sp.position, self.k);
        match preprocess(map, sp, &nb, self.k) {
            Ok(input) => radiance_scale(sp.albedo, input.r, map.emitted()).mul_elem(self.forward(&input)),
            Err(_) => pm_estimate(map, sp, self.k, Kernel::Uniform),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_model(self, path)
    }

    pub fn read(path: &Path) -> Result<DirectNet> {
        let (k, layers) = read_model(path, &direct_shapes())?;
        Ok(DirectNet { k, layers })
    }
}

/// Writes `DPMW`, version, K (u64), layer count, per-layer `(fan_in, fan_out)`
/// as u32, then every layer's weights (row-major) and bias as f32 LE.
pub fn write_model_to(model: &impl Model, w: &mut impl Write) -> Result<()> {
    w.write_all(b"DPMW")?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(model.k() as u64).to_le_bytes())?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for l in model.layers() {
        let (i, o) = l.shape();
        w.write_all(&(i as u32).to_le_bytes())?;
        w.write_all(&(o as u32).to_le_bytes())?;
    }
    for v in model.flat_params() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_model(model: &impl Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model_to(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_model(path: &Path, expected: &[(usize, usize)]) -> Result<(usize, Vec<Layer>)> {
    read_model_from(&mut BufReader::new(File::open(path)?), expected)
}

/// Reads a model, rejecting files whose layer shapes differ from `expected`.
pub fn read_model_from(r: &mut impl Read, expected: &[(usize, usize)]) -> Result<(usize, Vec<Layer>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"DPMW" {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let k = read_u64(r)? as usize;
    let n = read_u32(r)? as usize;
    let mut shapes = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        shapes.push((read_u32(r)? as usize, read_u32(r)? as usize));
    }
    if shapes != expected {
        return Err(Error::ShapeMismatch(format!("model has layers {shapes:?}, expected {expected:?}")));
    }
    let mut layers = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    let mut next = |r: &mut dyn Read| -> Result<f64> {
        r.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf) as f64)
    };
    for &(i, o) in expected {
        let mut l = Layer::zeros(i, o);
        for v in l.w.iter_mut().chain(l.b.iter_mut()) {
            *v = next(r)?;
        }
        layers.push(l);
    }
    Ok((k, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracer::{Photon, PhotonDump, PhotonFlags};

    #[test]
    fn contribution_mapping_examples() {
        let a = CONTRIBUTION_OFFSET;
        assert_eq!(map_contribution(Vec3::ZERO, a).unwrap(), Vec3::splat(-1.0));
        let half = map_contribution(Vec3::splat(a * (1f64.exp() - 1.0)), a).unwrap();
        assert!(half.x.abs() < 1e-12);
        let big = map_contribution(Vec3::splat(1e6), a).unwrap();
        let x = (1e8f64 + 1.0).ln();
        assert!((big.x - (2.0 * x / (x + 1.0) - 1.0)).abs() < 1e-15);
        assert!((big.x - 0.89703).abs() < 5e-5);
        assert!(map_contribution(Vec3::new(1.0, -1e-9, 0.0), a).is_err());
    }

    fn test_map() -> (PhotonMap, ShadingPoint) {
        let mut rng = RngStream::new(4, 0);
        let photons = (0..200)
            .map(|_| Photon {
                position: Vec3::new(rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)),
                direction: Vec3::new(rng.gen_range(-0.5..0.5), -1.0, rng.gen_range(-0.5..0.5)).normalized(),
                flux: Vec3::new(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)),
                flags: PhotonFlags::default(),
            })
            .collect();
        let map = PhotonMap::build(PhotonDump { photons, emitted: 1000, scene_id: 0, seed: 0 }).unwrap();
        let sp = ShadingPoint::new(Vec3::new(0.1, 0.0, 0.2), Vec3::new(0.0, 1.0, 0.0), Vec3::splat(0.6), &mut rng).unwrap();
        (map, sp)
    }

    #[test]
    fn preprocess_normalises_by_bandwidth() {
        let (map, sp) = test_map();
        let nb = map.knn(sp.position, 30);
        let input = preprocess(&map, &sp, &nb, 30).unwrap();
        assert_eq!(input.k(), 30);
        let last = input.rows.row(29);
        let norm = (last[0] * last[0] + last[1] * last[1] + last[2] * last[2]).sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(input.rows.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn photon_at_query_maps_to_origin() {
        let (map, _) = test_map();
        let p = map.photon(17).position;
        let sp = ShadingPoint::with_tangent(p, Vec3::new(0.0, 1.0, 0.0), Vec3::splat(0.5), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let nb = map.knn(p, 5);
        let input = preprocess(&map, &sp, &nb, 5).unwrap();
        assert_eq!(input.rows.slice(s![0, ..3]).to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn zero_bandwidth_is_degenerate() {
        let (map, sp) = test_map();
        let mut nb = map.knn(sp.position, 1);
        nb.r = 0.0;
        assert!(matches!(preprocess(&map, &sp, &nb, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let (map, sp) = test_map();
        let input = preprocess(&map, &sp, &map.knn(sp.position, 20), 20).unwrap();
        assert!(KernelNet::zeros(20).forward(&input).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn constant_one_matches_uniform_kernel_exactly() {
        let (map, sp) = test_map();
        let net = KernelNet::constant_one(25);
        assert_eq!(net.estimate(&map, &sp), pm_estimate(&map, &sp, 25, Kernel::Uniform));
    }

    #[test]
    fn permuted_rows_permute_weights() {
        let (map, sp) = test_map();
        let net = KernelNet::new(40, &mut RngStream::new(9, 0));
        let input = preprocess(&map, &sp, &map.knn(sp.position, 40), 40).unwrap();
        let w = net.forward(&input);
        let perm: Vec<usize> = (0..input.k()).rev().collect();
        let shuffled = NetInput {
            rows: input.rows.select(Axis(0), &perm),
            flux: perm.iter().map(|&i| input.flux[i]).collect(),
            ..input.clone()
        };
        let ws = net.forward(&shuffled);
        for (i, &p) in perm.iter().enumerate() {
            assert!((ws[i] - w[p]).abs() <= 1e-12 * w[p].abs().max(1.0));
        }
    }

    #[test]
    fn duplicate_rows_get_equal_weights() {
        let (map, sp) = test_map();
        let net = KernelNet::new(10, &mut RngStream::new(2, 0));
        let mut input = preprocess(&map, &sp, &map.knn(sp.position, 10), 10).unwrap();
        let dup = input.rows.row(3).to_owned();
        input.rows.row_mut(7).assign(&dup);
        let w = net.forward(&input);
        assert_eq!(w[3], w[7]);
    }

    #[test]
    fn model_file_roundtrip_and_shape_check() {
        let net = KernelNet::new(50, &mut RngStream::new(1, 0));
        let mut buf = Vec::new();
        write_model_to(&net, &mut buf).unwrap();
        let (k, layers) = read_model_from(&mut buf.as_slice(), &kernel_shapes()).unwrap();
        assert_eq!(k, 50);
        for (a, b) in layers.iter().zip(&net.layers) {
            assert!(a.w.iter().zip(b.w.iter()).all(|(x, y)| *x == (*y as f32) as f64));
        }
        assert!(matches!(read_model_from(&mut buf.as_slice(), &direct_shapes()), Err(Error::ShapeMismatch(_))));
        buf[0] = b'X';
        assert!(matches!(read_model_from(&mut buf.as_slice(), &kernel_shapes()), Err(Error::Format(_))));
    }

    #[test]
    fn direct_net_outputs_rgb() {
        let (map, sp) = test_map();
        let net = DirectNet::new(16, &mut RngStream::new(3, 0));
        let l = net.estimate(&map, &sp);
        assert!(l.to_array().iter().all(|c| c.is_finite()));
    }
}
