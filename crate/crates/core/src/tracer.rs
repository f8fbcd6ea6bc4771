//! Photon emission and propagation, plus the `.phd` photon dump format.
//!
//! Paths are traced in fixed-size chunks, each with its own RNG stream
//! `(seed, chunk index)`, so the dump is bit-identical whatever the number
//! of worker threads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::math::{sample_cosine_hemisphere, sample_rect, Frame, Rgb, RngStream, Vec3};
use crate::scene::{refract, schlick, Material, Ray, Scene};

const PATHS_PER_CHUNK: u64 = 2048;
const RR_START: usize = 3;

/// Packed per-photon path history.
///
/// bit 0: a specular interaction happened before this hit;
/// bit 1: first stored photon of its path;
/// bit 2: the path's first interaction was specular (light-specular prefix);
/// bits 3..8: number of interactions before this hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhotonFlags(pub u8);

impl PhotonFlags {
    const SPECULAR_BEFORE: u8 = 1;
    const PATH_START: u8 = 2;
    const LS_PREFIX: u8 = 4;

    pub fn new(specular_before: bool, path_start: bool, ls_prefix: bool, bounces: usize) -> Self {
        let mut bits = (bounces.min(31) as u8) << 3;
        if specular_before {
            bits |= Self::SPECULAR_BEFORE;
        }
        if path_start {
            bits |= Self::PATH_START;
        }
        if ls_prefix {
            bits |= Self::LS_PREFIX;
        }
        PhotonFlags(bits)
    }

    pub fn specular_before(self) -> bool {
        self.0 & Self::SPECULAR_BEFORE != 0
    }

    pub fn path_start(self) -> bool {
        self.0 & Self::PATH_START != 0
    }

    pub fn ls_prefix(self) -> bool {
        self.0 & Self::LS_PREFIX != 0
    }

    pub fn bounces(self) -> usize {
        (self.0 >> 3) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photon {
    pub position: Vec3,
    /// Unit direction of travel (pointing into the surface).
    pub direction: Vec3,
    /// Path throughput over sampling pdf, without the `1/N` factor.
    pub flux: Rgb,
    pub flags: PhotonFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StoreFilter {
    #[default]
    All,
    /// Skip photons arriving straight from a light.
    IndirectOnly,
    /// Keep photons whose path left the light through a specular surface.
    LsOnly,
}

impl StoreFilter {
    pub fn accepts(self, flags: PhotonFlags) -> bool {
        match self {
            StoreFilter::All => true,
            StoreFilter::IndirectOnly => flags.bounces() >= 1,
            StoreFilter::LsOnly => flags.ls_prefix(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StoreFilter::All => "all",
            StoreFilter::IndirectOnly => "indirect-only",
            StoreFilter::LsOnly => "ls-only",
        }
    }
}

impl FromStr for StoreFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StoreFilter::All),
            "indirect-only" | "indirect" => Ok(StoreFilter::IndirectOnly),
            "ls-only" | "ls" => Ok(StoreFilter::LsOnly),
            other => invalid(format!("unknown store filter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotonDump {
    pub photons: Vec<Photon>,
    /// Total emitted paths `N`, including paths that stored nothing.
    pub emitted: u64,
    pub scene_id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceConfig {
    pub paths: u64,
    /// Maximum surface interactions per path (and so stored photons per path).
    pub max_bounces: usize,
    pub filter: StoreFilter,
    pub seed: u64,
}

impl TraceConfig {
    pub fn new(paths: u64, filter: StoreFilter, seed: u64) -> Self {
        TraceConfig { paths, max_bounces: 5, filter, seed }
    }
}

/// Sum of all light powers.
pub fn total_emitted_power(scene: &Scene) -> Rgb {
    scene.total_emitted_power()
}

/// Traces `cfg.paths` photon paths and keeps diffuse hits accepted by the filter.
pub fn trace_photons(scene: &Scene, cfg: &TraceConfig, exec: Exec) -> Result<PhotonDump> {
    if scene.lights.is_empty() {
        return invalid("scene has no lights");
    }
    if cfg.paths == 0 {
        return invalid("at least one photon path is required");
    }
    if cfg.max_bounces == 0 {
        return invalid("max_bounces must be at least 1");
    }
    let weights: Vec<f64> = scene.lights.iter().map(|l| l.power.x + l.power.y + l.power.z).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return invalid("scene lights emit no power");
    }
    let chunks = cfg.paths.div_ceil(PATHS_PER_CHUNK);
    let parts = exec.map(chunks as usize, |c| {
        let start = c as u64 * PATHS_PER_CHUNK;
        let count = PATHS_PER_CHUNK.min(cfg.paths - start);
        let mut rng = RngStream::new(cfg.seed, c as u64);
        let mut out = Vec::with_capacity(count as usize * 2);
        for _ in 0..count {
            trace_path(scene, &weights, total, cfg, &mut rng, &mut out);
        }
        out
    });
    Ok(PhotonDump {
        photons: parts.concat(),
        emitted: cfg.paths,
        scene_id: 0,
        seed: cfg.seed,
    })
}

fn trace_path(scene: &Scene, weights: &[f64], total: f64, cfg: &TraceConfig, rng: &mut RngStream, out: &mut Vec<Photon>) {
    // pick a light proportionally to its power
    let mut u = rng.gen::<f64>() * total;
    let mut li = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            li = i;
            break;
        }
        u -= w;
    }
    let light = &scene.lights[li];
    let pick_pdf = weights[li] / total;
    let origin = sample_rect(rng, light.corner, light.edge1, light.edge2);
    let frame = Frame::random(origin, light.normal(), rng).expect("light normal is valid");
    let dir = frame.dir_from_local(sample_cosine_hemisphere(rng));
    let mut ray = Ray::new(origin, dir);
    // Le * cos / (pick * 1/A * cos/pi) with Le = P / (pi A)
    let mut flux = light.power / pick_pdf;
    let mut specular_before = false;
    let mut ls_prefix = false;
    let mut stored_any = false;

    for bounce in 0..cfg.max_bounces {
        let Some(hit) = scene.intersect(&ray) else { break };
        let throughput = match *scene.material(&hit) {
            Material::Diffuse { albedo } => {
                let flags = PhotonFlags::new(specular_before, !stored_any, ls_prefix, bounce);
                if cfg.filter.accepts(flags) {
                    out.push(Photon { position: hit.position, direction: ray.dir, flux, flags });
                    stored_any = true;
                }
                let f = Frame::random(hit.position, hit.normal, rng).expect("unit normal");
                ray = Ray::new(hit.position, f.dir_from_local(sample_cosine_hemisphere(rng)));
                albedo
            }
            Material::Mirror => {
                ray = Ray::new(hit.position, ray.dir.reflect(hit.normal));
                mark_specular(bounce, &mut specular_before, &mut ls_prefix);
                Vec3::splat(1.0)
            }
            Material::Dielectric { ior } => {
                let eta = if hit.front_face { 1.0 / ior } else { ior };
                let cos_i = -ray.dir.dot(hit.normal);
                let dir = match refract(ray.dir, hit.normal, eta) {
                    Some(t) => {
                        let cos = if eta < 1.0 { cos_i } else { -t.dot(hit.normal) };
                        if rng.gen::<f64>() < schlick(cos, eta) {
                            ray.dir.reflect(hit.normal)
                        } else {
                            t
                        }
                    }
                    None => ray.dir.reflect(hit.normal),
                };
                ray = Ray::new(hit.position, dir);
                mark_specular(bounce, &mut specular_before, &mut ls_prefix);
                // Fresnel-weighted choice: throughput / probability = 1
                Vec3::splat(1.0)
            }
        };
        if bounce >= RR_START {
            let q = throughput.max_component().clamp(0.1, 0.95);
            if rng.gen::<f64>() >= q {
                break;
            }
            flux = flux.mul_elem(throughput) / q;
        } else {
            flux = flux.mul_elem(throughput);
        }
    }
}

fn mark_specular(bounce: usize, specular_before: &mut bool, ls_prefix: &mut bool) {
    if bounce == 0 {
        *ls_prefix = true;
    }
    *specular_before = true;
}

impl PhotonDump {
    pub fn len(&self) -> usize {
        self.photons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photons.is_empty()
    }

    pub fn total_flux(&self) -> Rgb {
        self.photons.iter().fold(Vec3::ZERO, |acc, p| acc + p.flux)
    }

    /// Path-level thinning: every path that stored photons is kept with
    /// probability `fraction`, and `N` becomes `round(fraction * N)`.
    pub fn thin(&self, fraction: f64, rng: &mut RngStream) -> Result<PhotonDump> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return invalid(format!("thinning fraction {fraction} outside (0, 1]"));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut keep = false;
        let photons = self
            .photons
            .iter()
            .filter(|p| {
                if p.flags.path_start() {
                    keep = rng.gen::<f64>() < fraction;
                }
                keep
            })
            .copied()
            .collect();
        Ok(PhotonDump {
            photons,
            emitted: ((self.emitted as f64 * fraction).round() as u64).max(1),
            scene_id: self.scene_id,
            seed: self.seed,
        })
    }

    /// Splits into `parts` consecutive groups at path boundaries, dividing
    /// the emitted-path count as evenly as possible.
    pub fn split_paths(&self, parts: usize) -> Vec<PhotonDump> {
        let parts = parts.max(1).min(self.emitted as usize);
        let starts: Vec<usize> = self
            .photons
            .iter()
            .enumerate()
            .filter(|(_, p)| p.flags.path_start())
            .map(|(i, _)| i)
            .collect();
        let mut out = Vec::with_capacity(parts);
        let mut begin = 0;
        for k in 0..parts {
            let end = if k + 1 == parts {
                self.photons.len()
            } else {
                let cut = starts.len() * (k + 1) / parts;
                starts.get(cut).copied().unwrap_or(self.photons.len()).max(begin)
            };
            let emitted = self.emitted * (k as u64 + 1) / parts as u64 - self.emitted * k as u64 / parts as u64;
            out.push(PhotonDump {
                photons: self.photons[begin..end].to_vec(),
                emitted,
                scene_id: self.scene_id,
                seed: self.seed,
            });
            begin = end;
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Little-endian: magic `PHD1`, version u32, N u64, count u64, then
    /// per photon 9 f64 (position, direction, flux) and a flag byte.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"PHD1")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.emitted.to_le_bytes())?;
        w.write_all(&(self.photons.len() as u64).to_le_bytes())?;
        for p in &self.photons {
            for v in [p.position, p.direction, p.flux] {
                for c in v.to_array() {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
            w.write_all(&[p.flags.0])?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<PhotonDump> {
        let mut r = BufReader::new(File::open(path)?);
        PhotonDump::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<PhotonDump> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PHD1" {
            return Err(Error::Format("not a photon dump (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported photon dump version {version}")));
        }
        let emitted = read_u64(r)?;
        let count = read_u64(r)?;
        let mut photons = Vec::with_capacity(count.min(1 << 26) as usize);
        let mut rec = [0u8; 73];
        for _ in 0..count {
            r.read_exact(&mut rec)?;
            let f = |i: usize| f64::from_le_bytes(rec[i * 8..i * 8 + 8].try_into().unwrap());
            photons.push(Photon {
                position: Vec3::new(f(0), f(1), f(2)),
                direction: Vec3::new(f(3), f(4), f(5)),
                flux: Vec3::new(f(6), f(7), f(8)),
                flags: PhotonFlags(rec[72]),
            });
        }
        Ok(PhotonDump { photons, emitted, scene_id: 0, seed: 0 })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
