//! Classical kernel radiance estimation over k-nearest photons, progressive
//! photon mapping at fixed shading points, and ground-truth image
//! generation with its `.gti` file format.
//!
//! All estimators return reflected radiance `rho/pi * E` for a diffuse
//! surface, where `E` is the photon irradiance estimate. Photons arriving
//! from behind the shading normal get zero weight everywhere.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::math::{mix_seed, Frame, Rgb, RngStream, Vec3};
use crate::photon_map::{Neighbor, Neighborhood, PhotonMap};
use crate::scene::{Material, Scene};
use crate::tracer::{read_u32, trace_photons, PhotonDump, StoreFilter, TraceConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub albedo: Rgb,
    /// Local frame with its recorded random tangent.
    pub frame: Frame,
}

impl ShadingPoint {
    pub fn new(position: Vec3, normal: Vec3, albedo: Rgb, rng: &mut RngStream) -> Result<ShadingPoint> {
        let frame = Frame::random(position, normal, rng)?;
        Ok(ShadingPoint { position, normal: frame.normal, albedo, frame })
    }

    pub fn with_tangent(position: Vec3, normal: Vec3, albedo: Rgb, tangent: Vec3) -> Result<ShadingPoint> {
        let frame = Frame::with_tangent(position, normal, tangent)?;
        Ok(ShadingPoint { position, normal: frame.normal, albedo, frame })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Uniform,
    Cone,
    Epanechnikov,
}

impl Kernel {
    /// Kernel weight at distance `d` for bandwidth `r`, normalised so it
    /// integrates to one over the disk of radius `r`.
    pub fn weight(self, d: f64, r: f64) -> f64 {
        if d > r {
            return 0.0;
        }
        let area = PI * r * r;
        match self {
            Kernel::Uniform => 1.0 / area,
            Kernel::Cone => 3.0 * (1.0 - d / r) / area,
            Kernel::Epanechnikov => 2.0 * (1.0 - (d * d) / (r * r)) / area,
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Kernel::Uniform),
            "cone" => Ok(Kernel::Cone),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            other => invalid(format!("unknown kernel `{other}`")),
        }
    }
}

/// Neighbours whose photons arrive on the front side of `normal`.
pub fn front_facing<'a>(map: &'a PhotonMap, nb: &'a Neighborhood, normal: Vec3) -> impl Iterator<Item = &'a Neighbor> + 'a {
    nb.neighbors.iter().filter(move |n| map.photon(n.index).direction.dot(normal) < 0.0)
}

/// Kernel estimate over an already-gathered neighbourhood.
pub fn kernel_estimate(map: &PhotonMap, sp: &ShadingPoint, nb: &Neighborhood, kernel: Kernel) -> Rgb {
    let r = nb.r;
    if !(r > 0.0) {
        return Vec3::ZERO;
    }
    let mut sum = Vec3::ZERO;
    for n in front_facing(map, nb, sp.normal) {
        sum += map.photon(n.index).flux * kernel.weight(n.distance, r);
    }
    sp.albedo.mul_elem(sum) / (PI * map.emitted() as f64)
}

/// Classical photon-mapping estimate with `k` nearest photons.
pub fn pm_estimate(map: &PhotonMap, sp: &ShadingPoint, k: usize, kernel: Kernel) -> Rgb {
    let nb = map.knn(sp.position, k);
    kernel_estimate(map, sp, &nb, kernel)
}

/// Per-point progressive photon mapping statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpmPoint {
    pub radius2: f64,
    pub count: f64,
    pub flux: Rgb,
}

impl PpmPoint {
    pub fn new(radius: f64) -> PpmPoint {
        PpmPoint { radius2: radius * radius, count: 0.0, flux: Vec3::ZERO }
    }

    /// One progressive pass: gathers front-facing photons within the
    /// current radius, then shrinks the radius so that only a fraction
    /// `alpha` of the new photons is retained in the density.
    pub fn refine(&mut self, sp: &ShadingPoint, map: &PhotonMap, alpha: f64) {
        let mut m = 0usize;
        let mut gathered = Vec3::ZERO;
        map.for_each_within(sp.position, self.radius2, |i, _| {
            let p = map.photon(i);
            if p.direction.dot(sp.normal) < 0.0 {
                m += 1;
                gathered += p.flux;
            }
        });
        self.absorb(m as f64, gathered, alpha);
    }

    /// Applies the update for `m` gathered photons carrying `gathered` flux.
    pub fn absorb(&mut self, m: f64, gathered: Rgb, alpha: f64) {
        if self.count + m <= 0.0 {
            return;
        }
        let ratio = (self.count + alpha * m) / (self.count + m);
        self.radius2 *= ratio;
        self.count += alpha * m;
        self.flux = (self.flux + gathered) * ratio;
    }

    pub fn radiance(&self, albedo: Rgb, emitted: u64) -> Rgb {
        if emitted == 0 || !(self.radius2 > 0.0) {
            return Vec3::ZERO;
        }
        albedo.mul_elem(self.flux) / (PI * PI * self.radius2 * emitted as f64)
    }
}

/// Progressive state for a set of shading points sharing photon passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PpmState {
    pub points: Vec<PpmPoint>,
    pub alpha: f64,
    /// Emitted paths accumulated over all passes.
    pub emitted: u64,
}

impl PpmState {
    pub fn new(radii: &[f64], alpha: f64) -> Result<PpmState> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return invalid(format!("alpha {alpha} outside (0, 1)"));
        }
        Ok(PpmState { points: radii.iter().map(|&r| PpmPoint::new(r)).collect(), alpha, emitted: 0 })
    }

    /// Folds one photon pass into every point.
    pub fn refine(&mut self, sps: &[ShadingPoint], pass: &PhotonMap, exec: Exec) {
        assert_eq!(sps.len(), self.points.len());
        let alpha = self.alpha;
        exec.for_each_mut(&mut self.points, |i, pt| pt.refine(&sps[i], pass, alpha));
        self.emitted += pass.emitted();
    }

    /// Records a pass that stored no photons at all.
    pub fn skip_pass(&mut self, emitted: u64) {
        self.emitted += emitted;
    }

    pub fn radiance(&self, sps: &[ShadingPoint]) -> Vec<Rgb> {
        self.points.iter().zip(sps).map(|(p, sp)| p.radiance(sp.albedo, self.emitted)).collect()
    }
}

/// Initial per-point radius: distance to the `k`-th photon of the first
/// pass, capped at `max_radius`.
pub fn initial_radii(sps: &[ShadingPoint], first: Option<&PhotonMap>, k: usize, max_radius: f64, exec: Exec) -> Vec<f64> {
    match first {
        Some(map) => exec.map_slice(sps, |sp| {
            let r = map.knn(sp.position, k).r;
            if r > 0.0 {
                r.min(max_radius)
            } else {
                max_radius
            }
        }),
        None => vec![max_radius; sps.len()],
    }
}

/// Runs PPM over a sequence of photon passes at the given shading points.
/// Passes are consumed one at a time, so only one photon map is alive.
pub fn ppm_over_passes<I>(sps: &[ShadingPoint], passes: I, cfg: &PpmConfig, max_radius: f64, exec: Exec) -> Result<Vec<Rgb>>
where
    I: IntoIterator<Item = Result<PhotonDump>>,
{
    let mut state: Option<PpmState> = None;
    for pass in passes {
        let pass = pass?;
        if pass.photons.is_empty() {
            match state.as_mut() {
                Some(s) => s.skip_pass(pass.emitted),
                None => {
                    let mut s = PpmState::new(&vec![max_radius; sps.len()], cfg.alpha)?;
                    s.skip_pass(pass.emitted);
                    state = Some(s);
                }
            }
            continue;
        }
        let map = PhotonMap::build(pass)?;
        let s = match state.as_mut() {
            Some(s) => s,
            None => {
                let radii = initial_radii(sps, Some(&map), cfg.initial_neighbors, max_radius, exec);
                state.insert(PpmState::new(&radii, cfg.alpha)?)
            }
        };
        s.refine(sps, &map, exec);
    }
    Ok(state.map(|s| s.radiance(sps)).unwrap_or_else(|| vec![Vec3::ZERO; sps.len()]))
}

#[derive(Debug, Clone, Copy)]
pub struct PpmConfig {
    pub total_paths: u64,
    pub paths_per_pass: u64,
    pub alpha: f64,
    /// Neighbour count that sets each point's starting radius.
    pub initial_neighbors: usize,
    /// Upper bound on the starting radius, as a fraction of the scene diagonal.
    pub max_radius_fraction: f64,
    pub filter: StoreFilter,
    pub max_bounces: usize,
    pub seed: u64,
}

impl Default for PpmConfig {
    fn default() -> Self {
        PpmConfig {
            total_paths: 10_000_000,
            paths_per_pass: 100_000,
            alpha: 2.0 / 3.0,
            initial_neighbors: 32,
            max_radius_fraction: 0.02,
            filter: StoreFilter::IndirectOnly,
            max_bounces: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPixel {
    pub point: ShadingPoint,
    pub radiance: Rgb,
}

/// Per-pixel shading points with reference radiance; `None` where the
/// camera ray never reaches a diffuse surface.
#[derive(Debug, Clone, PartialEq)]
pub struct GtImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<GtPixel>>,
}

/// First diffuse hits of the camera rays, one per pixel.
pub fn shading_points(scene: &Scene, width: usize, height: usize, seed: u64) -> Vec<Option<ShadingPoint>> {
    (0..width * height)
        .map(|i| {
            let ray = scene.camera.ray(i % width, i / width, width, height);
            let hit = scene.first_diffuse_hit(&ray, 16)?;
            let Material::Diffuse { albedo } = *scene.material(&hit) else { unreachable!() };
            let mut rng = RngStream::new(mix_seed(seed, 0x7A46), i as u64);
            ShadingPoint::new(hit.position, hit.normal, albedo, &mut rng).ok()
        })
        .collect()
}

/// Reference image: shading points at the first diffuse hits, with
/// radiance from PPM over `cfg.total_paths` emitted paths.
pub fn ground_truth_image(scene: &Scene, width: usize, height: usize, cfg: &PpmConfig, exec: Exec) -> Result<GtImage> {
    if cfg.paths_per_pass == 0 || cfg.total_paths == 0 {
        return invalid("PPM budget must be positive");
    }
    let slots = shading_points(scene, width, height, cfg.seed);
    let sps: Vec<ShadingPoint> = slots.iter().flatten().copied().collect();
    let radiance = if sps.is_empty() {
        Vec::new()
    } else {
        let max_radius = cfg.max_radius_fraction * scene.bounds.diagonal();
        let passes = cfg.total_paths.div_ceil(cfg.paths_per_pass);
        let dumps = (0..passes).map(|pass| {
            let paths = cfg.paths_per_pass.min(cfg.total_paths - pass * cfg.paths_per_pass);
            let tc = TraceConfig { paths, max_bounces: cfg.max_bounces, filter: cfg.filter, seed: mix_seed(cfg.seed, pass) };
            log::debug!("ppm pass {}/{passes}", pass + 1);
            trace_photons(scene, &tc, exec)
        });
        ppm_over_passes(&sps, dumps, cfg, max_radius, exec)?
    };
    let mut next = radiance.into_iter();
    let pixels = slots
        .into_iter()
        .map(|slot| slot.map(|point| GtPixel { point, radiance: next.next().unwrap() }))
        .collect();
    Ok(GtImage { width, height, pixels })
}

impl GtImage {
    pub fn valid(&self) -> impl Iterator<Item = (usize, &GtPixel)> {
        self.pixels.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn valid_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Magic `GTI1`, width and height as u32 LE, then per pixel a valid
    /// byte and 15 f64 (position, normal, albedo, tangent, radiance).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"GTI1")?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for px in &self.pixels {
            let (flag, vals) = match px {
                Some(p) => (1u8, [p.point.position, p.point.normal, p.point.albedo, p.point.frame.tangent, p.radiance]),
                None => (0u8, [Vec3::ZERO; 5]),
            };
            w.write_all(&[flag])?;
            for v in vals {
                for c in v.to_array() {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<GtImage> {
        GtImage::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<GtImage> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GTI1" {
            return Err(Error::Format("not a ground-truth image (bad magic)".into()));
        }
        let width = read_u32(r)? as usize;
        let height = read_u32(r)? as usize;
        let mut pixels = Vec::with_capacity(width * height);
        let mut rec = [0u8; 121];
        for _ in 0..width * height {
            r.read_exact(&mut rec)?;
            if rec[0] == 0 {
                pixels.push(None);
                continue;
            }
            let v = |k: usize| {
                let f = |j: usize| f64::from_le_bytes(rec[1 + (k * 3 + j) * 8..9 + (k * 3 + j) * 8].try_into().unwrap());
                Vec3::new(f(0), f(1), f(2))
            };
            let point = ShadingPoint::with_tangent(v(0), v(1), v(2), v(3))?;
            pixels.push(Some(GtPixel { point, radiance: v(4) }));
        }
        Ok(GtImage { width, height, pixels })
    }
}
