//! Error metrics against ground-truth images, method comparison at equal
//! photon counts, and PFM / PNG image output.

use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::{mu_law, MU};
use crate::error::{invalid, Error, Result};
use crate::estimators::{pm_estimate, ppm_over_passes, GtImage, Kernel, PpmConfig, ShadingPoint};
use crate::exec::Exec;
use crate::math::{Rgb, RngStream, Vec3};
use crate::neural_kernel::KernelNet;
use crate::photon_map::PhotonMap;
use crate::scene::Scene;
use crate::tracer::PhotonDump;

/// An estimator under evaluation.
#[derive(Debug, Clone)]
pub enum Method {
    Pm { k: usize, kernel: Kernel },
    Ppm,
    Learned { name: String, net: KernelNet },
    /// The reference itself; useful as a sanity row.
    GroundTruth,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Pm { k, kernel: Kernel::Uniform } => format!("pm-{k}"),
            Method::Pm { k, kernel } => format!("pm-{k}-{kernel:?}").to_lowercase(),
            Method::Ppm => "ppm".into(),
            Method::Learned { name, .. } => name.clone(),
            Method::GroundTruth => "gt".into(),
        }
    }

    fn k(&self) -> usize {
        match self {
            Method::Pm { k, .. } => *k,
            Method::Learned { net, .. } => net.k,
            _ => 0,
        }
    }

    /// Parses `pm-K`, `pm-K-cone`, `ppm`, `gt` or `learned:PATH` (loading
    /// the model file).
    pub fn parse(spec: &str) -> Result<Method> {
        if let Some(path) = spec.strip_prefix("learned:") {
            let net = KernelNet::read(Path::new(path))?;
            return Ok(Method::Learned { name: format!("learned-{}", net.k), net });
        }
        match spec {
            "ppm" => return Ok(Method::Ppm),
            "gt" => return Ok(Method::GroundTruth),
            _ => {}
        }
        let rest = spec.strip_prefix("pm-").ok_or_else(|| Error::InvalidInput(format!("unknown method `{spec}`")))?;
        let (k, kernel) = match rest.split_once('-') {
            Some((k, kern)) => (k, kern.parse()?),
            None => (rest, Kernel::Uniform),
        };
        let k = k.parse().map_err(|_| Error::InvalidInput(format!("bad K in `{spec}`")))?;
        if k == 0 {
            return invalid("K must be at least 1");
        }
        Ok(Method::Pm { k, kernel })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Errors {
    /// RMSE of linear radiance over all channels of all points.
    pub rmse: f64,
    /// RMSE after mu-law mapping.
    pub rmse_mapped: f64,
    /// `10 log10(peak^2 / mse)` with the peak reference channel value.
    pub psnr: f64,
}

pub fn errors(pred: &[Rgb], gt: &[Rgb]) -> Errors {
    assert_eq!(pred.len(), gt.len());
    let n = (3 * pred.len()).max(1) as f64;
    let mut se = 0.0;
    let mut se_mapped = 0.0;
    let mut peak: f64 = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for j in 0..3 {
            se += (p[j] - g[j]).powi(2);
            se_mapped += (mu_law(p[j], MU) - mu_law(g[j], MU)).powi(2);
            peak = peak.max(g[j]);
        }
    }
    let mse = se / n;
    Errors {
        rmse: mse.sqrt(),
        rmse_mapped: (se_mapped / n).sqrt(),
        psnr: if mse > 0.0 { 10.0 * (peak * peak / mse).log10() } else { f64::INFINITY },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene: String,
    pub method: String,
    pub errors: Errors,
    pub points: usize,
    /// Stored photons available to the method.
    pub photons: usize,
    pub k: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// Scenes that could not be evaluated, with the reason.
    pub failures: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn row(&self, scene: &str, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scene == scene && r.method == method)
    }

    /// RMSE pooled over all scenes for one method (square root of the
    /// point-weighted mean squared error).
    pub fn pooled_rmse(&self, method: &str) -> Option<f64> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.method == method).collect();
        let n: usize = rows.iter().map(|r| r.points).sum();
        if n == 0 {
            return None;
        }
        let se: f64 = rows.iter().map(|r| r.errors.rmse.powi(2) * r.points as f64).sum();
        Some((se / n as f64).sqrt())
    }

    /// Tab-separated rows with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scene\tmethod\trmse\trmse_mapped\tpsnr\tpoints\tphotons\tk\twall_seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.9e}\t{:.9e}\t{:.4}\t{}\t{}\t{}\t{:.3}",
                r.scene, r.method, r.errors.rmse, r.errors.rmse_mapped, r.errors.psnr, r.points, r.photons, r.k, r.wall_seconds
            );
        }
        for (scene, why) in &self.failures {
            let _ = writeln!(s, "{scene}\terror\t{why}");
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:<14} {:>12} {:>12} {:>9} {:>7} {:>9} {:>5} {:>9}",
            "scene", "method", "rmse", "rmse(mu)", "psnr", "points", "photons", "K", "time(s)"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:<14} {:>12.5e} {:>12.5e} {:>9.3} {:>7} {:>9} {:>5} {:>9.2}",
                r.scene, r.method, r.errors.rmse, r.errors.rmse_mapped, r.errors.psnr, r.points, r.photons, r.k, r.wall_seconds
            )?;
        }
        for (scene, why) in &self.failures {
            writeln!(f, "{scene:<12} error: {why}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// Fraction of each stored dump's paths kept (path-level thinning).
    pub fraction: f64,
    /// PPM splits the same photons into this many passes.
    pub ppm_passes: usize,
    pub ppm: PpmConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { fraction: 1.0, ppm_passes: 10, ppm: PpmConfig::default(), seed: 0 }
    }
}

/// A scene to evaluate; `gt` is `None` when its ground truth is missing.
#[derive(Debug, Clone)]
pub struct EvalScene {
    pub name: String,
    pub scene: Scene,
    pub dump: PhotonDump,
    pub gt: Option<GtImage>,
}

/// Runs every method on the same thinned photons and the same valid
/// shading points of each scene.
pub fn evaluate(scenes: &[EvalScene], methods: &[Method], cfg: &EvalConfig, exec: Exec) -> MetricsReport {
    let mut report = MetricsReport::default();
    for (i, es) in scenes.iter().enumerate() {
        match evaluate_scene(es, methods, cfg, i as u64, exec) {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => report.failures.push((es.name.clone(), e.to_string())),
        }
    }
    report
}

fn evaluate_scene(es: &EvalScene, methods: &[Method], cfg: &EvalConfig, index: u64, exec: Exec) -> Result<Vec<ReportRow>> {
    let gt = es.gt.as_ref().ok_or_else(|| Error::InvalidInput("missing ground truth".into()))?;
    let dump = es.dump.thin(cfg.fraction, &mut RngStream::new(cfg.seed, index))?;
    if dump.photons.is_empty() {
        return invalid("no photons left after thinning");
    }
    let sps: Vec<ShadingPoint> = gt.valid().map(|(_, p)| p.point).collect();
    let reference: Vec<Rgb> = gt.valid().map(|(_, p)| p.radiance).collect();
    let map = PhotonMap::build(dump.clone())?;
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let t = Instant::now();
        let pred = run_method(m, &es.scene, &map, &dump, &sps, cfg, exec)?.unwrap_or_else(|| reference.clone());
        rows.push(ReportRow {
            scene: es.name.clone(),
            method: m.name(),
            errors: errors(&pred, &reference),
            points: sps.len(),
            photons: dump.len(),
            k: m.k(),
            wall_seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Estimates at `sps`; `None` for the ground-truth pseudo-method.
pub fn run_method(
    m: &Method,
    scene: &Scene,
    map: &PhotonMap,
    dump: &PhotonDump,
    sps: &[ShadingPoint],
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<Option<Vec<Rgb>>> {
    Ok(Some(match m {
        Method::Pm { k, kernel } => exec.map_slice(sps, |sp| pm_estimate(map, sp, *k, *kernel)),
        Method::Learned { net, .. } => net.estimate_many(map, sps, exec),
        Method::Ppm => {
            let passes = dump.split_paths(cfg.ppm_passes).into_iter().map(Ok);
            let max_radius = cfg.ppm.max_radius_fraction * scene.bounds.diagonal();
            ppm_over_passes(sps, passes, &cfg.ppm, max_radius, exec)?
        }
        Method::GroundTruth => return Ok(None),
    }))
}

/// Row-major image of linear RGB, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, pixels: vec![Vec3::ZERO; width * height] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pfm,
    Png,
}

impl FromStr for ImageFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfm" => Ok(ImageFormat::Pfm),
            "png" => Ok(ImageFormat::Png),
            other => invalid(format!("unknown image format `{other}`")),
        }
    }
}

impl ImageFormat {
    /// Picks the format from a file extension.
    pub fn from_path(path: &Path) -> Result<ImageFormat> {
        path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase().parse()
    }
}

pub fn write_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Pfm => {
            let mut w = BufWriter::new(File::create(path)?);
            write_pfm(img, &mut w)?;
            w.flush()?;
            Ok(())
        }
        ImageFormat::Png => {
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, png_bytes(img))
                .expect("buffer matches dimensions");
            buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Io(io),
                other => Error::Format(other.to_string()),
            })
        }
    }
}

/// 8-bit value of one channel: `round(255 * mu_law(v))`.
pub fn png_value(v: f64) -> u8 {
    (255.0 * mu_law(v.min(1.0), MU)).round() as u8
}

fn png_bytes(img: &Image) -> Vec<u8> {
    img.pixels.iter().flat_map(|p| p.to_array().map(png_value)).collect()
}

/// Little-endian colour PFM (`PF`, scale -1), rows stored bottom to top.
pub fn write_pfm(img: &Image, w: &mut impl Write) -> Result<()> {
    write!(w, "PF\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for p in &img.pixels[y * img.width..(y + 1) * img.width] {
            for c in p.to_array() {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    read_pfm_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_pfm_from(r: &mut impl Read) -> Result<Image> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    while header.iter().filter(|&&b| b == b'\n').count() < 3 {
        r.read_exact(&mut byte)?;
        header.push(byte[0]);
    }
    let text = String::from_utf8(header).map_err(|_| Error::Format("PFM header is not text".into()))?;
    let mut it = text.split_whitespace();
    let bad = || Error::Format("malformed PFM header".into());
    if it.next() != Some("PF") {
        return Err(Error::Format("only colour PFM is supported".into()));
    }
    let width: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let height: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let scale: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    if scale >= 0.0 {
        return Err(Error::Format("big-endian PFM is not supported".into()));
    }
    let mut img = Image::new(width, height);
    let mut buf = [0u8; 4];
    for y in (0..height).rev() {
        for x in 0..width {
            let mut c = [0.0; 3];
            for v in &mut c {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf) as f64;
            }
            img.pixels[y * width + x] = Vec3::from_array(c);
        }
    }
    Ok(img)
}

/// Scatters per-point values back into an image; pixels without a
/// shading point stay black.
pub fn image_from_points(width: usize, height: usize, pixels: &[usize], values: &[Rgb]) -> Image {
    let mut img = Image::new(width, height);
    for (&p, &v) in pixels.iter().zip(values) {
        img.pixels[p] = v;
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_is_bit_exact() {
        let mut img = Image::new(3, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = Vec3::new(i as f64 * 0.1, 1e-7 * i as f64, 123.456);
        }
        let mut buf = Vec::new();
        write_pfm(&img, &mut buf).unwrap();
        let back = read_pfm_from(&mut buf.as_slice()).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for j in 0..3 {
                assert_eq!((a[j] as f32).to_bits(), (b[j] as f32).to_bits());
            }
        }
        // PFM stores the bottom row first
        let header = b"PF\n3 2\n-1.0\n".len();
        assert_eq!(buf[header..header + 4], (0.3f32).to_le_bytes());
    }

    #[test]
    fn png_values_follow_mu_law() {
        assert_eq!(png_value(0.0), 0);
        assert_eq!(png_value(1.0 / 5000.0), (255.0 * 2f64.ln() / 5001f64.ln()).round() as u8);
        assert_eq!(png_value(1.0 / 5000.0), 21);
        assert_eq!(png_value(1.0), 255);
    }

    #[test]
    fn black_image_gives_black_png() {
        let img = Image::new(4, 4);
        assert!(png_bytes(&img).iter().all(|&b| b == 0));
        let path = std::env::temp_dir().join(format!("photon-lab-black-{}.png", std::process::id()));
        write_image(&img, &path, ImageFormat::Png).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert!(back.pixels().all(|p| p.0 == [0, 0, 0]));
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn errors_are_zero_against_reference() {
        let gt = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::splat(2.0)];
        let e = errors(&gt, &gt);
        assert_eq!(e.rmse, 0.0);
        assert_eq!(e.rmse_mapped, 0.0);
        let off = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::splat(1.0)];
        // three of six channels off by one
        assert!((errors(&off, &gt).rmse - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!(Method::parse("pm-50").unwrap().name(), "pm-50");
        assert_eq!(Method::parse("pm-8-cone").unwrap().name(), "pm-8-cone");
        assert_eq!(Method::parse("ppm").unwrap().name(), "ppm");
        assert!(Method::parse("pm-0").is_err());
        assert!(Method::parse("knn").is_err());
        assert!(Method::parse("learned:/nonexistent.dpmw").is_err());
    }
}
