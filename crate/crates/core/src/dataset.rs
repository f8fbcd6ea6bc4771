//! Training data: procedural scenes with stored photon dumps and
//! ground-truth shading-point images, plus batch sampling over thinned
//! photon maps.
//!
//! On disk a dataset is `manifest.txt` and one `scene_%04d` directory per
//! scene holding `scene.txt`, `photons.phd` and `gt.gti`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Sample;
use crate::error::{Error, Result};
use crate::estimators::{ground_truth_image, GtImage, PpmConfig};
use crate::exec::Exec;
use crate::math::{mix_seed, RngStream};
use crate::neural_kernel::{preprocess, radiance_scale};
use crate::photon_map::PhotonMap;
use crate::scene::{generate_scene, Scene};
use crate::tracer::{trace_photons, PhotonDump, StoreFilter, TraceConfig};

const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub resolution: usize,
    /// Emitted paths behind each stored photon dump.
    pub photon_paths: u64,
    pub filter: StoreFilter,
    pub gt: PpmConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 20,
            resolution: 128,
            photon_paths: 30_000,
            filter: StoreFilter::IndirectOnly,
            gt: PpmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub photons: usize,
    pub emitted: u64,
    pub valid_points: usize,
}

impl ManifestEntry {
    pub fn dir_name(&self) -> String {
        format!("scene_{:04}", self.index)
    }
}

/// Budgets and per-scene records of a built dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub resolution: usize,
    pub photon_paths: u64,
    pub filter: StoreFilter,
    pub gt_paths: u64,
    pub gt_paths_per_pass: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# photon-lab dataset\nversion 1\n");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "resolution {}", self.resolution);
        let _ = writeln!(s, "photon_paths {}", self.photon_paths);
        let _ = writeln!(s, "filter {}", self.filter.as_str());
        let _ = writeln!(s, "gt_paths {}", self.gt_paths);
        let _ = writeln!(s, "gt_paths_per_pass {}", self.gt_paths_per_pass);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "scene {} seed={} photons={} emitted={} valid={}",
                e.dir_name(),
                e.seed,
                e.photons,
                e.emitted,
                e.valid_points
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let bad = |line: &str| Error::Format(format!("bad manifest line `{line}`"));
        let mut m = Manifest {
            seed: 0,
            resolution: 0,
            photon_paths: 0,
            filter: StoreFilter::All,
            gt_paths: 0,
            gt_paths_per_pass: 0,
            entries: Vec::new(),
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            let num = || rest.parse::<u64>().map_err(|_| bad(line));
            match key {
                "version" if rest == "1" => {}
                "seed" => m.seed = num()?,
                "resolution" => m.resolution = num()? as usize,
                "photon_paths" => m.photon_paths = num()?,
                "filter" => m.filter = rest.parse()?,
                "gt_paths" => m.gt_paths = num()?,
                "gt_paths_per_pass" => m.gt_paths_per_pass = num()?,
                "scene" => {
                    let mut parts = rest.split_whitespace();
                    let name = parts.next().ok_or_else(|| bad(line))?;
                    let index = name.strip_prefix("scene_").and_then(|n| n.parse().ok()).ok_or_else(|| bad(line))?;
                    let mut field = |k: &str| -> Result<u64> {
                        parts
                            .next()
                            .and_then(|p| p.strip_prefix(k))
                            .and_then(|v| v.strip_prefix('='))
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad(line))
                    };
                    m.entries.push(ManifestEntry {
                        index,
                        seed: field("seed")?,
                        photons: field("photons")? as usize,
                        emitted: field("emitted")?,
                        valid_points: field("valid")? as usize,
                    });
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(m)
    }
}

/// Seed of the `index`-th generated scene.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    mix_seed(dataset_seed, index as u64)
}

fn build_scene(cfg: &DatasetConfig, index: usize, dir: &Path, exec: Exec) -> Result<ManifestEntry> {
    let seed = scene_seed(cfg.seed, index);
    let scene = generate_scene(seed);
    scene.check_invariants()?;
    let tc = TraceConfig { paths: cfg.photon_paths, max_bounces: 5, filter: cfg.filter, seed: mix_seed(seed, 1) };
    let mut dump = trace_photons(&scene, &tc, exec)?;
    dump.scene_id = index as u64;
    let gt_cfg = PpmConfig { seed: mix_seed(seed, 2), ..cfg.gt };
    let gt = ground_truth_image(&scene, cfg.resolution, cfg.resolution, &gt_cfg, exec)?;
    fs::create_dir_all(dir)?;
    scene.save(&dir.join("scene.txt"))?;
    dump.write(&dir.join("photons.phd"))?;
    gt.write(&dir.join("gt.gti"))?;
    Ok(ManifestEntry { index, seed, photons: dump.len(), emitted: dump.emitted, valid_points: gt.valid_count() })
}

/// Generates, traces and renders ground truth for `cfg.scenes` scenes
/// under `out`. A failing scene is logged and left out of the manifest.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path, exec: Exec) -> Result<Manifest> {
    if cfg.scenes == 0 || cfg.resolution == 0 || cfg.photon_paths == 0 {
        return Err(Error::InvalidInput("dataset needs at least one scene, pixel and photon path".into()));
    }
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(cfg.scenes);
    for index in 0..cfg.scenes {
        let dir = out.join(format!("scene_{index:04}"));
        match build_scene(cfg, index, &dir, exec) {
            Ok(e) => {
                log::info!("{}: {} photons, {} valid points", e.dir_name(), e.photons, e.valid_points);
                entries.push(e);
            }
            Err(err) => log::warn!("scene {index} skipped: {err}"),
        }
    }
    let manifest = Manifest {
        seed: cfg.seed,
        resolution: cfg.resolution,
        photon_paths: cfg.photon_paths,
        filter: cfg.filter,
        gt_paths: cfg.gt.total_paths,
        gt_paths_per_pass: cfg.gt.paths_per_pass,
        entries,
    };
    fs::write(out.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

/// One scene loaded from disk.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    pub scene: Scene,
    pub dump: PhotonDump,
    pub gt: GtImage,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(root.join(MANIFEST))?;
        Ok(Dataset { root: root.to_path_buf(), manifest: Manifest::parse(&text)? })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<SceneData> {
        let e = &self.manifest.entries[i];
        let dir = self.root.join(e.dir_name());
        Ok(SceneData {
            name: e.dir_name(),
            scene: Scene::load(&dir.join("scene.txt"))?,
            dump: PhotonDump::read(&dir.join("photons.phd"))?,
            gt: GtImage::read(&dir.join("gt.gti"))?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<SceneData>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Photon map of one scene thinned to a fraction of its paths.
#[derive(Debug, Clone)]
pub struct ThinnedMap {
    pub fraction: f64,
    pub map: PhotonMap,
}

#[derive(Debug, Clone)]
pub struct TrainScene {
    pub gt: GtImage,
    /// Pixel indices with a shading point.
    pub valid: Vec<usize>,
    pub maps: Vec<ThinnedMap>,
}

/// Scenes prepared for sampling: each photon dump is thinned once per
/// fraction so training sees a range of photon densities and bandwidths.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub scenes: Vec<TrainScene>,
}

/// Log-spaced thinning fractions from `min` to 1.
pub fn log_fractions(min: f64, levels: usize) -> Vec<f64> {
    if levels <= 1 {
        return vec![1.0];
    }
    (0..levels).map(|i| min.powf(1.0 - i as f64 / (levels - 1) as f64)).collect()
}

impl TrainingSet {
    pub fn new(scenes: Vec<(GtImage, PhotonDump)>, fractions: &[f64], seed: u64) -> Result<TrainingSet> {
        if scenes.is_empty() {
            return Err(Error::InvalidInput("training set needs at least one scene".into()));
        }
        let mut out = Vec::with_capacity(scenes.len());
        for (si, (gt, dump)) in scenes.into_iter().enumerate() {
            let valid: Vec<usize> = gt.valid().map(|(i, _)| i).collect();
            let mut maps = Vec::with_capacity(fractions.len());
            for (li, &f) in fractions.iter().enumerate() {
                let mut rng = RngStream::new(mix_seed(seed, si as u64), li as u64);
                let thinned = dump.thin(f, &mut rng)?;
                if thinned.photons.is_empty() {
                    continue;
                }
                maps.push(ThinnedMap { fraction: f, map: PhotonMap::build(thinned)? });
            }
            if valid.is_empty() || maps.is_empty() {
                log::warn!("training scene {si} has no usable points or photons");
                continue;
            }
            out.push(TrainScene { gt, valid, maps });
        }
        if out.is_empty() {
            return Err(Error::InvalidInput("no training scene has both shading points and photons".into()));
        }
        Ok(TrainingSet { scenes: out })
    }

    pub fn from_dataset(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<TrainingSet> {
        let scenes = ds.load_all()?.into_iter().map(|d| (d.gt, d.dump)).collect();
        TrainingSet::new(scenes, fractions, seed)
    }

    pub fn point_count(&self) -> usize {
        self.scenes.iter().map(|s| s.valid.len()).sum()
    }

    /// Builds the network input for one pixel of one scene and map level.
    /// `None` when the neighbourhood is degenerate or has no front-facing
    /// photon.
    pub fn sample(&self, scene: usize, level: usize, pixel: usize, k: usize) -> Option<Sample> {
        let s = &self.scenes[scene];
        let px = s.gt.pixels[pixel].as_ref()?;
        let map = &s.maps[level].map;
        let nb = map.knn(px.point.position, k);
        let input = preprocess(map, &px.point, &nb, k).ok()?;
        if input.k() == 0 {
            return None;
        }
        let scale = radiance_scale(px.point.albedo, input.r, map.emitted());
        Some(Sample { input, scale, target: px.radiance })
    }

    /// Samples of one epoch: every valid point of every scene, or a random
    /// subset of `per_scene` points, each at a random map level, shuffled.
    /// Also returns the number of points skipped as unusable.
    pub fn epoch_samples(&self, k: usize, per_scene: Option<usize>, rng: &mut RngStream, exec: Exec) -> (Vec<Sample>, usize) {
        let mut jobs = Vec::new();
        for (si, s) in self.scenes.iter().enumerate() {
            let mut pts = s.valid.clone();
            pts.shuffle(rng);
            if let Some(n) = per_scene {
                pts.truncate(n);
            }
            for p in pts {
                jobs.push((si, rng.gen_range(0..s.maps.len()), p));
            }
        }
        jobs.shuffle(rng);
        let made = exec.map_slice(&jobs, |&(s, l, p)| self.sample(s, l, p, k));
        let skipped = made.iter().filter(|m| m.is_none()).count();
        (made.into_iter().flatten().collect(), skipped)
    }
}

/// Draws `batch` samples, each from a random scene, map level and valid
/// point. Returns fewer only if nearly every draw is unusable.
pub fn sample_batch(set: &TrainingSet, k: usize, batch: usize, rng: &mut RngStream) -> Vec<Sample> {
    let mut out = Vec::with_capacity(batch);
    let mut attempts = 0;
    while out.len() < batch && attempts < 100 * batch.max(1) {
        attempts += 1;
        let si = rng.gen_range(0..set.scenes.len());
        let s = &set.scenes[si];
        let level = rng.gen_range(0..s.maps.len());
        let pixel = s.valid[rng.gen_range(0..s.valid.len())];
        if let Some(sample) = set.sample(si, level, pixel, k) {
            out.push(sample);
        }
    }
    out
}
