use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use photon_lab::autodiff::{gradient_check, Sample};
use photon_lab::dataset::{build_dataset, log_fractions, Dataset, DatasetConfig, TrainingSet};
use photon_lab::estimators::{ground_truth_image, pm_estimate, shading_points, Kernel, PpmConfig, ShadingPoint};
use photon_lab::eval::{evaluate, image_from_points, write_image, EvalConfig, EvalScene, ImageFormat, Method};
use photon_lab::math::mix_seed;
use photon_lab::neural_kernel::{map_contribution, KernelNet, CONTRIBUTION_OFFSET};
use photon_lab::photon_map::PhotonMap;
use photon_lab::scene::{generate_scene, Scene};
use photon_lab::tracer::{trace_photons, PhotonDump, PhotonFlags, StoreFilter, TraceConfig};
use photon_lab::train::{train, train_direct_baseline, write_log, TrainConfig};
use photon_lab::{Exec, RngStream, Vec3};
use rand::Rng;

#[derive(Parser)]
#[command(name = "photonlab", version, about = "Photon density estimation lab: tracing, classical and learned kernels")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes, or a full training dataset with --scenes.
    Datagen(DatagenArgs),
    /// Trace photons in a scene and write a photon dump.
    Trace(TraceArgs),
    /// Render an image of reflected radiance at the first diffuse hits.
    Render(RenderArgs),
    /// Train a kernel network (or the direct ablation) on a dataset.
    Train(TrainArgs),
    /// Compare estimators against ground truth on a dataset.
    Eval(EvalArgs),
    /// Run quick internal consistency checks.
    Selftest,
}

#[derive(Args)]
struct DatagenArgs {
    /// Write this many scene files only.
    #[arg(long, conflicts_with = "scenes")]
    count: Option<usize>,
    /// Build a dataset with this many scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Ground-truth image resolution (square).
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Emitted paths per stored photon dump.
    #[arg(long, default_value_t = 30_000)]
    photon_paths: u64,
    /// Total emitted paths for the ground truth.
    #[arg(long, default_value_t = 10_000_000)]
    gt_paths: u64,
    #[arg(long, default_value_t = 100_000)]
    gt_paths_per_pass: u64,
    #[arg(long, default_value = "indirect-only")]
    filter: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    paths: u64,
    #[arg(long, default_value = "all")]
    filter: String,
    #[arg(long, default_value_t = 5)]
    max_bounces: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Pm,
    Ppm,
    Learned,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum)]
    estimator: Estimator,
    /// Neighbour count (pm; learned uses the model's K).
    #[arg(long = "K", default_value_t = 500)]
    k: usize,
    /// Emitted photon paths.
    #[arg(long, default_value_t = 1_000_000)]
    paths: u64,
    /// Paths per progressive pass (ppm).
    #[arg(long, default_value_t = 100_000)]
    paths_per_pass: u64,
    #[arg(long, default_value = "uniform")]
    kernel: String,
    #[arg(long, default_value = "all")]
    filter: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Output image; `.pfm` or `.png`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "K", default_value_t = 500)]
    k: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Random points per scene and epoch (default: all valid points).
    #[arg(long)]
    points_per_scene: Option<usize>,
    /// Smallest photon thinning fraction; levels are log-spaced up to 1.
    #[arg(long, default_value_t = 0.1)]
    min_fraction: f64,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Train the direct-estimation ablation instead.
    #[arg(long)]
    direct: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training log (default: OUT with a `.log` extension).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated: pm-K, pm-K-cone, ppm, gt, learned:MODEL.
    #[arg(long, default_value = "pm-50,pm-500,ppm")]
    methods: String,
    /// Fraction of stored photon paths used by every method.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 10)]
    ppm_passes: usize,
    /// Machine-readable report (tab-separated).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = configure_threads(cli.threads)?;
    match cli.command {
        Command::Datagen(a) => datagen(a, cli.seed, exec),
        Command::Trace(a) => trace(a, cli.seed, exec),
        Command::Render(a) => render(a, cli.seed, exec),
        Command::Train(a) => train_cmd(a, cli.seed, exec),
        Command::Eval(a) => eval_cmd(a, cli.seed, exec),
        Command::Selftest => selftest(cli.seed, exec),
    }
}

fn configure_threads(threads: usize) -> Result<Exec> {
    if threads == 1 {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring thread pool")?;
    }
    Ok(Exec::default())
}

fn datagen(a: DatagenArgs, seed: u64, exec: Exec) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if let Some(count) = a.count {
        for i in 0..count {
            let path = a.out.join(format!("scene_{i:04}.txt"));
            generate_scene(mix_seed(seed, i as u64)).save(&path)?;
        }
        println!("wrote {count} scenes to {}", a.out.display());
        return Ok(());
    }
    let Some(scenes) = a.scenes else { bail!("pass --count N (scene files) or --scenes N (full dataset)") };
    let cfg = DatasetConfig {
        scenes,
        resolution: a.res,
        photon_paths: a.photon_paths,
        filter: a.filter.parse()?,
        gt: PpmConfig { total_paths: a.gt_paths, paths_per_pass: a.gt_paths_per_pass, ..Default::default() },
        seed,
    };
    let m = build_dataset(&cfg, &a.out, exec)?;
    println!("built {} of {scenes} scenes in {}", m.entries.len(), a.out.display());
    Ok(())
}

fn trace(a: TraceArgs, seed: u64, exec: Exec) -> Result<()> {
    let scene = Scene::load(&a.scene).with_context(|| format!("loading {}", a.scene.display()))?;
    let cfg = TraceConfig { paths: a.paths, max_bounces: a.max_bounces, filter: a.filter.parse()?, seed };
    let dump = trace_photons(&scene, &cfg, exec)?;
    dump.write(&a.out)?;
    println!("stored {} photons from {} paths", dump.len(), dump.emitted);
    Ok(())
}

fn render(a: RenderArgs, seed: u64, exec: Exec) -> Result<()> {
    let scene = Scene::load(&a.scene).with_context(|| format!("loading {}", a.scene.display()))?;
    let format = ImageFormat::from_path(&a.out)?;
    let filter: StoreFilter = a.filter.parse()?;
    let values = match a.estimator {
        Estimator::Ppm => {
            let cfg = PpmConfig { total_paths: a.paths, paths_per_pass: a.paths_per_pass, filter, seed, ..Default::default() };
            let gt = ground_truth_image(&scene, a.width, a.height, &cfg, exec)?;
            gt.pixels.iter().map(|p| p.map_or(Vec3::ZERO, |p| p.radiance)).collect()
        }
        Estimator::Pm | Estimator::Learned => {
            let dump = trace_photons(&scene, &TraceConfig { paths: a.paths, max_bounces: 5, filter, seed }, exec)?;
            if dump.photons.is_empty() {
                bail!("no photons were stored; nothing to estimate");
            }
            let map = PhotonMap::build(dump)?;
            let slots = shading_points(&scene, a.width, a.height, seed);
            let (pixels, sps): (Vec<usize>, Vec<ShadingPoint>) =
                slots.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).unzip();
            let est = if let Estimator::Learned = a.estimator {
                let path = a.model.as_deref().context("--model is required for the learned estimator")?;
                let net = KernelNet::read(path).with_context(|| format!("loading {}", path.display()))?;
                net.estimate_many(&map, &sps, exec)
            } else {
                let kernel: Kernel = a.kernel.parse()?;
                exec.map_slice(&sps, |sp| pm_estimate(&map, sp, a.k, kernel))
            };
            image_from_points(a.width, a.height, &pixels, &est).pixels
        }
    };
    let img = photon_lab::eval::Image { width: a.width, height: a.height, pixels: values };
    write_image(&img, &a.out, format)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64, exec: Exec) -> Result<()> {
    let ds = Dataset::open(&a.data).with_context(|| format!("opening dataset {}", a.data.display()))?;
    if ds.is_empty() {
        bail!("dataset {} has no scenes", a.data.display());
    }
    let set = TrainingSet::from_dataset(&ds, &log_fractions(a.min_fraction, a.levels), seed)?;
    let cfg = TrainConfig {
        k: a.k,
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed,
        points_per_scene: a.points_per_scene,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: a.out.parent().map(|p| p.join("checkpoints")),
    };
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log"));
    let log = if a.direct {
        let (net, log) = train_direct_baseline(&set, &cfg, exec)?;
        net.write(&a.out)?;
        log
    } else {
        let (net, log) = train(&set, &cfg, exec)?;
        net.write(&a.out)?;
        log
    };
    write_log(&log, &log_path)?;
    if let Some(last) = log.last() {
        println!("epoch {}: loss {:.6e}", last.epoch, last.loss);
    }
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs, seed: u64, exec: Exec) -> Result<()> {
    let ds = Dataset::open(&a.data).with_context(|| format!("opening dataset {}", a.data.display()))?;
    let methods = a.methods.split(',').map(|m| Method::parse(m.trim())).collect::<photon_lab::Result<Vec<_>>>()?;
    let mut scenes = Vec::with_capacity(ds.len());
    for (i, e) in ds.manifest.entries.iter().enumerate() {
        let dir = ds.root.join(e.dir_name());
        let scene = Scene::load(&dir.join("scene.txt"))?;
        let dump = PhotonDump::read(&dir.join("photons.phd"))?;
        let gt = match ds.load(i) {
            Ok(d) => Some(d.gt),
            Err(err) => {
                log::warn!("{}: {err}", e.dir_name());
                None
            }
        };
        scenes.push(EvalScene { name: e.dir_name(), scene, dump, gt });
    }
    let cfg = EvalConfig { fraction: a.fraction, ppm_passes: a.ppm_passes, seed, ..Default::default() };
    let report = evaluate(&scenes, &methods, &cfg, exec);
    print!("{report}");
    for m in &methods {
        if let Some(r) = report.pooled_rmse(&m.name()) {
            println!("pooled {:<14} rmse {r:.6e}", m.name());
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, report.to_tsv())?;
    }
    Ok(())
}

fn check(name: &str, ok: bool, failures: &mut usize) {
    println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        *failures += 1;
    }
}

fn selftest(seed: u64, exec: Exec) -> Result<()> {
    let mut failures = 0;
    let mut rng = RngStream::new(seed, 0);

    let photons: Vec<_> = (0..2000)
        .map(|_| photon_lab::tracer::Photon {
            position: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            direction: Vec3::new(0.0, -1.0, 0.0),
            flux: Vec3::splat(rng.gen()),
            flags: PhotonFlags::new(false, true, false, 1),
        })
        .collect();
    let map = PhotonMap::build(PhotonDump { photons: photons.clone(), emitted: 2000, scene_id: 0, seed })?;
    let mut knn_ok = true;
    for _ in 0..20 {
        let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
        let mut brute: Vec<(f64, usize)> = photons.iter().enumerate().map(|(i, p)| (p.position.distance_squared(q), i)).collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<usize> = map.knn(q, 25).neighbors.iter().map(|n| n.index).collect();
        knn_ok &= got == brute[..25].iter().map(|b| b.1).collect::<Vec<_>>();
    }
    check("k-nearest search matches brute force", knn_ok, &mut failures);

    let net = KernelNet::constant_one(25);
    let sps: Vec<ShadingPoint> = (0..50)
        .map(|_| ShadingPoint::new(Vec3::new(rng.gen(), rng.gen(), rng.gen()), Vec3::new(0.0, 1.0, 0.0), Vec3::splat(0.7), &mut rng))
        .collect::<photon_lab::Result<_>>()?;
    let reduce_ok = sps.iter().all(|sp| net.estimate(&map, sp) == pm_estimate(&map, sp, 25, Kernel::Uniform));
    check("constant-one network equals uniform kernel", reduce_ok, &mut failures);

    let half = map_contribution(Vec3::splat(CONTRIBUTION_OFFSET * (1f64.exp() - 1.0)), CONTRIBUTION_OFFSET)?;
    check("contribution mapping midpoint", half.x.abs() < 1e-12, &mut failures);

    let trained = KernelNet::new(25, &mut rng);
    let samples: Vec<Sample> = sps
        .iter()
        .filter_map(|sp| {
            let nb = map.knn(sp.position, 25);
            let input = photon_lab::neural_kernel::preprocess(&map, sp, &nb, 25).ok()?;
            let scale = photon_lab::neural_kernel::radiance_scale(sp.albedo, input.r, map.emitted());
            Some(Sample { input, scale, target: pm_estimate(&map, sp, 8, Kernel::Cone) })
        })
        .take(8)
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let gc = gradient_check(trained, &refs, 20, 1e-3, &mut rng)?;
    check(&format!("gradient check (max rel. error {:.2e})", gc.worst), gc.worst < 1e-4, &mut failures);

    let scene = photon_lab::scene::fixtures::white_furnace();
    let dump = trace_photons(&scene, &TraceConfig::new(20_000, StoreFilter::All, seed), exec)?;
    let flux = dump.total_flux();
    let bound = scene.total_emitted_power() * (dump.emitted as f64 * 5.0);
    check("stored flux bounded by emitted power", flux.x <= bound.x * 1.02, &mut failures);

    if failures > 0 {
        bail!("{failures} self-test check(s) failed");
    }
    Ok(())
}
