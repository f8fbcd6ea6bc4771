use std::time::{Duration, Instant};

use photon_lab::dataset::{sample_batch, TrainingSet};
use photon_lab::estimators::{ground_truth_image, PpmConfig};
use photon_lab::photon_map::PhotonMap;
use photon_lab::scene::generate_scene;
use photon_lab::tracer::{trace_photons, Photon, PhotonDump, PhotonFlags, StoreFilter, TraceConfig};
use photon_lab::{Exec, RngStream, Vec3};
use rand::Rng;

fn random_dump(n: usize, seed: u64) -> PhotonDump {
    let mut rng = RngStream::new(seed, 0);
    let photons = (0..n)
        .map(|_| Photon {
            position: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            direction: Vec3::new(0.0, -1.0, 0.0),
            flux: Vec3::splat(1.0),
            flags: PhotonFlags::new(false, true, false, 1),
        })
        .collect();
    PhotonDump { photons, emitted: n as u64, scene_id: 0, seed }
}

fn best_build_time(n: usize) -> Duration {
    let dump = random_dump(n, n as u64);
    (0..5)
        .map(|_| {
            let d = dump.clone();
            let t = Instant::now();
            let map = PhotonMap::build(d).unwrap();
            let el = t.elapsed();
            assert_eq!(map.len(), n);
            el
        })
        .min()
        .unwrap()
}

#[test]
fn kd_build_is_subquadratic() {
    let n = 100_000;
    let t1 = best_build_time(n);
    let t2 = best_build_time(2 * n);
    let ratio = t2.as_secs_f64() / t1.as_secs_f64();
    assert!(ratio < 3.0, "t(2n)/t(n) = {ratio:.2} ({t1:?} -> {t2:?})");
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn bandwidth_spread_grows_under_thinning() {
    let scene = generate_scene(21);
    let gt_cfg = PpmConfig { total_paths: 100_000, paths_per_pass: 50_000, seed: 1, ..Default::default() };
    let gt = ground_truth_image(&scene, 48, 48, &gt_cfg, Exec::default()).unwrap();
    let dump = trace_photons(&scene, &TraceConfig::new(30_000, StoreFilter::IndirectOnly, 2), Exec::default()).unwrap();
    let radii = |fraction: f64| {
        let set = TrainingSet::new(vec![(gt.clone(), dump.clone())], &[fraction], 3).unwrap();
        let batch = sample_batch(&set, 50, 10_000, &mut RngStream::new(4, 0));
        assert_eq!(batch.len(), 10_000);
        let mut r: Vec<f64> = batch.iter().map(|s| s.input.r).collect();
        r.sort_by(f64::total_cmp);
        r
    };
    let dense = radii(1.0);
    let sparse = radii(0.1);
    let iqr = |r: &[f64]| quantile(r, 0.75) - quantile(r, 0.25);
    assert!(quantile(&sparse, 0.5) > quantile(&dense, 0.5));
    assert!(iqr(&sparse) > iqr(&dense), "IQR {} vs {}", iqr(&sparse), iqr(&dense));
}
