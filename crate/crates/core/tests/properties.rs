use std::collections::HashSet;

use photon_lab::autodiff::{mu_law, Adam};
use photon_lab::estimators::{PpmPoint, ShadingPoint};
use photon_lab::math::Frame;
use photon_lab::neural_kernel::{preprocess, weighted_estimate, KernelNet};
use photon_lab::photon_map::PhotonMap;
use photon_lab::scene::{generate_scene, Ray};
use photon_lab::tracer::{trace_photons, Photon, PhotonDump, PhotonFlags, StoreFilter, TraceConfig};
use photon_lab::{Exec, RngStream, Vec3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalized())
}

fn point() -> impl Strategy<Value = Vec3> {
    (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn cloud(rng: &mut RngStream, n: usize, centre: Vec3, normal: Vec3) -> Vec<Photon> {
    (0..n)
        .map(|_| {
            let offset = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let mut d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized();
            if d.dot(normal) > 0.0 && rng.gen_bool(0.8) {
                d = -d;
            }
            Photon {
                position: centre + offset,
                direction: d,
                flux: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                flags: PhotonFlags::new(false, true, false, 1),
            }
        })
        .collect()
}

fn map_of(photons: Vec<Photon>) -> PhotonMap {
    PhotonMap::build(PhotonDump { photons, emitted: 1000, scene_id: 0, seed: 0 }).unwrap()
}

/// Rotation about `axis` by `angle` (Rodrigues).
fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

fn rel(a: Vec3, b: Vec3) -> f64 {
    let scale = a.max_component().abs().max(b.max_component().abs()).max(1e-300);
    (a - b).to_array().iter().fold(0.0f64, |m, d| m.max(d.abs())) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frames_are_orthonormal_and_invert(n in unit(), o in point(), p in point(), seed in any::<u64>()) {
        let f = Frame::random(o, n, &mut RngStream::new(seed, 0)).unwrap();
        for (a, b) in [(f.tangent, f.bitangent), (f.tangent, f.normal), (f.bitangent, f.normal)] {
            prop_assert!(a.dot(b).abs() < 1e-6);
        }
        for v in [f.tangent, f.bitangent, f.normal] {
            prop_assert!((v.length() - 1.0).abs() < 1e-6);
        }
        prop_assert!((f.tangent.cross(f.bitangent) - f.normal).length() < 1e-6);
        prop_assert!((f.from_local(f.to_local(p)) - p).length() < 1e-6);
    }

    #[test]
    fn knn_is_sorted_and_inside_radius(seed in any::<u64>(), n in 1usize..400, k in 1usize..60, q in point()) {
        let mut rng = RngStream::new(seed, 0);
        let photons: Vec<Photon> = (0..n)
            .map(|_| Photon {
                position: Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                direction: Vec3::new(0.0, -1.0, 0.0),
                flux: Vec3::splat(1.0),
                flags: PhotonFlags::new(false, true, false, 1),
            })
            .collect();
        let map = map_of(photons.clone());
        let nb = map.knn(q, k);
        prop_assert_eq!(nb.k(), k.min(n));
        let d: Vec<f64> = nb.neighbors.iter().map(|m| m.distance).collect();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(nb.r, *d.last().unwrap());
        let mut brute: Vec<(f64, usize)> = photons.iter().enumerate().map(|(i, p)| (p.position.distance_squared(q), i)).collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<usize> = nb.neighbors.iter().map(|m| m.index).collect();
        let want: Vec<usize> = brute[..k.min(n)].iter().map(|b| b.1).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn learned_estimate_ignores_row_order(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = RngStream::new(seed, 0);
        let net = KernelNet::new(32, &mut rng);
        let normal = Vec3::new(0.0, 1.0, 0.0);
        let map = map_of(cloud(&mut rng, n, Vec3::ZERO, normal));
        let sp = ShadingPoint::new(Vec3::ZERO, normal, Vec3::splat(0.6), &mut rng).unwrap();
        let input = preprocess(&map, &sp, &map.knn(sp.position, 32), 32).unwrap();
        prop_assume!(input.k() > 0);
        let base = weighted_estimate(&input, &net.forward(&input), sp.albedo, map.emitted());
        let mut order: Vec<usize> = (0..input.k()).collect();
        order.shuffle(&mut rng);
        let mut shuffled = input.clone();
        for (dst, &src) in order.iter().enumerate() {
            shuffled.rows.row_mut(dst).assign(&input.rows.row(src));
            shuffled.flux[dst] = input.flux[src];
        }
        let other = weighted_estimate(&shuffled, &net.forward(&shuffled), sp.albedo, map.emitted());
        prop_assert!(rel(base, other) < 1e-10, "{:?} vs {:?}", base, other);
    }

    #[test]
    fn learned_estimate_is_rigid_invariant(seed in any::<u64>(), axis in unit(), angle in -3.1f64..3.1, shift in point()) {
        let mut rng = RngStream::new(seed, 0);
        let net = KernelNet::new(24, &mut rng);
        let normal = Vec3::new(0.2, 1.0, -0.1).normalized();
        let photons = cloud(&mut rng, 60, Vec3::ZERO, normal);
        let sp = ShadingPoint::new(Vec3::ZERO, normal, Vec3::splat(0.5), &mut rng).unwrap();
        let base = net.estimate(&map_of(photons.clone()), &sp);
        let moved: Vec<Photon> = photons
            .iter()
            .map(|p| Photon { position: rotate(p.position, axis, angle) + shift, direction: rotate(p.direction, axis, angle), ..*p })
            .collect();
        let sp2 = ShadingPoint::with_tangent(shift, rotate(normal, axis, angle), sp.albedo, rotate(sp.frame.tangent, axis, angle)).unwrap();
        let other = net.estimate(&map_of(moved), &sp2);
        prop_assert!(rel(base, other) < 1e-6, "{:?} vs {:?}", base, other);
    }

    #[test]
    fn learned_estimate_scales_with_inverse_area(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut rng = RngStream::new(seed, 0);
        let net = KernelNet::new(24, &mut rng);
        let normal = Vec3::new(0.0, 0.0, 1.0);
        let centre = Vec3::new(0.4, -0.3, 1.2);
        let photons = cloud(&mut rng, 50, centre, normal);
        let sp = ShadingPoint::new(centre, normal, Vec3::splat(0.5), &mut rng).unwrap();
        let base = net.estimate(&map_of(photons.clone()), &sp);
        let scaled: Vec<Photon> = photons.iter().map(|p| Photon { position: p.position * s, ..*p }).collect();
        let sp2 = ShadingPoint::with_tangent(centre * s, normal, sp.albedo, sp.frame.tangent).unwrap();
        let other = net.estimate(&map_of(scaled), &sp2) * (s * s);
        prop_assert!(rel(base, other) < 1e-6, "{:?} vs {:?}", base, other);
    }

    #[test]
    fn ppm_radius_shrinks_and_count_grows(r0 in 1e-3f64..1.0, passes in prop::collection::vec((0u32..200, 0.0f64..10.0), 1..40), alpha in 0.1f64..1.0) {
        let mut p = PpmPoint::new(r0);
        for (m, flux) in passes {
            let (r2, n) = (p.radius2, p.count);
            p.absorb(m as f64, Vec3::splat(flux), alpha);
            prop_assert!(p.radius2 <= r2);
            prop_assert!(p.count >= n);
            prop_assert!(p.flux.x >= 0.0 && p.flux.x.is_finite());
        }
    }

    #[test]
    fn mu_law_is_monotone_on_unit_interval(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mu_law(lo, 5000.0) <= mu_law(hi, 5000.0));
        prop_assert!((0.0..=1.0).contains(&mu_law(hi, 5000.0)));
    }

    #[test]
    fn adam_ignores_zero_gradient(params in prop::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..5) {
        let mut adam = Adam::new(params.len(), 1e-3);
        let mut p = params.clone();
        for _ in 0..steps {
            adam.update(&mut p, &vec![0.0; params.len()]);
        }
        prop_assert_eq!(p, params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_scenes_are_valid(seed in any::<u64>()) {
        let scene = generate_scene(seed);
        prop_assert!(scene.check_invariants().is_ok());
        let mut rng = RngStream::new(seed, 1);
        let centre = scene.bounds.centroid();
        for _ in 0..200 {
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            prop_assume!(dir.length() > 1e-3);
            let ray = Ray::new(centre, dir.normalized());
            if let Some(hit) = scene.intersect(&ray) {
                prop_assert!(hit.t > 0.0);
                prop_assert!((hit.normal.length() - 1.0).abs() < 1e-6);
                prop_assert!(hit.normal.dot(ray.dir) <= 1e-12);
            }
        }
    }

    #[test]
    fn store_filters_are_nested(seed in 0u64..1000) {
        let scene = generate_scene(seed);
        // Flags differ between filters (path-start marks the first stored
        // photon), so photons are matched by position and flux.
        let trace = |filter| -> HashSet<_> {
            let dump = trace_photons(&scene, &TraceConfig::new(3000, filter, seed), Exec::Sequential).unwrap();
            dump.photons.iter().map(|p| (p.position.to_array().map(f64::to_bits), p.flux.to_array().map(f64::to_bits))).collect()
        };
        let all = trace(StoreFilter::All);
        let indirect = trace(StoreFilter::IndirectOnly);
        let ls = trace(StoreFilter::LsOnly);
        prop_assert!(ls.is_subset(&indirect));
        prop_assert!(indirect.is_subset(&all));
    }
}
