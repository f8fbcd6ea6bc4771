//! Small 3D vector toolkit, orthonormal frames, RNG streams and the
//! sampling routines used for emission and diffuse scattering.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Index, Mul, MulAssign, Neg, Sub};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Vec3 { x: v, y: v, z: v }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.length()
    }

    pub fn distance_squared(self, o: Vec3) -> f64 {
        (self - o).length_squared()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    /// Mirror reflection of an incoming direction about `n`.
    pub fn reflect(self, n: Vec3) -> Vec3 {
        self - n * (2.0 * self.dot(n))
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl MulAssign<f64> for Vec3 {
    fn mul_assign(&mut self, s: f64) {
        *self = *self * s;
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Linear RGB triple (flux, power, albedo or radiance).
pub type Rgb = Vec3;

/// Orthonormal right-handed frame anchored at a surface point.
///
/// The normal is the local `z` axis; tangent and bitangent span the
/// surface plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Vec3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub normal: Vec3,
}

impl Frame {
    /// Builds a frame with a tangent drawn uniformly in the plane
    /// perpendicular to `normal`.
    pub fn random(origin: Vec3, normal: Vec3, rng: &mut RngStream) -> Result<Frame> {
        let n = unit_normal(normal)?;
        let (a, b) = any_orthonormal_pair(n);
        let phi = 2.0 * PI * rng.gen::<f64>();
        let tangent = (a * phi.cos() + b * phi.sin()).normalized();
        Ok(Frame::from_tangent(origin, n, tangent))
    }

    /// Rebuilds a frame from a recorded tangent. The tangent is
    /// re-orthogonalised against the normal.
    pub fn with_tangent(origin: Vec3, normal: Vec3, tangent: Vec3) -> Result<Frame> {
        let n = unit_normal(normal)?;
        let t = tangent - n * tangent.dot(n);
        if !(t.length() > 1e-12) {
            return invalid("tangent is parallel to the normal");
        }
        Ok(Frame::from_tangent(origin, n, t.normalized()))
    }

    fn from_tangent(origin: Vec3, normal: Vec3, tangent: Vec3) -> Frame {
        Frame {
            origin,
            tangent,
            bitangent: normal.cross(tangent),
            normal,
        }
    }

    /// Coordinates of a point relative to the frame.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        self.dir_to_local(p - self.origin)
    }

    /// Rotation-only transform for directions.
    pub fn dir_to_local(&self, d: Vec3) -> Vec3 {
        Vec3::new(d.dot(self.tangent), d.dot(self.bitangent), d.dot(self.normal))
    }

    pub fn from_local(&self, p: Vec3) -> Vec3 {
        self.origin + self.dir_from_local(p)
    }

    pub fn dir_from_local(&self, d: Vec3) -> Vec3 {
        self.tangent * d.x + self.bitangent * d.y + self.normal * d.z
    }
}

fn unit_normal(normal: Vec3) -> Result<Vec3> {
    let len = normal.length();
    if !(len > 1e-12) || !len.is_finite() {
        return invalid("normal has zero length");
    }
    Ok(normal / len)
}

/// Deterministic basis completion (Duff et al. branchless construction).
pub fn any_orthonormal_pair(n: Vec3) -> (Vec3, Vec3) {
    let sign = 1f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        Vec3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

/// Seeded random stream. Equal `(seed, stream)` pairs produce bit-equal
/// sequences; distinct stream ids select independent ChaCha streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream, derived from this stream's identity.
    pub fn fork(&self, child: u64) -> RngStream {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ self.stream.wrapping_add(0xD1B5_4A32_D192_ED03);
        RngStream::new(mixed, child)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Mixes two integers into a well-spread 64-bit seed (splitmix64 finaliser).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cosine-weighted direction about +z, pdf `cos(theta) / pi`.
pub fn sample_cosine_hemisphere(rng: &mut impl Rng) -> Vec3 {
    let (x, y) = sample_disk(rng);
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    Vec3::new(x, y, z)
}

/// Uniform point on the unit disk (concentric mapping).
pub fn sample_disk(rng: &mut impl Rng) -> (f64, f64) {
    let u = 2.0 * rng.gen::<f64>() - 1.0;
    let v = 2.0 * rng.gen::<f64>() - 1.0;
    if u == 0.0 && v == 0.0 {
        return (0.0, 0.0);
    }
    let (r, theta) = if u.abs() > v.abs() {
        (u, PI / 4.0 * (v / u))
    } else {
        (v, PI / 2.0 - PI / 4.0 * (u / v))
    };
    (r * theta.cos(), r * theta.sin())
}

/// Uniform point on the parallelogram `corner + s*e1 + t*e2`.
pub fn sample_rect(rng: &mut impl Rng, corner: Vec3, e1: Vec3, e2: Vec3) -> Vec3 {
    let s: f64 = rng.gen();
    let t: f64 = rng.gen();
    corner + e1 * s + e2 * t
}

/// Uniform point on a triangle.
pub fn sample_triangle(rng: &mut impl Rng, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    let su = u.sqrt();
    a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
}

/// Uniform direction on the unit sphere.
pub fn sample_sphere(rng: &mut impl Rng) -> Vec3 {
    let z = 1.0 - 2.0 * rng.gen::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * rng.gen::<f64>();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_rotation(rng: &mut RngStream) -> Frame {
        let n = sample_sphere(rng);
        Frame::random(Vec3::ZERO, n, rng).unwrap()
    }

    #[test]
    fn frame_is_orthonormal_and_right_handed() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..100_000 {
            let n = sample_sphere(&mut rng);
            let f = Frame::random(Vec3::new(1.0, 2.0, 3.0), n, &mut rng).unwrap();
            assert!(f.tangent.dot(f.normal).abs() < 1e-6);
            assert!(f.bitangent.dot(f.normal).abs() < 1e-6);
            assert!(f.tangent.dot(f.bitangent).abs() < 1e-6);
            assert!((f.tangent.length() - 1.0).abs() < 1e-6);
            assert!((f.bitangent.length() - 1.0).abs() < 1e-6);
            assert!((f.tangent.cross(f.bitangent) - f.normal).length() < 1e-6);
        }
    }

    #[test]
    fn frame_examples() {
        let mut rng = RngStream::new(7, 3);
        let f = Frame::random(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), &mut rng).unwrap();
        assert_eq!(f.tangent.dot(f.normal), 0.0);
        assert!((f.tangent.length() - 1.0).abs() < 1e-12);

        let f = Frame::random(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), &mut rng).unwrap();
        assert!((f.bitangent - f.normal.cross(f.tangent)).length() < 1e-6);

        let a = Frame::random(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), &mut RngStream::new(5, 9)).unwrap();
        let b = Frame::random(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), &mut RngStream::new(5, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_normal_is_rejected() {
        let mut rng = RngStream::new(0, 0);
        assert!(Frame::random(Vec3::ZERO, Vec3::ZERO, &mut rng).is_err());
    }

    #[test]
    fn to_local_basics() {
        let mut rng = RngStream::new(11, 0);
        let origin = Vec3::new(0.3, -2.0, 5.0);
        let n = Vec3::new(1.0, 1.0, -0.5).normalized();
        let f = Frame::random(origin, n, &mut rng).unwrap();
        assert_eq!(f.to_local(origin), Vec3::ZERO);
        let z = f.to_local(origin + n);
        assert!((z - Vec3::new(0.0, 0.0, 1.0)).length() < 1e-12);
    }

    #[test]
    fn to_local_is_rigid_invariant() {
        let mut rng = RngStream::new(12, 0);
        for _ in 0..1000 {
            let origin = sample_sphere(&mut rng) * 3.0;
            let f = Frame::random(origin, sample_sphere(&mut rng), &mut rng).unwrap();
            let p = origin + sample_sphere(&mut rng) * 0.7;
            let rot = random_rotation(&mut rng);
            let shift = sample_sphere(&mut rng) * 10.0;
            let xf = |v: Vec3| rot.dir_from_local(v) + shift;
            let moved = Frame {
                origin: xf(f.origin),
                tangent: rot.dir_from_local(f.tangent),
                bitangent: rot.dir_from_local(f.bitangent),
                normal: rot.dir_from_local(f.normal),
            };
            assert!((f.to_local(p) - moved.to_local(xf(p))).length() < 1e-6);
        }
    }

    #[test]
    fn local_roundtrip() {
        let mut rng = RngStream::new(13, 0);
        for _ in 0..1000 {
            let f = Frame::random(sample_sphere(&mut rng), sample_sphere(&mut rng), &mut rng).unwrap();
            let p = sample_sphere(&mut rng) * 4.0;
            assert!((f.from_local(f.to_local(p)) - p).length() < 1e-6);
        }
    }

    #[test]
    fn rng_streams_reproduce_and_differ() {
        let mut a = RngStream::new(42, 1);
        let mut b = RngStream::new(42, 1);
        let mut c = RngStream::new(42, 2);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..64).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn cosine_hemisphere_moments() {
        let mut rng = RngStream::new(3, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = sample_cosine_hemisphere(&mut rng);
            assert!(d.z >= 0.0);
            assert!((d.length() - 1.0).abs() < 1e-9);
            sum += d.z;
        }
        // E[cos] under cos/pi density is 2/3.
        assert!((sum / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn disk_samples_are_uniform() {
        // 8 rings of equal area x 8 sectors; chi-square with 63 dof,
        // critical value at p = 0.01 is 92.01.
        let mut rng = RngStream::new(4, 0);
        let n = 200_000;
        let mut bins = [0usize; 64];
        for _ in 0..n {
            let (x, y) = sample_disk(&mut rng);
            let r2 = x * x + y * y;
            assert!(r2 <= 1.0 + 1e-12);
            let ring = ((r2 * 8.0) as usize).min(7);
            let ang = y.atan2(x) + PI;
            let sector = ((ang / (2.0 * PI) * 8.0) as usize).min(7);
            bins[ring * 8 + sector] += 1;
        }
        let expected = n as f64 / 64.0;
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 92.01, "chi2 = {chi2}");
    }

    #[test]
    fn area_samples_stay_on_shape() {
        let mut rng = RngStream::new(5, 0);
        let (a, b, c) = (Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        for _ in 0..1000 {
            let p = sample_triangle(&mut rng, a, b, c);
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-12 && p.z == 0.0);
            let q = sample_rect(&mut rng, a, b, c * 2.0);
            assert!((0.0..=1.0).contains(&q.x) && (0.0..=2.0).contains(&q.y));
        }
    }
}
