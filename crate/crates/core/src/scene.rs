//! Scene description, ray intersection and the procedural room generator.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{any_orthonormal_pair, sample_sphere, Rgb, RngStream, Vec3};

/// Minimum accepted hit distance (scene units).
pub const RAY_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Material {
    Diffuse {
        #[serde(with = "vec3_array")]
        albedo: Rgb,
    },
    Mirror,
    Dielectric { ior: f64 },
}

impl Material {
    pub fn is_diffuse(&self) -> bool {
        matches!(self, Material::Diffuse { .. })
    }

    pub fn is_specular(&self) -> bool {
        !self.is_diffuse()
    }

    pub fn albedo(&self) -> Option<Rgb> {
        match *self {
            Material::Diffuse { albedo } => Some(albedo),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Material::Diffuse { albedo } => {
                if albedo.to_array().iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return invalid(format!("albedo {albedo:?} outside [0,1]"));
                }
            }
            Material::Mirror => {}
            Material::Dielectric { ior } => {
                if !(ior > 1.0) {
                    return invalid(format!("dielectric ior {ior} must exceed 1"));
                }
            }
        }
        Ok(())
    }
}

/// One-sided rectangular emitter. Emission leaves along `edge1 x edge2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaLight {
    #[serde(with = "vec3_array")]
    pub corner: Vec3,
    #[serde(with = "vec3_array")]
    pub edge1: Vec3,
    #[serde(with = "vec3_array")]
    pub edge2: Vec3,
    #[serde(with = "vec3_array")]
    pub power: Rgb,
}

impl AreaLight {
    pub fn area(&self) -> f64 {
        self.edge1.cross(self.edge2).length()
    }

    pub fn normal(&self) -> Vec3 {
        self.edge1.cross(self.edge2).normalized()
    }

    fn validate(&self) -> Result<()> {
        if self.power.to_array().iter().any(|c| !(*c >= 0.0)) {
            return invalid("light power must be non-negative");
        }
        if !(self.area() > 0.0) {
            return invalid("light has zero area");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        #[serde(with = "vec3_array")]
        center: Vec3,
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        #[serde(with = "vec3_array")]
        min: Vec3,
        #[serde(with = "vec3_array")]
        max: Vec3,
    },
    /// Two-sided parallelogram `corner + s*edge1 + t*edge2`, `s,t in [0,1]`.
    Rect {
        #[serde(with = "vec3_array")]
        corner: Vec3,
        #[serde(with = "vec3_array")]
        edge1: Vec3,
        #[serde(with = "vec3_array")]
        edge2: Vec3,
    },
    /// Triangle mesh; counter-clockwise winding faces outward.
    Mesh {
        #[serde(with = "vec3_list")]
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    #[serde(with = "vec3_array")]
    pub position: Vec3,
    #[serde(with = "vec3_array")]
    pub look_at: Vec3,
    #[serde(with = "vec3_array")]
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov: f64,
}

impl Camera {
    /// Primary ray through the centre of pixel `(px, py)`; `py = 0` is the top row.
    pub fn ray(&self, px: usize, py: usize, width: usize, height: usize) -> Ray {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        let half_h = (self.fov.to_radians() * 0.5).tan();
        let half_w = half_h * width as f64 / height as f64;
        let sx = ((px as f64 + 0.5) / width as f64 * 2.0 - 1.0) * half_w;
        let sy = (1.0 - (py as f64 + 0.5) / height as f64 * 2.0) * half_h;
        Ray::new(self.position, forward + right * sx + up * sy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    /// Builds a ray, normalising the direction.
    pub fn new(origin: Vec3, dir: Vec3) -> Ray {
        Ray { origin, dir: dir.normalized() }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub t: f64,
    pub position: Vec3,
    /// Unit geometric normal, flipped to face the incoming ray.
    pub normal: Vec3,
    /// True when the ray hit the outward-facing side.
    pub front_face: bool,
    pub primitive: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::splat(f64::INFINITY),
        max: Vec3::splat(f64::NEG_INFINITY),
    };

    pub fn union(self, o: Aabb) -> Aabb {
        Aabb { min: self.min.min(o.min), max: self.max.max(o.max) }
    }

    pub fn grow(self, p: Vec3) -> Aabb {
        Aabb { min: self.min.min(p), max: self.max.max(p) }
    }

    pub fn contains(&self, o: &Aabb, slack: f64) -> bool {
        (0..3).all(|a| o.min[a] >= self.min[a] - slack && o.max[a] <= self.max[a] + slack)
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).length()
    }

    fn hit(&self, origin: Vec3, inv_dir: Vec3, t_max: f64) -> bool {
        let mut t0 = RAY_EPSILON.min(0.0);
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.min[a] - origin[a]) * inv_dir[a];
            let mut far = (self.max[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0 * inf keeps the slab open
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Whole(u32),
    Triangle(u32, u32),
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, first: u32, count: u32 },
    Inner { bounds: Aabb, right: u32, axis: u8 },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Bvh {
    nodes: Vec<Node>,
    items: Vec<Item>,
}

const BVH_LEAF: usize = 4;

impl Bvh {
    fn build(primitives: &[Primitive]) -> Bvh {
        let mut items = Vec::new();
        let mut boxes = Vec::new();
        for (pi, prim) in primitives.iter().enumerate() {
            match &prim.shape {
                Shape::Mesh { vertices, triangles } => {
                    for (ti, tri) in triangles.iter().enumerate() {
                        let b = tri.iter().fold(Aabb::EMPTY, |b, &v| b.grow(vertices[v as usize]));
                        items.push(Item::Triangle(pi as u32, ti as u32));
                        boxes.push(b);
                    }
                }
                shape => {
                    items.push(Item::Whole(pi as u32));
                    boxes.push(shape_bounds(shape));
                }
            }
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut bvh = Bvh::default();
        if !order.is_empty() {
            bvh.split(&boxes, &mut order);
        }
        bvh.items = order.iter().map(|&i| items[i]).collect();
        bvh
    }

    // Builds the subtree over `order` (a window into the global order, whose
    // offset is tracked by the leaf cursor) and returns its node index.
    fn split(&mut self, boxes: &[Aabb], order: &mut [usize]) -> u32 {
        let mut cursor = 0u32;
        self.split_rec(boxes, order, &mut cursor)
    }

    fn split_rec(&mut self, boxes: &[Aabb], order: &mut [usize], cursor: &mut u32) -> u32 {
        let bounds = order.iter().fold(Aabb::EMPTY, |b, &i| b.union(boxes[i]));
        let idx = self.nodes.len() as u32;
        if order.len() <= BVH_LEAF {
            self.nodes.push(Node::Leaf { bounds, first: *cursor, count: order.len() as u32 });
            *cursor += order.len() as u32;
            return idx;
        }
        let cb = order.iter().fold(Aabb::EMPTY, |b, &i| b.grow(boxes[i].centroid()));
        let ext = cb.max - cb.min;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            boxes[a].centroid()[axis]
                .total_cmp(&boxes[b].centroid()[axis])
                .then(a.cmp(&b))
        });
        self.nodes.push(Node::Inner { bounds, right: 0, axis: axis as u8 });
        let (lo, hi) = order.split_at_mut(mid);
        self.split_rec(boxes, lo, cursor);
        let right = self.split_rec(boxes, hi, cursor);
        if let Node::Inner { right: r, .. } = &mut self.nodes[idx as usize] {
            *r = right;
        }
        idx
    }
}

/// Immutable scene with a bounding-volume hierarchy for ray casts.
#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub lights: Vec<AreaLight>,
    pub camera: Camera,
    pub bounds: Aabb,
    bvh: Bvh,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    camera: Camera,
    #[serde(default)]
    lights: Vec<AreaLight>,
    #[serde(default)]
    primitives: Vec<Primitive>,
}

impl Scene {
    /// Validates materials, lights and meshes and builds the BVH. The
    /// bounds are the union of all primitive and light extents.
    pub fn new(primitives: Vec<Primitive>, lights: Vec<AreaLight>, camera: Camera) -> Result<Scene> {
        for p in &primitives {
            p.material.validate()?;
            validate_shape(&p.shape)?;
        }
        for l in &lights {
            l.validate()?;
        }
        let mut bounds = primitives.iter().fold(Aabb::EMPTY, |b, p| b.union(shape_bounds(&p.shape)));
        for l in &lights {
            for c in [l.corner, l.corner + l.edge1, l.corner + l.edge2, l.corner + l.edge1 + l.edge2] {
                bounds = bounds.grow(c);
            }
        }
        let bvh = Bvh::build(&primitives);
        Ok(Scene { primitives, lights, camera, bounds, bvh })
    }

    pub fn material(&self, hit: &Intersection) -> &Material {
        &self.primitives[hit.primitive].material
    }

    /// Scene invariants: at least one light and every primitive inside the bounds.
    pub fn check_invariants(&self) -> Result<()> {
        if self.lights.is_empty() {
            return invalid("scene has no lights");
        }
        for p in &self.primitives {
            if !self.bounds.contains(&shape_bounds(&p.shape), 1e-9) {
                return invalid("primitive outside scene bounds");
            }
        }
        Ok(())
    }

    pub fn total_emitted_power(&self) -> Rgb {
        self.lights.iter().fold(Vec3::ZERO, |acc, l| acc + l.power)
    }

    /// Nearest hit with `t > RAY_EPSILON`.
    pub fn intersect(&self, ray: &Ray) -> Option<Intersection> {
        if self.bvh.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best: Option<(f64, usize, Vec3)> = None;
        let mut t_max = f64::INFINITY;
        let mut stack = [0u32; 64];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            let node = &self.bvh.nodes[stack[sp] as usize];
            if !node.bounds().hit(ray.origin, inv, t_max) {
                continue;
            }
            match *node {
                Node::Leaf { first, count, .. } => {
                    for item in &self.bvh.items[first as usize..(first + count) as usize] {
                        let hit = match *item {
                            Item::Whole(p) => {
                                hit_shape(&self.primitives[p as usize].shape, ray, t_max).map(|h| (h, p))
                            }
                            Item::Triangle(p, t) => match &self.primitives[p as usize].shape {
                                Shape::Mesh { vertices, triangles } => {
                                    hit_triangle(vertices, triangles[t as usize], ray, t_max).map(|h| (h, p))
                                }
                                _ => unreachable!(),
                            },
                        };
                        if let Some(((t, n), p)) = hit {
                            t_max = t;
                            best = Some((t, p as usize, n));
                        }
                    }
                }
                Node::Inner { right, axis, .. } => {
                    let left = stack[sp] + 1;
                    // near child last so it is popped first
                    if ray.dir[axis as usize] < 0.0 {
                        stack[sp] = left;
                        stack[sp + 1] = right;
                    } else {
                        stack[sp] = right;
                        stack[sp + 1] = left;
                    }
                    sp += 2;
                }
            }
        }
        best.map(|(t, p, n)| make_hit(ray, t, n, p))
    }

    /// Linear scan over every primitive. Reference for [`Scene::intersect`].
    pub fn intersect_brute(&self, ray: &Ray) -> Option<Intersection> {
        let mut best: Option<(f64, usize, Vec3)> = None;
        for (pi, p) in self.primitives.iter().enumerate() {
            let t_max = best.map_or(f64::INFINITY, |b| b.0);
            let hit = match &p.shape {
                Shape::Mesh { vertices, triangles } => {
                    let mut local: Option<(f64, Vec3)> = None;
                    for &tri in triangles {
                        let lim = local.map_or(t_max, |l| l.0);
                        if let Some(h) = hit_triangle(vertices, tri, ray, lim) {
                            local = Some(h);
                        }
                    }
                    local
                }
                shape => hit_shape(shape, ray, t_max),
            };
            if let Some((t, n)) = hit {
                best = Some((t, pi, n));
            }
        }
        best.map(|(t, p, n)| make_hit(ray, t, n, p))
    }

    /// Follows a camera ray through mirrors and dielectrics (always taking
    /// the transmitted branch unless totally reflected) until it reaches a
    /// diffuse surface.
    pub fn first_diffuse_hit(&self, ray: &Ray, max_depth: usize) -> Option<Intersection> {
        let mut ray = *ray;
        for _ in 0..max_depth {
            let hit = self.intersect(&ray)?;
            match *self.material(&hit) {
                Material::Diffuse { .. } => return Some(hit),
                Material::Mirror => ray = Ray::new(hit.position, ray.dir.reflect(hit.normal)),
                Material::Dielectric { ior } => {
                    let eta = if hit.front_face { 1.0 / ior } else { ior };
                    let dir = refract(ray.dir, hit.normal, eta).unwrap_or_else(|| ray.dir.reflect(hit.normal));
                    ray = Ray::new(hit.position, dir);
                }
            }
        }
        None
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path)?;
        Scene::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Scene> {
        let file: SceneFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        Scene::new(file.primitives, file.lights, file.camera)
    }

    pub fn to_text(&self) -> String {
        let file = SceneFile {
            camera: self.camera,
            lights: self.lights.clone(),
            primitives: self.primitives.clone(),
        };
        toml::to_string(&file).expect("scene serialisation cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn make_hit(ray: &Ray, t: f64, outward: Vec3, primitive: usize) -> Intersection {
    let front_face = ray.dir.dot(outward) < 0.0;
    Intersection {
        t,
        position: ray.at(t),
        normal: if front_face { outward } else { -outward },
        front_face,
        primitive,
    }
}

/// Snell refraction of unit `d` through a surface with normal `n` facing
/// the incoming ray; `eta` is the ratio of indices (incident / transmitted).
pub fn refract(d: Vec3, n: Vec3, eta: f64) -> Option<Vec3> {
    let cos_i = -d.dot(n);
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i).max(0.0);
    if sin2_t > 1.0 {
        return None;
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    Some((d * eta + n * (eta * cos_i - cos_t)).normalized())
}

/// Schlick's approximation of Fresnel reflectance.
pub fn schlick(cos_i: f64, eta: f64) -> f64 {
    let r0 = ((1.0 - eta) / (1.0 + eta)).powi(2);
    r0 + (1.0 - r0) * (1.0 - cos_i).max(0.0).powi(5)
}

fn validate_shape(shape: &Shape) -> Result<()> {
    match shape {
        Shape::Sphere { radius, .. } if !(*radius > 0.0) => invalid("sphere radius must be positive"),
        Shape::Box { min, max } if (0..3).any(|a| !(max[a] > min[a])) => invalid("box has empty extent"),
        Shape::Rect { edge1, edge2, .. } if !(edge1.cross(*edge2).length() > 0.0) => invalid("rect has zero area"),
        Shape::Mesh { vertices, triangles } => {
            if triangles.iter().flatten().any(|&v| v as usize >= vertices.len()) {
                return invalid("mesh triangle references a missing vertex");
            }
            if triangles.is_empty() {
                return invalid("mesh has no triangles");
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

pub fn shape_bounds(shape: &Shape) -> Aabb {
    match shape {
        Shape::Sphere { center, radius } => Aabb {
            min: *center - Vec3::splat(*radius),
            max: *center + Vec3::splat(*radius),
        },
        Shape::Box { min, max } => Aabb { min: *min, max: *max },
        Shape::Rect { corner, edge1, edge2 } => Aabb::EMPTY
            .grow(*corner)
            .grow(*corner + *edge1)
            .grow(*corner + *edge2)
            .grow(*corner + *edge1 + *edge2),
        Shape::Mesh { vertices, .. } => vertices.iter().fold(Aabb::EMPTY, |b, &v| b.grow(v)),
    }
}

/// Returns `(t, outward normal)` for the nearest hit in `(RAY_EPSILON, t_max)`.
fn hit_shape(shape: &Shape, ray: &Ray, t_max: f64) -> Option<(f64, Vec3)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = ray.origin - center;
            let b = oc.dot(ray.dir);
            let c = oc.length_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-b - sq, -b + sq].into_iter().find(|&t| t > RAY_EPSILON && t < t_max)?;
            Some((t, (ray.at(t) - center) / radius))
        }
        Shape::Box { min, max } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis0 = 0;
            let mut axis1 = 0;
            for a in 0..3 {
                let inv = 1.0 / ray.dir[a];
                let (mut near, mut far) = ((min[a] - ray.origin[a]) * inv, (max[a] - ray.origin[a]) * inv);
                if near > far {
                    std::mem::swap(&mut near, &mut far);
                }
                if near.is_nan() || far.is_nan() {
                    // parallel ray exactly on a slab plane
                    if ray.origin[a] < min[a] || ray.origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                if near > t0 {
                    t0 = near;
                    axis0 = a;
                }
                if far < t1 {
                    t1 = far;
                    axis1 = a;
                }
            }
            if t0 > t1 {
                return None;
            }
            let (t, axis) = if t0 > RAY_EPSILON {
                (t0, axis0)
            } else if t1 > RAY_EPSILON {
                (t1, axis1)
            } else {
                return None;
            };
            if t >= t_max {
                return None;
            }
            let p = ray.at(t);
            let mut n = Vec3::ZERO;
            let c = (min[axis] + max[axis]) * 0.5;
            let s = if p[axis] > c { 1.0 } else { -1.0 };
            match axis {
                0 => n.x = s,
                1 => n.y = s,
                _ => n.z = s,
            }
            Some((t, n))
        }
        Shape::Rect { corner, edge1, edge2 } => {
            let n = edge1.cross(edge2);
            let denom = n.dot(ray.dir);
            if denom == 0.0 {
                return None;
            }
            let t = n.dot(corner - ray.origin) / denom;
            if !(t > RAY_EPSILON && t < t_max) {
                return None;
            }
            let d = ray.at(t) - corner;
            // barycentric-style coordinates for a parallelogram
            let e11 = edge1.dot(edge1);
            let e22 = edge2.dot(edge2);
            let e12 = edge1.dot(edge2);
            let d1 = d.dot(edge1);
            let d2 = d.dot(edge2);
            let det = e11 * e22 - e12 * e12;
            let s = (d1 * e22 - d2 * e12) / det;
            let u = (d2 * e11 - d1 * e12) / det;
            if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&u) {
                return None;
            }
            Some((t, n.normalized()))
        }
        Shape::Mesh { .. } => unreachable!("meshes are intersected per triangle"),
    }
}

fn hit_triangle(vertices: &[Vec3], tri: [u32; 3], ray: &Ray, t_max: f64) -> Option<(f64, Vec3)> {
    let a = vertices[tri[0] as usize];
    let b = vertices[tri[1] as usize];
    let c = vertices[tri[2] as usize];
    let e1 = b - a;
    let e2 = c - a;
    let p = ray.dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - a;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    if !(t > RAY_EPSILON && t < t_max) {
        return None;
    }
    Some((t, e1.cross(e2).normalized()))
}

/// Tunables for [`generate_scene`]. Light count is not fixed by any
/// reference; 1 to 4 lights is the default.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub room: Vec3,
    pub max_objects: usize,
    pub lights: (usize, usize),
    pub light_power: (f64, f64),
    pub subdivisions: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            room: Vec3::new(4.0, 3.0, 4.0),
            max_objects: 16,
            lights: (1, 4),
            light_power: (8.0, 20.0),
            subdivisions: 2,
        }
    }
}

/// Procedural training room: a closed diffuse box holding 1-16 random
/// shapes on a jittered floor grid, lit by tilted rectangular lights.
pub fn generate_scene(seed: u64) -> Scene {
    generate_scene_with(seed, &GeneratorConfig::default())
}

pub fn generate_scene_with(seed: u64, cfg: &GeneratorConfig) -> Scene {
    let mut rng = RngStream::new(seed, 0x5CE4E);
    let room = cfg.room;
    let mut primitives = room_walls(room, &mut rng);

    let count = rng.gen_range(1..=cfg.max_objects);
    let grid = (count as f64).sqrt().ceil() as usize;
    let margin = 0.4;
    let cell = Vec3::new((room.x - 2.0 * margin) / grid as f64, 0.0, (room.z - 2.0 * margin) / grid as f64);
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(&mut rng);

    let mut specular = vec![false; count];
    loop {
        for s in specular.iter_mut() {
            *s = rng.gen_bool(0.5);
        }
        if count < 2 || (specular.iter().any(|&s| s) && specular.iter().any(|&s| !s)) {
            break;
        }
    }

    for (i, &c) in cells.iter().take(count).enumerate() {
        let (gx, gz) = (c % grid, c / grid);
        let half = 0.5 * cell.x.min(cell.z);
        let size = (half * rng.gen_range(0.45..0.85)).min(0.8);
        let jitter = (half - size) * 0.9;
        let cx = margin + (gx as f64 + 0.5) * cell.x + rng.gen_range(-jitter..=jitter);
        let cz = margin + (gz as f64 + 0.5) * cell.z + rng.gen_range(-jitter..=jitter);
        let lift: f64 = if rng.gen_bool(0.3) { rng.gen_range(0.0..0.6) } else { 0.0 };
        // keep objects well below the lights
        let lift = lift.min(room.y * 0.63 - 2.0 * size).max(0.0);
        let center = Vec3::new(cx, size + lift, cz);
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Sphere { center, radius: size },
            1 => {
                let h = Vec3::new(size * rng.gen_range(0.6..1.0), size, size * rng.gen_range(0.6..1.0));
                Shape::Box { min: center - h, max: center + h }
            }
            _ => bumpy_sphere(center, size, cfg.subdivisions, &mut rng),
        };
        let material = if specular[i] {
            if rng.gen_bool(0.5) {
                Material::Mirror
            } else {
                Material::Dielectric { ior: rng.gen_range(1.3..1.8) }
            }
        } else {
            Material::Diffuse { albedo: random_albedo(&mut rng, 0.2, 0.9) }
        };
        primitives.push(Primitive { shape, material });
    }

    let n_lights = rng.gen_range(cfg.lights.0..=cfg.lights.1);
    let lights = (0..n_lights)
        .map(|_| {
            let w: f64 = rng.gen_range(0.3..0.8);
            let h: f64 = rng.gen_range(0.3..0.8);
            let tilt: f64 = rng.gen_range(0.0..0.7);
            let azimuth: f64 = rng.gen_range(0.0..2.0 * PI);
            let normal = Vec3::new(tilt.sin() * azimuth.cos(), -tilt.cos(), tilt.sin() * azimuth.sin());
            let (a, b) = any_orthonormal_pair(normal);
            let spin: f64 = rng.gen_range(0.0..2.0 * PI);
            let u = a * spin.cos() + b * spin.sin();
            let v = normal.cross(u);
            let reach = 0.5 * (w * w + h * h).sqrt() + 0.1;
            let centre = Vec3::new(
                rng.gen_range(reach..room.x - reach),
                room.y - reach,
                rng.gen_range(reach..room.z - reach),
            );
            // edge1 x edge2 must point along `normal`
            let (e1, e2) = (u * w, v * h);
            let (e1, e2) = if e1.cross(e2).dot(normal) > 0.0 { (e1, e2) } else { (e2, e1) };
            let power = rng.gen_range(cfg.light_power.0..cfg.light_power.1);
            let tint = random_albedo(&mut rng, 0.7, 1.0);
            AreaLight {
                corner: centre - e1 * 0.5 - e2 * 0.5,
                edge1: e1,
                edge2: e2,
                power: tint * (power / tint.max_component()),
            }
        })
        .collect();

    let camera = Camera {
        position: Vec3::new(room.x * 0.5, room.y * 0.55, room.z - 0.05),
        look_at: Vec3::new(room.x * 0.5, room.y * 0.25, room.z * 0.3),
        up: Vec3::new(0.0, 1.0, 0.0),
        fov: 65.0,
    };
    Scene::new(primitives, lights, camera).expect("generator produces valid scenes")
}

fn random_albedo(rng: &mut RngStream, lo: f64, hi: f64) -> Rgb {
    Vec3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

fn room_walls(room: Vec3, rng: &mut RngStream) -> Vec<Primitive> {
    let o = Vec3::ZERO;
    let x = Vec3::new(room.x, 0.0, 0.0);
    let y = Vec3::new(0.0, room.y, 0.0);
    let z = Vec3::new(0.0, 0.0, room.z);
    let rects = [
        (o, x, z),     // floor
        (o + y, z, x), // ceiling
        (o, y, x),     // back wall
        (o + z, x, y), // front wall
        (o, z, y),     // left
        (o + x, y, z), // right
    ];
    rects
        .into_iter()
        .map(|(corner, edge1, edge2)| {
            let grey = rng.gen_range(0.4..0.8);
            let tint = random_albedo(rng, 0.85, 1.0);
            Primitive {
                shape: Shape::Rect { corner, edge1, edge2 },
                material: Material::Diffuse { albedo: tint * grey },
            }
        })
        .collect()
}

/// Icosphere with low-frequency random radial displacement.
pub fn bumpy_sphere(center: Vec3, radius: f64, subdivisions: usize, rng: &mut RngStream) -> Shape {
    let (unit, triangles) = icosphere(subdivisions);
    let waves: Vec<(Vec3, f64, f64)> = (0..4)
        .map(|_| (sample_sphere(rng), rng.gen_range(1.0..4.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let amp = rng.gen_range(0.03..0.12);
    let vertices = unit
        .iter()
        .map(|&v| {
            let bump: f64 = waves.iter().map(|(d, f, ph)| (v.dot(*d) * f * PI + ph).sin()).sum::<f64>() / 4.0;
            center + v * (radius * (1.0 - amp + amp * bump))
        })
        .collect();
    Shape::Mesh { vertices, triangles }
}

/// Unit icosphere with outward counter-clockwise winding.
pub fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalized())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalized());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    (verts, tris)
}

/// Scenes with known answers, used by tests and the self-test command.
pub mod fixtures {
    use super::*;

    fn top_down_camera(height: f64) -> Camera {
        Camera {
            position: Vec3::new(0.0, height, 0.0),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 0.0, -1.0),
            fov: 60.0,
        }
    }

    /// Square downward-facing light of side `size`, centred `height` above
    /// the origin, over a diffuse floor square of half-width `floor_half`
    /// in the `y = 0` plane.
    pub fn flat_floor(size: f64, height: f64, power: f64, albedo: f64, floor_half: f64) -> Scene {
        let floor = Primitive {
            shape: Shape::Rect {
                corner: Vec3::new(-floor_half, 0.0, -floor_half),
                edge1: Vec3::new(0.0, 0.0, 2.0 * floor_half),
                edge2: Vec3::new(2.0 * floor_half, 0.0, 0.0),
            },
            material: Material::Diffuse { albedo: Vec3::splat(albedo) },
        };
        let light = AreaLight {
            corner: Vec3::new(-size / 2.0, height, -size / 2.0),
            edge1: Vec3::new(size, 0.0, 0.0),
            edge2: Vec3::new(0.0, 0.0, size),
            power: Vec3::splat(power),
        };
        debug_assert!(light.normal().y < 0.0);
        Scene::new(vec![floor], vec![light], top_down_camera(2.0)).expect("valid fixture")
    }

    /// Closed white box (albedo 1) with a light inside: no energy leaves.
    pub fn white_furnace() -> Scene {
        let mut rng = RngStream::new(0, 0);
        let mut prims = room_walls(Vec3::splat(2.0), &mut rng);
        for p in &mut prims {
            p.material = Material::Diffuse { albedo: Vec3::splat(1.0) };
        }
        let light = AreaLight {
            corner: Vec3::new(0.8, 1.9, 0.8),
            edge1: Vec3::new(0.4, 0.0, 0.0),
            edge2: Vec3::new(0.0, 0.0, 0.4),
            power: Vec3::splat(10.0),
        };
        let mut cam = top_down_camera(1.9);
        cam.position = Vec3::new(1.0, 1.9, 1.0);
        cam.look_at = Vec3::new(1.0, 0.0, 1.0);
        Scene::new(prims, vec![light], cam).expect("valid fixture")
    }

    /// Light inside a mirrored box: nothing diffuse anywhere.
    pub fn mirror_box() -> Scene {
        let mut rng = RngStream::new(0, 0);
        let mut prims = room_walls(Vec3::splat(2.0), &mut rng);
        for p in &mut prims {
            p.material = Material::Mirror;
        }
        prims.push(Primitive {
            shape: Shape::Sphere { center: Vec3::new(1.0, 0.5, 1.0), radius: 0.3 },
            material: Material::Mirror,
        });
        let light = AreaLight {
            corner: Vec3::new(0.8, 1.9, 0.8),
            edge1: Vec3::new(0.4, 0.0, 0.0),
            edge2: Vec3::new(0.0, 0.0, 0.4),
            power: Vec3::splat(10.0),
        };
        let mut cam = top_down_camera(1.9);
        cam.position = Vec3::new(1.0, 1.5, 1.0);
        cam.look_at = Vec3::new(1.0, 0.0, 1.0);
        Scene::new(prims, vec![light], cam).expect("valid fixture")
    }

    /// Glass ball hovering over a diffuse floor under a small light.
    pub fn glass_sphere_over_floor() -> Scene {
        let mut scene = flat_floor(0.5, 2.0, 20.0, 0.8, 3.0);
        let mut prims = scene.primitives.clone();
        prims.push(Primitive {
            shape: Shape::Sphere { center: Vec3::new(0.0, 0.8, 0.0), radius: 0.4 },
            material: Material::Dielectric { ior: 1.5 },
        });
        scene = Scene::new(prims, scene.lights.clone(), scene.camera).expect("valid fixture");
        scene
    }
}

mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        v.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        <[f64; 3]>::deserialize(d).map(Vec3::from_array)
    }
}

mod vec3_list {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec3], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|p| p.to_array()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec3>, D::Error> {
        Ok(Vec::<[f64; 3]>::deserialize(d)?.into_iter().map(Vec3::from_array).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere_scene() -> Scene {
        let prim = Primitive {
            shape: Shape::Sphere { center: Vec3::new(1.0, 2.0, 3.0), radius: 0.75 },
            material: Material::Mirror,
        };
        Scene::new(vec![prim], vec![], fixtures::flat_floor(1.0, 1.0, 1.0, 0.5, 1.0).camera).unwrap()
    }

    #[test]
    fn ray_from_sphere_centre_hits_at_radius() {
        let scene = unit_sphere_scene();
        let mut rng = RngStream::new(1, 0);
        for _ in 0..100 {
            let ray = Ray::new(Vec3::new(1.0, 2.0, 3.0), sample_sphere(&mut rng));
            let hit = scene.intersect(&ray).unwrap();
            assert!((hit.t - 0.75).abs() < 1e-12);
            assert!(!hit.front_face);
            assert!(hit.normal.dot(ray.dir) <= 0.0);
        }
    }

    #[test]
    fn parallel_ray_misses_plane() {
        let scene = fixtures::flat_floor(1.0, 1.0, 1.0, 0.5, 2.0);
        let ray = Ray::new(Vec3::new(0.0, 0.5, 0.0), Vec3::new(1.0, 0.0, 0.3));
        assert!(scene.intersect(&ray).is_none());
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut rng = RngStream::new(99, 0);
        let mut ties = 0;
        for seed in 0..10 {
            let scene = generate_scene(seed);
            let c = scene.bounds.centroid();
            for _ in 0..1000 {
                let o = c + sample_sphere(&mut rng).mul_elem(Vec3::new(1.9, 1.4, 1.9)) * rng.gen::<f64>();
                let ray = Ray::new(o, sample_sphere(&mut rng));
                let a = scene.intersect(&ray);
                let b = scene.intersect_brute(&ray);
                match (a, b) {
                    (Some(a), Some(b)) => {
                        // coplanar faces (box bottoms on the floor) may tie
                        assert!((a.t - b.t).abs() < 1e-12, "{} vs {}", a.t, b.t);
                        if a.primitive != b.primitive {
                            ties += 1;
                        }
                        assert!((a.normal.length() - 1.0).abs() < 1e-9);
                        assert!(a.normal.dot(ray.dir) <= 0.0);
                    }
                    (None, None) => {}
                    other => panic!("mismatch {other:?}"),
                }
            }
        }
        assert!(ties < 20, "{ties} primitive mismatches");
    }

    #[test]
    fn box_hits_from_outside_and_inside() {
        let prim = Primitive {
            shape: Shape::Box { min: Vec3::splat(-1.0), max: Vec3::splat(1.0) },
            material: Material::Mirror,
        };
        let scene = Scene::new(vec![prim], vec![], fixtures::white_furnace().camera).unwrap();
        let hit = scene.intersect(&Ray::new(Vec3::new(-3.0, 0.2, 0.1), Vec3::new(1.0, 0.0, 0.0))).unwrap();
        assert!((hit.t - 2.0).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::new(-1.0, 0.0, 0.0));
        assert!(hit.front_face);
        let hit = scene.intersect(&Ray::new(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0))).unwrap();
        assert!((hit.t - 1.0).abs() < 1e-12);
        assert!(!hit.front_face);
        assert_eq!(hit.normal, Vec3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn generator_is_deterministic_and_in_range() {
        assert_eq!(generate_scene(17).to_text(), generate_scene(17).to_text());
        for seed in 0..100 {
            let scene = generate_scene(seed);
            scene.check_invariants().unwrap();
            let objects = scene.primitives.len() - 6;
            assert!((1..=16).contains(&objects), "seed {seed}: {objects}");
            assert!((1..=4).contains(&scene.lights.len()));
            if objects >= 2 {
                let objs = &scene.primitives[6..];
                assert!(objs.iter().any(|p| p.material.is_specular()));
                assert!(objs.iter().any(|p| p.material.is_diffuse()));
            }
            for l in &scene.lights {
                assert!(scene.bounds.contains(&Aabb::EMPTY.grow(l.corner).grow(l.corner + l.edge1 + l.edge2), 1e-9));
                assert!(l.normal().y < 0.0);
            }
        }
    }

    #[test]
    fn scene_text_roundtrip() {
        let scene = generate_scene(3);
        let text = scene.to_text();
        let back = Scene::from_text(&text).unwrap();
        assert_eq!(back.primitives, scene.primitives);
        assert_eq!(back.lights, scene.lights);
        assert_eq!(back.camera, scene.camera);
        assert!(text.contains("[[primitives]]") && text.contains("[[lights]]") && text.contains("[camera]"));
    }

    #[test]
    fn invalid_materials_rejected() {
        let cam = fixtures::white_furnace().camera;
        let bad = Primitive {
            shape: Shape::Sphere { center: Vec3::ZERO, radius: 1.0 },
            material: Material::Diffuse { albedo: Vec3::new(1.2, 0.0, 0.0) },
        };
        assert!(Scene::new(vec![bad], vec![], cam).is_err());
        let bad = Primitive {
            shape: Shape::Sphere { center: Vec3::ZERO, radius: 1.0 },
            material: Material::Dielectric { ior: 0.9 },
        };
        assert!(Scene::new(vec![bad], vec![], cam).is_err());
    }

    #[test]
    fn icosphere_is_closed_and_outward() {
        let (v, t) = icosphere(2);
        assert_eq!(t.len(), 320);
        for tri in t {
            let (a, b, c) = (v[tri[0] as usize], v[tri[1] as usize], v[tri[2] as usize]);
            assert!((b - a).cross(c - a).dot(a + b + c) > 0.0);
        }
    }

    #[test]
    fn refraction_and_fresnel() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        let d = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(refract(d, n, 1.0 / 1.5).unwrap(), d);
        let grazing = Vec3::new(0.99, 0.0, -0.141).normalized();
        assert!(refract(grazing, n, 1.5).is_none());
        assert!((schlick(1.0, 1.0 / 1.5) - 0.04).abs() < 1e-12);
        assert!((schlick(0.0, 1.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_mirror_scene_has_no_diffuse_hits() {
        let scene = fixtures::mirror_box();
        for py in 0..16 {
            for px in 0..16 {
                assert!(scene.first_diffuse_hit(&scene.camera.ray(px, py, 16, 16), 16).is_none());
            }
        }
    }
}
