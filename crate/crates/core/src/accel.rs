//! Ray-mesh intersection through a bounding volume hierarchy.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::Mesh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Ray {
        Ray {
            origin,
            direction,
            t_min: 0.0,
            t_max: f64::INFINITY,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Interpolated vertex normal, oriented against the ray.
    pub shading_normal: Vec3,
    /// Face normal, oriented against the ray.
    pub geometric_normal: Vec3,
    pub barycentrics: [f64; 3],
    pub face: u32,
    /// The ray arrived from the side opposite the face winding normal, so
    /// both normals were flipped.
    pub backface: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    pub fn grow(self, p: Vec3) -> Aabb {
        Aabb {
            min: self.min.min(p),
            max: self.max.max(p),
        }
    }

    pub fn union(self, o: Aabb) -> Aabb {
        Aabb {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Slab test against `[t_min, t_max]`; returns the entry distance.
    #[inline]
    fn hit(&self, origin: Vec3, inv_dir: Vec3, t_min: f64, t_max: f64) -> Option<f64> {
        let mut t0 = t_min;
        let mut t1 = t_max;
        for i in 0..3 {
            let mut near = (self.min[i] - origin[i]) * inv_dir[i];
            let mut far = (self.max[i] - origin[i]) * inv_dir[i];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // Conservative widening keeps the slab test from rejecting
            // grazing hits through rounding.
            far *= 1.0 + 4.0 * f64::EPSILON;
            // NaN (0 * inf) leaves the bounds unchanged.
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Interior { left: u32, right: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    kind: NodeKind,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    /// Face-order range for leaves.
    pub fn leaf_range(&self) -> Option<std::ops::Range<usize>> {
        match self.kind {
            NodeKind::Leaf { start, count } => Some(start as usize..(start + count) as usize),
            NodeKind::Interior { .. } => None,
        }
    }

    pub fn children(&self) -> Option<(usize, usize)> {
        match self.kind {
            NodeKind::Interior { left, right } => Some((left as usize, right as usize)),
            NodeKind::Leaf { .. } => None,
        }
    }
}

const MAX_LEAF: usize = 4;

/// Median-split BVH over a mesh's faces. Immutable once built; rebuild after
/// moving vertices.
#[derive(Debug, Clone)]
pub struct Bvh {
    pub nodes: Vec<BvhNode>,
    /// Permutation of face indices; leaves reference ranges of it.
    pub face_order: Vec<u32>,
    /// Offset applied at both ends of shadow segments.
    pub shadow_epsilon: f64,
}

pub fn build_bvh(mesh: &Mesh) -> Result<Bvh> {
    Bvh::build(mesh)
}

impl Bvh {
    pub fn build(mesh: &Mesh) -> Result<Bvh> {
        if mesh.faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let boxes: Vec<Aabb> = mesh
            .faces
            .iter()
            .map(|f| {
                f.iter()
                    .fold(Aabb::EMPTY, |b, &i| b.grow(mesh.vertices[i as usize]))
            })
            .collect();
        let centroids: Vec<Vec3> = boxes.iter().map(Aabb::centroid).collect();
        let mut order: Vec<u32> = (0..mesh.faces.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * mesh.faces.len() / MAX_LEAF + 1);
        build_node(&mut nodes, &mut order, 0, &boxes, &centroids);
        let radius = mesh.bounding_sphere().1;
        Ok(Bvh {
            nodes,
            face_order: order,
            shadow_epsilon: 1e-4 * radius.max(f64::MIN_POSITIVE),
        })
    }

    /// Nearest hit with `t` strictly inside `(t_min, t_max)`.
    pub fn intersect(&self, mesh: &Mesh, ray: &Ray) -> Option<Hit> {
        let inv = Vec3::new(1.0 / ray.direction.x, 1.0 / ray.direction.y, 1.0 / ray.direction.z);
        let mut best: Option<(f64, [f64; 3], u32)> = None;
        let mut t_max = ray.t_max;
        let mut stack = [0u32; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.bounds.hit(ray.origin, inv, ray.t_min, t_max).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &f in &self.face_order[start as usize..(start + count) as usize] {
                        if let Some((t, b)) = intersect_face(mesh, f, ray.origin, ray.direction) {
                            if t > ray.t_min && t < t_max {
                                t_max = t;
                                best = Some((t, b, f));
                            }
                        }
                    }
                }
                NodeKind::Interior { left, right } => {
                    let l = self.nodes[left as usize].bounds.hit(ray.origin, inv, ray.t_min, t_max);
                    let r = self.nodes[right as usize].bounds.hit(ray.origin, inv, ray.t_min, t_max);
                    // Push the farther child first so the nearer one pops next.
                    match (l, r) {
                        (Some(tl), Some(tr)) => {
                            let (near, far) = if tl <= tr { (left, right) } else { (right, left) };
                            stack[sp] = far;
                            stack[sp + 1] = near;
                            sp += 2;
                        }
                        (Some(_), None) => {
                            stack[sp] = left;
                            sp += 1;
                        }
                        (None, Some(_)) => {
                            stack[sp] = right;
                            sp += 1;
                        }
                        (None, None) => {}
                    }
                }
            }
        }
        best.map(|(t, b, f)| make_hit(mesh, ray, t, b, f))
    }

    /// True when any face crosses the open segment `(t_min, t_max)`.
    fn any_hit(&self, mesh: &Mesh, ray: &Ray) -> bool {
        let inv = Vec3::new(1.0 / ray.direction.x, 1.0 / ray.direction.y, 1.0 / ray.direction.z);
        let mut stack = [0u32; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.bounds.hit(ray.origin, inv, ray.t_min, ray.t_max).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &f in &self.face_order[start as usize..(start + count) as usize] {
                        if let Some((t, _)) = intersect_face(mesh, f, ray.origin, ray.direction) {
                            if t > ray.t_min && t < ray.t_max {
                                return true;
                            }
                        }
                    }
                }
                NodeKind::Interior { left, right } => {
                    stack[sp] = left;
                    stack[sp + 1] = right;
                    sp += 2;
                }
            }
        }
        false
    }

    /// Shadow test between two points, shortened by `shadow_epsilon` at both
    /// ends. Symmetric in its arguments.
    pub fn occluded(&self, mesh: &Mesh, from: Vec3, to: Vec3) -> bool {
        // Trace from the lexicographically smaller endpoint so swapping the
        // arguments runs the identical query.
        let (a, b) = if (from.x, from.y, from.z) <= (to.x, to.y, to.z) {
            (from, to)
        } else {
            (to, from)
        };
        let d = b - a;
        let dist = d.length();
        if dist <= 2.0 * self.shadow_epsilon {
            return false;
        }
        let ray = Ray {
            origin: a,
            direction: d / dist,
            t_min: self.shadow_epsilon,
            t_max: dist - self.shadow_epsilon,
        };
        self.any_hit(mesh, &ray)
    }

    /// Shadow test from `from` toward infinity along `dir`.
    pub fn occluded_direction(&self, mesh: &Mesh, from: Vec3, dir: Vec3) -> bool {
        let ray = Ray {
            origin: from,
            direction: dir,
            t_min: self.shadow_epsilon,
            t_max: f64::INFINITY,
        };
        self.any_hit(mesh, &ray)
    }
}

pub fn intersect(bvh: &Bvh, mesh: &Mesh, ray: &Ray) -> Option<Hit> {
    bvh.intersect(mesh, ray)
}

pub fn occluded(bvh: &Bvh, mesh: &Mesh, from: Vec3, to: Vec3) -> bool {
    bvh.occluded(mesh, from, to)
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    order: &mut [u32],
    offset: usize,
    boxes: &[Aabb],
    centroids: &[Vec3],
) -> u32 {
    let bounds = order
        .iter()
        .fold(Aabb::EMPTY, |b, &f| b.union(boxes[f as usize]));
    let index = nodes.len() as u32;
    if order.len() <= MAX_LEAF {
        nodes.push(BvhNode {
            bounds,
            kind: NodeKind::Leaf {
                start: offset as u32,
                count: order.len() as u32,
            },
        });
        return index;
    }
    let cbounds = order
        .iter()
        .fold(Aabb::EMPTY, |b, &f| b.grow(centroids[f as usize]));
    let axis = (cbounds.max - cbounds.min).max_dimension();
    let mid = order.len() / 2;
    // Ties broken by face index keep the build deterministic.
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    nodes.push(BvhNode {
        bounds,
        kind: NodeKind::Leaf { start: 0, count: 0 },
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(nodes, lo, offset, boxes, centroids);
    let right = build_node(nodes, hi, offset + mid, boxes, centroids);
    nodes[index as usize].kind = NodeKind::Interior { left, right };
    index
}

/// Watertight ray/triangle test (Woop, Benthin and Wald 2013). Returns the
/// ray parameter and barycentrics of the crossing, with no range check.
pub fn intersect_triangle(
    origin: Vec3,
    dir: Vec3,
    v0: Vec3,
    v1: Vec3,
    v2: Vec3,
) -> Option<(f64, [f64; 3])> {
    let kz = dir.abs().max_dimension();
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if dir[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = dir[kx] / dir[kz];
    let sy = dir[ky] / dir[kz];
    let sz = 1.0 / dir[kz];

    let a = v0 - origin;
    let b = v1 - origin;
    let c = v2 - origin;
    let ax = a[kx] - sx * a[kz];
    let ay = a[ky] - sy * a[kz];
    let bx = b[kx] - sx * b[kz];
    let by = b[ky] - sy * b[kz];
    let cx = c[kx] - sx * c[kz];
    let cy = c[ky] - sy * c[kz];

    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let t_scaled = u * (sz * a[kz]) + v * (sz * b[kz]) + w * (sz * c[kz]);
    let inv = 1.0 / det;
    Some((t_scaled * inv, [u * inv, v * inv, w * inv]))
}

#[inline]
fn intersect_face(mesh: &Mesh, f: u32, origin: Vec3, dir: Vec3) -> Option<(f64, [f64; 3])> {
    let [i0, i1, i2] = mesh.faces[f as usize];
    intersect_triangle(
        origin,
        dir,
        mesh.vertices[i0 as usize],
        mesh.vertices[i1 as usize],
        mesh.vertices[i2 as usize],
    )
}

/// Completes a hit record for `face` at parameter `t`.
pub fn make_hit(mesh: &Mesh, ray: &Ray, t: f64, b: [f64; 3], face: u32) -> Hit {
    let [i0, i1, i2] = mesh.faces[face as usize].map(|i| i as usize);
    let (p0, p1, p2) = (mesh.vertices[i0], mesh.vertices[i1], mesh.vertices[i2]);
    let mut ng = (p1 - p0).cross(p2 - p0).normalize();
    let mut ns = (mesh.normals[i0] * b[0] + mesh.normals[i1] * b[1] + mesh.normals[i2] * b[2])
        .normalize();
    if ns.length_squared() == 0.0 {
        ns = ng;
    }
    let backface = ng.dot(ray.direction) > 0.0;
    if backface {
        ng = -ng;
        ns = -ns;
    }
    Hit {
        t,
        point: ray.at(t),
        shading_normal: ns,
        geometric_normal: ng,
        barycentrics: b,
        face,
        backface,
    }
}
