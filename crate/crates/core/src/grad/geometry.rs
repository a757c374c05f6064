//! Shading-only geometry derivatives.
//!
//! A path vertex is recomputed in forward mode with 18 partials: the three
//! triangle corners and their three vertex normals. The incoming ray, the
//! light choice, visibility and the sampled bounce direction stay fixed;
//! the hit point slides along the ray as the triangle plane moves.
//! Derivatives with respect to vertex normals are pushed through the
//! area-weighted normal construction afterwards.

use std::f64::consts::PI;

use crate::brdf::specular_factor;
use crate::math::Vec3;
use crate::render::PathVertex;
use crate::scalar::{Dual, Scalar, V3};
use crate::scene::{LightKind, Mesh, Scene};
use crate::spectrum::Spectrum;

type D = Dual<18>;

fn var3(v: Vec3, slot: usize) -> V3<D> {
    V3::new(
        D::variable(v.x, slot),
        D::variable(v.y, slot + 1),
        D::variable(v.z, slot + 2),
    )
}

/// Adds the derivative of `Σ_c wb_c (E_c + tail_c B_c)` at this vertex to
/// the position and normal buffers. `B = fr·cos/pdf` keeps the sampled
/// world direction and its pdf fixed.
pub(super) fn accumulate_vertex(
    scene: &Scene,
    v: &PathVertex,
    wb: Spectrum,
    tail: Spectrum,
    count: f64,
    d_pos: &mut [Vec3],
    d_nrm: &mut [Vec3],
) {
    let mesh = &scene.mesh;
    let face = mesh.faces[v.hit.face as usize].map(|i| i as usize);
    let p: [V3<D>; 3] = std::array::from_fn(|j| var3(mesh.vertices[face[j]], 3 * j));
    let nv: [V3<D>; 3] = std::array::from_fn(|j| var3(mesh.normals[face[j]], 9 + 3 * j));

    let o = V3::<D>::cst(v.ray_origin);
    let dir = -v.wo;
    let d = V3::<D>::cst(dir);
    let e1 = p[1].sub(p[0]);
    let e2 = p[2].sub(p[0]);
    let ng = e1.cross(e2);
    let denom = d.dot(ng);
    if denom.v == 0.0 {
        return;
    }
    let t = p[0].sub(o).dot(ng) / denom;
    let x = o.add(d.mul(t));
    let inv_area2 = D::cst(1.0) / ng.dot(ng);
    let rel = x.sub(p[0]);
    let b1 = rel.cross(e2).dot(ng) * inv_area2;
    let b2 = e1.cross(rel).dot(ng) * inv_area2;
    let b0 = D::cst(1.0) - b1 - b2;
    let b = [b0, b1, b2];

    let interp = nv[0].mul(b0).add(nv[1].mul(b1)).add(nv[2].mul(b2));
    let mut n = if interp.value().length_squared() > 0.0 {
        interp.normalize()
    } else {
        ng.normalize()
    };
    if v.hit.backface {
        n = n.mul(D::cst(-1.0));
    }
    let wo = V3::<D>::cst(v.wo);
    let cos_o = n.dot(wo);
    if cos_o.v <= 0.0 {
        return;
    }

    let albedo = |a: &[Spectrum], c: usize| -> D {
        b[0].scale(a[face[0]][c]) + b[1].scale(a[face[1]][c]) + b[2].scale(a[face[2]][c])
    };
    let rho_d: [D; 3] = std::array::from_fn(|c| albedo(&mesh.diffuse, c));
    let rho_s: [D; 3] = std::array::from_fn(|c| albedo(&mesh.specular, c));
    let alpha = D::cst(mesh.roughness);
    // fr per channel for a direction `wi`, with its cosine.
    let brdf = |wi: V3<D>| -> Option<([D; 3], D)> {
        let cos_i = n.dot(wi);
        if cos_i.v <= 0.0 {
            return None;
        }
        let spec = specular_factor(mesh.distribution, alpha, mesh.f0, cos_i, cos_o, wi.dot(wo));
        Some((
            std::array::from_fn(|c| rho_d[c].scale(1.0 / PI) + rho_s[c] * spec),
            cos_i,
        ))
    };

    let mut total = D::cst(0.0);
    if let Some(ls) = v.light.filter(|ls| ls.visible) {
        let light = &scene.lights[ls.index as usize];
        let radiance = light.intensity * count;
        let term: Option<[D; 3]> = match light.kind {
            LightKind::Point { position } => {
                let to = V3::<D>::cst(position).sub(x);
                let r2 = to.dot(to);
                let wi = to.mul(D::cst(1.0) / r2.sqrt());
                brdf(wi).map(|(f, cos_i)| std::array::from_fn(|c| f[c] * cos_i / r2))
            }
            LightKind::Directional { direction } => {
                brdf(V3::cst(-direction)).map(|(f, cos_i)| std::array::from_fn(|c| f[c] * cos_i))
            }
            LightKind::Ambient => Some(rho_d),
        };
        if let Some(term) = term {
            for c in 0..3 {
                total = total + term[c].scale(wb[c] * radiance[c]);
            }
        }
    }
    if let Some(bn) = v.bounce.filter(|b| b.pdf > 0.0) {
        if let Some((f, cos_i)) = brdf(V3::cst(bn.wi)) {
            for c in 0..3 {
                total = total + (f[c] * cos_i).scale(wb[c] * tail[c] / bn.pdf);
            }
        }
    }
    if !total.is_finite() {
        return;
    }
    for j in 0..3 {
        let s = 3 * j;
        d_pos[face[j]] += Vec3::new(total.d[s], total.d[s + 1], total.d[s + 2]);
        let s = 9 + 3 * j;
        d_nrm[face[j]] += Vec3::new(total.d[s], total.d[s + 1], total.d[s + 2]);
    }
}

/// Maps gradients with respect to vertex normals onto vertex positions
/// through `n_v = S_v / |S_v|`, `S_v = Σ_f (b − a) × (c − a)`.
pub(super) fn normals_backprop(mesh: &Mesh, d_normals: &[Vec3]) -> Vec<Vec3> {
    let mut sums = vec![Vec3::ZERO; mesh.vertex_count()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        let n = (b - a).cross(c - a);
        for &i in f {
            sums[i as usize] += n;
        }
    }
    let d_sums: Vec<Vec3> = sums
        .iter()
        .zip(d_normals)
        .map(|(&s, &g)| {
            let len = s.length();
            if len == 0.0 {
                return Vec3::ZERO;
            }
            let n = s / len;
            (g - n * n.dot(g)) / len
        })
        .collect();
    let mut out = vec![Vec3::ZERO; mesh.vertex_count()];
    for f in &mesh.faces {
        let [ia, ib, ic] = f.map(|i| i as usize);
        let g = d_sums[ia] + d_sums[ib] + d_sums[ic];
        if g == Vec3::ZERO {
            continue;
        }
        let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
        let db = (c - a).cross(g);
        let dc = g.cross(b - a);
        out[ib] += db;
        out[ic] += dc;
        out[ia] -= db + dc;
    }
    out
}
