use crate::math::Vec3;
use crate::scene::Mesh;

/// Umbrella Laplacian penalty `w · Σ_v ‖x_v − mean(neighbors(x_v))‖²` and
/// its exact gradient. Isolated vertices contribute nothing.
pub fn laplacian_regularizer(mesh: &Mesh, weight: f64) -> (f64, Vec<Vec3>) {
    let nbrs = mesh.vertex_neighbors();
    let mut value = 0.0;
    let mut grad = vec![Vec3::ZERO; mesh.vertex_count()];
    for (v, ring) in nbrs.iter().enumerate() {
        if ring.is_empty() {
            continue;
        }
        let inv = 1.0 / ring.len() as f64;
        let mean = ring
            .iter()
            .fold(Vec3::ZERO, |acc, &u| acc + mesh.vertices[u as usize])
            * inv;
        let d = mesh.vertices[v] - mean;
        value += d.length_squared();
        let g = d * (2.0 * weight);
        grad[v] += g;
        for &u in ring {
            grad[u as usize] -= g * inv;
        }
    }
    (weight * value, grad)
}
