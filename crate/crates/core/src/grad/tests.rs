use super::*;
use crate::math::Rigid;
use crate::scene::{Image, LightSource, Mask, Mesh};
use crate::synthetic::{make_synthetic, plane_grid, SyntheticOptions};

fn top_camera(size: usize, height: f64) -> Camera {
    Camera {
        fx: 2.0 * size as f64,
        fy: 2.0 * size as f64,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        world_to_camera: Rigid::look_at(Vec3::new(0.0, 0.0, height), Vec3::ZERO, Vec3::Y),
        exposure: 1.0,
    }
}

/// Gently rippled grid lit from high above: no shadows, and a camera that
/// only sees the interior, so shading is the only geometric dependence.
fn rippled_grid(phase: f64) -> Scene {
    let mut s = plane_grid(8, 1.0, 0.0);
    for v in &mut s.vertices {
        v.z = 0.06 * (2.5 * v.x + phase).sin() * (2.0 * v.y - phase).cos();
    }
    let diffuse = s
        .vertices
        .iter()
        .map(|v| Spectrum::new(0.4 + 0.1 * v.x, 0.35, 0.3 - 0.1 * v.y))
        .collect();
    let n = s.vertices.len();
    let mesh = Mesh::new(s.vertices, s.faces, diffuse, vec![Spectrum::splat(0.2); n]).unwrap();
    Scene::new(
        mesh,
        vec![
            LightSource::point(Vec3::new(0.4, -0.3, 3.0), Spectrum::new(6.0, 5.0, 4.0)),
            LightSource::directional(Vec3::new(-0.2, 0.1, -1.0).normalize(), Spectrum::splat(0.6)),
            LightSource::ambient(Spectrum::splat(0.1)),
        ],
    )
    .unwrap()
}

fn observe(truth: &Scene, cam: Camera, cfg: &RenderConfig) -> ViewObservation {
    let bvh = Bvh::build(&truth.mesh).unwrap();
    let film = render(truth, &bvh, &cam, cfg).unwrap();
    ViewObservation::new(cam, film.image, Mask::full(cam.width, cam.height)).unwrap()
}

fn small_synthetic(size: usize, bounces: u32) -> (Scene, Vec<ViewObservation>) {
    let s = make_synthetic(&SyntheticOptions {
        views: 2,
        width: size,
        height: size,
        render: RenderConfig {
            spp: 8,
            max_bounces: bounces,
            seed: 3,
            downsample: 1,
        },
        ..Default::default()
    })
    .unwrap();
    (s.start, s.observations)
}

/// Indices of the `k` largest-magnitude entries.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    idx.truncate(k);
    idx
}

fn check_group(scene: &Scene, obs: &[ViewObservation], cfg: &RenderConfig, group: ParamGroup, k: usize, step: f64) -> f64 {
    let bvh = Bvh::build(&scene.mesh).unwrap();
    let (_, g) = backward(scene, &bvh, obs, &[0], cfg).unwrap();
    let flat = g.group_flat(group);
    let params = ParamRef::all_in_group(scene, group);
    let pick = top_k(&flat, k);
    let chosen: Vec<ParamRef> = pick.iter().map(|&i| params[i]).collect();
    let analytic: Vec<f64> = pick.iter().map(|&i| flat[i]).collect();
    let fd = finite_difference_gradient(scene, &chosen, step, obs, &[0], cfg).unwrap();
    relative_l2_error(&analytic, &fd)
}

#[test]
fn objective_hand_values() {
    let cam = top_camera(2, 3.0);
    let img = Image::filled(2, 2, Spectrum::splat(0.5));
    let film = Film {
        image: img.clone(),
        spp: 1,
        seed: 0,
    };
    let same = ViewObservation::new(cam, img.clone(), Mask::full(2, 2)).unwrap();
    assert_eq!(objective(&[film.clone()], &[same], &[0]).unwrap(), 0.0);

    let mut other = img.clone();
    other.pixels[0].r += 0.1;
    let mut mask = Mask::empty(2, 2);
    let obs = ViewObservation::new(cam, other.clone(), mask.clone()).unwrap();
    assert_eq!(objective(&[film.clone()], &[obs], &[0]).unwrap(), 0.0);

    mask.data[0] = true;
    let obs = ViewObservation::new(cam, other, mask).unwrap();
    let o = objective(&[film], &[obs], &[0]).unwrap();
    assert!((o - 0.01).abs() < 1e-15, "{o}");
}

#[test]
fn zero_mask_annihilates_everything() {
    let (scene, mut obs) = small_synthetic(8, 2);
    for o in &mut obs {
        o.mask = Mask::empty(o.mask.width, o.mask.height);
    }
    let bvh = Bvh::build(&scene.mesh).unwrap();
    let cfg = RenderConfig {
        spp: 2,
        max_bounces: 2,
        seed: 5,
        downsample: 1,
    };
    let (o, g) = backward(&scene, &bvh, &obs, &[0, 1], &cfg).unwrap();
    assert_eq!(o, 0.0);
    assert!(g.is_zero());
    let fd = finite_difference_gradient(&scene, &ParamRef::all_in_group(&scene, ParamGroup::Lights), 1e-3, &obs, &[0], &cfg).unwrap();
    assert!(fd.iter().all(|&x| x == 0.0));
}

#[test]
fn backward_objective_matches_render() {
    let (scene, obs) = small_synthetic(12, 2);
    let bvh = Bvh::build(&scene.mesh).unwrap();
    let cfg = RenderConfig {
        spp: 3,
        max_bounces: 2,
        seed: 8,
        downsample: 1,
    };
    let (o, g) = backward(&scene, &bvh, &obs, &[0, 1], &cfg).unwrap();
    let direct = evaluate_objective(&scene, &bvh, &obs, &[0, 1], &cfg).unwrap();
    assert!((o - direct).abs() <= 1e-12 * direct, "{o} vs {direct}");
    assert!(g.is_finite());
}

#[test]
fn light_gradients_are_exact_at_one_bounce() {
    let (scene, obs) = small_synthetic(16, 1);
    let cfg = RenderConfig {
        spp: 4,
        max_bounces: 1,
        seed: 11,
        downsample: 1,
    };
    let err = check_group(&scene, &obs, &cfg, ParamGroup::Lights, 12, 1e-3);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn light_differences_do_not_depend_on_step() {
    let (scene, obs) = small_synthetic(8, 1);
    let cfg = RenderConfig {
        spp: 2,
        max_bounces: 1,
        seed: 2,
        downsample: 1,
    };
    let params = ParamRef::all_in_group(&scene, ParamGroup::Lights);
    let base = finite_difference_gradient(&scene, &params, 1e-4, &obs, &[0], &cfg).unwrap();
    for step in [1e-3, 1e-2, 1e-1] {
        let fd = finite_difference_gradient(&scene, &params, step, &obs, &[0], &cfg).unwrap();
        for (a, b) in fd.iter().zip(&base) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3), "{step}: {a} vs {b}");
        }
    }
}

#[test]
fn albedo_gradients_match_differences() {
    let (scene, obs) = small_synthetic(16, 2);
    let cfg = RenderConfig {
        spp: 4,
        max_bounces: 2,
        seed: 4,
        downsample: 1,
    };
    let d = check_group(&scene, &obs, &cfg, ParamGroup::Diffuse, 24, 1e-4);
    assert!(d < 1e-3, "diffuse {d}");
    let s = check_group(&scene, &obs, &cfg, ParamGroup::Specular, 24, 1e-4);
    assert!(s < 1e-3, "specular {s}");
}

#[test]
fn geometry_gradients_match_differences_without_occlusion() {
    let cfg = RenderConfig {
        spp: 4,
        max_bounces: 1,
        seed: 6,
        downsample: 1,
    };
    let truth = rippled_grid(0.0);
    let scene = rippled_grid(0.7);
    let obs = vec![observe(&truth, top_camera(16, 3.0), &cfg)];
    let err = check_group(&scene, &obs, &cfg, ParamGroup::Geometry, 30, 1e-5);
    assert!(err < 5e-2, "geometry {err}");
}

#[test]
fn unseen_vertices_get_zero_gradient() {
    let mut scene = rippled_grid(0.3);
    // A detached triangle far outside the view.
    let base = scene.mesh.vertex_count() as u32;
    for v in [Vec3::new(50.0, 0.0, 0.0), Vec3::new(51.0, 0.0, 0.0), Vec3::new(50.0, 1.0, 0.0)] {
        scene.mesh.vertices.push(v);
        scene.mesh.diffuse.push(Spectrum::splat(0.5));
        scene.mesh.specular.push(Spectrum::ZERO);
    }
    scene.mesh.faces.push([base, base + 1, base + 2]);
    scene.mesh.refresh_normals();
    let cfg = RenderConfig {
        spp: 2,
        max_bounces: 2,
        seed: 1,
        downsample: 1,
    };
    let obs = vec![observe(&rippled_grid(0.0), top_camera(8, 3.0), &cfg)];
    let bvh = Bvh::build(&scene.mesh).unwrap();
    let (_, g) = backward(&scene, &bvh, &obs, &[0], &cfg).unwrap();
    for v in base as usize..base as usize + 3 {
        assert_eq!(g.diffuse[v], Spectrum::ZERO);
        assert_eq!(g.specular[v], Spectrum::ZERO);
        assert_eq!(g.vertices[v], Vec3::ZERO);
    }
}

#[test]
fn backward_is_stable_across_worker_counts() {
    let (scene, obs) = small_synthetic(40, 2);
    let cfg = RenderConfig {
        spp: 1,
        max_bounces: 2,
        seed: 7,
        downsample: 1,
    };
    let bvh = Bvh::build(&scene.mesh).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| backward(&scene, &bvh, &obs, &[0, 1], &cfg).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn out_of_range_view_is_rejected() {
    let (scene, obs) = small_synthetic(8, 1);
    let bvh = Bvh::build(&scene.mesh).unwrap();
    assert!(matches!(
        backward(&scene, &bvh, &obs, &[5], &RenderConfig::default()),
        Err(Error::CameraIndex { index: 5, count: 2 })
    ));
}
