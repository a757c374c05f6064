use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use invrender_core::grad::{
    backward, finite_difference_gradient, relative_l2_error, GradientSet, ParamGroup, ParamRef,
};
use invrender_core::metrics::{self, MetricReport};
use invrender_core::optim::{self, LearningRates, Schedule, StageTrace};
use invrender_core::scene::file::LightEntry;
use invrender_core::scene::image::{read_image, read_mask, write_image};
use invrender_core::scene::{load_scene, save_scene, Image, LoadedScene};
use invrender_core::synthetic::{make_synthetic as synthesize, SyntheticOptions};
use invrender_core::{render as render_film, Bvh, Camera, RenderConfig, Rigid, Scene};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::{
    GradCheckArgs, MakeSyntheticArgs, MetricsArgs, NovelViewArgs, OptimizeArgs, RelightArgs,
    RenderArgs, SamplingArgs,
};

/// A gradient check whose error exceeded its tolerance.
#[derive(Debug)]
pub struct ToleranceExceeded(pub Vec<ParamGroup>);

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|g| g.name()).collect();
        write!(f, "gradient check exceeded tolerance for {}", names.join(", "))
    }
}

impl std::error::Error for ToleranceExceeded {}

fn load(path: &Path) -> Result<LoadedScene> {
    load_scene(path).with_context(|| format!("loading scene {}", path.display()))
}

fn sampling_config(args: &SamplingArgs, loaded: &LoadedScene) -> Result<RenderConfig> {
    let cfg = RenderConfig {
        spp: args.spp,
        max_bounces: args.bounces,
        seed: args.seed.unwrap_or(loaded.config.seed),
        downsample: 1,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn camera_at(loaded: &LoadedScene, index: usize) -> Result<Camera> {
    match loaded.observations.get(index) {
        Some(o) => Ok(o.camera),
        None => bail!(invrender_core::Error::CameraIndex {
            index,
            count: loaded.observations.len()
        }),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes `<out>.pfm` and `<out>.png`.
fn write_outputs(out: &Path, image: &Image) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let pfm = out.with_extension("pfm");
    let png = out.with_extension("png");
    write_image(&pfm, image)?;
    write_image(&png, image)?;
    Ok((pfm, png))
}

fn render_to(scene: &Scene, camera: &Camera, cfg: &RenderConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let bvh = Bvh::build(&scene.mesh)?;
    let film = render_film(scene, &bvh, camera, cfg)?;
    let (pfm, png) = write_outputs(out, &film.image)?;
    println!(
        "rendered {}x{} spp={} bounces={} seed={} in {:.3} s -> {}, {}",
        camera.width,
        camera.height,
        cfg.spp,
        cfg.max_bounces,
        cfg.seed,
        start.elapsed().as_secs_f64(),
        pfm.display(),
        png.display()
    );
    Ok(())
}

pub fn render(args: RenderArgs) -> Result<()> {
    let loaded = load(&args.scene)?;
    let camera = camera_at(&loaded, args.camera)?;
    let cfg = sampling_config(&args.sampling, &loaded)?;
    render_to(&loaded.scene, &camera, &cfg, &args.out)
}

pub fn novel_view(args: NovelViewArgs) -> Result<()> {
    let loaded = load(&args.scene)?;
    let pose: [f64; 12] = args
        .pose
        .as_slice()
        .try_into()
        .context("--pose takes exactly 12 values")?;
    let world_to_camera = Rigid::from_row_major(&pose);
    ensure!(
        world_to_camera.is_rigid(1e-6),
        "--pose is not a rigid transform (rotation must be orthonormal with determinant 1)"
    );
    let camera = Camera {
        world_to_camera,
        ..camera_at(&loaded, args.intrinsics_from)?
    };
    let cfg = sampling_config(&args.sampling, &loaded)?;
    render_to(&loaded.scene, &camera, &cfg, &args.out)
}

#[derive(Debug, Deserialize)]
struct LightSpec {
    lights: Vec<LightEntry>,
}

pub fn relight(args: RelightArgs) -> Result<()> {
    let loaded = load(&args.scene)?;
    let text = fs::read_to_string(&args.lights)
        .with_context(|| format!("reading {}", args.lights.display()))?;
    let spec: LightSpec =
        toml::from_str(&text).with_context(|| format!("parsing {}", args.lights.display()))?;
    let lights = spec
        .lights
        .iter()
        .enumerate()
        .map(|(i, l)| l.to_light(&args.lights, &format!("lights[{i}]")))
        .collect::<invrender_core::Result<Vec<_>>>()?;
    let views: Vec<usize> = if args.views.is_empty() {
        (0..loaded.observations.len()).collect()
    } else {
        args.views.clone()
    };
    let cameras = views
        .iter()
        .map(|&v| camera_at(&loaded, v))
        .collect::<Result<Vec<_>>>()?;
    let cfg = sampling_config(&args.sampling, &loaded)?;
    let scene = Scene::new(loaded.scene.mesh.clone(), lights)?;
    create_dir(&args.out_dir)?;
    for (v, cam) in views.iter().zip(&cameras) {
        render_to(&scene, cam, &cfg, &args.out_dir.join(format!("view_{v:03}")))?;
    }
    Ok(())
}

pub fn metrics(args: MetricsArgs) -> Result<()> {
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    let mask = args.mask.as_deref().map(read_mask).transpose()?;
    let report = metrics::evaluate(&a, &b, mask.as_ref())?;
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

pub fn make_synthetic(args: MakeSyntheticArgs) -> Result<()> {
    let start = Instant::now();
    let opts = SyntheticOptions {
        preset: args.preset,
        views: args.views,
        width: args.width,
        height: args.height,
        render: RenderConfig {
            spp: args.spp,
            max_bounces: args.bounces,
            seed: args.seed,
            downsample: 1,
        },
        perturb_seed: args.perturb_seed,
    };
    opts.render.validate()?;
    let syn = synthesize(&opts)?;
    create_dir(&args.out_dir)?;
    let truth_path = args.out_dir.join("truth.toml");
    save_scene(&syn.truth, &syn.observations, &opts.render, &truth_path)?;
    // The starting scene references the views written with the truth.
    let written = load(&truth_path)?;
    let start_path = args.out_dir.join("start.toml");
    save_scene(&syn.start, &written.observations, &opts.render, &start_path)?;
    println!(
        "wrote {} and {} ({} views, {}x{}) in {:.1} s",
        truth_path.display(),
        start_path.display(),
        args.views,
        args.width,
        args.height,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn optimize(args: OptimizeArgs) -> Result<()> {
    let loaded = load(&args.scene)?;
    ensure!(!loaded.observations.is_empty(), "the scene has no views to optimize against");
    let config = RenderConfig {
        spp: args.spp,
        max_bounces: args.bounces,
        seed: args.seed.unwrap_or(loaded.config.seed),
        downsample: args.downsample,
    };
    config.validate()?;
    for o in &loaded.observations {
        o.camera.downsampled(args.downsample as usize)?;
    }
    let schedule = Schedule {
        stage_order: args.stages.clone(),
        inner_iterations: args.inner,
        outer_cycles: args.cycles,
        view_batch: args.view_batch,
        learning_rates: LearningRates {
            diffuse: args.lr_diffuse,
            geometry: args.lr_geometry,
            lights: args.lr_lights,
            specular: args.lr_specular,
        },
        laplacian_weight: args.laplacian,
        held_out: args.held_out,
        eval_spp: args.eval_spp,
        final_lr_fraction: args.final_lr_fraction,
        ..Schedule::default()
    };
    schedule.validate()?;
    if let Some(h) = args.held_out {
        camera_at(&loaded, h)?;
    }
    if loaded.observations.len() < 2 {
        log::warn!("only one view: no held-out evaluation and no geometry stage");
    } else {
        let h = args.held_out.unwrap_or(loaded.observations.len() - 1);
        let cam = loaded.observations[h].camera.downsampled(args.downsample as usize)?;
        if cam.width < metrics::WINDOW || cam.height < metrics::WINDOW {
            bail!(
                "held-out view {h} is {}x{} after downsampling, smaller than the {w}x{w} SSIM window",
                cam.width,
                cam.height,
                w = metrics::WINDOW
            );
        }
    }
    log::info!(
        "optimize: {} cycles x {} iterations, stages {:?}, spp={} T={} downsample={} lr d={} g={} l={} s={}",
        args.cycles,
        args.inner,
        args.stages.iter().map(|g| g.name()).collect::<Vec<_>>(),
        config.spp,
        config.max_bounces,
        config.downsample,
        args.lr_diffuse,
        args.lr_geometry,
        args.lr_lights,
        args.lr_specular
    );

    create_dir(&args.out_dir)?;
    let final_path = args.out_dir.join("scene.toml");
    if args.cycles == 0 {
        save_scene(&loaded.scene, &loaded.observations, &loaded.config, &final_path)?;
        println!("no cycles requested; copied the input scene to {}", final_path.display());
        return Ok(());
    }

    let checkpoints = args.out_dir.join("checkpoints");
    create_dir(&checkpoints)?;
    let mut traces: Vec<StageTrace> = Vec::new();
    let trace_path = args.out_dir.join("trace.csv");
    let mut observer = |t: &StageTrace, s: &Scene| -> invrender_core::Result<()> {
        let path = checkpoints.join(format!("cycle{}_{}.toml", t.cycle, t.group));
        save_scene(s, &loaded.observations, &loaded.config, &path)?;
        traces.push(t.clone());
        optim::write_trace_csv(&trace_path, &traces)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let result = optim::optimize(&loaded.scene, &loaded.observations, &schedule, &config, &mut rng, &mut observer)?;
    save_scene(&result.scene, &loaded.observations, &loaded.config, &final_path)?;
    optim::write_trace_csv(&trace_path, &result.traces)?;
    println!(
        "optimized in {:.1} s{} -> {}",
        start.elapsed().as_secs_f64(),
        if result.converged { " (converged)" } else { "" },
        final_path.display()
    );

    let held_out = args
        .held_out
        .or_else(|| (loaded.observations.len() >= 2).then(|| loaded.observations.len() - 1));
    if let Some(h) = held_out {
        let obs = loaded.observations[h].downsampled(args.downsample as usize)?;
        let bvh = Bvh::build(&result.scene.mesh)?;
        let cfg = RenderConfig {
            spp: args.eval_spp,
            downsample: 1,
            ..config
        };
        let film = render_film(&result.scene, &bvh, &obs.camera, &cfg)?;
        let mask = (obs.mask.count() > 0).then_some(&obs.mask);
        let report = metrics::evaluate(&film.image, &obs.image, mask)?;
        let path = args.out_dir.join("metrics.csv");
        fs::write(&path, format!("view,{}\n{h},{}\n", MetricReport::CSV_HEADER, report.csv_row()))
            .with_context(|| format!("writing {}", path.display()))?;
        if let Some(p0) = result.initial_psnr {
            println!("held-out view {h}: PSNR {p0:.2} -> {:.2} dB, SSIM {:.4}", report.psnr, report.ssim);
        }
    }
    Ok(())
}

fn default_step(group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Lights => 1e-3,
        ParamGroup::Diffuse | ParamGroup::Specular => 1e-4,
        ParamGroup::Geometry => 1e-5,
    }
}

fn default_tolerance(group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Lights => 1e-6,
        ParamGroup::Diffuse | ParamGroup::Specular => 1e-3,
        ParamGroup::Geometry => 5e-2,
    }
}

/// Indices of the `k` largest-magnitude entries, in decreasing order.
fn largest(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    idx.truncate(k);
    idx
}

fn describe(p: &ParamRef) -> String {
    match *p {
        ParamRef::Diffuse { vertex, channel } => format!("v{vertex}.{}", "rgb".as_bytes()[channel] as char),
        ParamRef::Specular { vertex, channel } => format!("v{vertex}.{}", "rgb".as_bytes()[channel] as char),
        ParamRef::Light { index, channel } => format!("l{index}.{}", "rgb".as_bytes()[channel] as char),
        ParamRef::Vertex { vertex, axis } => format!("v{vertex}.{}", "xyz".as_bytes()[axis] as char),
    }
}

pub fn grad_check(args: GradCheckArgs) -> Result<()> {
    let loaded = load(&args.scene)?;
    camera_at(&loaded, args.view)?;
    let config = RenderConfig {
        spp: args.spp,
        max_bounces: args.bounces,
        seed: args.seed.unwrap_or(loaded.config.seed),
        downsample: args.downsample,
    };
    config.validate()?;
    if let Some(step) = args.step {
        ensure!(step > 0.0, "--step must be positive");
    }
    let obs = &loaded.observations;
    obs[args.view].camera.downsampled(args.downsample as usize)?;
    let groups: Vec<ParamGroup> = match args.group {
        Some(g) => vec![g],
        None => ParamGroup::ALL.to_vec(),
    };
    let scene = &loaded.scene;
    let bvh = Bvh::build(&scene.mesh)?;
    let (objective, grads): (f64, GradientSet) = backward(scene, &bvh, obs, &[args.view], &config)?;
    println!(
        "objective {objective:.9e} (view {}, spp={}, T={}, downsample={})",
        args.view, config.spp, config.max_bounces, config.downsample
    );
    println!("{:<9} {:<10} {:>16} {:>16} {:>10}", "group", "param", "analytic", "fd", "rel_err");
    let mut summary = Vec::new();
    for &group in &groups {
        let flat = grads.group_flat(group);
        let all = ParamRef::all_in_group(scene, group);
        let pick = largest(&flat, args.params);
        let chosen: Vec<ParamRef> = pick.iter().map(|&i| all[i]).collect();
        let analytic: Vec<f64> = pick.iter().map(|&i| flat[i]).collect();
        let step = args.step.unwrap_or_else(|| default_step(group));
        let fd = finite_difference_gradient(scene, &chosen, step, obs, &[args.view], &config)?;
        let mut rel = Vec::with_capacity(fd.len());
        for ((p, a), f) in chosen.iter().zip(&analytic).zip(&fd) {
            let r = (a - f).abs() / f.abs().max(1e-12);
            rel.push(r);
            println!("{:<9} {:<10} {a:>16.9e} {f:>16.9e} {r:>10.3e}", group.name(), describe(p));
        }
        let max = rel.iter().copied().fold(0.0, f64::max);
        let mean = if rel.is_empty() { 0.0 } else { rel.iter().sum::<f64>() / rel.len() as f64 };
        let l2 = relative_l2_error(&analytic, &fd);
        summary.push((group, chosen.len(), max, mean, l2, args.tolerance.unwrap_or_else(|| default_tolerance(group))));
    }
    println!();
    println!("{:<9} {:>6} {:>10} {:>10} {:>10} {:>10}  status", "group", "params", "max_rel", "mean_rel", "rel_l2", "tolerance");
    let mut failed = Vec::new();
    for (group, n, max, mean, l2, tol) in summary {
        let ok = l2 <= tol;
        if !ok {
            failed.push(group);
        }
        println!(
            "{:<9} {n:>6} {max:>10.3e} {mean:>10.3e} {l2:>10.3e} {tol:>10.1e}  {}",
            group.name(),
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(ToleranceExceeded(failed).into())
    }
}
