//! Adam with box projection, and the alternating stage scheduler.
//!
//! Each stage updates one parameter group and leaves every other parameter
//! bit-identical. Albedo projection therefore bounds the active group by
//! what the other albedo leaves: in the diffuse stage `ρd ∈ [0, 1 − ρs]`,
//! in the specular stage `ρs ∈ [0, 1 − ρd]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::accel::Bvh;
use crate::error::{Error, Result};
use crate::grad::{backward_groups, laplacian_regularizer, Estimator, GroupMask, ParamGroup};
use crate::math::Vec3;
use crate::metrics;
use crate::render::render;
use crate::scene::{Mesh, RenderConfig, Scene, ViewObservation};
use crate::spectrum::Spectrum;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            learning_rate,
        }
    }
}

/// Feasible set applied after each Adam update.
#[derive(Debug, Clone, Copy)]
pub enum Projection<'a> {
    Unconstrained,
    NonNegative,
    /// `[0, 1 − other]` per entry, or `[0, 1]` without a partner.
    Albedo { other: Option<&'a [f64]> },
}

impl Projection<'_> {
    fn apply(&self, i: usize, x: f64) -> f64 {
        match self {
            Projection::Unconstrained => x,
            Projection::NonNegative => x.max(0.0),
            Projection::Albedo { other } => {
                let hi = other.map_or(1.0, |o| (1.0 - o[i]).clamp(0.0, 1.0));
                x.clamp(0.0, hi)
            }
        }
    }
}

/// One bias-corrected Adam update of `params`, followed by projection.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], projection: Projection) -> Result<()> {
    let n = state.m.len();
    for len in [params.len(), grads.len(), state.v.len()] {
        if len != n {
            return Err(Error::ShapeMismatch { expected: n, got: len });
        }
    }
    if let Projection::Albedo { other: Some(o) } = projection {
        if o.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: o.len() });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        params[i] = projection.apply(i, params[i]);
    }
    Ok(())
}

fn flatten(s: &[Spectrum]) -> Vec<f64> {
    s.iter().flat_map(|x| x.to_array()).collect()
}

/// The parameters of one group, flattened in scene order.
pub fn group_params(scene: &Scene, group: ParamGroup) -> Vec<f64> {
    match group {
        ParamGroup::Diffuse => flatten(&scene.mesh.diffuse),
        ParamGroup::Specular => flatten(&scene.mesh.specular),
        ParamGroup::Lights => scene.lights.iter().flat_map(|l| l.intensity.to_array()).collect(),
        ParamGroup::Geometry => scene.mesh.vertices.iter().flat_map(|v| v.to_array()).collect(),
    }
}

/// Writes a flattened group back. Geometry updates refresh the normals.
pub fn set_group_params(scene: &mut Scene, group: ParamGroup, values: &[f64]) -> Result<()> {
    let expected = group_params(scene, group).len();
    if values.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            got: values.len(),
        });
    }
    let spectra = values.chunks_exact(3).map(|c| Spectrum::new(c[0], c[1], c[2]));
    match group {
        ParamGroup::Diffuse => scene.mesh.diffuse = spectra.collect(),
        ParamGroup::Specular => scene.mesh.specular = spectra.collect(),
        ParamGroup::Lights => {
            for (l, s) in scene.lights.iter_mut().zip(spectra) {
                l.intensity = s;
            }
        }
        ParamGroup::Geometry => {
            scene.mesh.vertices = values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            scene.mesh.refresh_normals();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub diffuse: f64,
    /// In units of 1% of the mesh bounding radius.
    pub geometry: f64,
    pub lights: f64,
    pub specular: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            diffuse: 0.1,
            geometry: 0.5,
            lights: 0.05,
            specular: 0.01,
        }
    }
}

impl LearningRates {
    pub fn scaled(&self, f: f64) -> LearningRates {
        LearningRates {
            diffuse: self.diffuse * f,
            geometry: self.geometry * f,
            lights: self.lights * f,
            specular: self.specular * f,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Diffuse => self.diffuse,
            ParamGroup::Geometry => self.geometry,
            ParamGroup::Lights => self.lights,
            ParamGroup::Specular => self.specular,
        }
    }
}

/// Degrees of freedom of the geometry stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeometryMode {
    /// Every vertex coordinate is a free Adam parameter.
    Free,
    /// One scalar offset per vertex along its normal at the stage start;
    /// gradients are projected onto those normals.
    #[default]
    AlongNormals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub stage_order: Vec<ParamGroup>,
    pub inner_iterations: usize,
    pub outer_cycles: usize,
    pub view_batch: usize,
    pub learning_rates: LearningRates,
    /// Weight of the Laplacian penalty in the geometry stage.
    pub laplacian_weight: f64,
    /// Draw a fresh render seed every iteration; otherwise every iteration
    /// uses `config.seed`.
    pub reseed_each_iteration: bool,
    /// View excluded from training; defaults to the last view when there
    /// are at least two.
    pub held_out: Option<usize>,
    /// Samples per pixel of held-out evaluation renders.
    pub eval_spp: u32,
    /// Minimum relative held-out improvement per cycle to keep going.
    pub convergence_tolerance: f64,
    /// Learning rate at the last iteration of a stage as a fraction of the
    /// initial one; the rate decays geometrically in between.
    pub final_lr_fraction: f64,
    /// Learning rates of cycle `c` are scaled by `cycle_lr_factor^c`.
    pub cycle_lr_factor: f64,
    pub estimator: Estimator,
    pub geometry_mode: GeometryMode,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage_order: vec![
                ParamGroup::Diffuse,
                ParamGroup::Geometry,
                ParamGroup::Lights,
                ParamGroup::Specular,
            ],
            inner_iterations: 400,
            outer_cycles: 3,
            view_batch: 1,
            learning_rates: LearningRates::default(),
            laplacian_weight: 0.1,
            reseed_each_iteration: true,
            held_out: None,
            eval_spp: 16,
            convergence_tolerance: 1e-3,
            final_lr_fraction: 0.05,
            cycle_lr_factor: 0.5,
            estimator: Estimator::Decorrelated,
            geometry_mode: GeometryMode::AlongNormals,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.stage_order.iter().enumerate() {
            if self.stage_order[..i].contains(g) {
                return Err(Error::invalid("schedule", format!("group `{g}` appears twice per cycle")));
            }
        }
        if self.view_batch == 0 {
            return Err(Error::invalid("schedule", "view batch must be at least 1"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::invalid("schedule", "final learning-rate fraction must lie in (0, 1]"));
        }
        if !(self.cycle_lr_factor > 0.0 && self.cycle_lr_factor <= 1.0) {
            return Err(Error::invalid("schedule", "cycle learning-rate factor must lie in (0, 1]"));
        }
        if self.eval_spp == 0 {
            return Err(Error::invalid("schedule", "evaluation spp must be at least 1"));
        }
        Ok(())
    }
}

/// Per-iteration objective of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub cycle: usize,
    pub group: ParamGroup,
    pub objectives: Vec<f64>,
    /// Held-out PSNR after the stage, when a held-out view exists.
    pub held_out_psnr: Option<f64>,
    pub held_out_objective: Option<f64>,
}

fn mesh_step_scale(mesh: &Mesh) -> f64 {
    let (_, r) = mesh.bounding_sphere();
    0.01 * r
}

fn projection_for(group: ParamGroup, other: &[f64]) -> Projection<'_> {
    match group {
        ParamGroup::Diffuse | ParamGroup::Specular => Projection::Albedo { other: Some(other) },
        ParamGroup::Lights => Projection::NonNegative,
        ParamGroup::Geometry => Projection::Unconstrained,
    }
}

/// Runs `schedule.inner_iterations` Adam steps on `group` over the training
/// views `train`. Observations must already be at render resolution
/// (`config.downsample` is applied to them as in [`backward_groups`]).
pub fn run_stage<R: Rng>(
    scene: &mut Scene,
    observations: &[ViewObservation],
    train: &[usize],
    group: ParamGroup,
    schedule: &Schedule,
    config: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::invalid("training views", "no view to optimize against"));
    }
    let mut lr = schedule.learning_rates.get(group);
    if group == ParamGroup::Geometry {
        lr *= mesh_step_scale(&scene.mesh);
    }
    let along_normals = group == ParamGroup::Geometry && schedule.geometry_mode == GeometryMode::AlongNormals;
    let mut params = if along_normals {
        vec![0.0; scene.mesh.vertex_count()]
    } else {
        group_params(scene, group)
    };
    let mut state = AdamState::new(params.len(), lr);
    let other = match group {
        ParamGroup::Diffuse => group_params(scene, ParamGroup::Specular),
        ParamGroup::Specular => group_params(scene, ParamGroup::Diffuse),
        _ => Vec::new(),
    };
    let stage_start = scene.mesh.clone();
    let mut bvh = Bvh::build(&scene.mesh)?;
    let mut trace = Vec::with_capacity(schedule.inner_iterations);
    let decay = if schedule.inner_iterations > 1 {
        schedule.final_lr_fraction.powf(1.0 / (schedule.inner_iterations - 1) as f64)
    } else {
        1.0
    };
    for it in 0..schedule.inner_iterations {
        let views: Vec<usize> = if schedule.view_batch >= train.len() {
            train.to_vec()
        } else {
            train.choose_multiple(rng, schedule.view_batch).copied().collect()
        };
        let seed = if schedule.reseed_each_iteration {
            rng.random()
        } else {
            config.seed
        };
        let cfg = RenderConfig { seed, ..*config };
        let (obj, g) = backward_groups(scene, &bvh, observations, &views, &cfg, GroupMask::only(group), schedule.estimator)?;
        trace.push(obj);
        let mut grads = g.group_flat(group);
        if group == ParamGroup::Geometry && schedule.laplacian_weight > 0.0 {
            let displaced = displacement_mesh(&scene.mesh, &stage_start);
            let (_, lg) = laplacian_regularizer(&displaced, schedule.laplacian_weight);
            for (d, l) in grads.chunks_exact_mut(3).zip(lg) {
                d[0] += l.x;
                d[1] += l.y;
                d[2] += l.z;
            }
        }
        if lr == 0.0 {
            continue;
        }
        state.learning_rate = lr * decay.powi(it as i32);
        if along_normals {
            let dh: Vec<f64> = grads
                .chunks_exact(3)
                .zip(&stage_start.normals)
                .map(|(g, n)| g[0] * n.x + g[1] * n.y + g[2] * n.z)
                .collect();
            adam_step(&mut state, &mut params, &dh, Projection::Unconstrained)?;
            for (v, ((x0, n), h)) in scene
                .mesh
                .vertices
                .iter_mut()
                .zip(stage_start.vertices.iter().zip(&stage_start.normals).zip(&params))
            {
                *v = *x0 + *n * *h;
            }
            scene.mesh.refresh_normals();
        } else {
            adam_step(&mut state, &mut params, &grads, projection_for(group, &other))?;
            set_group_params(scene, group, &params)?;
        }
        if group == ParamGroup::Geometry {
            bvh = Bvh::build(&scene.mesh)?;
        }
    }
    Ok(trace)
}

/// The mesh connectivity carrying the per-vertex displacement since
/// `start` as positions, so the Laplacian penalizes rough updates.
fn displacement_mesh(mesh: &Mesh, start: &Mesh) -> Mesh {
    let mut m = start.clone();
    for (d, (a, b)) in m.vertices.iter_mut().zip(mesh.vertices.iter().zip(&start.vertices)) {
        *d = *a - *b;
    }
    m
}

/// Held-out evaluation: objective and PSNR of a fresh render at
/// `schedule.eval_spp`.
pub fn evaluate_view(
    scene: &Scene,
    observation: &ViewObservation,
    eval_spp: u32,
    config: &RenderConfig,
) -> Result<(f64, f64)> {
    let bvh = Bvh::build(&scene.mesh)?;
    let cfg = RenderConfig {
        spp: eval_spp,
        ..*config
    };
    let film = render(scene, &bvh, &observation.camera, &RenderConfig { downsample: 1, ..cfg })?;
    let obj = crate::grad::objective(std::slice::from_ref(&film), std::slice::from_ref(observation), &[0])?;
    let mask = (observation.mask.count() > 0).then_some(&observation.mask);
    let psnr = metrics::psnr(&film.image, &observation.image, mask)?;
    Ok((obj, psnr))
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub scene: Scene,
    pub traces: Vec<StageTrace>,
    /// Held-out PSNR before the first stage.
    pub initial_psnr: Option<f64>,
    pub initial_objective: Option<f64>,
    /// Whether the loop stopped on the convergence criterion.
    pub converged: bool,
}

/// Observer for stage boundaries, e.g. to write checkpoints.
pub trait StageObserver {
    fn stage_finished(&mut self, trace: &StageTrace, scene: &Scene) -> Result<()>;
}

impl<F: FnMut(&StageTrace, &Scene) -> Result<()>> StageObserver for F {
    fn stage_finished(&mut self, trace: &StageTrace, scene: &Scene) -> Result<()> {
        self(trace, scene)
    }
}

/// Runs `outer_cycles` passes over `stage_order`. Observations are
/// downsampled by `config.downsample` once up front.
pub fn optimize<R: Rng>(
    scene: &Scene,
    observations: &[ViewObservation],
    schedule: &Schedule,
    config: &RenderConfig,
    rng: &mut R,
    observer: &mut dyn StageObserver,
) -> Result<OptimizeResult> {
    schedule.validate()?;
    config.validate()?;
    let mut scene = scene.clone();
    let mut result = OptimizeResult {
        scene: scene.clone(),
        traces: Vec::new(),
        initial_psnr: None,
        initial_objective: None,
        converged: false,
    };
    if schedule.outer_cycles == 0 || schedule.stage_order.is_empty() {
        return Ok(result);
    }
    if observations.is_empty() {
        return Err(Error::invalid("observations", "at least one view is required"));
    }
    let obs: Vec<ViewObservation> = if config.downsample > 1 {
        observations
            .iter()
            .map(|o| o.downsampled(config.downsample as usize))
            .collect::<Result<_>>()?
    } else {
        observations.to_vec()
    };
    let cfg = RenderConfig {
        downsample: 1,
        ..*config
    };
    let held_out = match schedule.held_out {
        Some(h) if h >= obs.len() => {
            return Err(Error::CameraIndex {
                index: h,
                count: obs.len(),
            })
        }
        Some(h) => Some(h),
        None if obs.len() >= 2 => Some(obs.len() - 1),
        None => None,
    };
    let train: Vec<usize> = (0..obs.len()).filter(|&i| Some(i) != held_out).collect();
    let mut stages = schedule.stage_order.clone();
    if obs.len() < 2 && stages.contains(&ParamGroup::Geometry) {
        log::warn!("single-view input: the geometry stage is disabled");
        stages.retain(|&g| g != ParamGroup::Geometry);
    }
    let eval = |s: &Scene| -> Result<Option<(f64, f64)>> {
        held_out
            .map(|h| evaluate_view(s, &obs[h], schedule.eval_spp, &cfg))
            .transpose()
    };
    if let Some((o, p)) = eval(&scene)? {
        result.initial_objective = Some(o);
        result.initial_psnr = Some(p);
        log::info!("initial held-out objective {o:.6e}, PSNR {p:.2} dB");
    }
    let mut cycle_start = result.initial_objective;
    for cycle in 0..schedule.outer_cycles {
        let cycle_schedule = Schedule {
            learning_rates: schedule
                .learning_rates
                .scaled(schedule.cycle_lr_factor.powi(cycle as i32)),
            ..schedule.clone()
        };
        for &group in &stages {
            let objectives = run_stage(&mut scene, &obs, &train, group, &cycle_schedule, &cfg, rng)?;
            let ev = eval(&scene)?;
            let trace = StageTrace {
                cycle,
                group,
                objectives,
                held_out_objective: ev.map(|e| e.0),
                held_out_psnr: ev.map(|e| e.1),
            };
            log::info!(
                "cycle {cycle} stage {group}: last objective {:.6e}, held-out PSNR {}",
                trace.objectives.last().copied().unwrap_or(f64::NAN),
                trace.held_out_psnr.map_or("-".into(), |p| format!("{p:.2} dB"))
            );
            observer.stage_finished(&trace, &scene)?;
            result.traces.push(trace);
        }
        let end = result.traces.last().and_then(|t| t.held_out_objective);
        if let (Some(a), Some(b)) = (cycle_start, end) {
            if a > 0.0 && (a - b) / a < schedule.convergence_tolerance {
                result.converged = true;
                break;
            }
        }
        cycle_start = end;
    }
    result.scene = scene;
    Ok(result)
}

/// CSV with one row per iteration: `iteration,stage,objective,heldOutPSNR`.
/// The PSNR column is filled on the last row of each stage.
pub fn trace_csv(traces: &[StageTrace]) -> String {
    let mut out = String::from("iteration,stage,objective,heldOutPSNR\n");
    let mut it = 0usize;
    for t in traces {
        for (i, o) in t.objectives.iter().enumerate() {
            let psnr = match t.held_out_psnr {
                Some(p) if i + 1 == t.objectives.len() => format!("{p:.6}"),
                _ => String::new(),
            };
            let _ = writeln!(out, "{it},{},{o:.9e},{psnr}", t.group);
            it += 1;
        }
    }
    out
}

pub fn write_trace_csv(path: &Path, traces: &[StageTrace]) -> Result<()> {
    fs::write(path, trace_csv(traces)).map_err(|e| Error::io(path, e))
}
