//! Inference rollouts, PSNR evaluation, latent-space export and timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure, LssError, Result};
use crate::field::{center_to_mac, mac_to_center, CenterVelocity, FlagGrid, MacField2, MaxAbs, ScalarField};
use crate::nn::{Checkpoint, LatentCode};
use crate::par::Exec;
use crate::scene::{apply_inflow, physical_controls, SceneKind, SceneSequence};
use crate::solver::{self, advect_scalar, mask_solid, obstacle_velocity, rasterize_obstacle, set_wall_bcs, SimState, StepControls, DEFAULT_DT};

/// PSNR reported for (near-)identical fields.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Pure latent rollout; the decoded density is the output.
    VelDen,
    /// Predicted velocity advects an externally tracked density, which is
    /// re-encoded into the density slots every step.
    Vel,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::VelDen => "velden",
            Mode::Vel => "vel",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = LssError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "velden" => Ok(Mode::VelDen),
            "vel" => Ok(Mode::Vel),
            _ => Err(LssError::contract(format!("unknown rollout mode '{s}' (expected vel or velden)"))),
        }
    }
}

/// Per-step edits of the externally tracked state, in grid-cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScenarioMutator {
    /// Solid disc: its cells become solid and hold no density.
    InsertObstacle { center: (f64, f64), radius: f64 },
    /// Extra full-density source, applied before advection.
    AddInflow { center: (f64, f64), radius: f64 },
    /// Axis-aligned box `[x0, x1] x [y0, y1]` whose density is removed.
    AddSink { x0: f64, y0: f64, x1: f64, y1: f64 },
}

fn in_disc(i: usize, j: usize, c: (f64, f64), r: f64) -> bool {
    let dx = i as f64 + 0.5 - c.0;
    let dy = j as f64 + 0.5 - c.1;
    dx * dx + dy * dy <= r * r
}

impl ScenarioMutator {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        let inside = |x: f64, y: f64| (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
        match *self {
            ScenarioMutator::InsertObstacle { center, radius } | ScenarioMutator::AddInflow { center, radius } => {
                ensure!(radius > 0.0, "mutator radius must be positive");
                ensure!(
                    inside(center.0 - radius, center.1 - radius) && inside(center.0 + radius, center.1 + radius),
                    "mutator disc at {center:?} radius {radius} leaves the {width}x{height} domain"
                );
            }
            ScenarioMutator::AddSink { x0, y0, x1, y1 } => {
                ensure!(x0 < x1 && y0 < y1, "sink box must have positive extent");
                ensure!(inside(x0, y0) && inside(x1, y1), "sink box leaves the {width}x{height} domain");
            }
        }
        Ok(())
    }

    /// Whether cell `(i, j)` is forced to zero density.
    pub fn clears(&self, i: usize, j: usize) -> bool {
        match *self {
            ScenarioMutator::InsertObstacle { center, radius } => in_disc(i, j, center, radius),
            ScenarioMutator::AddSink { x0, y0, x1, y1 } => {
                let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
                (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
            }
            ScenarioMutator::AddInflow { .. } => false,
        }
    }
}

impl FromStr for ScenarioMutator {
    type Err = LssError;

    /// `obstacle:x,y,r`, `inflow:x,y,r` or `sink:x0,y0,x1,y1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LssError::contract(format!("malformed mutator '{s}'"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let v = args.split(',').map(|a| a.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        match (kind, v.as_slice()) {
            ("obstacle", [x, y, r]) => Ok(ScenarioMutator::InsertObstacle { center: (*x, *y), radius: *r }),
            ("inflow", [x, y, r]) => Ok(ScenarioMutator::AddInflow { center: (*x, *y), radius: *r }),
            ("sink", [x0, y0, x1, y1]) => Ok(ScenarioMutator::AddSink { x0: *x0, y0: *y0, x1: *x1, y1: *y1 }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub mode: Mode,
    pub steps: usize,
    pub mutators: Vec<ScenarioMutator>,
}

impl RolloutConfig {
    pub fn new(mode: Mode, steps: usize) -> Self {
        Self { mode, steps, mutators: Vec::new() }
    }
}

/// Predicted physical fields of one rollout. Index `k` is scene frame
/// `window + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub mode: Mode,
    /// First scene frame that was predicted.
    pub first_frame: usize,
    pub velocity: Vec<CenterVelocity>,
    pub density: Vec<ScalarField>,
    /// Codes handed to the predictor, seed codes included.
    pub codes: Vec<LatentCode>,
    /// Seconds per step spent on physics (advection, boundaries, mutators).
    pub solve_secs: Vec<f64>,
    pub total_secs: Vec<f64>,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.density.len()
    }
}

fn flags_and_obstacle_velocity(
    ctrl: &StepControls,
    prev: Option<&StepControls>,
    width: usize,
    height: usize,
    mutators: &[ScenarioMutator],
) -> Result<(FlagGrid, MacField2)> {
    let (mut flags, u_obs) = match ctrl.obstacle {
        Some(pose) => {
            let before = prev.and_then(|p| p.obstacle).unwrap_or(pose);
            (rasterize_obstacle(&pose, width, height)?, obstacle_velocity(&before, &pose, DEFAULT_DT, width, height)?)
        }
        None => (FlagGrid::closed_box(width, height), MacField2::zeros(width, height)),
    };
    for m in mutators {
        if let ScenarioMutator::InsertObstacle { center, radius } = *m {
            for j in 0..height {
                for i in 0..width {
                    if in_disc(i, j, center, radius) {
                        flags.set_solid(i, j);
                    }
                }
            }
        }
    }
    Ok((flags, u_obs))
}

fn clear_regions(rho: &mut ScalarField, mutators: &[ScenarioMutator]) {
    let (w, h) = rho.dims();
    for m in mutators {
        for j in 0..h {
            for i in 0..w {
                if m.clears(i, j) {
                    rho.set(i, j, 0.0);
                }
            }
        }
    }
}

/// One step of the externally tracked density: inflows, advection with
/// `vel` under the previous flags, solid masking and region clearing.
/// Returns the new density and flags.
pub fn advance_density(
    rho: &ScalarField,
    vel: &CenterVelocity,
    prev_flags: &FlagGrid,
    ctrl: &StepControls,
    prev_ctrl: Option<&StepControls>,
    mutators: &[ScenarioMutator],
) -> Result<(ScalarField, FlagGrid)> {
    let (w, h) = rho.dims();
    let (flags, u_obs) = flags_and_obstacle_velocity(ctrl, prev_ctrl, w, h, mutators)?;
    let u = set_wall_bcs(&center_to_mac(vel)?, &flags, &u_obs)?;
    let mut src = rho.clone();
    if let Some(inflow) = ctrl.inflow {
        src = apply_inflow(&src, inflow.center, inflow.radius);
    }
    for m in mutators {
        if let ScenarioMutator::AddInflow { center, radius } = *m {
            src = apply_inflow(&src, center, radius);
        }
    }
    let mut next = advect_scalar(&src, &u, DEFAULT_DT, prev_flags)?;
    mask_solid(&mut next, &flags);
    clear_regions(&mut next, mutators);
    Ok((next, flags))
}

fn seed_codes(ckpt: &Checkpoint, scene: &SceneSequence) -> Result<Vec<LatentCode>> {
    let w = ckpt.net.cfg.window;
    (0..w)
        .map(|k| {
            let f = &scene.frames[k];
            let mut c = ckpt.net.encode(&ckpt.stats.normalize(&f.u, &f.rho)?)?;
            c.set_sup(scene.controls.frame(k))?;
            Ok(c)
        })
        .collect()
}

fn check_inputs(ckpt: &Checkpoint, scene: &SceneSequence, cfg: &RolloutConfig) -> Result<()> {
    let net = &ckpt.net.cfg;
    ensure!(cfg.steps >= 1, "rollouts need at least one step");
    scene.validate()?;
    ensure!(
        scene.dims() == (net.width, net.height),
        "scene resolution {:?} does not match the checkpoint's {}x{}",
        scene.dims(),
        net.width,
        net.height
    );
    ensure!(scene.controls.n_sp() == net.n_sp, "scene has {} controls, checkpoint expects {}", scene.controls.n_sp(), net.n_sp);
    ensure!(
        scene.len() >= net.window + cfg.steps,
        "scene of {} frames cannot seed a window of {} and script {} steps",
        scene.len(),
        net.window,
        cfg.steps
    );
    Ok(())
}

/// Fully latent rollout seeded by full encodes of the first `window` scene
/// frames. Supervised slots of every predicted code are overwritten with
/// the scene's scripted controls before decoding and reuse.
pub fn rollout_velden(ckpt: &Checkpoint, scene: &SceneSequence, cfg: &RolloutConfig) -> Result<Rollout> {
    check_inputs(ckpt, scene, cfg)?;
    ensure!(cfg.mutators.is_empty(), "scenario mutators act on the reinjected density and need vel mode");
    let w = ckpt.net.cfg.window;
    let mut window = seed_codes(ckpt, scene)?;
    let mut out = Rollout {
        mode: Mode::VelDen,
        first_frame: w,
        velocity: Vec::with_capacity(cfg.steps),
        density: Vec::with_capacity(cfg.steps),
        codes: window.clone(),
        solve_secs: Vec::with_capacity(cfg.steps),
        total_secs: Vec::with_capacity(cfg.steps),
    };
    for t in w..w + cfg.steps {
        let started = Instant::now();
        let (_, mut next) = ckpt.net.predict(&window)?;
        next.set_sup(scene.controls.frame(t))?;
        let x = ckpt.net.decode(&next)?;
        out.velocity.push(ckpt.stats.denormalize_velocity(&x));
        out.density.push(x.density());
        window.remove(0);
        window.push(next.clone());
        out.codes.push(next);
        out.solve_secs.push(0.0);
        out.total_secs.push(started.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Rollout with density reinjection: the decoded velocity advects the
/// externally tracked density, whose encode replaces the density slots of
/// the predicted code. The network's own density output is discarded.
pub fn rollout_vel(ckpt: &Checkpoint, scene: &SceneSequence, cfg: &RolloutConfig) -> Result<Rollout> {
    check_inputs(ckpt, scene, cfg)?;
    let layout = ckpt.net.layout();
    let den = layout
        .den_range()
        .ok_or_else(|| LssError::contract("vel mode needs a checkpoint with a split latent space"))?;
    let (width, height) = scene.dims();
    for m in &cfg.mutators {
        m.validate(width, height)?;
    }
    let kind = scene.kind;
    let w = ckpt.net.cfg.window;
    let controls = |t: usize| physical_controls(kind, width, height, scene.controls.frame(t));

    let mut window = seed_codes(ckpt, scene)?;
    let mut rho = scene.frames[w - 1].rho.clone();
    let mut flags = scene.frames[w - 1].flags.clone();
    clear_regions(&mut rho, &cfg.mutators);
    let mut prev_ctrl = controls(w - 1)?;
    let mut out = Rollout {
        mode: Mode::Vel,
        first_frame: w,
        velocity: Vec::with_capacity(cfg.steps),
        density: Vec::with_capacity(cfg.steps),
        codes: window.clone(),
        solve_secs: Vec::with_capacity(cfg.steps),
        total_secs: Vec::with_capacity(cfg.steps),
    };
    for t in w..w + cfg.steps {
        let started = Instant::now();
        let (_, mut pred) = ckpt.net.predict(&window)?;
        pred.set_sup(scene.controls.frame(t))?;
        let x = ckpt.net.decode(&pred)?;
        let vel = ckpt.stats.denormalize_velocity(&x);

        let solve_started = Instant::now();
        let ctrl = controls(t)?;
        let (next_rho, next_flags) = advance_density(&rho, &vel, &flags, &ctrl, Some(&prev_ctrl), &cfg.mutators)?;
        let solve = solve_started.elapsed().as_secs_f64();

        let reinjected = ckpt.net.encode(&ckpt.stats.normalize_center(&vel, &next_rho)?)?;
        let mut code = pred;
        code.values_mut()[den.clone()].copy_from_slice(&reinjected.values()[den.clone()]);

        rho = next_rho;
        flags = next_flags;
        prev_ctrl = ctrl;
        out.velocity.push(vel);
        out.density.push(rho.clone());
        window.remove(0);
        window.push(code.clone());
        out.codes.push(code);
        out.solve_secs.push(solve);
        out.total_secs.push(started.elapsed().as_secs_f64());
    }
    Ok(out)
}

pub fn rollout(ckpt: &Checkpoint, scene: &SceneSequence, cfg: &RolloutConfig) -> Result<Rollout> {
    match cfg.mode {
        Mode::VelDen => rollout_velden(ckpt, scene, cfg),
        Mode::Vel => rollout_vel(ckpt, scene, cfg),
    }
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    ensure!(a.len() == b.len() && !a.is_empty(), "psnr needs equal, non-empty inputs ({} vs {})", a.len(), b.len());
    ensure!(peak > 0.0 && peak.is_finite(), "psnr peak must be positive, got {peak}");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < peak * peak * 10f64.powf(-PSNR_CAP / 10.0) {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &ScalarField, b: &ScalarField, peak: f64) -> Result<f64> {
    ensure!(a.dims() == b.dims(), "psnr on fields of different shape: {:?} vs {:?}", a.dims(), b.dims());
    psnr_slices(a.data(), b.data(), peak)
}

/// Both velocity components compared at once.
pub fn psnr_velocity(a: &CenterVelocity, b: &CenterVelocity, peak: f64) -> Result<f64> {
    ensure!(a.dims() == b.dims(), "psnr on fields of different shape: {:?} vs {:?}", a.dims(), b.dims());
    let flat = |v: &CenterVelocity| v.ux.data().iter().chain(v.uy.data()).copied().collect::<Vec<_>>();
    psnr_slices(&flat(a), &flat(b), peak)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub psnr_u: Vec<f64>,
    pub psnr_rho: Vec<f64>,
    pub mean_u: f64,
    pub mean_rho: f64,
    pub solve_secs: Vec<f64>,
    pub total_secs: Vec<f64>,
}

impl RolloutReport {
    /// Means over the first `horizon` steps.
    pub fn means_at(&self, horizon: usize) -> Result<(f64, f64)> {
        ensure!(
            horizon >= 1 && horizon <= self.psnr_rho.len(),
            "horizon {horizon} outside 1..={}",
            self.psnr_rho.len()
        );
        let m = |v: &[f64]| v[..horizon].iter().sum::<f64>() / horizon as f64;
        Ok((m(&self.psnr_u), m(&self.psnr_rho)))
    }
}

/// Per-step PSNR of a rollout against the scene it was seeded from. The
/// velocity peak is the largest ground-truth magnitude over the compared
/// frames, the density peak is 1.
pub fn compare(rollout: &Rollout, scene: &SceneSequence) -> Result<RolloutReport> {
    let first = rollout.first_frame;
    let n = rollout.steps();
    ensure!(scene.len() >= first + n, "scene is shorter than the rollout");
    let truth: Vec<CenterVelocity> = scene.frames[first..first + n].iter().map(|f| mac_to_center(&f.u)).collect();
    let peak_u = truth.iter().map(|v| v.max_abs()).fold(0.0, f64::max);
    let peak_u = if peak_u > 0.0 { peak_u } else { 1.0 };
    let mut psnr_u = Vec::with_capacity(n);
    let mut psnr_rho = Vec::with_capacity(n);
    for k in 0..n {
        psnr_u.push(psnr_velocity(&rollout.velocity[k], &truth[k], peak_u)?);
        psnr_rho.push(psnr(&rollout.density[k], &scene.frames[first + k].rho, 1.0)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(RolloutReport {
        mean_u: mean(&psnr_u),
        mean_rho: mean(&psnr_rho),
        psnr_u,
        psnr_rho,
        solve_secs: rollout.solve_secs.clone(),
        total_secs: rollout.total_secs.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub scene: usize,
    pub mode: Mode,
    pub report: RolloutReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub horizon: usize,
    pub psnr_u: f64,
    pub psnr_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneResult>,
    /// Per mode and horizon: per-frame means, averaged over scenes.
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    /// `(psnr_u, psnr_rho)` of one scene over the first `horizon` steps.
    pub fn scene_means(&self, scene: usize, mode: Mode, horizon: usize) -> Result<(f64, f64)> {
        self.scenes
            .iter()
            .find(|r| r.scene == scene && r.mode == mode)
            .ok_or_else(|| LssError::contract(format!("no result for scene {scene} in {mode} mode")))?
            .report
            .means_at(horizon)
    }

    pub fn summary_for(&self, mode: Mode, horizon: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.mode == mode && r.horizon == horizon)
    }

    /// Per-step rows `scene,mode,step,psnr_u,psnr_rho`, then a summary block.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,mode,step,psnr_u,psnr_rho\n");
        for r in &self.scenes {
            for (k, (u, rho)) in r.report.psnr_u.iter().zip(&r.report.psnr_rho).enumerate() {
                let _ = writeln!(s, "{},{},{},{u:.6},{rho:.6}", r.scene, r.mode, k + 1);
            }
        }
        s.push_str("# summary\nmode,horizon,psnr_u,psnr_rho\n");
        for r in &self.summary {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", r.mode, r.horizon, r.psnr_u, r.psnr_rho);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Rolls every scene out in every mode up to the largest horizon and
/// averages PSNR per frame, then per scene.
pub fn evaluate(ckpt: &Checkpoint, scenes: &[SceneSequence], modes: &[Mode], horizons: &[usize], exec: Exec) -> Result<EvalReport> {
    ensure!(!scenes.is_empty(), "evaluation needs at least one test scene");
    ensure!(!modes.is_empty() && !horizons.is_empty(), "evaluation needs modes and horizons");
    let steps = *horizons.iter().max().expect("nonempty");
    ensure!(horizons.iter().all(|&h| h >= 1), "horizons must be positive");
    let jobs: Vec<(usize, Mode)> = (0..scenes.len()).flat_map(|s| modes.iter().map(move |&m| (s, m))).collect();
    let results = exec.map(&jobs, |&(s, mode)| {
        let r = rollout(ckpt, &scenes[s], &RolloutConfig::new(mode, steps))?;
        Ok(SceneResult { scene: s, mode, report: compare(&r, &scenes[s])? })
    });
    let scenes_out = results.into_iter().collect::<Result<Vec<SceneResult>>>()?;
    let mut summary = Vec::new();
    for &mode in modes {
        for &h in horizons {
            let (mut u, mut rho) = (0.0, 0.0);
            let of_mode: Vec<&SceneResult> = scenes_out.iter().filter(|r| r.mode == mode).collect();
            for r in &of_mode {
                let (a, b) = r.report.means_at(h)?;
                u += a;
                rho += b;
            }
            let n = of_mode.len() as f64;
            summary.push(SummaryRow { mode, horizon: h, psnr_u: u / n, psnr_rho: rho / n });
        }
    }
    Ok(EvalReport { scenes: scenes_out, summary })
}

/// Full encodes of every frame of every scene, supervised slots removed.
pub fn latent_trajectories(ckpt: &Checkpoint, scenes: &[SceneSequence], exec: Exec) -> Result<Vec<Vec<Vec<f64>>>> {
    let state = ckpt.net.layout().state_range();
    exec.map(scenes, |scene| {
        scene
            .frames
            .iter()
            .map(|f| Ok(ckpt.net.encode(&ckpt.stats.normalize(&f.u, &f.rho)?)?.values()[state.clone()].to_vec()))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

/// Divides every dimension by its largest magnitude over all trajectories.
/// Dimensions that are zero everywhere stay zero.
pub fn normalize_trajectories(trajs: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let d = trajs.iter().flatten().next().map_or(0, |p| p.len());
    let mut scale = vec![0.0f64; d];
    for p in trajs.iter().flatten() {
        for (s, v) in scale.iter_mut().zip(p) {
            *s = s.max(v.abs());
        }
    }
    trajs
        .iter()
        .map(|t| {
            t.iter()
                .map(|p| p.iter().zip(&scale).map(|(v, s)| if *s > 0.0 { v / s } else { 0.0 }).collect())
                .collect()
        })
        .collect()
}

/// Mean Euclidean distance between consecutive points.
pub fn smoothness_metric(traj: &[Vec<f64>]) -> Result<f64> {
    ensure!(traj.len() >= 2, "smoothness needs at least two codes");
    let total: f64 = traj
        .windows(2)
        .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    Ok(total / (traj.len() - 1) as f64)
}

/// Principal components of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues of the (1/N) covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors, in the order of `eigenvalues`.
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        ensure!(!points.is_empty(), "pca needs at least one point");
        let d = points[0].len();
        ensure!(points.iter().all(|p| p.len() == d), "pca points differ in dimension");
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for p in points {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let components = order
            .iter()
            .map(|&k| {
                let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                // deterministic sign: largest entry positive
                let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if big < 0.0 {
                    v.iter().map(|x| -x).collect()
                } else {
                    v
                }
            })
            .collect();
        Ok(Self { mean, eigenvalues, components })
    }

    pub fn project(&self, p: &[f64], k: usize) -> Vec<f64> {
        self.components
            .iter()
            .take(k)
            .map(|c| c.iter().zip(p).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint {
    pub scene: usize,
    pub frame: usize,
    pub p: [f64; 3],
}

/// Drops supervised slots, normalizes each dimension by its largest
/// magnitude over all scenes and projects onto the top three principal
/// components. A set without variance yields all-zero points.
pub fn export_latent_trajectories(ckpt: &Checkpoint, scenes: &[SceneSequence], exec: Exec) -> Result<Vec<LatentPoint>> {
    ensure!(scenes.len() >= 2, "latent export needs at least two scenes");
    let trajs = normalize_trajectories(&latent_trajectories(ckpt, scenes, exec)?);
    let all: Vec<Vec<f64>> = trajs.iter().flatten().cloned().collect();
    let pca = Pca::fit(&all)?;
    let degenerate = pca.eigenvalues.iter().all(|&e| e <= 0.0);
    if degenerate {
        log::warn!("latent set has no variance; exporting zero components");
    }
    let mut out = Vec::with_capacity(all.len());
    for (s, t) in trajs.iter().enumerate() {
        for (f, p) in t.iter().enumerate() {
            let mut q = [0.0; 3];
            if !degenerate {
                for (k, v) in pca.project(p, 3).into_iter().enumerate() {
                    q[k] = v;
                }
            }
            out.push(LatentPoint { scene: s, frame: f, p: q });
        }
    }
    Ok(out)
}

pub fn latent_csv(points: &[LatentPoint]) -> String {
    let mut s = String::from("scene,frame,p1,p2,p3\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:e},{:e},{:e}", p.scene, p.frame, p.p[0], p.p[1], p.p[2]);
    }
    s
}

/// Mean seconds per step; `solve` is the pressure solve for the simulation
/// and the density advection for the prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub sim_solve: f64,
    pub sim_total: f64,
    pub pred_solve: f64,
    pub pred_total: f64,
    pub steps: usize,
}

/// Times `steps` solver steps and `steps` Vel-mode prediction steps per
/// scene, after one untimed warm-up step of each.
pub fn bench_timing(ckpt: &Checkpoint, scenes: &[SceneSequence], steps: usize) -> Result<Timing> {
    ensure!(!scenes.is_empty() && steps >= 1, "timing needs scenes and steps");
    let (mut ss, mut st, mut ps, mut pt) = (0.0, 0.0, 0.0, 0.0);
    for scene in scenes {
        let kind: SceneKind = scene.kind;
        let (w, h) = scene.dims();
        let cfg = kind.solver_config();
        ensure!(scene.len() > steps, "scene too short for {steps} timed steps");
        let mut state = SimState::empty(w, h, DEFAULT_DT);
        for t in 0..=steps {
            let ctrl = physical_controls(kind, w, h, scene.controls.frame(t))?;
            let (next, stats) = solver::step_with_stats(&state, &ctrl, &cfg)?;
            if t > 0 {
                ss += stats.solve_secs;
                st += stats.total_secs;
            }
            state = next;
        }
        let r = rollout_vel(ckpt, scene, &RolloutConfig::new(Mode::Vel, steps.min(scene.len() - ckpt.net.cfg.window)))?;
        let n = r.steps();
        ps += r.solve_secs[1..].iter().sum::<f64>() * steps as f64 / (n - 1).max(1) as f64;
        pt += r.total_secs[1..].iter().sum::<f64>() * steps as f64 / (n - 1).max(1) as f64;
    }
    let n = (scenes.len() * steps) as f64;
    Ok(Timing { sim_solve: ss / n, sim_total: st / n, pred_solve: ps / n, pred_total: pt / n, steps })
}

/// 8-bit binary PGM of a field clamped to `[0, 1]`, top row first (largest
/// `j` at the top of the image).
pub fn pgm_bytes(field: &ScalarField) -> Vec<u8> {
    let (w, h) = field.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for j in (0..h).rev() {
        for i in 0..w {
            out.push((field.get(i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, field: &ScalarField) -> Result<()> {
    fs::write(path, pgm_bytes(field))?;
    Ok(())
}
