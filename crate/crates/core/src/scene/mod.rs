//! Randomized scene generation with supervised control tracks.

mod io;

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{manifest_path, read_dataset, read_manifest, write_dataset, write_dataset_with};

use crate::error::{ensure, LssError, Result};
use crate::field::{FlagGrid, MacField2, MaxAbs, ScalarField};
use crate::par::Exec;
use crate::solver::{
    self, CupShape, InflowSource, ObstaclePose, SimState, SolverConfig, StepControls, DEFAULT_DT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    MovingSmoke,
    RotatingCup,
    RotatingMovingCup,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] =
        [SceneKind::MovingSmoke, SceneKind::RotatingCup, SceneKind::RotatingMovingCup];

    /// Number of supervised control parameters.
    pub fn n_controls(self) -> usize {
        match self {
            SceneKind::MovingSmoke | SceneKind::RotatingCup => 1,
            SceneKind::RotatingMovingCup => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SceneKind::MovingSmoke => 0,
            SceneKind::RotatingCup => 1,
            SceneKind::RotatingMovingCup => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Desk-scale resolution `(width, height)`.
    pub fn default_resolution(self) -> (usize, usize) {
        match self {
            SceneKind::MovingSmoke => (32, 64),
            SceneKind::RotatingCup => (48, 48),
            SceneKind::RotatingMovingCup => (64, 64),
        }
    }

    pub fn solver_config(self) -> SolverConfig {
        match self {
            SceneKind::MovingSmoke => SolverConfig::moving_smoke(),
            SceneKind::RotatingCup => SolverConfig::rotating_cup(),
            SceneKind::RotatingMovingCup => SolverConfig::rotating_moving_cup(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::MovingSmoke => "moving-smoke",
            SceneKind::RotatingCup => "rotating-cup",
            SceneKind::RotatingMovingCup => "rotating-moving-cup",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = LssError;

    /// Accepts the full names and the short forms `rot-cup` / `rot-mov-cup`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rot-cup" => return Ok(SceneKind::RotatingCup),
            "rot-mov-cup" => return Ok(SceneKind::RotatingMovingCup),
            _ => {}
        }
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LssError::contract(format!("unknown scene kind '{s}'")))
    }
}

/// Per-frame normalized control values, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrack {
    n_sp: usize,
    values: Vec<f64>,
}

impl ControlTrack {
    pub fn new(n_sp: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(n_sp >= 1, "a control track needs at least one control");
        ensure!(values.len() % n_sp == 0, "control values do not fill whole frames");
        ensure!(
            values.iter().all(|v| (-1.0..=1.0).contains(v)),
            "control values must lie in [-1, 1]"
        );
        Ok(Self { n_sp, values })
    }

    pub fn n_sp(&self) -> usize {
        self.n_sp
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.n_sp
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_sp..(k + 1) * self.n_sp]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, start: usize, end: usize) -> ControlTrack {
        ControlTrack { n_sp: self.n_sp, values: self.values[start * self.n_sp..end * self.n_sp].to_vec() }
    }
}

fn kind_salt(kind: SceneKind) -> u64 {
    0x9e37_79b9_7f4a_7c15u64.wrapping_mul(kind.code() as u64 + 1)
}

/// Smooth random control trajectory: per control a sum of three sinusoids,
/// divided by its largest magnitude.
pub fn gen_control_track(kind: SceneKind, seed: u64, frames: usize) -> Result<ControlTrack> {
    ensure!(frames >= 1, "a control track needs at least one frame");
    let n_sp = kind.n_controls();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind_salt(kind));
    let mut columns = Vec::with_capacity(n_sp);
    for _ in 0..n_sp {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.3..1.0), rng.gen_range(0.004..0.015), rng.gen_range(0.0..TAU)))
            .collect();
        let mut col: Vec<f64> = (0..frames)
            .map(|t| waves.iter().map(|&(a, f, p)| a * (TAU * f * t as f64 + p).sin()).sum())
            .collect();
        let peak = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            col.iter_mut().for_each(|v| *v = (*v / peak).clamp(-1.0, 1.0));
        }
        columns.push(col);
    }
    let mut values = Vec::with_capacity(frames * n_sp);
    for t in 0..frames {
        for col in &columns {
            values.push(col[t]);
        }
    }
    ControlTrack::new(n_sp, values)
}

/// Sets every cell whose center lies within `radius` of `center`, plus the
/// cell containing `center`, to full density.
pub fn apply_inflow(rho: &ScalarField, center: (f64, f64), radius: f64) -> ScalarField {
    let mut out = rho.clone();
    let (w, h) = rho.dims();
    let r2 = radius * radius;
    for j in 0..h {
        for i in 0..w {
            let dx = i as f64 + 0.5 - center.0;
            let dy = j as f64 + 0.5 - center.1;
            let home = center.0.floor() == i as f64 && center.1.floor() == j as f64;
            if home || dx * dx + dy * dy <= r2 {
                out.set(i, j, 1.0);
            }
        }
    }
    out
}

/// Cup geometry used by both cup scenes.
pub fn cup_shape(width: usize, height: usize) -> CupShape {
    let w = width as f64;
    CupShape { outer_width: 0.36 * w, outer_height: 0.3 * height as f64, wall: (0.06 * w).max(2.0) }
}

/// Maximum cup tilt in radians.
pub const MAX_CUP_ANGLE: f64 = PI / 4.0;

/// Maps normalized controls to the physical inflow and obstacle of one step.
pub fn physical_controls(kind: SceneKind, width: usize, height: usize, c: &[f64]) -> Result<StepControls> {
    ensure!(
        c.len() == kind.n_controls(),
        "{kind} expects {} controls, got {}",
        kind.n_controls(),
        c.len()
    );
    let (w, h) = (width as f64, height as f64);
    match kind {
        SceneKind::MovingSmoke => {
            let center = (0.5 * w + 0.3 * w * c[0], 0.12 * h);
            Ok(StepControls {
                inflow: Some(InflowSource { center, radius: w / 10.0 }),
                obstacle: None,
            })
        }
        SceneKind::RotatingCup | SceneKind::RotatingMovingCup => {
            let cx = match kind {
                SceneKind::RotatingMovingCup => 0.5 * w + 0.15 * w * c[1],
                _ => 0.5 * w,
            };
            let shape = cup_shape(width, height);
            let pose = ObstaclePose { center: (cx, 0.45 * h), angle: MAX_CUP_ANGLE * c[0], shape };
            let half_cavity = 0.5 * shape.outer_width - shape.wall;
            let radius = 0.45 * half_cavity;
            let body_y = -0.5 * shape.outer_height + shape.wall + radius + 0.5;
            let center = pose.to_world(0.0, body_y);
            Ok(StepControls { inflow: Some(InflowSource { center, radius }), obstacle: Some(pose) })
        }
    }
}

/// One recorded solver state.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub u: MacField2,
    pub rho: ScalarField,
    pub flags: FlagGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub kind: SceneKind,
    pub frames: Vec<Frame>,
    pub controls: ControlTrack,
    pub seed: u64,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.rho.dims()).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.frames.is_empty(), "scene has no frames");
        ensure!(
            self.frames.len() == self.controls.frames(),
            "scene has {} frames but {} control rows",
            self.frames.len(),
            self.controls.frames()
        );
        ensure!(self.controls.n_sp() == self.kind.n_controls(), "control count does not match scene kind");
        let d = self.dims();
        ensure!(
            self.frames.iter().all(|f| f.rho.dims() == d && f.u.dims() == d && f.flags.dims() == d),
            "frame dimensions are not uniform"
        );
        Ok(())
    }
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn record(state: &SimState) -> Frame {
    let mut u = state.u.clone();
    round_f32(&mut u.u_x);
    round_f32(&mut u.u_y);
    let mut rho = state.rho.clone();
    round_f32(rho.data_mut());
    Frame { u, rho, flags: state.flags.clone() }
}

/// Runs the solver for `frames` steps, recording the state after every step.
pub fn generate_scene(
    kind: SceneKind,
    resolution: (usize, usize),
    frames: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<SceneSequence> {
    let (w, h) = resolution;
    ensure!(w >= 16 && h >= 16, "scene resolution must be at least 16 per axis, got {w}x{h}");
    let mut controls = gen_control_track(kind, seed, frames)?;
    round_f32(&mut controls.values);
    let mut state = SimState::empty(w, h, DEFAULT_DT);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let step_controls = physical_controls(kind, w, h, controls.frame(k))?;
        state = solver::step(&state, &step_controls, cfg).map_err(|e| {
            log::error!("{kind} scene seed {seed} failed at frame {k}: {e}");
            e
        })?;
        out.push(record(&state));
    }
    Ok(SceneSequence { kind, frames: out, controls, seed })
}

/// Generates one scene per seed, in seed order.
pub fn generate_dataset(
    kind: SceneKind,
    resolution: (usize, usize),
    frames: usize,
    seeds: &[u64],
    cfg: &SolverConfig,
    exec: Exec,
) -> Result<Vec<SceneSequence>> {
    exec.map(seeds, |&s| generate_scene(kind, resolution, frames, s, cfg))
        .into_iter()
        .collect()
}

/// Dataset summary stored next to the binary container.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub kind: SceneKind,
    pub scenes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seeds: Vec<u64>,
    /// Largest face velocity magnitude over all frames.
    pub max_abs_u: f64,
    pub max_rho: f64,
    pub cfg: SolverConfig,
}

impl DatasetManifest {
    pub fn from_sequences(seqs: &[SceneSequence], cfg: &SolverConfig) -> Result<Self> {
        ensure!(!seqs.is_empty(), "manifest needs at least one scene");
        let first = &seqs[0];
        for s in seqs {
            s.validate()?;
            ensure!(
                s.kind == first.kind && s.dims() == first.dims() && s.len() == first.len(),
                "scenes in one dataset must share kind, resolution and frame count"
            );
        }
        let mut max_abs_u = 0.0f64;
        let mut max_rho = 0.0f64;
        for f in seqs.iter().flat_map(|s| &s.frames) {
            max_abs_u = max_abs_u.max(f.u.max_abs());
            max_rho = max_rho.max(f.rho.data().iter().fold(0.0f64, |m, &v| m.max(v)));
        }
        let (width, height) = first.dims();
        Ok(Self {
            kind: first.kind,
            scenes: seqs.len(),
            frames: first.len(),
            width,
            height,
            seeds: seqs.iter().map(|s| s.seed).collect(),
            max_abs_u,
            max_rho,
            cfg: *cfg,
        })
    }

    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "kind={}\nscenes={}\nframes={}\nwidth={}\nheight={}\nseeds={}\nmax_abs_u={:e}\nmax_rho={:e}\ncg_tol={:e}\ncg_max_iter={}\ngravity_x={:e}\ngravity_y={:e}\n",
            self.kind,
            self.scenes,
            self.frames,
            self.width,
            self.height,
            seeds.join(","),
            self.max_abs_u,
            self.max_rho,
            self.cfg.cg_tol,
            self.cfg.cg_max_iter,
            self.cfg.gravity.0,
            self.cfg.gravity.1,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                let (k, v) = trimmed.split_once('=').ok_or_else(|| LssError::Parse {
                    offset,
                    message: format!("manifest line '{trimmed}' is not key=value"),
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
            offset += line.len() as u64 + 1;
        }
        let get = |k: &str| {
            map.get(k).ok_or_else(|| LssError::Parse { offset: 0, message: format!("manifest lacks '{k}'") })
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| LssError::Parse { offset: 0, message: format!("manifest '{k}' is malformed: {v}") })
        }
        let seeds_text = get("seeds")?;
        let seeds = if seeds_text.is_empty() {
            Vec::new()
        } else {
            seeds_text.split(',').map(|s| num::<u64>("seeds", s.trim())).collect::<Result<_>>()?
        };
        Ok(Self {
            kind: get("kind")?.parse()?,
            scenes: num("scenes", get("scenes")?)?,
            frames: num("frames", get("frames")?)?,
            width: num("width", get("width")?)?,
            height: num("height", get("height")?)?,
            seeds,
            max_abs_u: num("max_abs_u", get("max_abs_u")?)?,
            max_rho: num("max_rho", get("max_rho")?)?,
            cfg: SolverConfig {
                cg_tol: num("cg_tol", get("cg_tol")?)?,
                cg_max_iter: num("cg_max_iter", get("cg_max_iter")?)?,
                gravity: (num("gravity_x", get("gravity_x")?)?, num("gravity_y", get("gravity_y")?)?),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::max_fluid_divergence;
    use proptest::prelude::*;

    #[test]
    fn control_counts_per_kind() {
        assert_eq!(SceneKind::MovingSmoke.n_controls(), 1);
        assert_eq!(SceneKind::RotatingCup.n_controls(), 1);
        assert_eq!(SceneKind::RotatingMovingCup.n_controls(), 2);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SceneKind::ALL {
            assert_eq!(k.name().parse::<SceneKind>().unwrap(), k);
            assert_eq!(SceneKind::from_code(k.code()), Some(k));
        }
        assert!("smoke".parse::<SceneKind>().is_err());
        assert_eq!("rot-cup".parse::<SceneKind>().unwrap(), SceneKind::RotatingCup);
        assert_eq!("rot-mov-cup".parse::<SceneKind>().unwrap(), SceneKind::RotatingMovingCup);
    }

    #[test]
    fn control_track_is_deterministic() {
        let a = gen_control_track(SceneKind::RotatingMovingCup, 7, 300).unwrap();
        let b = gen_control_track(SceneKind::RotatingMovingCup, 7, 300).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames(), 300);
        assert_eq!(a.n_sp(), 2);
    }

    #[test]
    fn different_seeds_give_different_tracks() {
        for kind in SceneKind::ALL {
            let tracks: Vec<ControlTrack> = (0..20).map(|s| gen_control_track(kind, s, 64).unwrap()).collect();
            for a in 0..tracks.len() {
                for b in a + 1..tracks.len() {
                    let differs = tracks[a].values().iter().zip(tracks[b].values()).any(|(x, y)| x != y);
                    assert!(differs, "{kind}: seeds {a} and {b} collide");
                }
            }
        }
    }

    #[test]
    fn zero_frames_is_a_contract_error() {
        assert!(matches!(gen_control_track(SceneKind::MovingSmoke, 0, 0), Err(LssError::Contract(_))));
    }

    #[test]
    fn inflow_sets_source_and_keeps_far_cells() {
        let rho = ScalarField::constant(16, 16, 0.25);
        let out = apply_inflow(&rho, (8.0, 5.0), 2.0);
        assert_eq!(out.get(8, 5), 1.0);
        for j in 0..16 {
            for i in 0..16 {
                let d = ((i as f64 + 0.5 - 8.0).powi(2) + (j as f64 + 0.5 - 5.0).powi(2)).sqrt();
                if d > 2.0 {
                    assert_eq!(out.get(i, j), 0.25);
                } else {
                    assert_eq!(out.get(i, j), 1.0);
                }
            }
        }
        assert_eq!(apply_inflow(&out, (8.0, 5.0), 2.0), out);
    }

    #[test]
    fn inflow_with_tiny_radius_still_hits_home_cell() {
        let out = apply_inflow(&ScalarField::zeros(8, 8), (3.2, 4.9), 0.1);
        assert_eq!(out.get(3, 4), 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn cup_poses_stay_inside_domain_over_full_range() {
        for kind in [SceneKind::RotatingCup, SceneKind::RotatingMovingCup] {
            let (w, h) = kind.default_resolution();
            for a in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                for b in [-1.0, 0.0, 1.0] {
                    let c: Vec<f64> = [a, b][..kind.n_controls()].to_vec();
                    let ctl = physical_controls(kind, w, h, &c).unwrap();
                    let pose = ctl.obstacle.unwrap();
                    pose.validate(w, h).unwrap();
                    let src = ctl.inflow.unwrap();
                    assert!(!pose.contains(src.center.0, src.center.1), "inflow sits in the cup wall");
                }
            }
        }
    }

    #[test]
    fn wrong_control_count_is_rejected() {
        assert!(physical_controls(SceneKind::RotatingMovingCup, 64, 64, &[0.0]).is_err());
    }

    #[test]
    fn generated_scene_shape_and_projection() {
        let cfg = SolverConfig::rotating_cup();
        let s = generate_scene(SceneKind::RotatingCup, (24, 24), 12, 3, &cfg).unwrap();
        s.validate().unwrap();
        assert_eq!(s.len(), 12);
        for f in &s.frames {
            assert!(max_fluid_divergence(&f.u, &f.flags).unwrap() <= 10.0 * cfg.cg_tol);
            assert!(f.rho.data().iter().all(|&r| (0.0..=1.0).contains(&r)));
        }
        assert!(s.frames.last().unwrap().rho.sum() > 0.0);
    }

    #[test]
    fn small_resolution_is_rejected() {
        let cfg = SolverConfig::moving_smoke();
        assert!(matches!(
            generate_scene(SceneKind::MovingSmoke, (8, 32), 2, 0, &cfg),
            Err(LssError::Contract(_))
        ));
    }

    #[test]
    fn manifest_text_round_trip() {
        let cfg = SolverConfig::moving_smoke();
        let seqs = generate_dataset(SceneKind::MovingSmoke, (16, 24), 4, &[5, 9], &cfg, Exec::Sequential).unwrap();
        let m = DatasetManifest::from_sequences(&seqs, &cfg).unwrap();
        assert!(m.max_abs_u > 0.0 && m.max_rho > 0.0);
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn control_track_bounded(seed in any::<u64>(), frames in 1usize..400) {
            for kind in SceneKind::ALL {
                let t = gen_control_track(kind, seed, frames).unwrap();
                prop_assert_eq!(t.frames(), frames);
                prop_assert!(t.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn control_mapping_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let src = |c: f64| physical_controls(SceneKind::MovingSmoke, 32, 64, &[c]).unwrap().inflow.unwrap().center.0;
            prop_assert!(src(lo) <= src(hi));
            let angle = |c: f64| physical_controls(SceneKind::RotatingCup, 48, 48, &[c]).unwrap().obstacle.unwrap().angle;
            prop_assert!(angle(lo) <= angle(hi));
            let shift = |c: f64| physical_controls(SceneKind::RotatingMovingCup, 64, 64, &[0.0, c]).unwrap().obstacle.unwrap().center.0;
            prop_assert!(shift(lo) <= shift(hi));
        }
    }
}
