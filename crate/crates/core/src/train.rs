//! Joint training of encoder, decoder and predictor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, LssError, Result};
use crate::field::{FieldTensor, MaxAbs, FIELD_CHANNELS};
use crate::losses::{ae_node, split_node, sup_node, LossReport, LossWeights};
use crate::nn::{build_decoder, build_encoder, build_predictor, Checkpoint, Grads, Graph, NetConfig, Network, NormStats, ParamStore, Var};
use crate::par::Exec;
use crate::scene::SceneSequence;

/// Network size preset; resolution, latent layout and window come from the
/// training configuration and data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arch {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub n_i: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub split_fraction: f64,
    pub total_dim: usize,
    pub arch: Arch,
    /// Fraction of the scenes held back for validation (at least one scene
    /// when the dataset has two or more).
    pub val_fraction: f64,
    /// Validation windows evaluated per check, spread evenly over the
    /// validation scenes.
    pub val_windows: usize,
    /// Steps between validation checks; 0 validates once per epoch.
    pub val_every: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 2,
            n_i: 6,
            batch: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            max_steps: None,
            seed: 0,
            weights: LossWeights::default(),
            split_fraction: 0.66,
            total_dim: 16,
            arch: Arch::Desk,
            val_fraction: 0.1,
            val_windows: 32,
            val_every: 0,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    /// Frames per training sample.
    pub fn sample_len(&self) -> usize {
        self.window + self.n_i
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_i >= 1, "n_i must be at least 1");
        ensure!(self.window >= 1, "window must be at least 1");
        ensure!(self.batch >= 1, "batch must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "Adam epsilon must be positive");
        ensure!((0.0..1.0).contains(&self.val_fraction), "validation fraction must lie in [0, 1)");
        self.weights.validate()
    }

    /// Network configuration for fields of `width x height` with `n_sp`
    /// supervised controls.
    pub fn net_config(&self, width: usize, height: usize, n_sp: usize) -> NetConfig {
        let base = match self.arch {
            Arch::Desk => NetConfig::desk(width, height, n_sp),
            Arch::Full => NetConfig::full(width, height, n_sp),
        };
        NetConfig { total_dim: self.total_dim, split_fraction: self.split_fraction, window: self.window, ..base }
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let w = &self.weights;
        [
            ("window", self.window.to_string()),
            ("n_i", self.n_i.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string())),
            ("weights", format!("{},{},{},{},{}", w.w_ae_direct, w.w_sup, w.w_split_vel, w.w_split_den, w.w_ae_pred)),
            ("val_fraction", self.val_fraction.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `w + n_i` consecutive normalized frames of one scene and their controls.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub scene: usize,
    pub start: usize,
    pub frames: Vec<FieldTensor>,
    pub controls: Vec<Vec<f64>>,
}

/// Start of a window inside a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub scene: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Every start position once.
    Exhaustive,
    /// This many uniformly drawn start positions per scene.
    Random(usize),
}

/// Window positions plus the number of scenes skipped for being shorter
/// than one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Windows {
    pub refs: Vec<WindowRef>,
    pub skipped: usize,
}

/// Window start positions of length `w + n_i`, never crossing scene
/// boundaries. `scene_lengths[k]` is the frame count of scene `k`. The order
/// is shuffled deterministically by `seed`.
pub fn make_windows(scene_lengths: &[usize], w: usize, n_i: usize, mode: WindowMode, seed: u64) -> Windows {
    let n = w + n_i;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refs = Vec::new();
    let mut skipped = 0;
    for (scene, &len) in scene_lengths.iter().enumerate() {
        if len < n {
            skipped += 1;
            continue;
        }
        let positions = len - n + 1;
        match mode {
            WindowMode::Exhaustive => refs.extend((0..positions).map(|start| WindowRef { scene, start })),
            WindowMode::Random(k) => {
                refs.extend((0..k).map(|_| WindowRef { scene, start: rng.gen_range(0..positions) }))
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} scene(s) shorter than {n} frames skipped");
    }
    refs.shuffle(&mut rng);
    Windows { refs, skipped }
}

/// Normalized frames of one scene, ready for sampling.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub frames: Vec<FieldTensor>,
    pub controls: Vec<Vec<f64>>,
}

impl PreparedScene {
    pub fn new(seq: &SceneSequence, stats: &NormStats) -> Result<Self> {
        seq.validate()?;
        let frames = seq.frames.iter().map(|f| stats.normalize(&f.u, &f.rho)).collect::<Result<Vec<_>>>()?;
        let controls = (0..seq.len()).map(|k| seq.controls.frame(k).to_vec()).collect();
        Ok(Self { frames, controls })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sample(&self, scene: usize, start: usize, n: usize) -> Result<TrainingSample> {
        ensure!(start + n <= self.len(), "window [{start}, {}) exceeds a scene of {} frames", start + n, self.len());
        Ok(TrainingSample {
            scene,
            start,
            frames: self.frames[start..start + n].to_vec(),
            controls: self.controls[start..start + n].to_vec(),
        })
    }
}

/// Velocity scale over a set of scenes: the largest face velocity magnitude.
pub fn norm_stats(scenes: &[SceneSequence]) -> NormStats {
    let m = scenes.iter().flat_map(|s| &s.frames).map(|f| f.u.max_abs()).fold(0.0, f64::max);
    NormStats { vel_scale: if m > 0.0 { m } else { 1.0 } }
}

/// Loss nodes of one sample's training graph. Terms with zero weight are
/// not built.
#[derive(Debug, Clone, Default)]
pub struct SampleGraph {
    pub total: Option<Var>,
    pub ae_direct: Option<Var>,
    pub sup: Option<Var>,
    pub split_vel: Option<Var>,
    pub split_den: Option<Var>,
    pub ae_pred: Vec<Var>,
}

fn masked(x: &FieldTensor, keep_velocity: bool) -> Vec<f64> {
    let n = x.width() * x.height();
    let mut chw = x.to_chw();
    if keep_velocity {
        chw[2 * n..].fill(0.0);
    } else {
        chw[..2 * n].fill(0.0);
    }
    chw
}

/// Builds the full per-sample loss: direct reconstruction of the first
/// frame, split losses on masked encodes, supervised losses on the window
/// encodes and `n_i` autoregressive predictions, each decoded and compared
/// with the following ground-truth frame.
pub fn build_sample_graph(g: &mut Graph, net: &NetConfig, sample: &TrainingSample, n_i: usize, w: &LossWeights) -> Result<SampleGraph> {
    let win = net.window;
    ensure!(
        sample.frames.len() == win + n_i && sample.controls.len() == win + n_i,
        "sample holds {} frames, expected {}",
        sample.frames.len(),
        win + n_i
    );
    let layout = net.layout()?;
    let shape = vec![FIELD_CHANNELS, net.height, net.width];
    let mut out = SampleGraph::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();

    let need_pred = w.w_ae_pred > 0.0;
    let n_enc = if need_pred { win } else { 1 };
    let mut codes = Vec::with_capacity(win);
    let mut frames = Vec::with_capacity(win);
    for k in 0..n_enc {
        let x = g.input(shape.clone(), sample.frames[k].to_chw())?;
        codes.push(build_encoder(g, net, x)?);
        frames.push(x);
    }

    if w.w_ae_direct > 0.0 {
        let x_hat = build_decoder(g, net, codes[0])?;
        let l = ae_node(g, frames[0], x_hat)?;
        terms.push((l, w.w_ae_direct));
        out.ae_direct = Some(l);
    }

    if let (Some(vr), Some(dr)) = (layout.vel_range(), layout.den_range()) {
        if w.w_split_den > 0.0 {
            let xv = g.input(shape.clone(), masked(&sample.frames[0], true))?;
            let cv = build_encoder(g, net, xv)?;
            let l = split_node(g, cv, dr.start, dr.end - 1)?;
            terms.push((l, w.w_split_den));
            out.split_den = Some(l);
        }
        if w.w_split_vel > 0.0 {
            let xd = g.input(shape.clone(), masked(&sample.frames[0], false))?;
            let cd = build_encoder(g, net, xd)?;
            let l = split_node(g, cd, vr.start, vr.end - 1)?;
            terms.push((l, w.w_split_vel));
            out.split_vel = Some(l);
        }
    }

    if w.w_sup > 0.0 {
        let sr = layout.sup_range();
        let mut parts = Vec::with_capacity(win);
        for (k, &c) in codes.iter().enumerate() {
            let hat = g.slice(c, sr.start, sr.len())?;
            let truth = g.input(vec![sr.len()], sample.controls[k].clone())?;
            parts.push((sup_node(g, hat, truth)?, 1.0 / codes.len() as f64));
        }
        let l = g.weighted(&parts)?;
        terms.push((l, w.w_sup));
        out.sup = Some(l);
    }

    if need_pred {
        let mut window = codes.clone();
        for t in 0..n_i {
            let (_, next) = build_predictor(g, net, &window)?;
            let x_hat = build_decoder(g, net, next)?;
            let x = g.input(shape.clone(), sample.frames[win + t].to_chw())?;
            let l = ae_node(g, x, x_hat)?;
            terms.push((l, w.w_ae_pred));
            out.ae_pred.push(l);
            window.remove(0);
            window.push(next);
        }
    }

    if !terms.is_empty() {
        out.total = Some(g.weighted(&terms)?);
    }
    Ok(out)
}

fn report_of(g: &Graph, s: &SampleGraph) -> LossReport {
    let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
    LossReport {
        ae_direct: v(s.ae_direct),
        sup: v(s.sup),
        split_vel: v(s.split_vel),
        split_den: v(s.split_den),
        ae_pred: s.ae_pred.iter().map(|&x| g.scalar(x)).sum(),
        total: v(s.total),
    }
}

/// Loss and parameter gradient of one sample.
pub fn sample_loss(params: &ParamStore, net: &NetConfig, sample: &TrainingSample, n_i: usize, w: &LossWeights) -> Result<(LossReport, Grads)> {
    let mut g = Graph::new(params);
    let s = build_sample_graph(&mut g, net, sample, n_i, w)?;
    let report = report_of(&g, &s);
    let grads = match s.total {
        Some(t) => g.backward(t)?.params,
        None => params.zeros_like(),
    };
    Ok((report, grads))
}

/// Loss of one sample without gradients.
pub fn sample_eval(params: &ParamStore, net: &NetConfig, sample: &TrainingSample, n_i: usize, w: &LossWeights) -> Result<LossReport> {
    let mut g = Graph::new(params);
    let s = build_sample_graph(&mut g, net, sample, n_i, w)?;
    Ok(report_of(&g, &s))
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut ParamStore, grads: &Grads, state: &mut AdamState, lr: f64) -> Result<()> {
    ensure!(
        grads.0.len() == params.len() && state.m.0.len() == params.len(),
        "gradient buffers do not match the parameter store"
    );
    for (id, g) in grads.0.iter().enumerate() {
        ensure!(g.len() == params.get(id).data.len(), "gradient of '{}' has the wrong length", params.get(id).name);
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (id, g) in grads.0.iter().enumerate() {
        let m = &mut state.m.0[id];
        let v = &mut state.v.0[id];
        let p = &mut params.get_mut(id).data;
        for k in 0..g.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Gradients of a batch, averaged in sample order.
pub fn batch_gradients(params: &ParamStore, net: &NetConfig, batch: &[TrainingSample], cfg: &TrainConfig) -> Result<(LossReport, Grads)> {
    ensure!(!batch.is_empty(), "empty batch");
    let results = cfg.exec.map(batch, |s| sample_loss(params, net, s, cfg.n_i, &cfg.weights));
    let mut grads = params.zeros_like();
    let mut reports = Vec::with_capacity(batch.len());
    for r in results {
        let (rep, g) = r?;
        grads.add_assign(&g);
        reports.push(rep);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((LossReport::mean(&reports), grads))
}

/// Forward, backward and one optimizer update on a batch. A non-finite loss
/// or gradient aborts before the update.
pub fn train_step(net: &mut Network, adam: &mut AdamState, batch: &[TrainingSample], cfg: &TrainConfig) -> Result<LossReport> {
    let (report, grads) = batch_gradients(&net.params, &net.cfg, batch, cfg)?;
    if !report.is_finite() || !grads.is_finite() {
        let first = batch.first().map(|s| (s.scene, s.start)).unwrap_or_default();
        return Err(LssError::Training(format!(
            "non-finite loss at step {} (batch starting scene {} frame {}): {report:?}",
            adam.t + 1,
            first.0,
            first.1
        )));
    }
    adam_update(&mut net.params, &grads, adam, cfg.lr)?;
    Ok(report)
}

/// Per-step loss rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub columns: Vec<&'static str>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl LossTrace {
    fn new(split: bool) -> Self {
        let mut columns = vec!["ae_direct", "sup"];
        if split {
            columns.extend(["split_vel", "split_den"]);
        }
        columns.extend(["ae_pred", "total"]);
        Self { columns, rows: Vec::new() }
    }

    fn push(&mut self, step: u64, r: &LossReport) {
        let row = self
            .columns
            .iter()
            .map(|c| match *c {
                "ae_direct" => r.ae_direct,
                "sup" => r.sup,
                "split_vel" => r.split_vel,
                "split_den" => r.split_den,
                "ae_pred" => r.ae_pred,
                _ => r.total,
            })
            .collect();
        self.rows.push((step, row));
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", self.columns.join(","));
        for (step, row) in &self.rows {
            let _ = write!(s, "{step}");
            for v in row {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|(_, r)| *r.last().unwrap_or(&f64::NAN)).collect()
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation check, rounded to 32 bits.
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    /// `(step, mean validation total)` per check.
    pub validation: Vec<(u64, f64)>,
    pub train_scenes: Vec<usize>,
    pub val_scenes: Vec<usize>,
}

/// Scene indices `(train, validation)`; validation takes the last scenes.
pub fn split_scenes(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n < 2 { 0 } else { ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1) };
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

fn validation_samples(prepared: &[PreparedScene], scenes: &[usize], cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    let n = cfg.sample_len();
    let mut all = Vec::new();
    for &s in scenes {
        if prepared[s].len() >= n {
            all.extend((0..=prepared[s].len() - n).map(|start| (s, start)));
        }
    }
    if all.is_empty() || cfg.val_windows == 0 {
        return Ok(Vec::new());
    }
    let take = cfg.val_windows.min(all.len());
    (0..take)
        .map(|k| {
            let (s, start) = all[k * all.len() / take];
            prepared[s].sample(s, start, n)
        })
        .collect()
}

fn mean_total(params: &ParamStore, net: &NetConfig, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<f64> {
    let totals = cfg.exec.map(samples, |s| sample_eval(params, net, s, cfg.n_i, &cfg.weights).map(|r| r.total));
    let mut sum = 0.0;
    for t in totals {
        sum += t?;
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Trains a fresh network on `dataset` and keeps the parameters with the
/// lowest validation loss. Without validation scenes the final parameters
/// are kept.
pub fn fit(dataset: &[SceneSequence], cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), "training needs at least one scene");
    let kind = dataset[0].kind;
    let (width, height) = dataset[0].dims();
    for s in dataset {
        s.validate()?;
        ensure!(s.kind == kind && s.dims() == (width, height), "training scenes must share kind and resolution");
    }
    let net_cfg = cfg.net_config(width, height, kind.n_controls());
    let mut net = Network::new(net_cfg, cfg.seed)?;
    let (train_ids, val_ids) = split_scenes(dataset.len(), cfg.val_fraction);
    let train_seqs: Vec<SceneSequence> = train_ids.iter().map(|&i| dataset[i].clone()).collect();
    let stats = norm_stats(&train_seqs);
    drop(train_seqs);
    let prepared = cfg.exec.map(dataset, |s| PreparedScene::new(s, &stats)).into_iter().collect::<Result<Vec<_>>>()?;
    let val_samples = validation_samples(&prepared, &val_ids, cfg)?;
    let n = cfg.sample_len();
    let lengths: Vec<usize> = train_ids.iter().map(|&i| prepared[i].len()).collect();
    ensure!(lengths.iter().any(|&l| l >= n), "no training scene holds a window of {n} frames");

    let mut adam = AdamState::with_betas(&net.params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut trace = LossTrace::new(net_cfg.layout()?.is_split());
    let mut validation = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step: u64 = 0;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX) as u64;

    let mut check = |net: &Network, step: u64, validation: &mut Vec<(u64, f64)>| -> Result<()> {
        if val_samples.is_empty() {
            return Ok(());
        }
        let v = mean_total(&net.params, &net.cfg, &val_samples, cfg)?;
        log::info!("step {step}: validation total {v:.6}");
        validation.push((step, v));
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, net.params.clone()));
        }
        Ok(())
    };

    'outer: for epoch in 0..cfg.epochs {
        let windows = make_windows(&lengths, cfg.window, cfg.n_i, WindowMode::Exhaustive, cfg.seed ^ (epoch as u64 + 1));
        for chunk in windows.refs.chunks(cfg.batch) {
            if step >= max_steps {
                break 'outer;
            }
            let batch = chunk
                .iter()
                .map(|r| {
                    let s = train_ids[r.scene];
                    prepared[s].sample(s, r.start, n)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = train_step(&mut net, &mut adam, &batch, cfg)?;
            step += 1;
            trace.push(step, &report);
            if cfg.val_every > 0 && step % cfg.val_every as u64 == 0 {
                check(&net, step, &mut validation)?;
            }
        }
        if cfg.val_every == 0 {
            check(&net, step, &mut validation)?;
        }
    }
    if cfg.val_every > 0 && validation.last().is_none_or(|(s, _)| *s != step) {
        check(&net, step, &mut validation)?;
    }

    let mut params = best.map(|(_, p)| p).unwrap_or(net.params);
    params.round_to_f32();
    let mut extra = cfg.echo();
    extra.insert("scene".into(), kind.name().into());
    extra.insert("train_scenes".into(), train_ids.len().to_string());
    extra.insert("val_scenes".into(), val_ids.len().to_string());
    let checkpoint = Checkpoint { net: Network::from_parts(net_cfg, params)?, stats, seed: cfg.seed, steps: step, extra };
    Ok(FitOutcome { checkpoint, trace, validation, train_scenes: train_ids, val_scenes: val_ids })
}
