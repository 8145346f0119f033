//! Central finite-difference checks of every differentiable layer and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{ae_node, split_node, sup_node};
use crate::nn::{build_decoder, build_encoder, build_predictor, init_params, Graph, NetConfig, ParamStore, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Floor of the relative-error denominator. Gradients that are exactly zero
/// (a constant stream function bias, say) still pick up ~1e-11 of rounding
/// noise from the difference quotient; below the floor they compare in
/// absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Input = (Vec<usize>, Vec<f64>);

fn eval<F>(store: &ParamStore, inputs: &[Input], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars = inputs.iter().map(|(s, d)| g.input(s.clone(), d.clone())).collect::<Result<Vec<_>>>()?;
    let l = build(&mut g, &vars)?;
    Ok(g.scalar(l))
}

fn pick(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Compares backprop gradients of a scalar graph with central differences
/// for all inputs and parameters (at most `max_per_tensor` sampled entries
/// per tensor).
pub fn check_graph<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Input],
    max_per_tensor: usize,
    seed: u64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(store);
    let vars = inputs.iter().map(|(s, d)| g.input_with_grad(s.clone(), d.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut entries = 0;

    for (t, &v) in vars.iter().enumerate() {
        let analytic = grads.input(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[t].1.len()]);
        for k in pick(inputs[t].1.len(), max_per_tensor, &mut rng) {
            let mut plus = inputs.to_vec();
            plus[t].1[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[t].1[k] -= FD_STEP;
            let numeric = (eval(store, &plus, &build)? - eval(store, &minus, &build)?) / (2.0 * FD_STEP);
            let e = relative_error(analytic[k], numeric);
            worst = worst.max(e);
            entries += 1;
        }
    }
    for id in 0..store.len() {
        for k in pick(store.get(id).data.len(), max_per_tensor, &mut rng) {
            let mut plus = store.clone();
            plus.get_mut(id).data[k] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data[k] -= FD_STEP;
            let numeric = (eval(&plus, inputs, &build)? - eval(&minus, inputs, &build)?) / (2.0 * FD_STEP);
            let e = relative_error(grads.params.0[id][k], numeric);
            worst = worst.max(e);
            entries += 1;
        }
    }
    Ok(GradCheck { name: name.to_string(), max_rel_error: worst, entries })
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn store(entries: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (name, shape) in entries {
        let n = shape.iter().product();
        s.insert(name, shape.clone(), random(n, rng))?;
    }
    Ok(s)
}

/// Scalar `sum(r * y)` with fixed random weights `r`.
fn project(g: &mut Graph, y: Var, r: &[f64]) -> Result<Var> {
    let rv = g.input(g.shape(y).to_vec(), r.to_vec())?;
    let m = g.mul(y, rv)?;
    Ok(g.sum(m))
}

fn tiny_net() -> NetConfig {
    NetConfig {
        width: 8,
        height: 8,
        levels: 2,
        res_blocks: 1,
        base_channels: 2,
        max_channels: 3,
        hidden: 3,
        conv1d_channels: 3,
        total_dim: 6,
        n_sp: 1,
        split_fraction: 0.5,
        ..NetConfig::full(8, 8, 1)
    }
}

/// Runs every layer and loss check with inputs of side at most 8.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let empty = ParamStore::new();

    for (label, stride, (c, h, w)) in [("conv2d", 1, (3, 6, 5)), ("conv2d_stride2", 2, (2, 8, 7))] {
        let s = store(&[("w", vec![4, c, 3, 3]), ("b", vec![4])], &mut rng)?;
        let x = random(c * h * w, &mut rng);
        let ho = (h - 1) / stride + 1;
        let wo = (w - 1) / stride + 1;
        let r = random(4 * ho * wo, &mut rng);
        out.push(check_graph(label, &s, &[(vec![c, h, w], x)], 64, seed, |g, v| {
            let (wt, b) = (g.param("w")?, g.param("b")?);
            let y = g.conv2d(v[0], wt, b, stride)?;
            project(g, y, &r)
        })?);
    }

    let r = random(2 * 6 * 8, &mut rng);
    out.push(check_graph("upsample2", &empty, &[(vec![2, 3, 4], random(24, &mut rng))], 64, seed, |g, v| {
        let y = g.upsample2(v[0])?;
        project(g, y, &r)
    })?);

    let s = store(&[("w", vec![5, 7]), ("b", vec![5])], &mut rng)?;
    let r = random(5, &mut rng);
    out.push(check_graph("dense", &s, &[(vec![7], random(7, &mut rng))], 64, seed, |g, v| {
        let (w, b) = (g.param("w")?, g.param("b")?);
        let y = g.dense(v[0], w, b)?;
        project(g, y, &r)
    })?);

    for k in [3usize, 1] {
        let s = store(&[("w", vec![2, 3, k]), ("b", vec![2])], &mut rng)?;
        let r = random(2 * (4 - k + 1), &mut rng);
        out.push(check_graph(&format!("conv1d_k{k}"), &s, &[(vec![4, 3], random(12, &mut rng))], 64, seed, |g, v| {
            let (w, b) = (g.param("w")?, g.param("b")?);
            let y = g.conv1d(v[0], w, b)?;
            project(g, y, &r)
        })?);
    }

    let r = random(20, &mut rng);
    let x = random(20, &mut rng);
    out.push(check_graph("leaky_relu", &empty, &[(vec![20], x.clone())], 64, seed, |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        project(g, y, &r)
    })?);
    out.push(check_graph("sigmoid", &empty, &[(vec![20], x.clone())], 64, seed, |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, &r)
    })?);
    out.push(check_graph("tanh", &empty, &[(vec![20], x.clone())], 64, seed, |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, &r)
    })?);

    let r = random(2 * 42, &mut rng);
    out.push(check_graph("curl", &empty, &[(vec![1, 6, 7], random(42, &mut rng))], 64, seed, |g, v| {
        let y = g.curl(v[0])?;
        project(g, y, &r)
    })?);

    let r = random(4 * 30, &mut rng);
    out.push(check_graph("grad2", &empty, &[(vec![2, 5, 6], random(60, &mut rng))], 64, seed, |g, v| {
        let y = g.grad2(v[0])?;
        project(g, y, &r)
    })?);

    let r = random(7, &mut rng);
    out.push(check_graph(
        "elementwise",
        &empty,
        &[(vec![6], random(6, &mut rng)), (vec![6], random(6, &mut rng))],
        64,
        seed,
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let d = g.sub(m, v[0])?;
            let s = g.slice(d, 1, 4)?;
            let t = g.slice(v[0], 0, 3)?;
            let c = g.concat(&[s, t])?;
            let c = g.reshape(c, vec![7])?;
            project(g, c, &r)
        },
    )?);

    let hidden = 3;
    let s = store(&[("cell.w", vec![4 * hidden, 4 + hidden]), ("cell.b", vec![4 * hidden])], &mut rng)?;
    let r = random(hidden, &mut rng);
    let seq: Vec<Input> = (0..3).map(|_| (vec![4], random(4, &mut rng))).collect();
    out.push(check_graph("lstm_cell", &s, &seq, 64, seed, |g, v| {
        let hs = crate::nn::lstm_layer(g, v, "cell", hidden)?;
        project(g, hs[hs.len() - 1], &r)
    })?);

    let cfg = tiny_net();
    let net_params = init_params(&cfg, seed)?;
    let mut perturbed = net_params.clone();
    // nonzero biases so that every parameter path is exercised
    for p in perturbed.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let r = random(cfg.total_dim, &mut rng);
    out.push(check_graph("encoder", &perturbed, &[(vec![3, 8, 8], random(192, &mut rng))], 6, seed, |g, v| {
        let c = build_encoder(g, &cfg, v[0])?;
        project(g, c, &r)
    })?);
    let r = random(192, &mut rng);
    out.push(check_graph("decoder", &perturbed, &[(vec![cfg.total_dim], random(cfg.total_dim, &mut rng))], 6, seed, |g, v| {
        let x = build_decoder(g, &cfg, v[0])?;
        project(g, x, &r)
    })?);
    let r = random(cfg.total_dim, &mut rng);
    let window: Vec<Input> = (0..cfg.window).map(|_| (vec![cfg.total_dim], random(cfg.total_dim, &mut rng))).collect();
    out.push(check_graph("predictor", &perturbed, &window, 6, seed, |g, v| {
        let (_, next) = build_predictor(g, &cfg, v)?;
        project(g, next, &r)
    })?);

    out.push(check_graph("loss_split", &empty, &[(vec![9], random(9, &mut rng))], 64, seed, |g, v| {
        split_node(g, v[0], 2, 6)
    })?);
    out.push(check_graph(
        "loss_sup",
        &empty,
        &[(vec![3], random(3, &mut rng)), (vec![3], random(3, &mut rng))],
        64,
        seed,
        |g, v| sup_node(g, v[0], v[1]),
    )?);
    out.push(check_graph(
        "loss_ae",
        &empty,
        &[(vec![3, 5, 6], random(90, &mut rng)), (vec![3, 5, 6], random(90, &mut rng))],
        200,
        seed,
        |g, v| ae_node(g, v[0], v[1]),
    )?);
    let wts = [0.7, 1.3, 0.4, 2.0, 0.9];
    out.push(check_graph(
        "loss_total",
        &empty,
        &[(vec![8], random(8, &mut rng)), (vec![3, 4, 4], random(48, &mut rng)), (vec![3, 4, 4], random(48, &mut rng))],
        200,
        seed,
        |g, v| {
            let direct = ae_node(g, v[1], v[2])?;
            let sup_a = g.slice(v[0], 6, 2)?;
            let sup_b = g.slice(v[0], 0, 2)?;
            let sup = sup_node(g, sup_a, sup_b)?;
            let sv = split_node(g, v[0], 0, 2)?;
            let sd = split_node(g, v[0], 3, 5)?;
            let pred = ae_node(g, v[2], v[1])?;
            g.weighted(&[(direct, wts[0]), (sup, wts[1]), (sv, wts[2]), (sd, wts[3]), (pred, wts[4])])
        },
    )?);
    Ok(out)
}
