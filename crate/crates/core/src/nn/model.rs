//! Encoder, decoder with stream-function head, and recurrent predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, LssError, Result};
use crate::field::{FieldTensor, FIELD_CHANNELS};

use super::graph::{Graph, Var};
use super::layout::{LatentCode, LatentLayout};
use super::params::ParamStore;

/// Hidden-layer activation slope for the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    /// Stride-2 downsampling levels; the resolution must divide by `2^levels`.
    pub levels: usize,
    /// Residual conv pairs per level.
    pub res_blocks: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub total_dim: usize,
    pub n_sp: usize,
    pub split_fraction: f64,
    pub lstm_layers: usize,
    pub hidden: usize,
    /// Channels between the two 1D convolutions of the predictor head.
    pub conv1d_channels: usize,
    pub window: usize,
}

impl NetConfig {
    /// Full-size network: 16 encoder and 17 decoder convolutions.
    pub fn full(width: usize, height: usize, n_sp: usize) -> Self {
        Self {
            width,
            height,
            levels: 3,
            res_blocks: 2,
            base_channels: 16,
            max_channels: 64,
            kernel: 3,
            leaky_slope: LEAKY_SLOPE,
            total_dim: 16,
            n_sp,
            split_fraction: 0.66,
            lstm_layers: 2,
            hidden: 32,
            conv1d_channels: 32,
            window: 2,
        }
    }

    /// Reduced network sized for single-core training.
    pub fn desk(width: usize, height: usize, n_sp: usize) -> Self {
        Self { res_blocks: 0, base_channels: 8, max_channels: 32, hidden: 24, conv1d_channels: 24, ..Self::full(width, height, n_sp) }
    }

    pub fn layout(&self) -> Result<LatentLayout> {
        LatentLayout::new(self.total_dim, self.n_sp, self.split_fraction)
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn encoder_convs(&self) -> usize {
        1 + self.levels * (2 * self.res_blocks + 1)
    }

    pub fn decoder_convs(&self) -> usize {
        2 + self.levels * (2 * self.res_blocks + 1)
    }

    /// `(channels, height, width)` at the bottleneck.
    pub fn bottleneck(&self) -> (usize, usize, usize) {
        (self.channels(self.levels), self.height >> self.levels, self.width >> self.levels)
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.levels;
        ensure!(
            self.width % f == 0 && self.height % f == 0 && self.width >= f && self.height >= f,
            "resolution {}x{} is not divisible by 2^{}",
            self.width,
            self.height,
            self.levels
        );
        ensure!(self.kernel % 2 == 1, "kernel size must be odd");
        ensure!(self.base_channels >= 1 && self.max_channels >= self.base_channels, "bad channel counts");
        ensure!(self.lstm_layers >= 1 && self.hidden >= 1, "predictor needs at least one LSTM layer");
        ensure!(self.conv1d_channels >= 1, "conv1d channels must be positive");
        ensure!(self.window >= 1, "window must be at least 1");
        ensure!(self.leaky_slope.is_finite(), "activation slope must be finite");
        self.layout()?;
        Ok(())
    }

    /// Every parameter the architecture needs, in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let k = self.kernel;
        let hidden_gain = (2.0 / (1.0 + self.leaky_slope * self.leaky_slope)).sqrt();
        let conv = |specs: &mut Vec<ParamSpec>, name: String, cin: usize, cout: usize, gain: f64| {
            specs.push(ParamSpec::weight(format!("{name}.w"), vec![cout, cin, k, k], cin * k * k, gain));
            specs.push(ParamSpec::bias(format!("{name}.b"), cout));
        };
        conv(&mut specs, "enc.stem".into(), FIELD_CHANNELS, self.channels(0), hidden_gain);
        for l in 0..self.levels {
            let c = self.channels(l);
            for r in 0..self.res_blocks {
                conv(&mut specs, format!("enc.l{l}.r{r}.a"), c, c, hidden_gain);
                conv(&mut specs, format!("enc.l{l}.r{r}.b"), c, c, hidden_gain);
            }
            conv(&mut specs, format!("enc.l{l}.down"), c, self.channels(l + 1), hidden_gain);
        }
        let (bc, bh, bw) = self.bottleneck();
        let flat = bc * bh * bw;
        specs.push(ParamSpec::weight("enc.dense.w".into(), vec![self.total_dim, flat], flat, 1.0));
        specs.push(ParamSpec::bias("enc.dense.b".into(), self.total_dim));

        specs.push(ParamSpec::weight("dec.dense.w".into(), vec![flat, self.total_dim], self.total_dim, hidden_gain));
        specs.push(ParamSpec::bias("dec.dense.b".into(), flat));
        conv(&mut specs, "dec.stem".into(), bc, bc, hidden_gain);
        for l in (0..self.levels).rev() {
            let c = self.channels(l + 1);
            for r in 0..self.res_blocks {
                conv(&mut specs, format!("dec.l{l}.r{r}.a"), c, c, hidden_gain);
                conv(&mut specs, format!("dec.l{l}.r{r}.b"), c, c, hidden_gain);
            }
            conv(&mut specs, format!("dec.l{l}.up"), c, self.channels(l), hidden_gain);
        }
        conv(&mut specs, "dec.out".into(), self.channels(0), 2, 1.0);

        let hsz = self.hidden;
        for layer in 0..self.lstm_layers {
            let input = if layer == 0 { self.total_dim } else { hsz };
            specs.push(ParamSpec::weight(format!("pred.lstm{layer}.w"), vec![4 * hsz, input + hsz], input + hsz, 1.0));
            specs.push(ParamSpec { kind: SpecKind::LstmBias(hsz), ..ParamSpec::bias(format!("pred.lstm{layer}.b"), 4 * hsz) });
        }
        let c1 = self.conv1d_channels;
        specs.push(ParamSpec::weight("pred.conv0.w".into(), vec![c1, hsz, self.window], hsz * self.window, hidden_gain));
        specs.push(ParamSpec::bias("pred.conv0.b".into(), c1));
        specs.push(ParamSpec::weight("pred.conv1.w".into(), vec![self.total_dim, c1, 1], c1, 1.0));
        specs.push(ParamSpec::bias("pred.conv1.b".into(), self.total_dim));
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpecKind {
    /// Uniform with standard deviation `gain / sqrt(fan_in)`.
    Weight { fan_in: usize, gain: f64 },
    Bias,
    /// Gate biases `[i, f, g, o]` of width `hidden`; forget gates start at 1.
    LstmBias(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: SpecKind,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize, gain: f64) -> Self {
        Self { name, shape, kind: SpecKind::Weight { fan_in, gain } }
    }

    fn bias(name: String, n: usize) -> Self {
        Self { name, shape: vec![n], kind: SpecKind::Bias }
    }

    /// Target standard deviation of a weight tensor.
    pub fn target_std(&self) -> Option<f64> {
        match self.kind {
            SpecKind::Weight { fan_in, gain } => Some(gain / (fan_in as f64).sqrt()),
            _ => None,
        }
    }
}

/// Deterministic fan-in scaled uniform initialization with zero biases and
/// unit LSTM forget-gate biases.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in cfg.param_specs() {
        let n: usize = spec.shape.iter().product();
        let data = match spec.kind {
            SpecKind::Weight { .. } => {
                let a = 3f64.sqrt() * spec.target_std().unwrap_or(0.0);
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            }
            SpecKind::Bias => vec![0.0; n],
            SpecKind::LstmBias(h) => (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect(),
        };
        store.insert(&spec.name, spec.shape.clone(), data)?;
    }
    Ok(store)
}

/// Checks that `store` holds every parameter `cfg` requires, with matching
/// shapes.
pub fn check_params(cfg: &NetConfig, store: &ParamStore) -> Result<()> {
    for spec in cfg.param_specs() {
        let p = store
            .by_name(&spec.name)
            .ok_or_else(|| LssError::contract(format!("missing parameter '{}'", spec.name)))?;
        ensure!(p.shape == spec.shape, "parameter '{}' has shape {:?}, expected {:?}", spec.name, p.shape, spec.shape);
    }
    Ok(())
}

fn conv_layer(g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    g.conv2d(x, w, b, stride)
}

fn dense_layer(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    g.dense(x, w, b)
}

fn residual(g: &mut Graph, x: Var, name: &str, slope: f64) -> Result<Var> {
    let a = conv_layer(g, x, &format!("{name}.a"), 1)?;
    let a = g.leaky_relu(a, slope);
    let b = conv_layer(g, a, &format!("{name}.b"), 1)?;
    let s = g.add(x, b)?;
    Ok(g.leaky_relu(s, slope))
}

/// Encoder on a `[3, H, W]` node, returning a `[total_dim]` code node.
pub fn build_encoder(g: &mut Graph, cfg: &NetConfig, x: Var) -> Result<Var> {
    ensure!(
        g.shape(x) == [FIELD_CHANNELS, cfg.height, cfg.width],
        "encoder expects [3, {}, {}], got {:?}",
        cfg.height,
        cfg.width,
        g.shape(x)
    );
    g.mark("encoder");
    let s = cfg.leaky_slope;
    let h = conv_layer(g, x, "enc.stem", 1)?;
    let mut h = g.leaky_relu(h, s);
    for l in 0..cfg.levels {
        for r in 0..cfg.res_blocks {
            h = residual(g, h, &format!("enc.l{l}.r{r}"), s)?;
        }
        let d = conv_layer(g, h, &format!("enc.l{l}.down"), 2)?;
        h = g.leaky_relu(d, s);
    }
    dense_layer(g, h, "enc.dense")
}

/// Decoder from a `[total_dim]` code node to a `[3, H, W]` field whose
/// velocity channels are the curl of a predicted stream function.
pub fn build_decoder(g: &mut Graph, cfg: &NetConfig, c: Var) -> Result<Var> {
    ensure!(g.shape(c) == [cfg.total_dim], "decoder expects a code of {}", cfg.total_dim);
    g.mark("decoder");
    let s = cfg.leaky_slope;
    let (bc, bh, bw) = cfg.bottleneck();
    let z = dense_layer(g, c, "dec.dense")?;
    let z = g.reshape(z, vec![bc, bh, bw])?;
    let z = g.leaky_relu(z, s);
    let h = conv_layer(g, z, "dec.stem", 1)?;
    let mut h = g.leaky_relu(h, s);
    for l in (0..cfg.levels).rev() {
        for r in 0..cfg.res_blocks {
            h = residual(g, h, &format!("dec.l{l}.r{r}"), s)?;
        }
        let up = g.upsample2(h)?;
        let u = conv_layer(g, up, &format!("dec.l{l}.up"), 1)?;
        h = g.leaky_relu(u, s);
    }
    let out = conv_layer(g, h, "dec.out", 1)?;
    let n = cfg.width * cfg.height;
    let psi = g.slice(out, 0, n)?;
    let psi = g.reshape(psi, vec![1, cfg.height, cfg.width])?;
    let rho = g.slice(out, n, n)?;
    let rho = g.reshape(rho, vec![1, cfg.height, cfg.width])?;
    let vel = g.curl(psi)?;
    g.concat(&[vel, rho])
}

/// One LSTM layer over a sequence, starting from zero state.
pub fn lstm_layer(g: &mut Graph, seq: &[Var], name: &str, hidden: usize) -> Result<Vec<Var>> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let mut h = g.zeros(vec![hidden]);
    let mut c = g.zeros(vec![hidden]);
    let mut out = Vec::with_capacity(seq.len());
    for &x in seq {
        let z = g.concat(&[x, h])?;
        let gates = g.dense(z, w, b)?;
        let i = g.slice(gates, 0, hidden)?;
        let i = g.sigmoid(i);
        let f = g.slice(gates, hidden, hidden)?;
        let f = g.sigmoid(f);
        let gg = g.slice(gates, 2 * hidden, hidden)?;
        let gg = g.tanh(gg);
        let o = g.slice(gates, 3 * hidden, hidden)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, gg)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}

/// Predictor on a window of code nodes; returns `(delta, next)` with
/// `next = last + delta`.
pub fn build_predictor(g: &mut Graph, cfg: &NetConfig, window: &[Var]) -> Result<(Var, Var)> {
    ensure!(
        window.len() == cfg.window,
        "predictor window must hold {} codes, got {}",
        cfg.window,
        window.len()
    );
    for &c in window {
        ensure!(g.shape(c) == [cfg.total_dim], "predictor inputs must be codes of {}", cfg.total_dim);
    }
    g.mark("predictor");
    let mut seq = window.to_vec();
    for layer in 0..cfg.lstm_layers {
        seq = lstm_layer(g, &seq, &format!("pred.lstm{layer}"), cfg.hidden)?;
    }
    let stacked = g.concat(&seq)?;
    let stacked = g.reshape(stacked, vec![cfg.window, cfg.hidden])?;
    let w0 = g.param("pred.conv0.w")?;
    let b0 = g.param("pred.conv0.b")?;
    let y = g.conv1d(stacked, w0, b0)?;
    let y = g.leaky_relu(y, cfg.leaky_slope);
    let w1 = g.param("pred.conv1.w")?;
    let b1 = g.param("pred.conv1.b")?;
    let delta = g.conv1d(y, w1, b1)?;
    let delta = g.reshape(delta, vec![cfg.total_dim])?;
    let next = g.add(window[cfg.window - 1], delta)?;
    Ok((delta, next))
}

/// Architecture plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: NetConfig,
    pub params: ParamStore,
}

impl Network {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        Ok(Self { params: init_params(&cfg, seed)?, cfg })
    }

    pub fn from_parts(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        check_params(&cfg, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn layout(&self) -> LatentLayout {
        self.cfg.layout().expect("validated at construction")
    }

    fn field_input(&self, g: &mut Graph, x: &FieldTensor) -> Result<Var> {
        ensure!(
            x.width() == self.cfg.width && x.height() == self.cfg.height,
            "field {}x{} does not match network resolution {}x{}",
            x.width(),
            x.height(),
            self.cfg.width,
            self.cfg.height
        );
        g.input(vec![FIELD_CHANNELS, self.cfg.height, self.cfg.width], x.to_chw())
    }

    fn code_input(&self, g: &mut Graph, c: &LatentCode) -> Result<Var> {
        ensure!(*c.layout() == self.layout(), "code layout does not match the network");
        g.input(vec![self.cfg.total_dim], c.values().to_vec())
    }

    pub fn encode(&self, x: &FieldTensor) -> Result<LatentCode> {
        let mut g = Graph::new(&self.params);
        let xi = self.field_input(&mut g, x)?;
        let c = build_encoder(&mut g, &self.cfg, xi)?;
        LatentCode::new(g.value(c).to_vec(), self.layout())
    }

    pub fn decode(&self, c: &LatentCode) -> Result<FieldTensor> {
        let mut g = Graph::new(&self.params);
        let ci = self.code_input(&mut g, c)?;
        let x = build_decoder(&mut g, &self.cfg, ci)?;
        FieldTensor::from_chw(self.cfg.width, self.cfg.height, g.value(x))
    }

    /// Returns `(delta, next)`.
    pub fn predict(&self, window: &[LatentCode]) -> Result<(LatentCode, LatentCode)> {
        ensure!(
            window.len() == self.cfg.window,
            "predictor window must hold {} codes, got {}",
            self.cfg.window,
            window.len()
        );
        let mut g = Graph::new(&self.params);
        let vars = window.iter().map(|c| self.code_input(&mut g, c)).collect::<Result<Vec<_>>>()?;
        let (d, n) = build_predictor(&mut g, &self.cfg, &vars)?;
        Ok((LatentCode::new(g.value(d).to_vec(), self.layout())?, LatentCode::new(g.value(n).to_vec(), self.layout())?))
    }
}

pub fn forward_encoder(net: &Network, x: &FieldTensor) -> Result<LatentCode> {
    net.encode(x)
}

pub fn forward_decoder(net: &Network, c: &LatentCode) -> Result<FieldTensor> {
    net.decode(c)
}

pub fn forward_predictor(net: &Network, window: &[LatentCode]) -> Result<(LatentCode, LatentCode)> {
    net.predict(window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{CenterVelocity, ScalarField};
    use rand::Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            width: 8,
            height: 16,
            levels: 2,
            res_blocks: 1,
            base_channels: 3,
            max_channels: 6,
            hidden: 5,
            conv1d_channels: 4,
            ..NetConfig::full(8, 16, 1)
        }
    }

    fn random_field(w: usize, h: usize, rng: &mut ChaCha8Rng) -> FieldTensor {
        let data = (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FieldTensor::from_vec(w, h, data).unwrap()
    }

    fn zeroed(net: &Network) -> Network {
        let mut z = net.clone();
        z.params.iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    #[test]
    fn full_config_has_sixteen_and_seventeen_convolutions() {
        let cfg = NetConfig::full(32, 64, 1);
        assert_eq!(cfg.encoder_convs(), 16);
        assert_eq!(cfg.decoder_convs(), 17);
        assert_eq!(cfg.window, 2);
        assert_eq!(cfg.total_dim, 16);
        let convs = |prefix: &str| {
            cfg.param_specs().iter().filter(|s| s.name.starts_with(prefix) && s.shape.len() == 4).count()
        };
        assert_eq!(convs("enc."), 16);
        assert_eq!(convs("dec."), 17);
    }

    #[test]
    fn shapes_and_determinism() {
        let net = Network::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_field(8, 16, &mut rng);
        let c = net.encode(&x).unwrap();
        assert_eq!(c.values().len(), 16);
        assert_eq!(net.encode(&x).unwrap(), c);
        let y = net.decode(&c).unwrap();
        assert_eq!((y.width(), y.height()), (8, 16));
        assert!(net.encode(&random_field(8, 8, &mut rng)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let net = zeroed(&Network::new(tiny(), 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = net.encode(&random_field(8, 16, &mut rng)).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
        let code = LatentCode::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), net.layout()).unwrap();
        let y = net.decode(&code).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let last = code.clone();
        let (delta, next) = net.predict(&[LatentCode::zeros(net.layout()), last.clone()]).unwrap();
        assert!(delta.values().iter().all(|&v| v == 0.0));
        assert_eq!(next, last);
    }

    #[test]
    fn residual_identity_is_exact() {
        let net = Network::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<LatentCode> = (0..2)
            .map(|_| LatentCode::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), net.layout()).unwrap())
            .collect();
        let (delta, next) = net.predict(&w).unwrap();
        for k in 0..16 {
            assert_eq!(next.values()[k], w[1].values()[k] + delta.values()[k]);
        }
        assert!(delta.values().iter().any(|&v| v != 0.0));
        assert!(net.predict(&w[..1]).is_err());
    }

    #[test]
    fn decoded_velocity_is_curl_of_a_stream_function() {
        let net = Network::new(tiny(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let code = LatentCode::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), net.layout()).unwrap();
        let y = net.decode(&code).unwrap();
        let vel: CenterVelocity = y.velocity();
        // interior central-difference divergence
        let (w, h) = (8, 16);
        let mut worst: f64 = 0.0;
        for j in 1..h - 1 {
            for i in 1..w - 1 {
                let d = 0.5 * (vel.ux.get(i + 1, j) - vel.ux.get(i - 1, j)) + 0.5 * (vel.uy.get(i, j + 1) - vel.uy.get(i, j - 1));
                worst = worst.max(d.abs());
            }
        }
        let scale = vel.ux.data().iter().chain(vel.uy.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= 1e-6 * scale.max(1e-300));
        let _unused: ScalarField = y.density();
    }

    #[test]
    fn init_is_deterministic_with_expected_biases() {
        let cfg = tiny();
        let a = init_params(&cfg, 11).unwrap();
        assert_eq!(a, init_params(&cfg, 11).unwrap());
        assert_ne!(a, init_params(&cfg, 12).unwrap());
        for p in a.iter().filter(|p| p.name.ends_with(".b")) {
            if p.name.starts_with("pred.lstm") {
                let h = cfg.hidden;
                for (i, &v) in p.data.iter().enumerate() {
                    assert_eq!(v, if (h..2 * h).contains(&i) { 1.0 } else { 0.0 });
                }
            } else {
                assert!(p.data.iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn weight_std_follows_fan_in() {
        let cfg = NetConfig::desk(32, 64, 1);
        let store = init_params(&cfg, 0).unwrap();
        let slope = cfg.leaky_slope;
        let he = (2.0 / (1.0 + slope * slope)).sqrt();
        for p in store.iter().filter(|p| p.name.ends_with(".w") && p.data.len() >= 200) {
            // independent fan-in: product of all dims but the first
            let fan_in: usize = p.shape[1..].iter().product();
            let gain = if p.name == "enc.dense.w" || p.name == "dec.out.w" || p.name == "pred.conv1.w" || p.name.starts_with("pred.lstm") {
                1.0
            } else {
                he
            };
            let target = gain / (fan_in as f64).sqrt();
            let n = p.data.len() as f64;
            let mean = p.data.iter().sum::<f64>() / n;
            let std = (p.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((std / target - 1.0).abs() <= 0.2, "{}: std {std} target {target}", p.name);
        }
    }

    #[test]
    fn missing_parameter_is_named() {
        let cfg = tiny();
        let full = init_params(&cfg, 0).unwrap();
        let mut partial = ParamStore::new();
        for p in full.iter().filter(|p| p.name != "dec.stem.w") {
            partial.insert(&p.name, p.shape.clone(), p.data.clone()).unwrap();
        }
        match Network::from_parts(cfg, partial) {
            Err(LssError::Contract(m)) => assert!(m.contains("dec.stem.w")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn graph_counts_applications() {
        let net = Network::new(tiny(), 0).unwrap();
        let mut g = Graph::new(&net.params);
        let c0 = g.zeros(vec![16]);
        let c1 = g.zeros(vec![16]);
        let (_, n) = build_predictor(&mut g, &net.cfg, &[c0, c1]).unwrap();
        build_decoder(&mut g, &net.cfg, n).unwrap();
        assert_eq!(g.count("predictor"), 1);
        assert_eq!(g.count("decoder"), 1);
        assert_eq!(g.count("encoder"), 0);
    }
}
