//! The full lifting network.
//!
//! ```text
//! input layer → [layer → norm → layer → act, + residual] × blocks
//!             → non-local → output layer → refinement
//! ```
//!
//! The forward pass records a tape that [`Model::backward`] replays in
//! reverse. Parameter gradients are returned as a [`ModelParams`] of the same
//! shape as the parameters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{check_beta, normalize_adjacency, SkeletonGraph};
use crate::linalg::{ensure_finite, row_major, row_major_vec};
use crate::net::layer::{layer_backward, layer_pre_activation, LayerParams, LayerTape, Propagator};
use crate::net::loss::pose_loss_grad;
use crate::net::nonlocal::{nonlocal_backward, nonlocal_forward_tape, NonLocalParams, NonLocalTape};
use crate::net::ops::{
    batch_norm_backward, batch_norm_forward, batch_stats, gelu, gelu_grad, layer_norm_backward,
    layer_norm_forward, relu, BatchNormTape, BatchStats, LayerNormTape,
};
use crate::net::refine::{refine_backward, refine_forward_tape, RefineParams, RefineTape};
use crate::{Error, Mat, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStyle {
    #[default]
    LayernormGelu,
    BatchnormRelu,
}

impl fmt::Display for BlockStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockStyle::LayernormGelu => "layernorm-gelu",
            BlockStyle::BatchnormRelu => "batchnorm-relu",
        })
    }
}

impl FromStr for BlockStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm-gelu" => Ok(BlockStyle::LayernormGelu),
            "batchnorm-relu" => Ok(BlockStyle::BatchnormRelu),
            other => Err(Error::param(format!(
                "unknown block style {other:?} (expected layernorm-gelu or batchnorm-relu)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_joints: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub channels: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_nonlocal: bool,
    pub use_refinement: bool,
    pub block_style: BlockStyle,
    pub skip_connection: bool,
    pub weight_modulation: bool,
    pub adj_modulation: bool,
    pub symmetrize: bool,
    /// One `Q` per layer instead of one shared by all layers.
    pub per_layer_q: bool,
    pub refine_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_joints: 17,
            input_dim: 2,
            output_dim: 3,
            channels: 384,
            num_blocks: 4,
            dropout_rate: 0.2,
            alpha: 0.01,
            beta: 0.2,
            use_nonlocal: true,
            use_refinement: true,
            block_style: BlockStyle::LayernormGelu,
            skip_connection: true,
            weight_modulation: true,
            adj_modulation: true,
            symmetrize: true,
            per_layer_q: false,
            refine_hidden: 1024,
        }
    }
}

impl ModelConfig {
    pub fn num_layers(&self) -> usize {
        2 + 2 * self.num_blocks
    }

    fn num_norms(&self) -> usize {
        match self.block_style {
            BlockStyle::LayernormGelu => self.num_blocks,
            BlockStyle::BatchnormRelu => 1 + 2 * self.num_blocks,
        }
    }

    fn num_q(&self) -> usize {
        match (self.adj_modulation, self.per_layer_q) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => self.num_layers(),
        }
    }

    fn q_index(&self, layer: usize) -> Option<usize> {
        match (self.adj_modulation, self.per_layer_q) {
            (false, _) => None,
            (true, false) => Some(0),
            (true, true) => Some(layer),
        }
    }

    fn nonlocal_inner(&self) -> usize {
        (self.channels / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        for (name, v) in [
            ("num_joints", self.num_joints),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("channels", self.channels),
            ("refine_hidden", self.refine_hidden),
        ] {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.block_style == BlockStyle::LayernormGelu && self.num_blocks > 0 && self.channels < 2 {
            return Err(Error::param("layer norm needs at least 2 channels"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    #[serde(with = "row_major")]
    pub gain: Mat,
    #[serde(with = "row_major")]
    pub bias: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    /// Adjacency modulation `Q`: empty, one shared matrix, or one per layer.
    #[serde(with = "row_major_vec")]
    pub adjacency: Vec<Mat>,
    pub norms: Vec<NormParams>,
    pub nonlocal: Option<NonLocalParams>,
    pub refine: Option<RefineParams>,
}

/// One trainable matrix with its group and a unique name.
pub struct ParamRef<'a> {
    pub group: &'static str,
    pub name: String,
    pub value: &'a Mat,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in z.matrices_mut() {
            m.fill(0.0);
        }
        z
    }

    /// Every matrix, in a fixed order shared with [`ModelParams::matrices_mut`].
    pub fn matrices(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        let mut push = |group, name: String, value| out.push(ParamRef { group, name, value });
        for (i, l) in self.layers.iter().enumerate() {
            push("W", format!("layer{i}.weight"), &l.weight);
            push("W_skip", format!("layer{i}.skip_weight"), &l.skip_weight);
            push("M", format!("layer{i}.modulation"), &l.modulation);
        }
        for (i, q) in self.adjacency.iter().enumerate() {
            push("Q", format!("adjacency{i}"), q);
        }
        for (i, n) in self.norms.iter().enumerate() {
            push("norm", format!("norm{i}.gain"), &n.gain);
            push("norm", format!("norm{i}.bias"), &n.bias);
        }
        if let Some(nl) = &self.nonlocal {
            push("nonlocal", "nonlocal.theta".into(), &nl.theta);
            push("nonlocal", "nonlocal.phi".into(), &nl.phi);
            push("nonlocal", "nonlocal.g".into(), &nl.g);
            push("nonlocal", "nonlocal.out".into(), &nl.out);
        }
        if let Some(r) = &self.refine {
            push("refine", "refine.w1".into(), &r.w1);
            push("refine", "refine.b1".into(), &r.b1);
            push("refine", "refine.w2".into(), &r.w2);
            push("refine", "refine.b2".into(), &r.b2);
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.skip_weight);
            out.push(&mut l.modulation);
        }
        out.extend(self.adjacency.iter_mut());
        for n in &mut self.norms {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        if let Some(nl) = &mut self.nonlocal {
            out.extend([&mut nl.theta, &mut nl.phi, &mut nl.g, &mut nl.out]);
        }
        if let Some(r) = &mut self.refine {
            out.extend([&mut r.w1, &mut r.b1, &mut r.w2, &mut r.b2]);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.matrices().iter().map(|p| p.value.len()).sum()
    }
}

/// Running batch-norm statistics used in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a generator seeded with `seed`, so the
    /// same seed reproduces the same masks.
    Train { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activation {
    Identity,
    Gelu,
    Relu,
}

/// A GS-Net layer and what follows it.
#[derive(Debug, Clone, Copy)]
struct Unit {
    layer: usize,
    norm: Option<usize>,
    act: Activation,
    dropout: bool,
}

#[derive(Debug, Clone)]
enum NormTape {
    Layer(Vec<LayerNormTape>),
    Batch(BatchNormTape),
}

#[derive(Debug, Clone)]
struct UnitTape {
    layer: Vec<LayerTape>,
    norm: Option<NormTape>,
    pre_act: Option<Vec<Mat>>,
    mask: Option<Vec<Mat>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Vec<Mat>,
    props: Vec<Propagator>,
    units: Vec<UnitTape>,
    nonlocal: Vec<NonLocalTape>,
    refine: Vec<RefineTape>,
    batch_stats: Vec<Option<BatchStats>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    a_hat: Mat,
    params: ModelParams,
    running: Vec<RunningStats>,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl Model {
    /// Fresh model with the default initialization.
    pub fn new(config: ModelConfig, topology: &SkeletonGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.num_joints;
        let c = config.channels;
        let dims: Vec<(usize, usize)> = (0..config.num_layers())
            .map(|l| {
                let f_in = if l == 0 { config.input_dim } else { c };
                let f_out = if l + 1 == config.num_layers() { config.output_dim } else { c };
                (f_in, f_out)
            })
            .collect();
        let layers = dims
            .iter()
            .map(|&(f_in, f_out)| LayerParams {
                weight: xavier(f_in, f_out, &mut rng),
                skip_weight: xavier(config.input_dim, f_out, &mut rng),
                modulation: Mat::from_element(n, f_out, 1.0),
                beta: config.beta,
            })
            .collect();
        let adjacency = (0..config.num_q())
            .map(|_| Mat::from_fn(n, n, |_, _| rng.random_range(-1e-2..1e-2)))
            .collect();
        let norms = (0..config.num_norms())
            .map(|_| NormParams {
                gain: Mat::from_element(1, c, 1.0),
                bias: Mat::zeros(1, c),
            })
            .collect();
        let nonlocal = config.use_nonlocal.then(|| {
            let ci = config.nonlocal_inner();
            NonLocalParams {
                theta: xavier(c, ci, &mut rng),
                phi: xavier(c, ci, &mut rng),
                g: xavier(c, ci, &mut rng),
                out: Mat::zeros(ci, c),
            }
        });
        let refine = config.use_refinement.then(|| {
            let d = n * config.output_dim;
            let mut r = RefineParams::zeros(d, config.refine_hidden);
            r.w1 = xavier(d, config.refine_hidden, &mut rng);
            r
        });
        let params = ModelParams {
            layers,
            adjacency,
            norms,
            nonlocal,
            refine,
        };
        let running = Self::fresh_running(&config);
        Self::from_parts(config, topology, params, running)
    }

    fn fresh_running(config: &ModelConfig) -> Vec<RunningStats> {
        match config.block_style {
            BlockStyle::LayernormGelu => Vec::new(),
            BlockStyle::BatchnormRelu => (0..config.num_norms())
                .map(|_| RunningStats {
                    mean: vec![0.0; config.channels],
                    var: vec![1.0; config.channels],
                })
                .collect(),
        }
    }

    /// Assemble a model from stored parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        topology: &SkeletonGraph,
        params: ModelParams,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.num_joints;
        if topology.num_joints() != n {
            return Err(Error::shape(format!(
                "model has {n} joints, topology has {}",
                topology.num_joints()
            )));
        }
        if params.layers.len() != config.num_layers() {
            return Err(Error::shape(format!(
                "expected {} layers, found {}",
                config.num_layers(),
                params.layers.len()
            )));
        }
        let c = config.channels;
        for (l, p) in params.layers.iter().enumerate() {
            let f_in = if l == 0 { config.input_dim } else { c };
            let f_out = if l + 1 == config.num_layers() { config.output_dim } else { c };
            if p.weight.shape() != (f_in, f_out) {
                return Err(Error::shape(format!(
                    "layer {l} weight is {:?}, expected {:?}",
                    p.weight.shape(),
                    (f_in, f_out)
                )));
            }
            p.validate(n, config.input_dim)
                .map_err(|e| Error::InvalidParameter(format!("layer {l}: {e}")))?;
        }
        if params.adjacency.len() != config.num_q() || params.adjacency.iter().any(|q| q.shape() != (n, n)) {
            return Err(Error::shape("adjacency modulation does not match the config"));
        }
        if params.norms.len() != config.num_norms()
            || params.norms.iter().any(|p| p.gain.shape() != (1, c) || p.bias.shape() != (1, c))
        {
            return Err(Error::shape("normalization parameters do not match the config"));
        }
        let ci = config.nonlocal_inner();
        match (&params.nonlocal, config.use_nonlocal) {
            (None, false) => {}
            (Some(nl), true)
                if nl.theta.shape() == (c, ci)
                    && nl.phi.shape() == (c, ci)
                    && nl.g.shape() == (c, ci)
                    && nl.out.shape() == (ci, c) => {}
            _ => return Err(Error::shape("non-local parameters do not match the config")),
        }
        let d = n * config.output_dim;
        let h = config.refine_hidden;
        match (&params.refine, config.use_refinement) {
            (None, false) => {}
            (Some(r), true)
                if r.w1.shape() == (d, h)
                    && r.b1.shape() == (1, h)
                    && r.w2.shape() == (h, d)
                    && r.b2.shape() == (1, d) => {}
            _ => return Err(Error::shape("refinement parameters do not match the config")),
        }
        for p in params.matrices() {
            ensure_finite(p.value, &p.name)?;
        }
        let expected_running = if config.block_style == BlockStyle::BatchnormRelu {
            config.num_norms()
        } else {
            0
        };
        if running.len() != expected_running
            || running.iter().any(|r| r.mean.len() != c || r.var.len() != c)
        {
            return Err(Error::shape("running statistics do not match the config"));
        }
        let a_hat = normalize_adjacency(&topology.adjacency()).entries().clone();
        Ok(Model {
            config,
            a_hat,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Whether a parameter group is updated by training.
    pub fn is_trainable(&self, group: &str) -> bool {
        !(group == "M" && !self.config.weight_modulation)
    }

    /// Number of GS-Net layers in the network.
    pub fn depth(&self) -> usize {
        self.params.layers.len()
    }

    fn units(&self) -> Vec<Unit> {
        let cfg = &self.config;
        let bn = cfg.block_style == BlockStyle::BatchnormRelu;
        let mut units = Vec::with_capacity(cfg.num_layers());
        units.push(Unit {
            layer: 0,
            norm: bn.then_some(0),
            act: if bn { Activation::Relu } else { Activation::Gelu },
            dropout: true,
        });
        for b in 0..cfg.num_blocks {
            let (first, second) = (1 + 2 * b, 2 + 2 * b);
            if bn {
                for l in [first, second] {
                    units.push(Unit {
                        layer: l,
                        norm: Some(l),
                        act: Activation::Relu,
                        dropout: true,
                    });
                }
            } else {
                units.push(Unit {
                    layer: first,
                    norm: Some(b),
                    act: Activation::Identity,
                    dropout: true,
                });
                units.push(Unit {
                    layer: second,
                    norm: None,
                    act: Activation::Gelu,
                    dropout: true,
                });
            }
        }
        units.push(Unit {
            layer: cfg.num_layers() - 1,
            norm: None,
            act: Activation::Identity,
            dropout: false,
        });
        units
    }

    fn check_inputs(&self, inputs: &[Mat]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let want = (self.config.num_joints, self.config.input_dim);
        for (i, x) in inputs.iter().enumerate() {
            if x.shape() != want {
                return Err(Error::shape(format!("sample {i} is {:?}, expected {want:?}", x.shape())));
            }
            ensure_finite(x, &format!("input sample {i}"))?;
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[Mat], mode: Mode) -> Result<Vec<Mat>> {
        self.forward_tape(inputs, mode).map(|(out, _)| out)
    }

    pub fn forward_tape(&self, inputs: &[Mat], mode: Mode) -> Result<(Vec<Mat>, ForwardTape)> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let props = (0..cfg.num_layers())
            .map(|l| {
                let q = cfg.q_index(l).map(|k| &self.params.adjacency[k]);
                Propagator::new(&self.a_hat, q, cfg.beta, cfg.symmetrize)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        let mut tape = ForwardTape {
            inputs: inputs.to_vec(),
            props,
            units: Vec::new(),
            nonlocal: Vec::new(),
            refine: Vec::new(),
            batch_stats: vec![None; cfg.num_norms()],
        };
        let units = self.units();
        let mut h = self.unit_forward(&units[0], inputs, &mut tape, rng.as_mut())?;
        for b in 0..cfg.num_blocks {
            let residual = h.clone();
            h = self.unit_forward(&units[1 + 2 * b], &h, &mut tape, rng.as_mut())?;
            h = self.unit_forward(&units[2 + 2 * b], &h, &mut tape, rng.as_mut())?;
            for (x, r) in h.iter_mut().zip(&residual) {
                *x += r;
            }
        }
        if let Some(nl) = &self.params.nonlocal {
            h = h
                .iter()
                .map(|x| {
                    let (y, t) = nonlocal_forward_tape(x, nl);
                    tape.nonlocal.push(t);
                    y
                })
                .collect();
            check_stage(&h, "non-local block")?;
        }
        h = self.unit_forward(units.last().unwrap(), &h, &mut tape, rng.as_mut())?;
        if let Some(r) = &self.params.refine {
            h = h
                .iter()
                .map(|x| {
                    let (y, t) = refine_forward_tape(x, r);
                    tape.refine.push(t);
                    y
                })
                .collect();
            check_stage(&h, "refinement head")?;
        }
        Ok((h, tape))
    }

    fn unit_forward(
        &self,
        u: &Unit,
        h: &[Mat],
        tape: &mut ForwardTape,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Mat>> {
        let params = &self.params.layers[u.layer];
        let prop = &tape.props[u.layer];
        let mut layer_tapes = Vec::with_capacity(h.len());
        let mut z: Vec<Mat> = h
            .iter()
            .zip(&tape.inputs)
            .map(|(h, x0)| {
                let (z, t) = layer_pre_activation(h, x0, params, prop, self.config.skip_connection);
                layer_tapes.push(t);
                z
            })
            .collect();

        let norm = u.norm.map(|k| {
            let np = &self.params.norms[k];
            match self.config.block_style {
                BlockStyle::LayernormGelu => {
                    let mut tapes = Vec::with_capacity(z.len());
                    for x in z.iter_mut() {
                        let (y, t) = layer_norm_forward(x, &np.gain, &np.bias);
                        *x = y;
                        tapes.push(t);
                    }
                    NormTape::Layer(tapes)
                }
                BlockStyle::BatchnormRelu => {
                    let (stats, frozen) = if rng.is_some() {
                        let s = batch_stats(&z);
                        tape.batch_stats[k] = Some(s.clone());
                        (s, false)
                    } else {
                        let r = &self.running[k];
                        (
                            BatchStats {
                                mean: r.mean.clone(),
                                var: r.var.clone(),
                                count: 0,
                            },
                            true,
                        )
                    };
                    let (ys, t) = batch_norm_forward(&z, &stats, frozen, &np.gain, &np.bias);
                    z = ys;
                    NormTape::Batch(t)
                }
            }
        });

        let pre_act = match u.act {
            Activation::Identity => None,
            Activation::Gelu | Activation::Relu => {
                let f = if u.act == Activation::Gelu { gelu } else { relu };
                let pre = z.clone();
                z.iter_mut().for_each(|x| x.apply(|v| *v = f(*v)));
                Some(pre)
            }
        };

        let rate = self.config.dropout_rate;
        let mask = match rng {
            Some(rng) if u.dropout && rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let masks: Vec<Mat> = z
                    .iter()
                    .map(|x| Mat::from_fn(x.nrows(), x.ncols(), |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep }))
                    .collect();
                for (x, m) in z.iter_mut().zip(&masks) {
                    x.component_mul_assign(m);
                }
                Some(masks)
            }
            _ => None,
        };

        check_stage(&z, &format!("layer {}", u.layer))?;
        tape.units.push(UnitTape {
            layer: layer_tapes,
            norm,
            pre_act,
            mask,
        });
        Ok(z)
    }

    /// Gradients of all parameters given the gradient of a scalar objective
    /// with respect to the outputs of the recorded forward pass.
    pub fn backward(&self, tape: &ForwardTape, dout: &[Mat]) -> ModelParams {
        let cfg = &self.config;
        let mut grads = self.params.zeros_like();
        let mut d_scaled: Vec<Mat> = (0..cfg.num_layers())
            .map(|_| Mat::zeros(cfg.num_joints, cfg.num_joints))
            .collect();
        let units = self.units();
        let mut dh = dout.to_vec();

        if let Some(r) = &self.params.refine {
            let g = grads.refine.as_mut().unwrap();
            dh = dh
                .iter()
                .zip(&tape.refine)
                .map(|(d, t)| refine_backward(d, t, r, g))
                .collect();
        }
        let last = units.len() - 1;
        dh = self.unit_backward(&units[last], &tape.units[last], &dh, tape, &mut grads, &mut d_scaled);
        if let Some(nl) = &self.params.nonlocal {
            let g = grads.nonlocal.as_mut().unwrap();
            dh = dh
                .iter()
                .zip(&tape.nonlocal)
                .map(|(d, t)| nonlocal_backward(d, t, nl, g))
                .collect();
        }
        for b in (0..cfg.num_blocks).rev() {
            let residual = dh.clone();
            for k in [2 + 2 * b, 1 + 2 * b] {
                dh = self.unit_backward(&units[k], &tape.units[k], &dh, tape, &mut grads, &mut d_scaled);
            }
            for (d, r) in dh.iter_mut().zip(&residual) {
                *d += r;
            }
        }
        self.unit_backward(&units[0], &tape.units[0], &dh, tape, &mut grads, &mut d_scaled);

        for (l, ds) in d_scaled.iter().enumerate() {
            if let Some(k) = cfg.q_index(l) {
                grads.adjacency[k] += tape.props[l].grad_q(ds);
            }
        }
        if !cfg.weight_modulation {
            for l in &mut grads.layers {
                l.modulation.fill(0.0);
            }
        }
        grads
    }

    fn unit_backward(
        &self,
        u: &Unit,
        ut: &UnitTape,
        dz: &[Mat],
        tape: &ForwardTape,
        grads: &mut ModelParams,
        d_scaled: &mut [Mat],
    ) -> Vec<Mat> {
        let mut dz = dz.to_vec();
        if let Some(masks) = &ut.mask {
            for (d, m) in dz.iter_mut().zip(masks) {
                d.component_mul_assign(m);
            }
        }
        if let Some(pre) = &ut.pre_act {
            let f = if u.act == Activation::Gelu {
                gelu_grad
            } else {
                |v: f64| if v > 0.0 { 1.0 } else { 0.0 }
            };
            for (d, p) in dz.iter_mut().zip(pre) {
                d.component_mul_assign(&p.map(f));
            }
        }
        if let (Some(k), Some(nt)) = (u.norm, &ut.norm) {
            let gain = &self.params.norms[k].gain;
            let g = &mut grads.norms[k];
            match nt {
                NormTape::Layer(tapes) => {
                    for (d, t) in dz.iter_mut().zip(tapes) {
                        *d = layer_norm_backward(d, t, gain, &mut g.gain, &mut g.bias);
                    }
                }
                NormTape::Batch(t) => {
                    dz = batch_norm_backward(&dz, t, gain, &mut g.gain, &mut g.bias);
                }
            }
        }
        let params = &self.params.layers[u.layer];
        let prop = &tape.props[u.layer];
        dz.iter()
            .zip(&ut.layer)
            .zip(&tape.inputs)
            .map(|((d, lt), x0)| {
                layer_backward(d, lt, x0, params, prop, &mut grads.layers[u.layer], &mut d_scaled[u.layer])
            })
            .collect()
    }

    /// Loss and parameter gradients on one batch.
    pub fn loss_and_grad(&self, inputs: &[Mat], targets: &[Mat], mode: Mode) -> Result<(f64, ModelParams, ForwardTape)> {
        let (pred, tape) = self.forward_tape(inputs, mode)?;
        let (loss, dpred) = pose_loss_grad(&pred, targets, self.config.alpha)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = self.backward(&tape, &dpred);
        Ok((loss, grads, tape))
    }

    /// Fold the batch statistics of a training pass into the running averages.
    pub fn update_running_stats(&mut self, tape: &ForwardTape) {
        for (r, s) in self.running.iter_mut().zip(&tape.batch_stats) {
            let Some(s) = s else { continue };
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for j in 0..r.mean.len() {
                r.mean[j] = (1.0 - BN_MOMENTUM) * r.mean[j] + BN_MOMENTUM * s.mean[j];
                r.var[j] = (1.0 - BN_MOMENTUM) * r.var[j] + BN_MOMENTUM * s.var[j] * unbias;
            }
        }
    }
}

fn check_stage(h: &[Mat], stage: &str) -> Result<()> {
    if h.iter().all(|m| m.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {stage}")))
    }
}
