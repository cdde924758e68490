//! Generator (encoder-decoder with an additive symmetric feature chain) and
//! WGAN critic.
//!
//! Encoder stages are stride-2 4×4 convolutions with instance norm and
//! leaky ReLU (0.2); the first stage skips normalization. Decoder stages
//! upsample ×2 (nearest), apply a 3×3 convolution, instance norm and ReLU,
//! and then add the encoder features of matching resolution. A final
//! upsample + 3×3 convolution + tanh produces the image.

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{from_nchw, masks_to_n1hw, to_nchw, HoleMask, ImageTensor, ValueRange};
use crate::optim::AdamState;

/// Named parameter arrays, iterated in key order.
pub type ParamSet = BTreeMap<String, ArrayD<f64>>;

pub const MAX_CHANNELS: usize = 512;
const LEAKY_SLOPE: f64 = 0.2;
const DOWN: Conv2dGeometry = Conv2dGeometry { stride: 2, padding: 1 };
const SAME3: Conv2dGeometry = Conv2dGeometry { stride: 1, padding: 1 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Encoder features are added to the mirrored decoder stage.
    Add,
    /// No chain connections; only used for ablation.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    /// Append the hole mask as an extra input channel.
    pub hole_channel: bool,
    pub chain_mode: ChainMode,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 64,
            input_channels: 3,
            hole_channel: false,
            chain_mode: ChainMode::Add,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config(format!("generator depth {} must be at least 3", self.depth)));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of encoder stage `i` (1-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << (i - 1)).min(MAX_CHANNELS)
    }

    fn conv_in_channels(&self) -> usize {
        self.input_channels + usize::from(self.hole_channel)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.conv_in_channels();
        for i in 1..=self.depth {
            let c = self.stage_channels(i);
            out.push((format!("enc{i}.weight"), vec![c, cin, 4, 4]));
            out.push((format!("enc{i}.bias"), vec![c]));
            cin = c;
        }
        for i in (1..self.depth).rev() {
            let c = self.stage_channels(i);
            out.push((format!("dec{i}.weight"), vec![c, cin, 3, 3]));
            out.push((format!("dec{i}.bias"), vec![c]));
            cin = c;
        }
        out.push(("out.weight".into(), vec![self.input_channels, cin, 3, 3]));
        out.push(("out.bias".into(), vec![self.input_channels]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub input_channels: usize,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            input_channels: 3,
        }
    }
}

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("critic depth and channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << (i - 1)).min(MAX_CHANNELS)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "critic input {h}x{w} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for i in 1..=self.depth {
            let c = self.stage_channels(i);
            out.push((format!("conv{i}.weight"), vec![c, cin, 4, 4]));
            out.push((format!("conv{i}.bias"), vec![c]));
            cin = c;
        }
        out.push(("head.weight".into(), vec![cin, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }
}

/// All learnable state: generator and critic weights plus their Adam
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub gspec: GeneratorSpec,
    pub cspec: CriticSpec,
    pub generator: ParamSet,
    pub critic: ParamSet,
    pub gen_opt: AdamState,
    pub critic_opt: AdamState,
}

impl NetParams {
    pub fn all_finite(&self) -> bool {
        [&self.generator, &self.critic]
            .into_iter()
            .chain([&self.gen_opt.m, &self.gen_opt.v, &self.critic_opt.m, &self.critic_opt.v])
            .flat_map(|set| set.values())
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_critic(&self) -> f64 {
        self.critic
            .values()
            .flat_map(|a| a.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn init_set(shapes: &[(String, Vec<usize>)], rng: &mut ChaCha8Rng) -> ParamSet {
    shapes
        .iter()
        .map(|(name, shape)| {
            let arr = if name.ends_with(".bias") {
                ArrayD::zeros(IxDyn(shape))
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
            };
            (name.clone(), arr)
        })
        .collect()
}

/// Fan-in scaled (He) normal weights, zero biases. Generator and critic
/// draw from separate streams of the same seed.
pub fn init_params(seed: u64, gspec: &GeneratorSpec, cspec: &CriticSpec) -> Result<NetParams> {
    gspec.validate()?;
    cspec.validate()?;
    let mut grng = ChaCha8Rng::seed_from_u64(seed);
    grng.set_stream(1);
    let mut crng = ChaCha8Rng::seed_from_u64(seed);
    crng.set_stream(2);
    let generator = init_set(&gspec.shapes(), &mut grng);
    let critic = init_set(&cspec.shapes(), &mut crng);
    Ok(NetParams {
        gspec: gspec.clone(),
        cspec: cspec.clone(),
        gen_opt: AdamState::zeros_like(&generator),
        critic_opt: AdamState::zeros_like(&critic),
        generator,
        critic,
    })
}

/// Parameter leaves recorded on a tape, by name.
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    fn conv(&self, tape: &mut Tape, x: Var, layer: &str, geom: Conv2dGeometry) -> Var {
        let w = self.get(&format!("{layer}.weight"));
        let b = self.get(&format!("{layer}.bias"));
        tape.conv2d(x, w, Some(b), geom)
    }

    /// Collects gradients for every bound parameter; missing gradients are
    /// zeros.
    pub fn grads(&self, tape: &Tape, grads: &mut crate::autodiff::Gradients) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| ArrayD::zeros(tape.value(*v).raw_dim()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Records the generator on `tape`. `input` is (N, C, H, W) in [-1, 1].
pub fn generator_graph(tape: &mut Tape, spec: &GeneratorSpec, p: &BoundParams, input: Var) -> Var {
    let mut skips = Vec::with_capacity(spec.depth);
    let mut h = input;
    for i in 1..=spec.depth {
        h = p.conv(tape, h, &format!("enc{i}"), DOWN);
        if i > 1 {
            h = tape.instance_norm(h);
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        skips.push(h);
    }
    for i in (1..spec.depth).rev() {
        h = tape.upsample2x(h);
        h = p.conv(tape, h, &format!("dec{i}"), SAME3);
        h = tape.instance_norm(h);
        h = tape.relu(h);
        if spec.chain_mode == ChainMode::Add {
            h = tape.add(h, skips[i - 1]);
        }
    }
    h = tape.upsample2x(h);
    h = p.conv(tape, h, "out", SAME3);
    tape.tanh(h)
}

/// Records the critic; returns (N, 1) unbounded scores.
pub fn critic_graph(tape: &mut Tape, spec: &CriticSpec, p: &BoundParams, image: Var) -> Var {
    let mut h = image;
    for i in 1..=spec.depth {
        h = p.conv(tape, h, &format!("conv{i}"), DOWN);
        if i > 1 {
            h = tape.instance_norm(h);
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    let pooled = tape.global_avg_pool(h);
    tape.linear(pooled, p.get("head.weight"), Some(p.get("head.bias")))
}

/// Builds the generator input from masked images and, when
/// `spec.hole_channel` is set, the (N, 1, H, W) hole masks.
pub fn generator_input(
    tape: &mut Tape,
    spec: &GeneratorSpec,
    masked: &Array4<f64>,
    holes: Option<&Array4<f64>>,
) -> Result<Var> {
    let (_, c, h, w) = masked.dim();
    if c != spec.input_channels {
        return Err(Error::Dimension(format!(
            "generator expects {} channels, got {c}",
            spec.input_channels
        )));
    }
    spec.check_input(h, w)?;
    let x = tape.constant(masked.clone().into_dyn());
    if !spec.hole_channel {
        return Ok(x);
    }
    let holes = holes.ok_or_else(|| Error::Config("generator spec requires a hole-mask channel".into()))?;
    if holes.dim() != (masked.dim().0, 1, h, w) {
        return Err(Error::Dimension(format!("hole batch {:?} does not match input", holes.dim())));
    }
    let m = tape.constant(holes.clone().into_dyn());
    Ok(tape.concat_channels(x, m))
}

/// Generator forward pass over an (N, C, H, W) batch in [-1, 1].
pub fn generate_batch(params: &NetParams, masked: &Array4<f64>, holes: Option<&Array4<f64>>) -> Result<Array4<f64>> {
    let mut tape = Tape::new();
    let input = generator_input(&mut tape, &params.gspec, masked, holes)?;
    let bound = BoundParams::bind(&mut tape, &params.generator, false);
    let out = generator_graph(&mut tape, &params.gspec, &bound, input);
    let value = tape.value(out);
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator output".into()));
    }
    Ok(value.clone().into_dimensionality().unwrap())
}

/// `I_pred = G(M_I)` for one masked image in the symmetric range.
pub fn generator_forward(params: &NetParams, masked: &ImageTensor, hole: Option<&HoleMask>) -> Result<ImageTensor> {
    if masked.range() != ValueRange::Symmetric {
        return Err(Error::Range("generator input must be in [-1, 1]".into()));
    }
    let batch = to_nchw(&[masked])?;
    let holes = hole.map(|h| masks_to_n1hw(&[h])).transpose()?;
    let out = generate_batch(params, &batch, holes.as_ref())?;
    Ok(from_nchw(&out, ValueRange::Symmetric)?.remove(0))
}

/// One score per batch element.
pub fn critic_scores(params: &NetParams, images: &Array4<f64>) -> Result<Vec<f64>> {
    let (_, c, h, w) = images.dim();
    if c != params.cspec.input_channels {
        return Err(Error::Dimension(format!(
            "critic expects {} channels, got {c}",
            params.cspec.input_channels
        )));
    }
    params.cspec.check_input(h, w)?;
    let mut tape = Tape::new();
    let x = tape.constant(images.clone().into_dyn());
    let bound = BoundParams::bind(&mut tape, &params.critic, false);
    let scores = critic_graph(&mut tape, &params.cspec, &bound, x);
    let out: Vec<f64> = tape.value(scores).iter().copied().collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("critic scores".into()));
    }
    Ok(out)
}

/// `D(image)` for one image in the symmetric range.
pub fn critic_forward(params: &NetParams, image: &ImageTensor) -> Result<f64> {
    if image.range() != ValueRange::Symmetric {
        return Err(Error::Range("critic input must be in [-1, 1]".into()));
    }
    Ok(critic_scores(params, &to_nchw(&[image])?)?[0])
}
