//! Network building blocks: convolution units, the collaborative expert
//! block (plain and compensated), the gated temporal unit of the bottleneck,
//! and the encoder/decoder stacks.
//!
//! Blocks only hold [`ParamId`]s and static geometry. Values live in a
//! [`ParamStore`] and enter a graph through [`Bindings`], so the same block
//! structure runs in `f32` for training and in `f64` for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec_nn::{Bindings, ConvSpec, Graph, NormScope, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Dilations of one bottleneck group.
pub const STCM_DILATIONS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Everything a block needs to run forward on a graph.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a Bindings,
    pub norm: NormScope,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a Bindings, norm: NormScope) -> Self {
        Ctx { graph, params, norm }
    }

    fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    fn check(&self, v: Var, label: &str) -> Result<Var> {
        self.graph.check_finite(v, label)?;
        Ok(v)
    }

    fn channels(&self, v: Var) -> usize {
        self.graph.value(v).shape()[1]
    }

    fn freq(&self, v: Var) -> usize {
        self.graph.value(v).shape()[3]
    }
}

/// Allocates named, initialized parameters for blocks.
///
/// Names are built from a stack of scopes joined by `/`, for example
/// `mag/enc/stage3/expert_a/weight`. Weights are drawn uniformly from
/// `±sqrt(3 / fan_in)`; biases start at zero, norm gains at one and PReLU
/// slopes at 0.25. Each weight has its own generator seeded from the model
/// seed and the parameter name, so parameters that two model variants share
/// start from identical values.
pub struct ParamBuilder<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    seed: u64,
    path: Vec<String>,
}

/// 64-bit FNV-1a, used to derive stable per-parameter seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl<'s, T: Scalar> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder { store, seed, path: Vec::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.path.push(name.to_string());
        let r = f(self);
        self.path.pop();
        r
    }

    pub fn path(&self) -> String {
        self.path.join("/")
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.path.is_empty() {
            leaf.to_string()
        } else {
            format!("{}/{leaf}", self.path())
        }
    }

    fn add(&mut self, leaf: &str, value: Tensor<T>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        Ok(self.store.add(name, value)?)
    }

    fn uniform(&self, leaf: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(self.full_name(leaf).as_bytes()));
        let bound = (3.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of_f64(rng.gen_range(-bound..bound)))
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv> {
        spec.validate()?;
        self.scope(name, |pb| {
            let [o, i, kt, kf] = spec.weight_shape();
            let weight = pb.uniform("weight", &[o, i, kt, kf], i * kt * kf);
            let weight = pb.add("weight", weight)?;
            let bias = pb.add("bias", Tensor::zeros(&[o]))?;
            Ok(Conv { spec, weight, bias, transposed: false })
        })
    }

    /// Convolution whose weight and bias both start at zero.
    pub fn conv_zeroed(&mut self, name: &str, spec: ConvSpec) -> Result<Conv> {
        spec.validate()?;
        self.scope(name, |pb| {
            let weight = pb.add("weight", Tensor::zeros(&spec.weight_shape()))?;
            let bias = pb.add("bias", Tensor::zeros(&[spec.out_channels]))?;
            Ok(Conv { spec, weight, bias, transposed: false })
        })
    }

    pub fn conv_transposed(&mut self, name: &str, spec: ConvSpec) -> Result<Conv> {
        spec.validate()?;
        self.scope(name, |pb| {
            let shape = spec.transposed_weight_shape();
            let [i, o, kt, kf] = shape;
            // each output bin receives about kt*kf/stride_f taps per input channel
            let fan_in = (i * kt * kf / spec.stride.1).max(1);
            let weight = pb.uniform("weight", &shape, fan_in);
            let weight = pb.add("weight", weight)?;
            let bias = pb.add("bias", Tensor::zeros(&[o]))?;
            Ok(Conv { spec, weight, bias, transposed: true })
        })
    }

    pub fn norm(&mut self, channels: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.add("norm_gain", Tensor::full(&[channels], T::one()))?,
            bias: self.add("norm_bias", Tensor::zeros(&[channels]))?,
        })
    }

    pub fn prelu(&mut self, channels: usize) -> Result<PRelu> {
        Ok(PRelu { slope: self.add("prelu", Tensor::full(&[channels], T::of_f64(0.25)))? })
    }

    /// Convolution followed by normalization and PReLU.
    pub fn conv_unit(&mut self, name: &str, spec: ConvSpec) -> Result<ConvUnit> {
        let conv = self.conv(name, spec)?;
        self.finish_unit(name, conv)
    }

    pub fn conv_unit_transposed(&mut self, name: &str, spec: ConvSpec) -> Result<ConvUnit> {
        let conv = self.conv_transposed(name, spec)?;
        self.finish_unit(name, conv)
    }

    fn finish_unit(&mut self, name: &str, conv: Conv) -> Result<ConvUnit> {
        let c = conv.spec.out_channels;
        self.scope(name, |pb| {
            let label = pb.path();
            Ok(ConvUnit { conv, norm: pb.norm(c)?, act: pb.prelu(c)?, label })
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
    transposed: bool,
}

impl Conv {
    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Applies the convolution. `out_freq` is required for transposed
    /// convolutions and ignored otherwise.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, out_freq: Option<usize>) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        if self.transposed {
            let f = out_freq.ok_or_else(|| Error::Config("transposed convolution needs a target size".into()))?;
            Ok(cx.graph.conv_transpose(x, w, Some(b), &self.spec, f)?)
        } else {
            Ok(cx.graph.conv(x, w, Some(b), &self.spec)?)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        Ok(cx.graph.channel_norm(x, g, b, cx.norm)?)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    slope: ParamId,
}

impl PRelu {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = cx.p(self.slope);
        Ok(cx.graph.prelu(x, s)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConvUnit {
    conv: Conv,
    norm: Norm,
    act: PRelu,
    label: String,
}

impl ConvUnit {
    pub fn conv(&self) -> &Conv {
        &self.conv
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, out_freq: Option<usize>) -> Result<Var> {
        let y = self.conv.forward(cx, x, out_freq)?;
        self.finish(cx, y)
    }

    /// Normalization and activation applied to an already convolved input.
    fn finish<T: Scalar>(&self, cx: &mut Ctx<T>, y: Var) -> Result<Var> {
        let y = self.norm.forward(cx, y)?;
        let y = self.act.forward(cx, y)?;
        cx.check(y, &self.label)
    }
}

/// Collaborative expert block. With `com_proj` present it is the
/// compensated variant, whose gate controls also receive a projected
/// feature from the other branch.
#[derive(Clone, Debug)]
pub struct Ceb {
    squeeze: ConvUnit,
    expert_a: Conv,
    expert_b: Conv,
    excite: ConvUnit,
    com_proj: Option<Conv>,
    channels: usize,
    label: String,
}

/// Intermediate values of one expert block pass.
pub struct CebTrace {
    pub out_a: Var,
    pub out_b: Var,
    pub output: Var,
}

impl Ceb {
    /// Builds a block for `channels` input/output channels and half as many
    /// inside. `compensated` adds the projection for a `channels`-wide
    /// compensatory input.
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        channels: usize,
        kernel: (usize, usize),
        compensated: bool,
    ) -> Result<Self> {
        let inner = half_width(channels)?;
        let expert = ConvSpec::new(inner, inner, kernel).causal();
        Ok(Ceb {
            squeeze: pb.conv_unit("squeeze", ConvSpec::pointwise(channels, inner))?,
            expert_a: pb.conv("expert_a", expert)?,
            expert_b: pb.conv("expert_b", expert)?,
            excite: pb.conv_unit("excite", ConvSpec::pointwise(inner, channels))?,
            com_proj: if compensated {
                Some(pb.conv_zeroed("com_proj", ConvSpec::pointwise(channels, inner))?)
            } else {
                None
            },
            channels,
            label: pb.path(),
        })
    }

    pub fn is_compensated(&self) -> bool {
        self.com_proj.is_some()
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, com: Option<Var>) -> Result<Var> {
        Ok(self.trace(cx, x, com)?.output)
    }

    pub fn trace<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, com: Option<Var>) -> Result<CebTrace> {
        expect_channels(cx, x, self.channels, &self.label)?;
        let s = self.squeeze.forward(cx, x, None)?;
        let a = self.expert_a.forward(cx, s, None)?;
        let b = self.expert_b.forward(cx, s, None)?;
        let (ctrl_a, ctrl_b) = match (com, &self.com_proj) {
            (None, _) => (b, a),
            (Some(c), Some(proj)) => {
                let c = proj.forward(cx, c, None)?;
                (cx.graph.add(b, c)?, cx.graph.add(a, c)?)
            }
            (Some(_), None) => {
                return Err(Error::Config(format!("{} has no compensation input", self.label)));
            }
        };
        let out_a = cx.graph.sigmoid_gate(a, ctrl_a)?;
        let out_b = cx.graph.sigmoid_gate(b, ctrl_b)?;
        let sum = cx.graph.add(out_a, out_b)?;
        let output = self.excite.forward(cx, sum, None)?;
        Ok(CebTrace { out_a, out_b, output: cx.check(output, &self.label)? })
    }
}

/// Stand-in for an expert block: one convolution of the same kernel,
/// optionally with an additive compensation projection before the norm.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    unit: ConvUnit,
    com_proj: Option<Conv>,
}

impl PlainBlock {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        channels: usize,
        kernel: (usize, usize),
        compensated: bool,
    ) -> Result<Self> {
        Ok(PlainBlock {
            unit: pb.conv_unit("conv", ConvSpec::new(channels, channels, kernel).causal())?,
            com_proj: if compensated {
                Some(pb.conv_zeroed("com_proj", ConvSpec::pointwise(channels, channels))?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, com: Option<Var>) -> Result<Var> {
        let mut y = self.unit.conv.forward(cx, x, None)?;
        match (com, &self.com_proj) {
            (None, _) => {}
            (Some(c), Some(proj)) => {
                let c = proj.forward(cx, c, None)?;
                y = cx.graph.add(y, c)?;
            }
            (Some(_), None) => {
                return Err(Error::Config(format!("{} has no compensation input", self.unit.label)));
            }
        }
        self.unit.finish(cx, y)
    }
}

#[derive(Clone, Debug)]
pub enum ExpertBlock {
    Collaborative(Ceb),
    Plain(PlainBlock),
}

impl ExpertBlock {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        channels: usize,
        kernel: (usize, usize),
        experts: bool,
        compensated: bool,
    ) -> Result<Self> {
        Ok(if experts {
            ExpertBlock::Collaborative(Ceb::build(pb, channels, kernel, compensated)?)
        } else {
            ExpertBlock::Plain(PlainBlock::build(pb, channels, kernel, compensated)?)
        })
    }

    pub fn is_compensated(&self) -> bool {
        match self {
            ExpertBlock::Collaborative(c) => c.com_proj.is_some(),
            ExpertBlock::Plain(p) => p.com_proj.is_some(),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, com: Option<Var>) -> Result<Var> {
        match self {
            ExpertBlock::Collaborative(c) => c.forward(cx, x, com),
            ExpertBlock::Plain(p) => p.forward(cx, x, com),
        }
    }
}

/// One gated temporal unit on a `[B, C_b, T, 1]` sequence:
/// `y = x + out_proj(main(h) * sigmoid(ctrl(h)))` with `h` the squeezed,
/// normalized input and `main`/`ctrl` causal dilated convolutions of
/// kernel 3 along time.
///
/// The sequence has a single frequency bin, so per-channel statistics
/// would cover only the frames seen so far and collapse to a constant on
/// the first frame. The normalization here pools all hidden channels of a
/// frame instead (a layer norm, cumulative over time under
/// [`NormScope::Cumulative`]) with a single gain and bias.
#[derive(Clone, Debug)]
pub struct StcmUnit {
    in_proj: Conv,
    in_norm: Norm,
    in_act: PRelu,
    hidden: usize,
    gate_main: Conv,
    gate_ctrl: Conv,
    out_proj: Conv,
    channels: usize,
    label: String,
}

impl StcmUnit {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, hidden: usize, dilation: usize) -> Result<Self> {
        if !STCM_DILATIONS.contains(&dilation) {
            return Err(Error::Config(format!("dilation {dilation} is not one of {STCM_DILATIONS:?}")));
        }
        let gate = ConvSpec::new(hidden, hidden, (3, 1)).with_dilation(dilation, 1).causal();
        let in_proj = pb.conv("in_proj", ConvSpec::pointwise(channels, hidden))?;
        let (in_norm, in_act) = pb.scope("in_proj", |pb| Ok((pb.norm(1)?, pb.prelu(hidden)?)))?;
        Ok(StcmUnit {
            in_proj,
            in_norm,
            in_act,
            hidden,
            gate_main: pb.conv("gate_main", gate)?,
            gate_ctrl: pb.conv("gate_ctrl", gate)?,
            out_proj: pb.conv("out_proj", ConvSpec::pointwise(hidden, channels))?,
            channels,
            label: pb.path(),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        expect_channels(cx, x, self.channels, &self.label)?;
        let h = self.in_proj.forward(cx, x, None)?;
        let h = cx.graph.unfold_freq(h, self.hidden)?;
        let h = self.in_norm.forward(cx, h)?;
        let h = cx.graph.fold_freq(h)?;
        let h = self.in_act.forward(cx, h)?;
        let main = self.gate_main.forward(cx, h, None)?;
        let ctrl = self.gate_ctrl.forward(cx, h, None)?;
        let gated = cx.graph.sigmoid_gate(main, ctrl)?;
        let r = self.out_proj.forward(cx, gated, None)?;
        let y = cx.graph.add(x, r)?;
        cx.check(y, &self.label)
    }
}

/// Groups of gated temporal units, each group cycling through
/// [`STCM_DILATIONS`].
#[derive(Clone, Debug)]
pub struct Stcm {
    units: Vec<StcmUnit>,
}

impl Stcm {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<T>, channels: usize, hidden: usize, groups: usize) -> Result<Self> {
        let mut units = Vec::new();
        for g in 0..groups {
            pb.scope(&format!("group{}", g + 1), |pb| {
                for (u, &d) in STCM_DILATIONS.iter().enumerate() {
                    units.push(pb.scope(&format!("unit{}", u + 1), |pb| StcmUnit::build(pb, channels, hidden, d))?);
                }
                Ok(())
            })?;
        }
        Ok(Stcm { units })
    }

    pub fn units(&self) -> &[StcmUnit] {
        &self.units
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.units.iter().try_fold(x, |h, u| u.forward(cx, h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub stages: usize,
    pub kernel: (usize, usize),
    pub experts: bool,
}

impl StackConfig {
    fn down_spec(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.channels, self.kernel).with_stride(1, 2).causal()
    }

    /// Frequency sizes after the input and after each downsampling stage.
    pub fn freq_chain(&self, bins: usize) -> Result<Vec<usize>> {
        let spec = self.down_spec();
        let mut chain = vec![bins];
        for _ in 0..self.stages {
            let f = *chain.last().unwrap();
            chain.push(spec.out_freq(f).ok_or_else(|| {
                Error::Config(format!("{f} bins are too few for another downsampling stage"))
            })?);
        }
        Ok(chain)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    block: ExpertBlock,
    down: ConvUnit,
}

/// Input projection followed by stages of expert block and strided
/// downsampling convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    input: ConvUnit,
    stages: Vec<EncoderStage>,
    compensated: bool,
}

/// Latent feature plus the pre-downsampling output of every stage.
pub struct EncoderOutput {
    pub latent: Var,
    pub taps: Vec<Var>,
}

impl Encoder {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<T>, cfg: &StackConfig, compensated: bool) -> Result<Self> {
        let input = pb.conv_unit("input", ConvSpec::pointwise(cfg.in_channels, cfg.channels))?;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            stages.push(pb.scope(&format!("stage{}", s + 1), |pb| {
                Ok(EncoderStage {
                    block: ExpertBlock::build(pb, cfg.channels, cfg.kernel, cfg.experts, compensated)?,
                    down: pb.conv_unit("down", cfg.down_spec())?,
                })
            })?);
        }
        Ok(Encoder { input, stages, compensated })
    }

    pub fn is_compensated(&self) -> bool {
        self.compensated
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, com_taps: Option<&[Var]>) -> Result<EncoderOutput> {
        match (self.compensated, com_taps) {
            (true, Some(t)) if t.len() == self.stages.len() => {}
            (false, None) => {}
            (true, Some(t)) => {
                return Err(Error::Config(format!(
                    "{} compensation taps for {} encoder stages",
                    t.len(),
                    self.stages.len()
                )));
            }
            (true, None) => return Err(Error::Config("compensated encoder needs taps".into())),
            (false, Some(_)) => return Err(Error::Config("encoder takes no compensation taps".into())),
        }
        let mut h = self.input.forward(cx, x, None)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            h = stage.block.forward(cx, h, com_taps.map(|t| t[s]))?;
            taps.push(h);
            h = stage.down.forward(cx, h, None)?;
        }
        Ok(EncoderOutput { latent: h, taps })
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvUnit,
    block: ExpertBlock,
}

/// Mirror of the encoder: each stage upsamples, adds the matching encoder
/// tap and runs an expert block; a pointwise head maps to the output
/// channels.
#[derive(Clone, Debug)]
pub struct Decoder {
    // deepest stage first
    stages: Vec<DecoderStage>,
    head: Conv,
}

impl Decoder {
    /// `zero_head` starts the output head at zero, for decoders whose output
    /// is added to a residual path.
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        cfg: &StackConfig,
        out_channels: usize,
        zero_head: bool,
    ) -> Result<Self> {
        let up = ConvSpec::new(cfg.channels, cfg.channels, cfg.kernel).with_stride(1, 2).causal();
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in (0..cfg.stages).rev() {
            stages.push(pb.scope(&format!("stage{}", s + 1), |pb| {
                Ok(DecoderStage {
                    up: pb.conv_unit_transposed("up", up)?,
                    block: ExpertBlock::build(pb, cfg.channels, cfg.kernel, cfg.experts, false)?,
                })
            })?);
        }
        let head_spec = ConvSpec::pointwise(cfg.channels, out_channels);
        let head = if zero_head { pb.conv_zeroed("head", head_spec)? } else { pb.conv("head", head_spec)? };
        Ok(Decoder { stages, head })
    }

    pub fn out_channels(&self) -> usize {
        self.head.spec.out_channels
    }

    /// Runs the decoder; `skips` are the encoder taps in encoder order.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, latent: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.stages.len() {
            return Err(Error::Dimension(format!(
                "{} skips for {} decoder stages",
                skips.len(),
                self.stages.len()
            )));
        }
        let mut h = latent;
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let f = cx.freq(skip);
            h = stage.up.forward(cx, h, Some(f))?;
            h = cx.graph.add(h, skip)?;
            h = stage.block.forward(cx, h, None)?;
        }
        self.head.forward(cx, h, None)
    }
}

fn half_width(channels: usize) -> Result<usize> {
    if channels < 2 || !channels.is_multiple_of(2) {
        return Err(Error::Config(format!("expert blocks need an even channel count, got {channels}")));
    }
    Ok(channels / 2)
}

fn expect_channels<T: Scalar>(cx: &Ctx<T>, x: Var, c: usize, label: &str) -> Result<()> {
    let got = cx.channels(x);
    if got != c {
        return Err(Error::Dimension(format!("{label} expects {c} channels, got {got}")));
    }
    Ok(())
}
