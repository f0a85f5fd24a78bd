//! The assembled two-branch network, its loss, and the enhancement pipeline.
//!
//! The magnitude branch predicts a non-negative mask that scales the noisy
//! magnitude. The complex branch maps the noisy spectrum to real and
//! imaginary estimates as the noisy spectrum plus a learned correction whose
//! output layer starts at zero, and its encoder blocks receive the magnitude
//! encoder's per-stage outputs as compensatory features. The enhanced
//! waveform combines the estimated magnitude with the phase of the complex
//! estimate.

use std::path::Path;

use twinspec_nn::{Adam, Checkpoint, Graph, NormScope, ParamStore, Scalar, Tensor, Var};

use crate::blocks::{Ctx, Decoder, Encoder, ParamBuilder, StackConfig, Stcm};
use crate::data::Batch;
use crate::dsp::{istft, mag_phase, polar_combine, stft, Magnitude, Spectrogram, StftConfig, UnitPhase, WindowKind};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub stages: usize,
    pub kernel: (usize, usize),
    pub stcm_groups: usize,
    pub stcm_hidden: usize,
    pub no_phase: bool,
    pub no_experts: bool,
    pub no_compensation: bool,
    pub norm: NormScope,
    pub seed: u64,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            stages: 5,
            kernel: (2, 3),
            stcm_groups: 3,
            stcm_hidden: 64,
            no_phase: false,
            no_experts: false,
            no_compensation: false,
            norm: NormScope::Cumulative,
            seed: 0,
            stft: StftConfig::default(),
        }
    }
}

const META_KEYS: &[&str] = &[
    "model.channels",
    "model.stages",
    "model.kernel_t",
    "model.kernel_f",
    "model.stcm_groups",
    "model.stcm_hidden",
    "model.no_phase",
    "model.no_experts",
    "model.no_compensation",
    "model.norm",
    "model.seed",
    "stft.sample_rate",
    "stft.win_len",
    "stft.hop",
    "stft.fft_size",
    "stft.window",
];

impl ModelConfig {
    /// Reduced width for quick experiments: two stages of 16 channels and
    /// one bottleneck group.
    pub fn small() -> Self {
        ModelConfig { channels: 16, stages: 2, stcm_groups: 1, stcm_hidden: 32, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!("channels must be even and >= 2, got {}", self.channels)));
        }
        if self.stages == 0 || self.stcm_hidden == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Config("stages, stcm_hidden and kernel sizes must be positive".into()));
        }
        if self.kernel.1 % 2 == 0 {
            return Err(Error::Config(format!("frequency kernel {} must be odd", self.kernel.1)));
        }
        self.stack(2).freq_chain(self.stft.bins())?;
        Ok(())
    }

    fn stack(&self, in_channels: usize) -> StackConfig {
        StackConfig {
            in_channels,
            channels: self.channels,
            stages: self.stages,
            kernel: self.kernel,
            experts: !self.no_experts,
        }
    }

    pub fn to_meta(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("model.channels", self.channels);
        kv.set("model.stages", self.stages);
        kv.set("model.kernel_t", self.kernel.0);
        kv.set("model.kernel_f", self.kernel.1);
        kv.set("model.stcm_groups", self.stcm_groups);
        kv.set("model.stcm_hidden", self.stcm_hidden);
        kv.set("model.no_phase", self.no_phase);
        kv.set("model.no_experts", self.no_experts);
        kv.set("model.no_compensation", self.no_compensation);
        kv.set("model.norm", norm_name(self.norm));
        kv.set("model.seed", self.seed);
        kv.set("stft.sample_rate", self.stft.sample_rate);
        kv.set("stft.win_len", self.stft.win_len);
        kv.set("stft.hop", self.stft.hop);
        kv.set("stft.fft_size", self.stft.fft_size);
        kv.set("stft.window", self.stft.window.name());
        kv
    }

    /// Reads the model and STFT keys of `kv`; keys under other prefixes are
    /// left for the caller, missing keys keep their defaults.
    pub fn from_meta(kv: &KeyValues) -> Result<Self> {
        let d = ModelConfig::default();
        for k in kv.keys() {
            if (k.starts_with("model.") || k.starts_with("stft.")) && !META_KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        let cfg = ModelConfig {
            channels: kv.get("model.channels")?.unwrap_or(d.channels),
            stages: kv.get("model.stages")?.unwrap_or(d.stages),
            kernel: (
                kv.get("model.kernel_t")?.unwrap_or(d.kernel.0),
                kv.get("model.kernel_f")?.unwrap_or(d.kernel.1),
            ),
            stcm_groups: kv.get("model.stcm_groups")?.unwrap_or(d.stcm_groups),
            stcm_hidden: kv.get("model.stcm_hidden")?.unwrap_or(d.stcm_hidden),
            no_phase: kv.get("model.no_phase")?.unwrap_or(false),
            no_experts: kv.get("model.no_experts")?.unwrap_or(false),
            no_compensation: kv.get("model.no_compensation")?.unwrap_or(false),
            norm: kv.get_str("model.norm").map(parse_norm).transpose()?.unwrap_or(d.norm),
            seed: kv.get("model.seed")?.unwrap_or(d.seed),
            stft: StftConfig {
                sample_rate: kv.get("stft.sample_rate")?.unwrap_or(d.stft.sample_rate),
                win_len: kv.get("stft.win_len")?.unwrap_or(d.stft.win_len),
                hop: kv.get("stft.hop")?.unwrap_or(d.stft.hop),
                fft_size: kv.get("stft.fft_size")?.unwrap_or(d.stft.fft_size),
                window: kv.get_str("stft.window").map(WindowKind::parse).transpose()?.unwrap_or(d.stft.window),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn norm_name(n: NormScope) -> &'static str {
    match n {
        NormScope::Cumulative => "cumulative",
        NormScope::Utterance => "utterance",
    }
}

fn parse_norm(s: &str) -> Result<NormScope> {
    match s {
        "cumulative" => Ok(NormScope::Cumulative),
        "utterance" => Ok(NormScope::Utterance),
        other => Err(Error::Config(format!("unknown norm scope '{other}'"))),
    }
}

/// Real/imaginary planes `[B, 2, T, F]` and magnitudes `[B, 1, T, F]` of a
/// batch of spectrograms that share one frame count.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBatch<T> {
    ri: Tensor<T>,
    mag: Tensor<T>,
    valid_frames: Vec<usize>,
    config: StftConfig,
}

impl SpectralBatch<f32> {
    /// `valid_frames` defaults to every frame of every item.
    pub fn from_spectrograms(specs: &[Spectrogram], valid_frames: Option<Vec<usize>>) -> Result<Self> {
        let first = specs.first().ok_or(Error::EmptyBatch)?;
        let (t, f, config) = (first.frames(), first.bins(), *first.config());
        let b = specs.len();
        let mut ri = Vec::with_capacity(b * 2 * t * f);
        let mut mag = Vec::with_capacity(b * t * f);
        for s in specs {
            if s.frames() != t || s.config() != &config {
                return Err(Error::Dimension(format!(
                    "batch mixes {} and {} frames or different STFT settings",
                    t,
                    s.frames()
                )));
            }
            ri.extend_from_slice(s.real());
            ri.extend_from_slice(s.imag());
            mag.extend(s.real().iter().zip(s.imag()).map(|(&r, &i)| (r as f64).hypot(i as f64) as f32));
        }
        let valid_frames = valid_frames.unwrap_or_else(|| vec![t; b]);
        if valid_frames.len() != b || valid_frames.iter().any(|&v| v > t) {
            return Err(Error::Dimension(format!("valid frame counts {valid_frames:?} for {b} items of {t} frames")));
        }
        Ok(SpectralBatch {
            ri: Tensor::from_vec(&[b, 2, t, f], ri)?,
            mag: Tensor::from_vec(&[b, 1, t, f], mag)?,
            valid_frames,
            config,
        })
    }

    pub fn from_batch(batch: &Batch) -> Result<Self> {
        let specs = batch
            .waveforms()
            .iter()
            .map(|w| stft(w, batch.config()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_spectrograms(&specs, Some(batch.valid_frames().to_vec()))
    }
}

impl<T: Scalar> SpectralBatch<T> {
    pub fn cast<U: Scalar>(&self) -> SpectralBatch<U> {
        SpectralBatch {
            ri: self.ri.cast(),
            mag: self.mag.cast(),
            valid_frames: self.valid_frames.clone(),
            config: self.config,
        }
    }

    pub fn ri(&self) -> &Tensor<T> {
        &self.ri
    }

    pub fn mag(&self) -> &Tensor<T> {
        &self.mag
    }

    pub fn len(&self) -> usize {
        self.ri.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.ri.shape()[2]
    }

    pub fn bins(&self) -> usize {
        self.ri.shape()[3]
    }

    pub fn valid_frames(&self) -> &[usize] {
        &self.valid_frames
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Validity per `(item, frame)`, indexed `item * frames + frame`.
    pub fn frame_mask(&self) -> Vec<bool> {
        let t = self.frames();
        self.valid_frames.iter().flat_map(|&v| (0..t).map(move |i| i < v)).collect()
    }

    fn same_layout(&self, other: &SpectralBatch<T>) -> Result<()> {
        if self.ri.shape() != other.ri.shape() {
            return Err(Error::Dimension(format!(
                "spectral batches {:?} and {:?} differ",
                self.ri.shape(),
                other.ri.shape()
            )));
        }
        Ok(())
    }
}

/// Outputs of one forward pass, in `f32`.
///
/// `mag` is `[B, 1, T, F]` and `ri` is `[B, 2, T, F]` with the real plane
/// first. Without the complex branch `ri` holds the noisy spectrum, so the
/// derived phase falls back to the noisy phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    mag: Tensor<f32>,
    ri: Tensor<f32>,
    valid_frames: Vec<usize>,
    config: StftConfig,
    phase_estimated: bool,
}

impl Estimates {
    /// Uses a spectral batch unchanged as an estimate, e.g. the unprocessed
    /// mixture as a baseline.
    pub fn passthrough(batch: &SpectralBatch<f32>) -> Self {
        Estimates {
            mag: batch.mag.clone(),
            ri: batch.ri.clone(),
            valid_frames: batch.valid_frames.clone(),
            config: batch.config,
            phase_estimated: true,
        }
    }

    pub fn mag_tensor(&self) -> &Tensor<f32> {
        &self.mag
    }

    pub fn ri_tensor(&self) -> &Tensor<f32> {
        &self.ri
    }

    pub fn len(&self) -> usize {
        self.mag.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether `ri` comes from the complex branch.
    pub fn phase_estimated(&self) -> bool {
        self.phase_estimated
    }

    fn plane(&self, t: &Tensor<f32>, item: usize, ch: usize) -> Vec<f32> {
        let [_, c, frames, bins] = t.dims4().expect("estimates are 4-D");
        let start = (item * c + ch) * frames * bins;
        t.data()[start..start + self.valid_frames[item] * bins].to_vec()
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.len() {
            return Err(Error::Dimension(format!("item {item} of a batch of {}", self.len())));
        }
        Ok(())
    }

    /// Estimated magnitude of one item over its valid frames.
    pub fn magnitude(&self, item: usize) -> Result<Magnitude> {
        self.check_item(item)?;
        Magnitude::new(self.valid_frames[item], self.config.bins(), self.plane(&self.mag, item, 0))
    }

    /// Complex estimate of one item over its valid frames.
    pub fn spectrum(&self, item: usize) -> Result<Spectrogram> {
        self.check_item(item)?;
        Spectrogram::new(
            self.valid_frames[item],
            self.plane(&self.ri, item, 0),
            self.plane(&self.ri, item, 1),
            self.config,
        )
    }

    pub fn phase(&self, item: usize) -> Result<UnitPhase> {
        Ok(mag_phase(&self.spectrum(item)?).1)
    }

    /// Spectrum built from the estimated magnitude and estimated phase.
    pub fn combined(&self, item: usize) -> Result<Spectrogram> {
        polar_combine(&self.magnitude(item)?, &self.phase(item)?, &self.config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub mask_padding: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5, mask_padding: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mag: f64,
    pub ri: f64,
}

/// Combined loss weight on the magnitude term. Without a complex branch
/// the real/imaginary term has nothing to train and only the magnitude
/// term remains.
fn effective_alpha(cfg: &LossConfig, phase_estimated: bool) -> f64 {
    if phase_estimated { cfg.alpha } else { 1.0 }
}

fn loss_mask(valid_frames: &[usize], frames: usize, cfg: &LossConfig) -> Result<(Vec<bool>, usize)> {
    let mask: Vec<bool> = valid_frames
        .iter()
        .flat_map(|&v| (0..frames).map(move |t| !cfg.mask_padding || t < v))
        .collect();
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((mask, n))
}

/// Mean absolute errors over valid bins, computed directly on estimates.
pub fn compute_loss(est: &Estimates, clean: &SpectralBatch<f32>, cfg: &LossConfig) -> Result<LossValues> {
    cfg.validate()?;
    if est.ri.shape() != clean.ri.shape() {
        return Err(Error::Dimension(format!(
            "estimates {:?} vs references {:?}",
            est.ri.shape(),
            clean.ri.shape()
        )));
    }
    let [b, _, t, f] = est.ri.dims4()?;
    let (mask, n) = loss_mask(&clean.valid_frames, t, cfg)?;
    let (mut lm, mut lri) = (0.0f64, 0.0f64);
    for bi in 0..b {
        for ti in (0..t).filter(|&ti| mask[bi * t + ti]) {
            for fi in 0..f {
                let k = (bi * t + ti) * f + fi;
                lm += (est.mag.data()[k] as f64 - clean.mag.data()[k] as f64).abs();
                for ch in 0..2 {
                    let k = ((bi * 2 + ch) * t + ti) * f + fi;
                    lri += (est.ri.data()[k] as f64 - clean.ri.data()[k] as f64).abs();
                }
            }
        }
    }
    let norm = (n * f) as f64;
    let (mag, ri) = (lm / norm, lri / norm);
    let a = effective_alpha(cfg, est.phase_estimated);
    Ok(LossValues { total: a * mag + (1.0 - a) * ri, mag, ri })
}

#[derive(Clone, Debug)]
struct Branch {
    enc: Encoder,
    tcm: Stcm,
    dec: Decoder,
    latent_freq: usize,
}

/// Graph handles of one forward pass.
pub struct GraphOutputs {
    pub mag: Var,
    pub ri: Option<Var>,
}

impl Branch {
    fn build<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        cfg: &ModelConfig,
        out_channels: usize,
        compensated: bool,
        residual: bool,
    ) -> Result<Self> {
        let stack = cfg.stack(2);
        let latent_freq = *stack.freq_chain(cfg.stft.bins())?.last().unwrap();
        Ok(Branch {
            enc: pb.scope("enc", |pb| Encoder::build(pb, &stack, compensated))?,
            tcm: pb.scope("tcm", |pb| Stcm::build(pb, cfg.channels * latent_freq, cfg.stcm_hidden, cfg.stcm_groups))?,
            dec: pb.scope("dec", |pb| Decoder::build(pb, &stack, out_channels, residual))?,
            latent_freq,
        })
    }

    /// Encoder, bottleneck on the frequency-folded latent, decoder.
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, com: Option<&[Var]>) -> Result<(Var, Vec<Var>)> {
        let e = self.enc.forward(cx, x, com)?;
        let folded = cx.graph.fold_freq(e.latent)?;
        let h = self.tcm.forward(cx, folded)?;
        let h = cx.graph.unfold_freq(h, self.latent_freq)?;
        let y = self.dec.forward(cx, h, &e.taps)?;
        Ok((y, e.taps))
    }
}

#[derive(Clone, Debug)]
pub struct TwoBranchModel<T: Scalar = f32> {
    config: ModelConfig,
    mag: Branch,
    cplx: Option<Branch>,
    params: ParamStore<T>,
}

impl<T: Scalar> TwoBranchModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, config.seed);
        let mag = pb.scope("mag", |pb| Branch::build(pb, &config, 1, false, false))?;
        let cplx = if config.no_phase {
            None
        } else {
            Some(pb.scope("cplx", |pb| Branch::build(pb, &config, 2, !config.no_compensation, true))?)
        };
        Ok(TwoBranchModel { config, mag, cplx, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count, optimizer state excluded.
    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> TwoBranchModel<U> {
        TwoBranchModel {
            config: self.config,
            mag: self.mag.clone(),
            cplx: self.cplx.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, input: &SpectralBatch<T>) -> Result<()> {
        if input.config != self.config.stft {
            return Err(Error::Config("input STFT settings differ from the model's".into()));
        }
        if input.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Builds the forward pass on `cx.graph`. Parameters are read through
    /// `cx.params`, which must bind this model's store.
    pub fn forward_graph(&self, cx: &mut Ctx<T>, input: &SpectralBatch<T>) -> Result<GraphOutputs> {
        self.check_input(input)?;
        let x = cx.graph.constant(input.ri.clone());
        let (head, taps) = self.mag.forward(cx, x, None)?;
        let mask = cx.graph.softplus(head);
        let mag = cx.graph.mul_const(mask, input.mag.clone())?;
        cx.graph.check_finite(mag, "mag/head")?;
        let ri = match &self.cplx {
            Some(branch) => {
                let com = (!self.config.no_compensation).then_some(taps.as_slice());
                let (delta, _) = branch.forward(cx, x, com)?;
                let ri = cx.graph.add(x, delta)?;
                cx.graph.check_finite(ri, "cplx/head")?;
                Some(ri)
            }
            None => None,
        };
        Ok(GraphOutputs { mag, ri })
    }

    /// Loss node on top of [`forward_graph`](Self::forward_graph) outputs,
    /// plus the values of its two terms.
    pub fn loss_graph(
        &self,
        graph: &mut Graph<T>,
        out: &GraphOutputs,
        clean: &SpectralBatch<T>,
        cfg: &LossConfig,
    ) -> Result<(Var, LossValues)> {
        cfg.validate()?;
        let [_, _, t, f] = clean.ri.dims4()?;
        let (mask, n) = loss_mask(&clean.valid_frames, t, cfg)?;
        let norm = (n * f) as f64;
        let lm = graph.masked_l1(out.mag, clean.mag.clone(), mask.clone(), norm)?;
        let mag = graph.value(lm).data()[0].as_f64();
        let (total, ri) = match out.ri {
            Some(ri_var) => {
                let lri = graph.masked_l1(ri_var, clean.ri.clone(), mask, norm)?;
                let ri = graph.value(lri).data()[0].as_f64();
                (graph.lin_comb(&[(lm, cfg.alpha), (lri, 1.0 - cfg.alpha)])?, ri)
            }
            None => (lm, 0.0),
        };
        let total_v = graph.value(total).data()[0].as_f64();
        if !total_v.is_finite() {
            return Err(Error::Numeric(format!("loss is {total_v}")));
        }
        Ok((total, LossValues { total: total_v, mag, ri }))
    }

    pub fn forward(&self, input: &SpectralBatch<T>) -> Result<Estimates> {
        let mut graph = Graph::new();
        let bind = self.params.bind_frozen(&mut graph);
        let mut cx = Ctx::new(&mut graph, &bind, self.config.norm);
        let out = self.forward_graph(&mut cx, input)?;
        let to_f32 = |t: &Tensor<T>| t.cast::<f32>();
        Ok(Estimates {
            mag: to_f32(graph.value(out.mag)),
            ri: match out.ri {
                Some(v) => to_f32(graph.value(v)),
                None => to_f32(&input.ri),
            },
            valid_frames: input.valid_frames.clone(),
            config: input.config,
            phase_estimated: out.ri.is_some(),
        })
    }

    /// Forward, backward and one Adam update on a batch.
    pub fn train_step(
        &mut self,
        noisy: &SpectralBatch<T>,
        clean: &SpectralBatch<T>,
        loss: &LossConfig,
        adam: &Adam,
        lr: f64,
    ) -> Result<LossValues> {
        noisy.same_layout(clean)?;
        let mut graph = Graph::new();
        let bind = self.params.bind(&mut graph);
        let mut cx = Ctx::new(&mut graph, &bind, self.config.norm);
        let out = self.forward_graph(&mut cx, noisy)?;
        let (total, values) = self.loss_graph(&mut graph, &out, clean, loss)?;
        let mut grads = graph.backward(total)?;
        drop(graph);
        self.params.collect_grads(&bind, &mut grads)?;
        adam.step(&mut self.params, lr)?;
        if let Some((_, name, _)) = self.params.iter().find(|(_, _, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {name} became non-finite")));
        }
        Ok(values)
    }

    /// Loss of the current parameters on a batch without updating them.
    pub fn evaluate_loss(&self, noisy: &SpectralBatch<T>, clean: &SpectralBatch<T>, loss: &LossConfig) -> Result<LossValues> {
        noisy.same_layout(clean)?;
        let mut graph = Graph::new();
        let bind = self.params.bind_frozen(&mut graph);
        let mut cx = Ctx::new(&mut graph, &bind, self.config.norm);
        let out = self.forward_graph(&mut cx, noisy)?;
        Ok(self.loss_graph(&mut graph, &out, clean, loss)?.1)
    }

    /// STFT, forward pass, magnitude/phase recombination and inverse STFT.
    pub fn enhance(&self, wav: &[f32], cfg: &StftConfig) -> Result<Vec<f32>> {
        let spec = stft(wav, cfg)?;
        let input = SpectralBatch::from_spectrograms(&[spec], None)?.cast::<T>();
        let est = self.forward(&input)?;
        istft(&est.combined(0)?)
    }

    /// Checkpoint with the model configuration as metadata; `extra` keys
    /// are stored alongside.
    pub fn to_checkpoint(&self, extra: Option<&KeyValues>) -> Checkpoint {
        let mut meta = self.config.to_meta();
        if let Some(e) = extra {
            meta.extend(e);
        }
        Checkpoint { meta: meta.to_text(), arrays: self.params.to_arrays() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, KeyValues)> {
        let meta = KeyValues::parse(&ckpt.meta)?;
        let mut model = Self::new(ModelConfig::from_meta(&meta)?)?;
        model.params.load_arrays(&ckpt.arrays)?;
        Ok((model, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint(None).save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}
