//! Gradient and causality checks shared by the focused test targets and the
//! acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec_core::blocks::{Ceb, Ctx, Encoder, ParamBuilder, StackConfig, Stcm};
use twinspec_core::dsp::{stft, Spectrogram, StftConfig};
use twinspec_core::model::{LossConfig, ModelConfig, SpectralBatch, TwoBranchModel};
use twinspec_nn::{
    grad_check_report, Bindings, ConvSpec, GradCheckConfig, GradCheckReport, Graph, NnError, NormScope, ParamStore,
    Tensor, Var,
};

pub const TOL: f64 = 1e-5;
/// Normalizing over a handful of values on the first frames of these tiny
/// shapes is sharply curved, so the central differences are extrapolated
/// to cancel their second-order error at a step large enough to keep
/// roundoff small.
pub const FD_STEP: f64 = 3e-5;
/// Relative disagreement between the differences at `h` and `h/2` above
/// which a probe is taken to straddle a PReLU or L1 breakpoint, once
/// [`REFINEMENTS`] halvings of the step have not settled it.
pub const KINK: f64 = 1e-5;
pub const REFINEMENTS: usize = 4;

/// Checks the error bound and that kinks excluded only a small share of
/// the probes.
pub fn check_report(r: &GradCheckReport) -> Result<(), String> {
    if !(r.worst < TOL) {
        return Err(format!("worst relative error {:e}", r.worst));
    }
    if r.skipped * 20 > r.compared {
        return Err(format!("{} of {} probes straddled a kink", r.skipped, r.compared + r.skipped));
    }
    Ok(())
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, range: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::from_fn(&shape, |_| rng.gen_range(-range..range));
    }
}

fn nn_err(e: twinspec_core::Error) -> NnError {
    NnError::State(e.to_string())
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> twinspec_nn::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(g.value(y).shape(), &mut rng);
    g.weighted_sum(y, w)
}

fn check_cfg(seed: u64, probes: usize) -> GradCheckConfig {
    GradCheckConfig {
        max_probes_per_input: probes,
        step: Some(FD_STEP),
        richardson: true,
        kink_guard: Some(KINK),
        refinements: REFINEMENTS,
        seed,
        ..Default::default()
    }
}

pub fn scope(utterance: bool) -> NormScope {
    if utterance {
        NormScope::Utterance
    } else {
        NormScope::Cumulative
    }
}

/// Gradient check of one CEB (or CCEB when `compensated`) with `2 * half`
/// channels on a `[2, C, t, f]` input.
pub fn ceb_case(half: usize, t: usize, f: usize, compensated: bool, norm: NormScope, seed: u64) -> GradCheckReport {
    let c = 2 * half;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = Ceb::build(&mut ParamBuilder::new(&mut store, seed), c, (2, 3), compensated).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let mut inputs = vec![random(&[2, c, t, f], &mut rng)];
    if compensated {
        inputs.push(random(&[2, c, t, f], &mut rng));
    }
    let lead = inputs.len();
    inputs.extend(store.iter().map(|(_, _, v)| v.clone()));
    grad_check_report(
        |g, v| {
            let bind = Bindings::from_vars(v[lead..].to_vec());
            let mut cx = Ctx::new(g, &bind, norm);
            let com = compensated.then(|| v[1]);
            let y = block.forward(&mut cx, v[0], com).map_err(nn_err)?;
            project(g, y, seed)
        },
        &inputs,
        &check_cfg(seed, 12),
    )
    .unwrap()
}

/// Gradient check of a one-group S-TCM on a `[1, channels, t, 1]` input.
pub fn stcm_case(channels: usize, hidden: usize, t: usize, norm: NormScope, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = Stcm::build(&mut ParamBuilder::new(&mut store, seed), channels, hidden, 1).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let mut inputs = vec![random(&[1, channels, t, 1], &mut rng)];
    inputs.extend(store.iter().map(|(_, _, v)| v.clone()));
    grad_check_report(
        |g, v| {
            let bind = Bindings::from_vars(v[1..].to_vec());
            let mut cx = Ctx::new(g, &bind, norm);
            let y = block.forward(&mut cx, v[0]).map_err(nn_err)?;
            project(g, y, seed)
        },
        &inputs,
        &check_cfg(seed, 12),
    )
    .unwrap()
}

/// Gradient checks of every graph primitive on random shapes drawn from
/// `seed`, named for reporting.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, c, c2, t, f) = (dim(1, 2), dim(1, 3), dim(1, 3), dim(1, 4), dim(3, 5));
    let (kt, sf, dt, causal) = (dim(1, 2), dim(1, 2), dim(1, 2), dim(0, 1) == 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let cfg = check_cfg(seed, 24);
    let mut cases = Vec::new();

    let mut spec = ConvSpec::new(c, c2, (kt, 3)).with_stride(1, sf).with_dilation(dt, 1);
    if causal {
        spec = spec.causal();
    }
    let inputs = [random(&[b, c, t, f], &mut rng), random(&spec.weight_shape(), &mut rng), random(&[c2], &mut rng)];
    let r = grad_check_report(|g, v| {
        let y = g.conv(v[0], v[1], Some(v[2]), &spec)?;
        project(g, y, seed)
    }, &inputs, &cfg);
    cases.push(("conv", r.unwrap()));

    let tspec = ConvSpec::new(c, c2, (kt, 3)).with_stride(1, 2).causal();
    let fs = f - 1;
    let fb = tspec.transposed_out_freq(fs);
    let inputs = [random(&[b, c, t, fs], &mut rng), random(&tspec.transposed_weight_shape(), &mut rng), random(&[c2], &mut rng)];
    let r = grad_check_report(|g, v| {
        let y = g.conv_transpose(v[0], v[1], Some(v[2]), &tspec, fb)?;
        project(g, y, seed)
    }, &inputs, &cfg);
    cases.push(("transposed conv", r.unwrap()));

    let shape = [b, c, t, f];
    let inputs = [random(&shape, &mut rng), random(&shape, &mut rng).map(|v| 3.0 * v)];
    let r = grad_check_report(|g, v| {
        let y = g.sigmoid_gate(v[0], v[1])?;
        project(g, y, seed)
    }, &inputs, &cfg);
    cases.push(("sigmoid gate", r.unwrap()));

    for (name, norm) in [("utterance norm", NormScope::Utterance), ("cumulative norm", NormScope::Cumulative)] {
        let inputs = [random(&shape, &mut rng), random(&[c], &mut rng), random(&[c], &mut rng)];
        let r = grad_check_report(|g, v| {
            let y = g.channel_norm(v[0], v[1], v[2], norm)?;
            project(g, y, seed)
        }, &inputs, &cfg);
        cases.push((name, r.unwrap()));
    }

    let inputs = [random(&shape, &mut rng), random(&[c], &mut rng)];
    let r = grad_check_report(|g, v| {
        let y = g.prelu(v[0], v[1])?;
        let y = g.softplus(y);
        let y = g.fold_freq(y)?;
        let y = g.unfold_freq(y, f)?;
        project(g, y, seed)
    }, &inputs, &cfg);
    cases.push(("prelu, softplus, fold, unfold", r.unwrap()));

    let inputs = [random(&shape, &mut rng), random(&shape, &mut rng)];
    let target = random(&shape, &mut rng);
    let factor = random(&shape, &mut rng);
    let mask: Vec<bool> = (0..b * t).map(|i| i % 3 != 1).collect();
    let r = grad_check_report(|g, v| {
        let m = g.mul_const(v[0], factor.clone())?;
        let s = g.add(m, v[1])?;
        let l1 = g.masked_l1(s, target.clone(), mask.clone(), 7.0)?;
        let l2 = g.sum(v[1])?;
        g.lin_comb(&[(l1, 0.3), (l2, 0.7)])
    }, &inputs, &cfg);
    cases.push(("mul_const, add, masked L1, sum, lin_comb", r.unwrap()));
    cases
}

/// The small model configuration of the loss gradient requirement: two
/// stages of eight channels, checked on four frames.
pub fn eight_channel(seed: u64) -> ModelConfig {
    ModelConfig { channels: 8, ..tiny(seed) }
}

pub const EIGHT_CHANNEL_SAMPLES: usize = 16 + 3 * 8;

pub fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        channels: 4,
        stages: 2,
        stcm_groups: 1,
        stcm_hidden: 3,
        seed,
        stft: StftConfig { win_len: 16, hop: 8, fft_size: 16, ..Default::default() },
        ..Default::default()
    }
}

/// Gradient check of the training loss of a whole model with respect to
/// every parameter, on a random `samples`-long utterance.
pub fn model_case(cfg: ModelConfig, samples: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TwoBranchModel::<f64>::new(cfg).unwrap();
    let mut store = model.params().clone();
    // Small values keep the softplus mask and the loss away from saturation.
    randomize(&mut store, &mut rng, 0.8);
    let mut wave = || -> Vec<f32> { (0..samples).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let (noisy, clean) = (wave(), wave());
    let spec = |w: &[f32]| SpectralBatch::from_spectrograms(&[stft(w, &cfg.stft).unwrap()], None).unwrap().cast::<f64>();
    let (noisy, clean) = (spec(&noisy), spec(&clean));
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, _, v)| v.clone()).collect();
    let loss = LossConfig::default();
    grad_check_report(
        |g, v| {
            let bind = Bindings::from_vars(v.to_vec());
            let mut cx = Ctx::new(g, &bind, cfg.norm);
            let out = model.forward_graph(&mut cx, &noisy).map_err(nn_err)?;
            Ok(model.loss_graph(g, &out, &clean, &loss).map_err(nn_err)?.0)
        },
        &inputs,
        &check_cfg(seed, 6),
    )
    .unwrap()
}

pub fn tiny_model_case(cfg: ModelConfig, seed: u64) -> GradCheckReport {
    model_case(cfg, 96, seed)
}

pub fn random_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64))
}

/// Replaces every parameter with random values so that no zero-initialized
/// weight hides a dependency.
pub fn randomize_f32(store: &mut ParamStore<f32>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.value(id).shape().to_vec();
        let mut v = random_f32(&shape, seed ^ name_hash(&name));
        let positive = name.ends_with("slope") || name.ends_with("gain");
        for x in v.data_mut() {
            *x = if positive { 0.5 + 0.5 * x.abs() } else { 0.5 * *x };
        }
        *store.value_mut(id) = v;
    }
}

/// Frames `[0, t)` of a `[B, C, T, F]` tensor, flattened.
pub fn prefix(x: &Tensor<f32>, t: usize) -> Vec<f32> {
    let [b, c, frames, f] = x.dims4().unwrap();
    let mut out = Vec::new();
    for bc in 0..b * c {
        out.extend_from_slice(&x.data()[bc * frames * f..bc * frames * f + t * f]);
    }
    out
}

pub fn perturb_frame(x: &Tensor<f32>, t: usize, seed: u64) -> Tensor<f32> {
    let [b, c, frames, f] = x.dims4().unwrap();
    let mut y = x.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bc in 0..b * c {
        for k in 0..f {
            y.data_mut()[(bc * frames + t) * f + k] += rng.gen_range(0.5..3.0);
        }
    }
    y
}

/// Runs `f` on `x` and on copies perturbed at each probe frame. Outputs
/// before the probed frame must be bit-identical, and the perturbation
/// must be visible somewhere, so a constant function cannot pass.
pub fn probe(x: &Tensor<f32>, frames: &[usize], mut f: impl FnMut(&Tensor<f32>) -> Tensor<f32>) -> Result<(), String> {
    let base = f(x);
    let total = base.dims4().unwrap()[2];
    for (i, &k) in frames.iter().enumerate() {
        let out = f(&perturb_frame(x, k, i as u64));
        if out.shape() != base.shape() {
            return Err(format!("output shape changed when perturbing frame {k}"));
        }
        if prefix(&out, k) != prefix(&base, k) {
            return Err(format!("frame {k} leaked into earlier outputs"));
        }
        if prefix(&out, total) == prefix(&base, total) {
            return Err(format!("perturbing frame {k} changed nothing"));
        }
    }
    Ok(())
}

pub fn conv_probe() -> Result<(), String> {
    let spec = ConvSpec::new(3, 4, (2, 3)).with_stride(1, 2).causal();
    let mut store = ParamStore::new();
    let conv = ParamBuilder::new(&mut store, 1).conv("conv", spec).unwrap();
    randomize_f32(&mut store, 2);
    let x = random_f32(&[2, 3, 9, 11], 3);
    probe(&x, &[0, 4, 8], |x| {
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let mut cx = Ctx::new(&mut g, &bind, NormScope::Cumulative);
        let v = cx.graph.constant(x.clone());
        let y = conv.forward(&mut cx, v, None).unwrap();
        g.value(y).clone()
    })
}

/// Two groups of dilations up to 32 reach back well over the 70 probed
/// frames.
pub fn stcm_probe() -> Result<(), String> {
    let mut store = ParamStore::new();
    let stcm = ParamBuilder::new(&mut store, 4).scope("stcm", |pb| Stcm::build(pb, 6, 4, 2)).unwrap();
    randomize_f32(&mut store, 5);
    let x = random_f32(&[1, 6, 70, 1], 6);
    probe(&x, &[1, 35, 69], |x| {
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let mut cx = Ctx::new(&mut g, &bind, NormScope::Cumulative);
        let v = cx.graph.constant(x.clone());
        let y = stcm.forward(&mut cx, v).unwrap();
        g.value(y).clone()
    })
}

/// Probes the latent of a compensated encoder fed by the taps of a plain
/// one, so both stacks and the tap path are covered.
pub fn encoder_probe() -> Result<(), String> {
    let cfg = StackConfig { in_channels: 2, channels: 4, stages: 3, kernel: (2, 3), experts: true };
    let mut store = ParamStore::new();
    let (mag, cplx) = {
        let mut pb = ParamBuilder::new(&mut store, 7);
        let mag = pb.scope("mag", |pb| Encoder::build(pb, &cfg, false)).unwrap();
        let cplx = pb.scope("cplx", |pb| Encoder::build(pb, &cfg, true)).unwrap();
        (mag, cplx)
    };
    randomize_f32(&mut store, 8);
    let x = random_f32(&[1, 2, 12, 33], 9);
    probe(&x, &[0, 5, 11], |x| {
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let mut cx = Ctx::new(&mut g, &bind, NormScope::Cumulative);
        let v = cx.graph.constant(x.clone());
        let m = mag.forward(&mut cx, v, None).unwrap();
        let c = cplx.forward(&mut cx, v, Some(&m.taps)).unwrap();
        g.value(c.latent).clone()
    })
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> TwoBranchModel<f32> {
    let mut model = TwoBranchModel::new(cfg).unwrap();
    randomize_f32(model.params_mut(), seed);
    model
}

pub fn spectral_input(cfg: &StftConfig, frames: usize, seed: u64) -> SpectralBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wav: Vec<f32> = (0..cfg.synthesis_len(frames)).map(|_| rng.gen_range(-0.3..0.3)).collect();
    SpectralBatch::from_spectrograms(&[stft(&wav, cfg).unwrap()], None).unwrap()
}

/// Magnitude and real/imaginary estimates for a `[1, 2, T, F]` input,
/// stacked into one `[1, 3, T, F]` tensor.
pub fn model_output(model: &TwoBranchModel<f32>, input: &Tensor<f32>) -> Tensor<f32> {
    let [_, _, t, f] = input.dims4().unwrap();
    let (re, im) = input.data().split_at(t * f);
    let spec = Spectrogram::new(t, re.to_vec(), im.to_vec(), model.config().stft).unwrap();
    let batch = SpectralBatch::from_spectrograms(&[spec], None).unwrap();
    let est = model.forward(&batch).unwrap();
    let mut data = est.mag_tensor().data().to_vec();
    data.extend_from_slice(est.ri_tensor().data());
    Tensor::from_vec(&[1, 3, t, f], data).unwrap()
}

pub fn model_probe(cfg: ModelConfig, frames: usize, probes: &[usize], seed: u64) -> Result<(), String> {
    let model = random_model(cfg, seed);
    let input = spectral_input(&cfg.stft, frames, seed + 1);
    probe(input.ri(), probes, |x| model_output(&model, x))
}

/// Perturbing input sample `p` may only change output samples from
/// `p + 1 - win_len` onwards, the start of the first frame containing it.
pub fn waveform_probe(cfg: ModelConfig, frames: usize, seed: u64) -> Result<(), String> {
    let model = random_model(cfg, seed);
    let st = cfg.stft;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let wav: Vec<f32> = (0..st.synthesis_len(frames)).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let base = model.enhance(&wav, &st).map_err(|e| e.to_string())?;
    for p in [st.win_len + 37, wav.len() / 2, wav.len() - 1] {
        let mut w = wav.clone();
        w[p] += 0.5;
        let out = model.enhance(&w, &st).map_err(|e| e.to_string())?;
        let safe = p + 1 - st.win_len;
        if out[..safe] != base[..safe] {
            return Err(format!("sample {p} leaked into earlier output"));
        }
        if out[safe..] == base[safe..] {
            return Err(format!("perturbing sample {p} changed nothing"));
        }
    }
    Ok(())
}
