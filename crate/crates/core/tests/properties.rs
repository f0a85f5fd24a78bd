//! Randomized invariants of the signal front-end, mixing, batching, blocks,
//! loss and metrics.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec_core::blocks::{Ceb, Ctx, ParamBuilder, Stcm};
use twinspec_core::data::{make_batch, mix_at_snr, synth_noise, synth_speech, MixtureSpec, NoiseKind, Source};
use twinspec_core::dsp::{istft, mag_phase, stft, Spectrogram, StftConfig, WindowKind};
use twinspec_core::metrics::{phase_diff_map, si_sdr, snr_db, stoi};
use twinspec_core::model::{compute_loss, Estimates, LossConfig, ModelConfig, SpectralBatch, TwoBranchModel};
use twinspec_nn::{Graph, NormScope, ParamStore, Tensor};

fn noise(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn stft_config() -> impl Strategy<Value = StftConfig> {
    (3u32..7, 0usize..2, 0usize..2, prop::sample::select(vec![WindowKind::Hamming, WindowKind::Hann, WindowKind::Rectangular])).prop_map(
        |(log_win, hop_div, pad, window)| {
            let win_len = 1usize << log_win;
            StftConfig {
                win_len,
                hop: win_len / (2 << hop_div),
                fft_size: win_len << pad,
                window,
                ..Default::default()
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_round_trip_reconstructs_interior(cfg in stft_config(), extra in 0usize..200, seed: u64) {
        let x = noise(2 * cfg.win_len + extra, seed);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        prop_assert_eq!(y.len(), cfg.synthesis_len(cfg.num_frames(x.len()).unwrap()));
        let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        for n in cfg.win_len..y.len() - cfg.win_len {
            prop_assert!(((y[n] - x[n]) as f64).abs() <= 1e-6 * peak, "sample {}", n);
        }
    }

    #[test]
    fn bin_count_and_unit_phase(cfg in stft_config(), extra in 0usize..100, seed: u64) {
        let x = noise(cfg.win_len + extra, seed);
        let spec = stft(&x, &cfg).unwrap();
        prop_assert_eq!(spec.bins(), cfg.fft_size / 2 + 1);
        let (_, phase) = mag_phase(&spec);
        prop_assert!(phase.max_norm_error() <= 1e-6);
    }

    #[test]
    fn parseval_ratio_is_constant_across_frames(cfg in stft_config(), frames in 2usize..8, seed: u64) {
        let x = noise(cfg.win_len + (frames - 1) * cfg.hop, seed);
        let spec = stft(&x, &cfg).unwrap();
        let w = cfg.window.coefficients(cfg.win_len);
        let (n, bins) = (cfg.fft_size, spec.bins());
        let mut ratios = Vec::new();
        for t in 0..spec.frames() {
            let frame = &x[t * cfg.hop..t * cfg.hop + cfg.win_len];
            let time: f64 = frame.iter().zip(&w).map(|(&v, &wk)| (v as f64 * wk).powi(2)).sum();
            let freq: f64 = (0..bins)
                .map(|k| {
                    let i = t * bins + k;
                    let p = (spec.real()[i] as f64).powi(2) + (spec.imag()[i] as f64).powi(2);
                    if k == 0 || k == bins - 1 { p } else { 2.0 * p }
                })
                .sum();
            ratios.push(freq / time);
        }
        for r in &ratios {
            prop_assert!((r / ratios[0] - 1.0).abs() < 1e-6, "{:?}", ratios);
            prop_assert!((r / n as f64 - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mixing_hits_the_target_snr(snr in -10.0f64..20.0, len in 4000usize..12000, seed: u64) {
        let clean = synth_speech(seed, len, 16000);
        prop_assume!(clean.iter().any(|&v| v != 0.0));
        let track = synth_noise(NoiseKind::Pink, seed ^ 1, len + 3000);
        let m = mix_at_snr(&clean, &track, snr, seed ^ 2).unwrap();
        prop_assert!((snr_db(&clean, &m.scaled_noise).unwrap() - snr).abs() < 0.1);
        for ((c, n), y) in clean.iter().zip(&m.scaled_noise).zip(&m.mixture) {
            prop_assert_eq!(c + n, *y);
        }
    }

    #[test]
    fn mixture_specs_render_deterministically(seed: u64, snr in -5.0f64..10.0) {
        let spec = MixtureSpec {
            clean: Source::Speech { seed, seconds: 0.5 },
            noise: vec![Source::Noise { kind: NoiseKind::White, seed: seed ^ 7, seconds: 0.8 }],
            snr_db: snr,
            seed: seed ^ 9,
        };
        match (spec.render(16000), spec.render(16000)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "rendering is not deterministic"),
        }
    }

    #[test]
    fn valid_frames_match_unpadded_frame_counts(lens in prop::collection::vec(320usize..3000, 1..5)) {
        let cfg = StftConfig::default();
        let waves: Vec<Vec<f32>> = lens.iter().enumerate().map(|(i, &l)| noise(l, i as u64)).collect();
        let refs: Vec<&[f32]> = waves.iter().map(|w| w.as_slice()).collect();
        let batch = make_batch(&refs, &cfg).unwrap();
        for (w, &v) in waves.iter().zip(batch.valid_frames()) {
            prop_assert_eq!(stft(w, &cfg).unwrap().frames(), v);
        }
        prop_assert_eq!(batch.frames(), *batch.valid_frames().iter().max().unwrap());
        let mask = batch.frame_mask();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), batch.valid_frames().iter().sum::<usize>());
    }

    #[test]
    fn blocks_preserve_shapes(half in 1usize..5, t in 1usize..9, f in 1usize..12, hidden in 1usize..6,
                              compensated: bool, utterance: bool, seed: u64) {
        let c = 2 * half;
        let norm = if utterance { NormScope::Utterance } else { NormScope::Cumulative };
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let ceb = pb.scope("ceb", |pb| Ceb::build(pb, c, (2, 3), compensated)).unwrap();
        let stcm = pb.scope("stcm", |pb| Stcm::build(pb, c * f, hidden, 1)).unwrap();
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let mut cx = Ctx::new(&mut g, &bind, norm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = cx.graph.constant(Tensor::from_fn(&[2, c, t, f], |_| rng.gen_range(-1.0..1.0)));
        let com = compensated.then(|| x);
        let y = ceb.forward(&mut cx, x, com).unwrap();
        let folded = cx.graph.fold_freq(y).unwrap();
        let z = stcm.forward(&mut cx, folded).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[2, c, t, f]);
        prop_assert_eq!(g.value(z).shape(), &[2, c * f, t, 1]);
    }

    #[test]
    fn loss_is_zero_only_at_the_target_and_affine_in_alpha(frames in 1usize..5, seed: u64, exact: bool) {
        let cfg = StftConfig { win_len: 32, hop: 16, fft_size: 32, ..Default::default() };
        let len = cfg.win_len + (frames - 1) * cfg.hop;
        let clean = SpectralBatch::from_spectrograms(&[stft(&noise(len, seed), &cfg).unwrap()], None).unwrap();
        let est = if exact { clean.clone() } else {
            SpectralBatch::from_spectrograms(&[stft(&noise(len, seed ^ 3), &cfg).unwrap()], None).unwrap()
        };
        let estimates = Estimates::passthrough(&est);
        let at = |alpha: f64| compute_loss(&estimates, &clean, &LossConfig { alpha, mask_padding: true }).unwrap();
        let (l0, lh, l1) = (at(0.0), at(0.5), at(1.0));
        if exact {
            prop_assert_eq!(lh.total, 0.0);
        } else {
            prop_assert!(lh.total > 0.0);
        }
        prop_assert!((l0.total - l0.ri).abs() < 1e-12);
        prop_assert!((l1.total - l1.mag).abs() < 1e-12);
        prop_assert!((lh.total - 0.5 * (l0.total + l1.total)).abs() < 1e-12);
    }

    #[test]
    fn phase_diff_values_stay_in_range(seed: u64, frames in 1usize..6) {
        let cfg = StftConfig { win_len: 32, hop: 16, fft_size: 32, ..Default::default() };
        let len = cfg.win_len + (frames - 1) * cfg.hop;
        let a = mag_phase(&stft(&noise(len, seed), &cfg).unwrap()).1;
        let b = mag_phase(&stft(&noise(len, seed ^ 5), &cfg).unwrap()).1;
        let m = phase_diff_map(&a, &b).unwrap();
        prop_assert!(m.values().iter().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&(*v as f64))));
        let same = phase_diff_map(&a, &a).unwrap();
        prop_assert!(same.values().iter().all(|v| (*v - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn si_sdr_is_scale_invariant_and_falls_with_noise(scale in 0.01f32..100.0, seed: u64) {
        let reference = noise(2000, seed);
        let disturbance = noise(2000, seed ^ 11);
        let est: Vec<f32> = reference.iter().zip(&disturbance).map(|(r, d)| r + 0.3 * d).collect();
        let scaled: Vec<f32> = est.iter().map(|v| v * scale).collect();
        let base = si_sdr(&reference, &est).unwrap();
        prop_assert!((si_sdr(&reference, &scaled).unwrap() - base).abs() < 1e-3);
        // Noise orthogonal to the reference, at growing power.
        let rr: f64 = reference.iter().map(|&r| (r as f64).powi(2)).sum();
        let rd: f64 = reference.iter().zip(&disturbance).map(|(&r, &d)| r as f64 * d as f64).sum();
        let ortho: Vec<f64> = reference.iter().zip(&disturbance).map(|(&r, &d)| d as f64 - rd / rr * r as f64).collect();
        let mut last = f64::INFINITY;
        for k in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let e: Vec<f32> = reference.iter().zip(&ortho).map(|(&r, &o)| (r as f64 + k * o) as f32).collect();
            let v = si_sdr(&reference, &e).unwrap();
            prop_assert!(v < last);
            last = v;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn stoi_ignores_global_scaling(seed in 0u64..1000, ea in -6i32..7, eb in -6i32..7, a in 0.1f32..10.0) {
        let clean = synth_speech(seed, 16000, 16000);
        let track = synth_noise(NoiseKind::White, seed + 1, 16000);
        let noisy = mix_at_snr(&clean, &track, 0.0, seed).unwrap().mixture;
        let base = stoi(&clean, &noisy).unwrap();
        // Power-of-two factors scale f32 samples exactly.
        let ca: Vec<f32> = clean.iter().map(|v| v * 2f32.powi(ea)).collect();
        let nb: Vec<f32> = noisy.iter().map(|v| v * 2f32.powi(eb)).collect();
        prop_assert!((stoi(&ca, &nb).unwrap() - base).abs() < 1e-9);
        // Other factors perturb each sample by f32 rounding, about 6e-8 relative.
        let ca: Vec<f32> = clean.iter().map(|v| v * a).collect();
        prop_assert!((stoi(&ca, &noisy).unwrap() - base).abs() < 1e-5);
    }
}

#[test]
fn forward_output_shapes_hold_for_short_inputs() {
    let cfg = ModelConfig::small();
    let model = TwoBranchModel::<f32>::new(cfg).unwrap();
    for frames in 1..=8 {
        let x = noise(cfg.stft.win_len + (frames - 1) * cfg.stft.hop, frames as u64);
        let input = SpectralBatch::from_spectrograms(&[stft(&x, &cfg.stft).unwrap()], None).unwrap();
        let est = model.forward(&input).unwrap();
        assert_eq!(est.mag_tensor().shape(), &[1, 1, frames, 161]);
        assert_eq!(est.ri_tensor().shape(), &[1, 2, frames, 161]);
        let spec: Spectrogram = est.combined(0).unwrap();
        assert_eq!(spec.frames(), frames);
    }
}
