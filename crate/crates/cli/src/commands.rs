use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use twinspec_core::data::{parse_manifest, ManifestEntry, RenderedMixture};
use twinspec_core::dsp::{mag_phase, read_wav, stft, write_wav, StftConfig, WavEncoding};
use twinspec_core::metrics::{phase_diff_map, si_sdr, snr_db, stoi, write_report, EvalRow};
use twinspec_core::model::{ModelConfig, SpectralBatch, TwoBranchModel};
use twinspec_core::train::{train_loop, Example, RunConfig, TrainOptions};

use crate::args::{
    AblationFlags, EnhanceArgs, EvalArgs, ManifestArgs, MixArgs, ParamsArgs, PhaseDiffArgs, TrainArgs,
};
use crate::image::write_phase_png;
use crate::ConfigProblem;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| ConfigProblem(format!("{}: {e}", p.display())).into()),
    }
}

fn apply_ablation(cfg: &mut ModelConfig, flags: AblationFlags) {
    cfg.no_phase |= flags.no_phase;
    cfg.no_experts |= flags.no_experts;
    cfg.no_compensation |= flags.no_compensation;
}

/// A manifest entry with its identifier.
struct Item {
    id: String,
    entry: ManifestEntry,
}

fn load_manifest(path: &Path, split: Option<&str>) -> Result<Vec<Item>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let items: Vec<Item> = parse_manifest(&text)
        .with_context(|| format!("parsing manifest {}", path.display()))?
        .into_iter()
        .enumerate()
        .map(|(i, entry)| Item { id: entry.id(i + 1), entry })
        .filter(|it| split.is_none_or(|s| it.entry.split == s))
        .collect();
    if items.is_empty() {
        match split {
            Some(s) => bail!("manifest {} has no entries in split '{s}'", path.display()),
            None => bail!("manifest {} has no entries", path.display()),
        }
    }
    Ok(items)
}

/// Renders every item in parallel; each rendering is a pure function of
/// its entry, so the result does not depend on scheduling.
fn render_all(items: &[Item], manifest: &Path, sample_rate: u32) -> Result<Vec<RenderedMixture>> {
    let base = manifest.parent();
    items
        .par_iter()
        .map(|it| {
            let spec = it.entry.to_spec(base).with_context(|| format!("entry {}", it.id))?;
            spec.render(sample_rate).with_context(|| format!("rendering {}", it.id))
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn mix(args: MixArgs) -> Result<()> {
    let ManifestArgs { manifest, split } = &args.manifest;
    let items = load_manifest(manifest, split.as_deref())?;
    let rendered = render_all(&items, manifest, args.sample_rate)?;
    create_dir(&args.out)?;
    let index_path = args.out.join("mixtures.tsv");
    let mut index = BufWriter::new(File::create(&index_path)?);
    writeln!(index, "id\tclean\tnoisy\tsnr_db\tmeasured_snr_db\tnoise_offset\tnoise_gain")?;
    for (it, r) in items.iter().zip(&rendered) {
        let clean = format!("{}_clean.wav", it.id);
        let noisy = format!("{}_noisy.wav", it.id);
        write_wav(args.out.join(&clean), &r.clean, args.sample_rate, WavEncoding::Float32)?;
        write_wav(args.out.join(&noisy), &r.mixture.mixture, args.sample_rate, WavEncoding::Float32)?;
        let measured = snr_db(&r.clean, &r.mixture.scaled_noise)?;
        writeln!(
            index,
            "{}\t{clean}\t{noisy}\t{}\t{measured:.4}\t{}\t{:.9}",
            it.id, it.entry.snr_db, r.mixture.offset, r.mixture.gain
        )?;
    }
    index.flush()?;
    println!("wrote {} mixtures to {}", items.len(), args.out.display());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    apply_ablation(&mut cfg.model, args.ablation);
    cfg.validate().map_err(|e| ConfigProblem(e.to_string()))?;

    let items = load_manifest(&args.manifest, Some(&args.split))?;
    let rendered = render_all(&items, &args.manifest, cfg.model.stft.sample_rate)?;
    let data: Vec<Example> = items
        .iter()
        .zip(rendered)
        .map(|(it, r)| Example { id: it.id.clone(), clean: r.clean, noisy: r.mixture.mixture })
        .collect();
    create_dir(&args.out)?;
    fs::write(args.out.join("config.txt"), cfg.to_kv().to_text())?;
    let opts = TrainOptions { out_dir: args.out.clone(), resume: args.checkpoint.clone() };
    let epochs = cfg.train.epochs;
    let report = train_loop(&cfg, &data, &opts, |s| {
        println!(
            "epoch {}/{epochs}  step {}  mean loss {:.6}  {:.1} s  {}",
            s.epoch + 1,
            s.step,
            s.mean_loss,
            s.seconds,
            s.checkpoint.display()
        );
    })?;
    println!("finished at step {}; last checkpoint {}", report.steps, report.last_checkpoint.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<TwoBranchModel<f32>> {
    TwoBranchModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Enhances a waveform and zero-pads the tail samples that no full frame
/// covers, so the output aligns with the input.
fn enhance_aligned(model: &TwoBranchModel<f32>, wav: &[f32]) -> Result<Vec<f32>> {
    let mut out = model.enhance(wav, &model.config().stft)?;
    out.resize(wav.len(), 0.0);
    Ok(out)
}

pub fn enhance(args: EnhanceArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let sr = model.config().stft.sample_rate;
    let jobs: Vec<(String, Vec<f32>)> = match &args.manifest {
        Some(manifest) => {
            if !args.inputs.is_empty() {
                return Err(ConfigProblem("give either input files or --manifest, not both".into()).into());
            }
            let items = load_manifest(manifest, args.split.as_deref())?;
            let rendered = render_all(&items, manifest, sr)?;
            items.iter().zip(rendered).map(|(it, r)| (format!("{}_enhanced.wav", it.id), r.mixture.mixture)).collect()
        }
        None => {
            if args.inputs.is_empty() {
                return Err(ConfigProblem("no input files given".into()).into());
            }
            args.inputs
                .iter()
                .map(|p| {
                    let name = p.file_name().context("input path has no file name")?.to_string_lossy().into_owned();
                    let wav = read_wav(p, sr).with_context(|| format!("reading {}", p.display()))?;
                    Ok((name, wav))
                })
                .collect::<Result<_>>()?
        }
    };
    create_dir(&args.out)?;
    for (name, wav) in &jobs {
        let out = enhance_aligned(&model, wav).with_context(|| format!("enhancing {name}"))?;
        let path = args.out.join(name);
        write_wav(&path, &out, sr, WavEncoding::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let sr = model.config().stft.sample_rate;
    let items = load_manifest(&args.manifest, Some(&args.split))?;
    let rendered = render_all(&items, &args.manifest, sr)?;
    let mut rows = Vec::with_capacity(items.len());
    for (it, r) in items.iter().zip(&rendered) {
        let noisy = &r.mixture.mixture;
        let enhanced = model.enhance(noisy, &model.config().stft).with_context(|| format!("enhancing {}", it.id))?;
        // Score on the samples the enhanced signal covers.
        let n = enhanced.len();
        let (clean, noisy) = (&r.clean[..n], &noisy[..n]);
        let score = || -> twinspec_core::Result<EvalRow> {
            Ok(EvalRow {
                utterance_id: it.id.clone(),
                snr_db: it.entry.snr_db,
                stoi_noisy: stoi(clean, noisy)?,
                stoi_enhanced: stoi(clean, &enhanced)?,
                sisdr_noisy: si_sdr(clean, noisy)?,
                sisdr_enhanced: si_sdr(clean, &enhanced)?,
            })
        };
        rows.push(score().with_context(|| format!("scoring {}", it.id))?);
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    write_report(&mut w, &rows)?;
    w.flush()?;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    println!(
        "{} utterances  STOI {:.4} -> {:.4}  SI-SDR {:.2} -> {:.2} dB",
        rows.len(),
        mean(|r| r.stoi_noisy),
        mean(|r| r.stoi_enhanced),
        mean(|r| r.sisdr_noisy),
        mean(|r| r.sisdr_enhanced)
    );
    Ok(())
}

pub fn phase_diff(args: PhaseDiffArgs) -> Result<()> {
    let model = args.checkpoint.as_deref().map(load_model).transpose()?;
    let stft_cfg: StftConfig = match &model {
        Some(m) => m.config().stft,
        None => load_config(args.config.as_deref())?.model.stft,
    };
    let read = |p: &PathBuf| read_wav(p, stft_cfg.sample_rate).with_context(|| format!("reading {}", p.display()));
    let (_, reference) = mag_phase(&stft(&read(&args.reference)?, &stft_cfg)?);
    let other = read(&args.estimate)?;
    let estimate = match &model {
        Some(m) => {
            let input = SpectralBatch::from_spectrograms(&[stft(&other, &stft_cfg)?], None)?;
            m.forward(&input)?.phase(0)?
        }
        None => mag_phase(&stft(&other, &stft_cfg)?).1,
    };
    let map = phase_diff_map(&reference, &estimate)?;
    let mut w = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    map.write_csv(&mut w)?;
    w.flush()?;
    if let Some(png) = &args.png {
        write_phase_png(&map, png)?;
    }
    let mean = map.values().iter().map(|&v| v as f64).sum::<f64>() / map.values().len() as f64;
    println!("{} frames x {} bins, mean cos(phase difference) {mean:.4}", map.frames(), map.bins());
    Ok(())
}

pub fn params(args: ParamsArgs) -> Result<()> {
    let mut base = load_config(args.config.as_deref())?.model;
    apply_ablation(&mut base, args.ablation);
    let variants = [
        ("configured", base),
        ("w/o phase", ModelConfig { no_phase: true, ..base }),
        ("w/o compensation", ModelConfig { no_compensation: true, ..base }),
        ("w/o experts", ModelConfig { no_experts: true, ..base }),
    ];
    println!("{:<18} {:>10} {:>9}", "variant", "params", "millions");
    for (name, cfg) in variants {
        let n = TwoBranchModel::<f32>::new(cfg).map_err(|e| ConfigProblem(e.to_string()))?.count_params();
        println!("{name:<18} {n:>10} {:>9.2}", n as f64 / 1e6);
    }
    Ok(())
}
