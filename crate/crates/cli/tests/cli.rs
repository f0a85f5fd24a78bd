//! Runs the `twinspec` binary end to end on small synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn twinspec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinspec"))
        .args(args)
        .current_dir(dir)
        .env("TWINSPEC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const MANIFEST: &str = "clean_path\tnoise_id\tsnr_db\tseed\tsplit
synth:speech:1:0.4\tsynth:white:2:0.6\t0\t3\ttrain
synth:speech:4:0.5\tsynth:pink:5:0.3,synth:white:6:0.3\t5\t7\ttrain
synth:speech:8:0.6\tsynth:white:9:1\t-5\t10\ttest
";

const SMALL: &str = "model.channels=4
model.stages=2
model.stcm_groups=1
model.stcm_hidden=8
train.epochs=2
train.batch_size=2
train.lr=0.001
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("manifest.tsv"), MANIFEST).unwrap();
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        twinspec(args, self.dir.path())
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["train", "--config", "small.cfg", "--manifest", "manifest.tsv", "--out", out];
        args.extend_from_slice(extra);
        ok(self.run(&args))
    }
}

/// Sample count from the data chunk header of a 32-bit float mono WAV.
fn wav_len(path: &Path) -> u32 {
    let bytes = fs::read(path).unwrap();
    let pos = bytes.windows(4).position(|w| w == b"data").expect("data chunk");
    u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) / 4
}

#[test]
fn mix_writes_pairs_at_the_requested_snr_and_is_repeatable() {
    let ws = Workspace::new();
    ok(ws.run(&["mix", "--manifest", "manifest.tsv", "--out", "a"]));
    ok(ws.run(&["mix", "--manifest", "manifest.tsv", "--out", "b"]));
    let index = fs::read_to_string(ws.path("a/mixtures.tsv")).unwrap();
    let rows: Vec<&str> = index.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let f: Vec<&str> = row.split('\t').collect();
        let (target, measured): (f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap());
        assert!((target - measured).abs() < 0.1, "{row}");
    }
    assert_eq!(wav_len(&ws.path("a/train_00001_noisy.wav")), 6400);
    assert_eq!(wav_len(&ws.path("a/test_00003_clean.wav")), 9600);
    for name in ["mixtures.tsv", "train_00002_noisy.wav", "test_00003_clean.wav"] {
        assert_eq!(fs::read(ws.path("a").join(name)).unwrap(), fs::read(ws.path("b").join(name)).unwrap(), "{name}");
    }
    ok(ws.run(&["mix", "--manifest", "manifest.tsv", "--split", "test", "--out", "c"]));
    assert!(!ws.path("c/train_00001_noisy.wav").exists());
    assert!(ws.path("c/test_00003_noisy.wav").exists());
}

#[test]
fn train_enhance_eval_and_phase_diff_pipeline() {
    let ws = Workspace::new();
    let log = ws.train("run", &["--seed", "3"]);
    assert!(log.contains("epoch 2/2"), "{log}");
    let loss = fs::read_to_string(ws.path("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2);
    assert!(ws.path("run/epoch_001.tbse").exists());
    assert!(ws.path("run/config.txt").exists());

    // A second identical run writes identical logs and checkpoints.
    ws.train("again", &["--seed", "3"]);
    assert_eq!(loss, fs::read_to_string(ws.path("again/loss.csv")).unwrap());
    assert_eq!(fs::read(ws.path("run/last.tbse")).unwrap(), fs::read(ws.path("again/last.tbse")).unwrap());

    ok(ws.run(&["mix", "--manifest", "manifest.tsv", "--split", "test", "--out", "mix"]));
    ok(ws.run(&["enhance", "--checkpoint", "run/last.tbse", "--out", "enh", "mix/test_00003_noisy.wav"]));
    assert_eq!(wav_len(&ws.path("enh/test_00003_noisy.wav")), 9600);
    ok(ws.run(&["enhance", "--checkpoint", "run/last.tbse", "--out", "enh2", "--manifest", "manifest.tsv", "--split", "test"]));
    assert_eq!(
        fs::read(ws.path("enh/test_00003_noisy.wav")).unwrap(),
        fs::read(ws.path("enh2/test_00003_enhanced.wav")).unwrap()
    );

    let summary = ok(ws.run(&["eval", "--checkpoint", "run/last.tbse", "--manifest", "manifest.tsv", "--out", "report.csv"]));
    assert!(summary.contains("1 utterances"), "{summary}");
    let report = fs::read_to_string(ws.path("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("utterance_id,snr_db,stoi_noisy,stoi_enhanced,sisdr_noisy,sisdr_enhanced"));
    assert!(lines.next().unwrap().starts_with("test_00003,-5,"));

    let args = ["phase-diff", "--checkpoint", "run/last.tbse", "--reference", "mix/test_00003_clean.wav"];
    ok(ws.run(&[&args[..], &["--estimate", "mix/test_00003_noisy.wav", "--out", "pd.csv", "--png", "pd.png"]].concat()));
    let csv = fs::read_to_string(ws.path("pd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 59);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 161);
}

#[test]
fn training_resumes_from_an_epoch_checkpoint() {
    let ws = Workspace::new();
    ws.train("full", &[]);
    ws.train("part", &["--max-steps", "1"]);
    ws.train("part", &["--checkpoint", "part/epoch_001.tbse"]);
    assert_eq!(fs::read_to_string(ws.path("full/loss.csv")).unwrap(), fs::read_to_string(ws.path("part/loss.csv")).unwrap());
    assert_eq!(fs::read(ws.path("full/last.tbse")).unwrap(), fs::read(ws.path("part/last.tbse")).unwrap());
}

#[test]
fn phase_diff_of_a_signal_with_itself_is_all_ones() {
    let ws = Workspace::new();
    ok(ws.run(&["mix", "--manifest", "manifest.tsv", "--split", "test", "--out", "mix"]));
    let clean = "mix/test_00003_clean.wav";
    ok(ws.run(&["phase-diff", "--reference", clean, "--estimate", clean, "--out", "same.csv", "--png", "same.png"]));
    let csv = fs::read_to_string(ws.path("same.csv")).unwrap();
    for v in csv.lines().flat_map(|l| l.split(',')) {
        let v: f64 = v.parse().unwrap();
        assert!((v - 1.0).abs() <= 1e-6, "{v}");
    }
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(ws.path("same.png")).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (59, 161));
    assert!(buf[..info.buffer_size()].iter().all(|&p| p == 255));
}

/// Parameter count of the `row`-th data row of `params` output.
fn count_of(out: &str, row: usize) -> usize {
    let f: Vec<&str> = out.lines().nth(row).unwrap().split_whitespace().collect();
    f[f.len() - 2].parse().unwrap()
}

#[test]
fn params_lists_the_configured_model_and_its_variants() {
    let ws = Workspace::new();
    let out = ok(ws.run(&["params"]));
    assert_eq!(out.lines().count(), 5);
    let (default, no_phase, no_comp, no_exp) = (count_of(&out, 1), count_of(&out, 2), count_of(&out, 3), count_of(&out, 4));
    assert!(no_phase < no_comp && no_comp < default && default < no_exp, "{out}");
    let small = ok(ws.run(&["params", "--config", "small.cfg", "--no-experts"]));
    assert_eq!(count_of(&small, 1), count_of(&small, 4));
    assert!(count_of(&small, 1) < default);
}

#[test]
fn exit_codes_distinguish_configuration_data_and_numeric_failures() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.cfg"), "model.width=3\n").unwrap();
    let out = ws.run(&["train", "--config", "bad.cfg", "--manifest", "manifest.tsv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ws.run(&["enhance", "--checkpoint", "missing.tbse", "--out", "x", "a.wav"]);
    assert_eq!(out.status.code(), Some(3));
    fs::write(ws.path("hot.cfg"), SMALL.replace("train.lr=0.001", "train.lr=1e30")).unwrap();
    let out = ws.run(&["train", "--config", "hot.cfg", "--manifest", "manifest.tsv", "--out", "hot"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_dir(ws.path("hot")).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("nonfinite_step")));
    let out = Command::new(env!("CARGO_BIN_EXE_twinspec"))
        .args(["params"])
        .env("TWINSPEC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = ws.run(&["train", "--manifest", "manifest.tsv", "--split", "nope", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
}
