use std::fs;
use std::path::Path;
use std::process::Command;

use nrtk::checkpoint::{load_har, load_tokenizer, save_har, save_tokenizer, MANIFEST, PAYLOAD};
use nrtk::config::DeskConfig;
use nrtk::corpus::{load_segments, write_segments};
use nrtk::error::CliError;
use nrtk::signal_io::{decode, encode, load_recording, parse_csv, save_recording, Format, MAGIC};
use nrtk_core::autodiff::Graph;
use nrtk_core::har::HarModel;
use nrtk_core::preprocess::{run_pipeline, PreprocessConfig};
use nrtk_core::rvq::Domain;
use nrtk_core::synth::{generate, SynthConfig};
use nrtk_core::tokenizer::Tokenizer;
use nrtk_core::{Error, ModelConfig, PatchGrid, Recording};
use proptest::prelude::*;

fn small_model() -> ModelConfig {
    ModelConfig { embed_dim: 16, encoder_layers: 1, heads: 2, ffn_dim: 32, codebook_size: 8, code_dim: 4, max_seq_len: 16, ..ModelConfig::default() }
}

fn nrtk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nrtk"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_round_trip_is_bit_exact(c in 1usize..5, t in 1usize..50, fs in 1.0..1000.0f64, seed in any::<u32>()) {
        let samples: Vec<f32> = (0..c * t).map(|i| f32::from_bits(((i as u32).wrapping_mul(2654435761) ^ seed) & 0x7f7f_ffff)).collect();
        let rec = Recording::unlabeled(c, fs, samples.clone()).unwrap();
        let back = decode(&encode(&rec)).unwrap();
        prop_assert_eq!(back.channels(), c);
        prop_assert_eq!(back.sample_rate_hz().to_bits(), fs.to_bits());
        let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.samples()), bits(&samples));
    }
}

#[test]
fn header_layout() {
    let rec = Recording::unlabeled(2, 250.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = encode(&rec);
    assert_eq!(&b[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(b[16..24].try_into().unwrap()), 250.0);
    assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), 1.0);
    assert_eq!(b.len(), 24 + 6 * 4);
}

#[test]
fn corrupt_headers_are_rejected() {
    let rec = Recording::unlabeled(1, 100.0, vec![0.5; 4]).unwrap();
    let good = encode(&rec);
    let mut magic = good.clone();
    magic[0] = b'X';
    let truncated = &good[..good.len() - 1];
    let mut rate = good.clone();
    rate[16..24].copy_from_slice(&(-1.0f64).to_le_bytes());
    for bad in [magic.as_slice(), truncated, &rate, &good[..10]] {
        assert!(matches!(decode(bad), Err(CliError::Core(Error::MalformedHeader(_)))));
    }
    let mut empty = good[..24].to_vec();
    empty[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode(&empty), Err(CliError::Core(Error::EmptyRecording { .. }))));
}

#[test]
fn csv_and_binary_imports_agree() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = vec![vec![0.25, -1.5, 3.0], vec![10.0, 0.0, -7.75]];
    let rec = Recording::from_rows(nrtk_core::signal::default_labels(2), 200.0, &rows).unwrap();
    let bin = dir.path().join("r.bin");
    save_recording(&rec, &bin).unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, "0.25,-1.5,3\n10,0,-7.75\n").unwrap();
    let a = load_recording(&bin, Format::from_path(&bin, 200.0)).unwrap();
    let b = load_recording(&csv, Format::from_path(&csv, 200.0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, rec);
    assert!(parse_csv("1,2\n3\n", 200.0).is_err());
    let r = parse_csv("1,2,3,4\n5,6,7,8", 200.0).unwrap();
    assert_eq!((r.channels(), r.len()), (2, 4));
    assert_eq!(r.channel(1), &[5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn segment_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let synth = generate(&SynthConfig { channels: 2, minutes: 0.5, ..SynthConfig::default() }).unwrap();
    let cfg = PreprocessConfig { window_s: 4.0, trim_s: 0.0, ..PreprocessConfig::default() };
    let out = run_pipeline(&synth.recording, &cfg).unwrap();
    let manifest = write_segments(dir.path(), "s.bin", &cfg, &out).unwrap();
    assert_eq!(manifest.kept, out.segments.len());
    let desk = DeskConfig { max_segments: 100, ..DeskConfig::default() };
    let back = load_segments(dir.path(), &desk, 200.0).unwrap();
    assert_eq!(back.len(), out.segments.len());
    for (a, b) in back.iter().zip(&out.segments) {
        assert_eq!(a.window_index, b.window_index);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}

fn grid(seed: u64) -> PatchGrid {
    let data = (0..2 * 2 * 200).map(|i| ((i as u64 * 7 + seed) as f64 * 0.013).sin() * 0.5).collect();
    PatchGrid::new(2, 2, 200, 200.0, data).unwrap()
}

#[test]
fn tokenizer_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::new(&small_model()).unwrap();
    save_tokenizer(dir.path(), &tok).unwrap();
    let back = load_tokenizer(dir.path()).unwrap();
    assert_eq!(back.cfg, tok.cfg);
    for i in 0..tok.params.len() {
        assert_eq!(back.params.name(i), tok.params.name(i));
        for (a, b) in back.params.tensor(i).data().iter().zip(tok.params.tensor(i).data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
    let g = grid(3);
    let (a, b) = (tok.tokenize(&g).unwrap(), back.tokenize(&g).unwrap());
    for t in 0..g.len() {
        for d in Domain::BOTH {
            assert_eq!(a.codes(t, d), b.codes(t, d));
        }
    }
    // saving the reloaded model reproduces the files byte for byte
    let again = tempfile::tempdir().unwrap();
    save_tokenizer(again.path(), &back).unwrap();
    for f in [MANIFEST, PAYLOAD] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn har_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = HarModel::new(&small_model()).unwrap();
    save_har(dir.path(), &model).unwrap();
    let back = load_har(dir.path()).unwrap();
    let g = grid(4);
    let run = |m: &HarModel| {
        let mut gr = Graph::inference(&m.params);
        let h = m.masked_hidden(&mut gr, &[&g], &[vec![1, 2]], &[1, 2]).unwrap();
        gr.value(h).data().to_vec()
    };
    for (a, b) in run(&model).iter().zip(run(&back)) {
        assert!((a - b).abs() < 1e-4);
    }
    assert!(load_tokenizer(dir.path()).is_err());
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_tokenizer(dir.path(), &Tokenizer::new(&small_model()).unwrap()).unwrap();
    let p = dir.path().join(PAYLOAD);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_tokenizer(dir.path()), Err(CliError::Core(Error::MalformedHeader(_)))));
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    assert_eq!(DeskConfig::load(Some(&path)).unwrap(), DeskConfig::default());
    assert_eq!(DeskConfig::parse(&DeskConfig::default().to_json()).unwrap(), DeskConfig::default());
}

#[test]
fn config_errors() {
    for text in ["{\"bogus\": 1}", "{\"max_segments\": 0}", "{\"model\": {\"heads\": 3}}", "not json"] {
        let err = DeskConfig::parse(text).unwrap_err();
        assert!(matches!(err, CliError::MalformedConfig(_)), "{text}: {err:?}");
        assert_eq!(err.exit_code(), 2);
    }
    assert!(matches!(DeskConfig::load(Some(Path::new("/nonexistent/desk.json"))), Err(CliError::MalformedConfig(_))));
    let cfg = DeskConfig::default().with_seed(11);
    assert_eq!([cfg.synth.seed, cfg.model.seed, cfg.tokenizer.seed, cfg.pretrain.seed], [11; 4]);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"bogus\": 1}").unwrap();
    let out = nrtk().args(["score", "--data", "x.bin", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MalformedConfig"));

    let out = nrtk().args(["score", "--data"]).arg(dir.path().join("missing.bin")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("IoFailure"));

    let garbage = dir.path().join("g.bin");
    fs::write(&garbage, b"not a recording").unwrap();
    let out = nrtk().args(["score", "--data"]).arg(&garbage).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MalformedHeader"));
}
