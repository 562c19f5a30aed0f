mod common;

use common::{snapshot, tiny};
use m2clip::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
use m2clip::data::generate;
use m2clip::gradcheck::perturb_trainable;
use m2clip::model::video::patch_batch;
use m2clip::{Error, Model};
use m2clip_autograd::Tape;

fn trained_like() -> Model {
    let mut m = Model::new(&tiny()).unwrap();
    perturb_trainable(&mut m, 0.1, 9);
    m
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let m = trained_like();
    save_checkpoint(&m, 42, &a).unwrap();
    let (loaded, step) = load_checkpoint(&a).unwrap();
    assert_eq!(step, 42);
    save_checkpoint(&loaded, step, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(snapshot(&loaded), snapshot(&m));
    assert_eq!(loaded.config, m.config);
}

#[test]
fn forward_is_bit_identical_after_round_trip() {
    let m = trained_like();
    let bytes = Checkpoint::from_model(&m, 0).to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
    let cfg = &m.config;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let clips: Vec<_> = ds.val.clips.iter().collect();
    let run = |model: &Model| {
        let mut tape = Tape::new();
        let p = tape.constant(patch_batch(&clips, cfg.model.patch_size).unwrap());
        let (_, v) = model.arch.video_embed(&mut tape, &model.params, p).unwrap();
        let logits = model.arch.decoder.vc.forward(&mut tape, &model.params, v).unwrap();
        let w = model.arch.text_embed(&mut tape, &model.params, &model.arch.train_prompts).unwrap();
        (tape.value(logits).to_vec(), tape.value(w).to_vec())
    };
    let (a, b) = (run(&m), run(&loaded));
    assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn format_error(bytes: &[u8]) -> String {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Format(msg)) => msg,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn corrupt_files_are_format_errors() {
    let bytes = Checkpoint::from_model(&trained_like(), 3).to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(format_error(&bad).contains("magic"));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(format_error(&bad).contains("version"));

    for cut in [0, 3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(format_error(&bytes[..cut]).contains("truncated"), "cut at {cut}");
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(format_error(&long).contains("trailing"));
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let m = trained_like();
    let ck = Checkpoint::from_model(&m, 0);
    let mut cfg = m.config.clone();
    cfg.adapter.bottleneck_ratio = 0.5;
    let mut other = Model::new(&cfg).unwrap();
    match ck.apply(&mut other) {
        Err(Error::Format(msg)) => assert!(msg.contains("video.layer1.ted.w_dn"), "{msg}"),
        r => panic!("expected a shape mismatch, got {r:?}"),
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path().join("none.ckpt")), Err(Error::Io(_))));
}
