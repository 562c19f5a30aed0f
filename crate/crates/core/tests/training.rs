mod common;

use common::{snapshot, tiny};
use m2clip::config::LayerSet;
use m2clip::data::generate;
use m2clip::params::count_parameters;
use m2clip::train::{epoch_batches, train, TrainOptions, Trainer, METRIC_COLUMNS};
use m2clip::{Error, Heads, Model, TedMode};
use m2clip_autograd::Tape;

#[test]
fn frozen_parameters_never_move() {
    let mut cfg = tiny();
    cfg.train.epochs = 4;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut model = Model::new(&cfg).unwrap();
    let before = snapshot(&model);
    let report = train(&mut model, &ds, TrainOptions::default()).unwrap();
    assert_eq!(report.step_losses.len(), 8);
    let after = snapshot(&model);
    let mut moved = 0;
    for ((name, trainable, a), (_, _, b)) in before.iter().zip(&after) {
        if *trainable {
            moved += usize::from(a != b);
        } else {
            assert_eq!(a, b, "frozen {name} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn trainable_count_matches_closed_form() {
    let heads = [
        Heads { contrastive: true, cmc: false, cmlm: false, vc: false },
        Heads { contrastive: false, cmc: true, cmlm: true, vc: false },
        Heads { contrastive: false, cmc: false, cmlm: false, vc: true },
        Heads { contrastive: true, cmc: true, cmlm: true, vc: true },
    ];
    for h in heads {
        for (vl, tl) in [(LayerSet::All, LayerSet::Last(1)), (LayerSet::Front, LayerSet::None), (LayerSet::None, LayerSet::All)] {
            let mut cfg = tiny();
            cfg.heads = h;
            cfg.placement.video_layers = vl.clone();
            cfg.placement.text_layers = tl.clone();
            let model = Model::new(&cfg).unwrap();
            let counts = count_parameters(&model.params);
            assert_eq!(counts.trainable, Model::expected_trainable(&cfg).unwrap(), "{h:?} {vl} {tl}");
            assert_eq!(counts.trainable, model.params.counts().0);
        }
    }
}

#[test]
fn bare_model_trains_only_temperature() {
    let mut cfg = tiny();
    cfg.placement.video_layers = LayerSet::None;
    cfg.placement.text_layers = LayerSet::None;
    cfg.heads = Heads { contrastive: true, cmc: false, cmlm: false, vc: false };
    let counts = count_parameters(&Model::new(&cfg).unwrap().params);
    assert_eq!(counts.trainable, 1);
    cfg.decoder.train_temperature = false;
    let frozen_tau = count_parameters(&Model::new(&cfg).unwrap().params);
    assert_eq!(frozen_tau.trainable, 0);
    assert_eq!(frozen_tau.total(), counts.total());
}

#[test]
fn text_adapter_module_count() {
    let mut cfg = tiny();
    cfg.model.text_width = 48;
    cfg.model.text_heads = 4;
    let counts = count_parameters(&Model::new(&cfg).unwrap().params);
    assert_eq!(counts.module("text.layer2.adapter").unwrap().trainable, 1212);
}

#[test]
fn zero_epochs_and_zero_lr_leave_the_model_unchanged() {
    let cfg = tiny();
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let init = snapshot(&Model::new(&cfg).unwrap());

    let mut c0 = cfg.clone();
    c0.train.epochs = 0;
    let mut m = Model::new(&c0).unwrap();
    assert!(train(&mut m, &ds, TrainOptions::default()).unwrap().records.is_empty());
    assert_eq!(snapshot(&m), init);

    let mut c1 = cfg.clone();
    c1.train.learning_rate = 0.0;
    let mut m = Model::new(&c1).unwrap();
    train(&mut m, &ds, TrainOptions::default()).unwrap();
    assert_eq!(snapshot(&m), init);
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny();
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let run = || {
        let mut m = Model::new(&cfg).unwrap();
        let r = train(&mut m, &ds, TrainOptions::default()).unwrap();
        (r, snapshot(&m))
    };
    assert_eq!(run(), run());
}

#[test]
fn report_layout() {
    let mut cfg = tiny();
    cfg.heads.vc = false;
    cfg.train.epochs = 3;
    cfg.train.eval_every = 2;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut m = Model::new(&cfg).unwrap();
    let r = train(&mut m, &ds, TrainOptions::default()).unwrap();
    assert_eq!(r.records.iter().map(|x| x.epoch).collect::<Vec<_>>(), vec![2, 3]);
    let tsv = r.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0].split('\t').collect::<Vec<_>>(), METRIC_COLUMNS);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), METRIC_COLUMNS.len());
        assert_eq!(f[6], "-");
        assert_eq!(f[7], "-");
        let cmc: f64 = f[8].parse().unwrap();
        assert!((0.0..=1.0).contains(&cmc));
    }
}

#[test]
fn max_steps_stops_early() {
    let mut cfg = tiny();
    cfg.train.max_steps = 3;
    cfg.train.epochs = 5;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut m = Model::new(&cfg).unwrap();
    let r = train(&mut m, &ds, TrainOptions::default()).unwrap();
    assert_eq!(r.step_losses.len(), 3);
    assert_eq!(r.last().unwrap().step, 3);
}

#[test]
fn epoch_batches_cover_every_clip_once() {
    let b = epoch_batches(10, 4, 3, 1);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_ne!(epoch_batches(10, 4, 3, 1), epoch_batches(10, 4, 3, 2));
}

#[test]
fn non_finite_loss_aborts_with_head_name() {
    let cfg = tiny();
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut m = Model::new(&cfg).unwrap();
    let id = m.arch.decoder.vc.w;
    m.params.get_mut(id).tensor.data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(&m, &ds).unwrap();
    match t.step(&mut m, &ds, &[0, 1, 2, 3]) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("vc loss"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn adapters_are_identity_at_init() {
    let cfg = tiny();
    let mut bare_cfg = cfg.clone();
    bare_cfg.placement.video_layers = LayerSet::None;
    bare_cfg.placement.text_layers = LayerSet::None;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    for mode in TedMode::ALL {
        let mut c = cfg.clone();
        c.placement.ted_mode = mode;
        let (full, bare) = (Model::new(&c).unwrap(), Model::new(&bare_cfg).unwrap());
        let clips: Vec<_> = ds.train.clips.iter().collect();
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let p = tape.constant(m2clip::model::video::patch_batch(&clips, c.model.patch_size).unwrap());
            let (f, v) = m.arch.video_embed(&mut tape, &m.params, p).unwrap();
            let w = m.arch.text_embed(&mut tape, &m.params, &m.arch.train_prompts).unwrap();
            [tape.value(f).to_vec(), tape.value(v).to_vec(), tape.value(w).to_vec()]
        };
        let (a, b) = (run(&full), run(&bare));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()), "{mode:?}");
        }
    }
}

#[test]
fn default_loss_decreases_over_first_five_epochs() {
    let mut cfg = m2clip::Config::default();
    cfg.train.epochs = 5;
    cfg.train.eval_every = 1;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut model = Model::new(&cfg).unwrap();
    let quiet = TrainOptions {
        evaluate: false,
        zero_shot: false,
    };
    let report = train(&mut model, &ds, quiet).unwrap();
    let means: Vec<f64> = report.records.iter().map(|r| r.total).collect();
    assert_eq!(means.len(), 5);
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}
