mod common;

use common::tiny;
use m2clip::data::{check_disjoint, generate, HOLDOUT_CATALOGUE, TRAIN_CATALOGUE};
use m2clip::eval::{cmlm_accuracy, primary_path, supervised_scores, zero_shot_scores, Path, Scores};
use m2clip::gradcheck::perturb_trainable;
use m2clip::Model;

#[test]
fn untrained_vc_head_is_at_chance() {
    let mut cfg = tiny();
    cfg.data.per_class_val = 3;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let m = Model::new(&cfg).unwrap();
    let s = supervised_scores(&m, &ds.val, Path::Vc).unwrap();
    // All-zero logits pick class 0 for every clip of a balanced split.
    assert_eq!(s.top1(), 1.0 / cfg.data.train_classes as f64);
    assert_eq!(primary_path(&m), Path::Vc);
}

#[test]
fn top_k_is_monotone_in_k() {
    let cfg = tiny();
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut m = Model::new(&cfg).unwrap();
    perturb_trainable(&mut m, 0.2, 1);
    for path in [Path::Vc, Path::Cmc] {
        let s = supervised_scores(&m, &ds.val, path).unwrap();
        let acc: Vec<f64> = (1..=4).map(|k| s.top_k(k)).collect();
        assert!(acc.windows(2).all(|w| w[0] <= w[1]), "{acc:?}");
        assert_eq!(acc[3], 1.0);
    }
}

#[test]
fn single_holdout_class_is_trivially_correct() {
    let mut cfg = tiny();
    cfg.data.holdout_classes = 1;
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let m = Model::new(&cfg).unwrap();
    assert_eq!(zero_shot_scores(&m, &ds).unwrap().top1(), 1.0);
}

#[test]
fn overlapping_holdout_is_a_contract_error() {
    assert!(check_disjoint(&TRAIN_CATALOGUE[..3], &TRAIN_CATALOGUE[2..4]).is_err());
    assert!(check_disjoint(&TRAIN_CATALOGUE, &HOLDOUT_CATALOGUE).is_ok());
    let cfg = tiny();
    let mut ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    ds.holdout.classes[0] = ds.train.classes[0];
    let m = Model::new(&cfg).unwrap();
    assert!(zero_shot_scores(&m, &ds).is_err());
}

#[test]
fn permuting_labels_permutes_predictions() {
    let cfg = tiny();
    let mut ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let mut m = Model::new(&cfg).unwrap();
    perturb_trainable(&mut m, 0.2, 2);
    let before = zero_shot_scores(&m, &ds).unwrap();
    ds.holdout.classes.reverse();
    let n = ds.holdout.classes.len();
    for l in ds.holdout.labels.iter_mut() {
        *l = n - 1 - *l;
    }
    let after = zero_shot_scores(&m, &ds).unwrap();
    let mapped: Vec<usize> = before.predictions().iter().map(|p| n - 1 - p).collect();
    assert_eq!(after.predictions(), mapped);
    assert_eq!(after.top1(), before.top1());
}

#[test]
fn cmlm_accuracy_is_a_fraction() {
    let cfg = tiny();
    let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed).unwrap();
    let m = Model::new(&cfg).unwrap();
    let a = cmlm_accuracy(&m, &ds.val).unwrap();
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn accuracy_where_filters_labels() {
    let s = Scores {
        scores: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        labels: vec![0, 1, 1],
    };
    assert_eq!(s.accuracy_where(1, |l| l == 0), 1.0);
    assert_eq!(s.accuracy_where(1, |l| l == 1), 0.5);
    assert_eq!(s.accuracy_where(1, |l| l == 7), 0.0);
}
