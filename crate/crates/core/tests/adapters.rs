use m2clip::config::{LayerSet, SequentialOrder, TedMode};
use m2clip::model::adapters::{bottleneck, TedAdapter, TextAdapter};
use m2clip::model::layers::Builder;
use m2clip::{Config, Model};
use m2clip_autograd::{ParamId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRID: (usize, usize) = (3, 2);
const T: usize = 4;
const D: usize = 8;
const R: usize = 3;

fn ted(store: &mut ParamStore) -> TedAdapter {
    let mut bld = Builder {
        store,
        seed: 5,
        std: 0.3,
    };
    TedAdapter::build(&mut bld, "ted", D, R, 3, 3).unwrap()
}

fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut ChaCha8Rng) {
    let p = store.get_mut(id);
    p.tensor = Tensor::randn(p.tensor.shape().to_vec(), 0.5, rng);
}

fn tokens(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn([2, T, 1 + GRID.0 * GRID.1, D], 1.0, rng)
}

#[test]
fn static_clip_gives_zero_difference() {
    let mut store = ParamStore::new();
    let a = ted(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    randomize(&mut store, a.w_up, &mut rng);
    let frame = Tensor::randn([GRID.0 * GRID.1, D], 1.0, &mut rng);
    let data: Vec<f64> = (0..T).flat_map(|_| frame.data().to_vec()).collect();
    let z = Tensor::new([T, GRID.0 * GRID.1, D], data).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let out = a.temporal_difference(&mut tape, &store, zv, GRID).unwrap();
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn first_frame_difference_is_zero() {
    let mut store = ParamStore::new();
    let a = ted(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    randomize(&mut store, a.w_up, &mut rng);
    let m = GRID.0 * GRID.1;
    let z = Tensor::randn([T, m, D], 1.0, &mut rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let out = a.temporal_difference(&mut tape, &store, zv, GRID).unwrap();
    let v = tape.value(out);
    assert!(v[..m * D].iter().all(|&x| x == 0.0));
    assert!(v[m * D..].iter().any(|&x| x != 0.0));
}

#[test]
fn difference_never_touches_class_token() {
    let mut store = ParamStore::new();
    let a = ted(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for id in a.ids() {
        randomize(&mut store, id, &mut rng);
    }
    let z = tokens(&mut rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = a
        .forward(&mut tape, &store, zv, TedMode::TdOnly, SequentialOrder::TeTd, GRID)
        .unwrap();
    let v = tape.value(out);
    let row = (1 + GRID.0 * GRID.1) * D;
    for frame in 0..2 * T {
        let o = frame * row;
        assert_eq!(&v[o..o + D], &z.data()[o..o + D]);
        assert_ne!(&v[o + D..o + row], &z.data()[o + D..o + row]);
    }
}

#[test]
fn parallel_is_sum_of_single_branches() {
    let mut store = ParamStore::new();
    let a = ted(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in a.ids() {
        randomize(&mut store, id, &mut rng);
    }
    let z = tokens(&mut rng);
    let run = |mode| {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = a.forward(&mut tape, &store, zv, mode, SequentialOrder::TeTd, GRID).unwrap();
        tape.value(out).to_vec()
    };
    let (par, te, td) = (run(TedMode::Parallel), run(TedMode::TeOnly), run(TedMode::TdOnly));
    for (i, x) in z.data().iter().enumerate() {
        let expect = (te[i] - x) + (td[i] - x) + x;
        assert!((par[i] - expect).abs() < 1e-12, "entry {i}");
    }
}

#[test]
fn sequential_order_matters() {
    let mut store = ParamStore::new();
    let a = ted(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for id in a.ids() {
        randomize(&mut store, id, &mut rng);
    }
    let z = tokens(&mut rng);
    let run = |order| {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = a.forward(&mut tape, &store, zv, TedMode::Sequential, order, GRID).unwrap();
        tape.value(out).to_vec()
    };
    assert_ne!(run(SequentialOrder::TeTd), run(SequentialOrder::TdTe));
}

#[test]
fn adapter_counts() {
    assert_eq!(TextAdapter::count(48, 12), 1212);
    assert_eq!(bottleneck(48, 0.25), 12);
    assert_eq!(bottleneck(4, 0.01), 1);
    let mut store = ParamStore::new();
    let a = ted(&mut store);
    let n: usize = a.ids().iter().map(|&id| store.get(id).tensor.numel()).sum();
    assert_eq!(n, TedAdapter::count(D, R, 3, 3));
}

#[test]
fn back_half_registers_two_adapters() {
    let mut cfg = Config::default();
    cfg.placement.video_layers = LayerSet::List(vec![3, 4]);
    let model = Model::new(&cfg).unwrap();
    let present: Vec<bool> = model.arch.video.adapters.iter().map(Option::is_some).collect();
    assert_eq!(present, [false, false, true, true]);
    cfg.placement.video_layers = LayerSet::Back;
    let model = Model::new(&cfg).unwrap();
    assert_eq!(model.arch.video.adapters.iter().flatten().count(), 2);
}

#[test]
fn even_kernel_is_config_error() {
    let mut cfg = Config::default();
    cfg.adapter.temporal_kernel = 2;
    assert!(Model::new(&cfg).unwrap_err().is_usage());
}
