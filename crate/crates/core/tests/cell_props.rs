use proptest::prelude::*;
use qrn::cell::{Direction, QrnConfig, QrnParams, ScanMode};
use qrn::encoding::IndexedExample;
use qrn::model::{ModelConfig, QrnModel};
use qrn::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(seed: u64, d: usize, vector: bool, reset: bool) -> (ParamStore<f64>, QrnParams) {
    let config = QrnConfig {
        hidden_size: d,
        vector_gates: vector,
        use_reset_gate: reset,
        ..QrnConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = QrnParams::register(&mut store, &config, "qrn", &mut rng).unwrap();
    (store, p)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn reversed(t: &Tensor<f64>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..t.rows()).rev().map(|r| t.row_slice(r).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn example(rng: &mut ChaCha8Rng, steps: usize, vocab: usize) -> IndexedExample {
    let mut sentence = || (0..rng.random_range(1..5)).map(|_| rng.random_range(3..vocab)).collect::<Vec<_>>();
    IndexedExample {
        sentences: (0..steps).map(|_| sentence()).collect(),
        question: sentence(),
        answer: 3,
        answer_tokens: Vec::new(),
        candidates: None,
        gold_candidate: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scan_modes_agree_per_layer(seed in any::<u64>(), t in 1usize..20, d in 1usize..10, vector: bool, reset: bool) {
        let (store, p) = unit(seed, d, vector, reset);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let (x, q) = (random(&mut rng, t, d), random(&mut rng, t, d));
        for dir in [Direction::Forward, Direction::Backward] {
            let a = p.run_layer(&store, &x, &q, dir, ScanMode::Sequential, reset).unwrap();
            let b = p.run_layer(&store, &x, &q, dir, ScanMode::Parallel, reset).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        }
    }

    #[test]
    fn backward_is_forward_on_reversed_story(seed in any::<u64>(), t in 1usize..15, d in 1usize..8, reset: bool) {
        let (store, p) = unit(seed, d, false, reset);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (x, q) = (random(&mut rng, t, d), random(&mut rng, t, d));
        let back = p.run_layer(&store, &reversed(&x), &reversed(&q), Direction::Backward, ScanMode::Sequential, reset).unwrap();
        let fwd = p.run_layer(&store, &x, &q, Direction::Forward, ScanMode::Sequential, reset).unwrap();
        prop_assert!(back.max_abs_diff(&reversed(&fwd)).unwrap() < 1e-12);
    }

    #[test]
    fn states_stay_inside_the_unit_box(seed in any::<u64>(), t in 1usize..25, d in 1usize..8) {
        let (store, p) = unit(seed, d, false, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let mut h = Tensor::row(vec![0.0; d]);
        for _ in 0..t {
            let (x, q) = (random(&mut rng, 1, d), random(&mut rng, 1, d));
            let candidate = p.reduce(&store, &x, &q).unwrap();
            let (next, gates) = p.step(&store, &h, &x, &q, true).unwrap();
            let z = gates.z.item();
            prop_assert!(z > 0.0 && z < 1.0);
            let bound = h.data().iter().chain(candidate.data()).fold(0.0f64, |m, v| m.max(v.abs()));
            let norm = next.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(norm <= bound + 1e-15 && norm <= 1.0);
            h = next;
        }
    }

    #[test]
    fn candidate_ignores_previous_state(seed in any::<u64>(), d in 1usize..8) {
        let (store, p) = unit(seed, d, false, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let (x, q) = (random(&mut rng, 1, d), random(&mut rng, 1, d));
        let (h1, h2) = (random(&mut rng, 1, d), random(&mut rng, 1, d));
        let (a, ga) = p.step(&store, &h1, &x, &q, true).unwrap();
        let (b, gb) = p.step(&store, &h2, &x, &q, true).unwrap();
        prop_assert_eq!(ga.z.item().to_bits(), gb.z.item().to_bits());
        let z = ga.z.item();
        let candidate = p.reduce(&store, &x, &q).unwrap();
        for k in 0..d {
            // (h_t − (1 − z) h_{t−1}) / z recovers the same candidate from either history
            let ca = (a.data()[k] - (1.0 - z) * h1.data()[k]) / z;
            let cb = (b.data()[k] - (1.0 - z) * h2.data()[k]) / z;
            prop_assert!((ca - candidate.data()[k]).abs() < 1e-10);
            prop_assert!((cb - candidate.data()[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn recorded_gates_lie_in_the_open_unit_interval(seed in any::<u64>(), t in 1usize..10, vector: bool) {
        let qrn = QrnConfig { hidden_size: 8, vector_gates: vector, ..QrnConfig::default() };
        let model = QrnModel::<f64>::new(ModelConfig::qa(qrn, 15), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = example(&mut rng, t, 15);
        let (_, trace) = model.trace(&ex, ScanMode::Sequential).unwrap();
        prop_assert_eq!(trace.steps(), t);
        prop_assert!(trace.all_gates().all(|g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn single_layer_ignores_reset_parameters() {
    let qrn = QrnConfig {
        layers: 1,
        hidden_size: 6,
        use_reset_gate: true,
        ..QrnConfig::default()
    };
    let model = QrnModel::<f64>::new(ModelConfig::qa(qrn, 12), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex = example(&mut rng, 5, 12);
    let mut perturbed = model.clone();
    for name in ["qrn0.w_r", "qrn0.b_r"] {
        let id = perturbed.store.find(name).unwrap();
        perturbed.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v += 0.75);
    }
    let y = |m: &QrnModel<f64>| {
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &ex, ScanMode::Sequential).unwrap();
        tape.value(fwd.stack.y_hat).clone()
    };
    assert_eq!(y(&model), y(&perturbed));
}

#[test]
fn tied_weights_form_one_parameter_set() {
    let tied = QrnConfig {
        layers: 3,
        hidden_size: 4,
        ..QrnConfig::default()
    };
    let model = QrnModel::<f64>::new(ModelConfig::qa(tied.clone(), 10), 1).unwrap();
    assert_eq!(model.units.len(), 1);
    assert!(model.store.find("qrn1.w_z").is_none());

    // a change to the shared set moves the state of every layer
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ex = example(&mut rng, 4, 10);
    let reduced = |m: &QrnModel<f64>| {
        let (_, trace) = m.trace(&ex, ScanMode::Sequential).unwrap();
        trace.layers.iter().map(|l| l.reduced.clone()).collect::<Vec<_>>()
    };
    let before = reduced(&model);
    let mut changed = model.clone();
    let id = changed.store.find("qrn0.w_h").unwrap();
    changed.store.get_mut(id).value.data_mut()[0] += 0.5;
    let after = reduced(&changed);
    for (a, b) in before.iter().zip(&after) {
        assert_ne!(a, b);
    }

    let untied = QrnConfig {
        tie_weights_across_layers: false,
        ..tied
    };
    let model = QrnModel::<f64>::new(ModelConfig::qa(untied, 10), 1).unwrap();
    assert_eq!(model.units.len(), 3);
}

#[test]
fn fresh_gates_sit_at_the_forget_bias() {
    let model = QrnModel::<f64>::new(ModelConfig::qa(QrnConfig::default(), 30), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ex = example(&mut rng, 10, 30);
    let (_, trace) = model.trace(&ex, ScanMode::Sequential).unwrap();
    let z: Vec<f32> = trace.layers.iter().flat_map(|l| l.forward.z.iter().flatten().copied()).collect();
    let mean = z.iter().map(|&v| v as f64).sum::<f64>() / z.len() as f64;
    assert!((mean - 0.9241).abs() < 0.05, "mean z {mean}");
}
