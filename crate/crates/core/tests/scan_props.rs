use proptest::prelude::*;
use qrn::cell::{self, ScanMode};
use qrn::scan::{build_decay_matrix, scan_on_tape, scan_scalar, scan_vector, sequential_reference, ScanInputs};
use qrn::{ParamKind, ParamStore, Parameter, Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs<F: Scalar>(seed: u64, t: usize, d: usize, vector: bool, reset: bool) -> ScanInputs<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = if vector { d } else { 1 };
    let mut gates = |n: usize| -> Vec<F> { (0..n).map(|_| F::from_f64(rng.random_range(0.01..0.99))).collect() };
    let z = Tensor::matrix(t, g, gates(t * g)).unwrap();
    let r = reset.then(|| Tensor::matrix(t, g, gates(t * g)).unwrap());
    let h = (0..t * d).map(|_| F::from_f64(rng.random_range(-1.0..1.0))).collect();
    ScanInputs {
        z,
        htilde: Tensor::matrix(t, d, h).unwrap(),
        r,
    }
}

fn scan<F: Scalar>(inputs: &ScanInputs<F>) -> Tensor<F> {
    if inputs.z.cols() == 1 {
        scan_scalar(inputs).unwrap()
    } else {
        scan_vector(inputs).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_matches_recurrence_64(seed in any::<u64>(), t in 1usize..80, d in 1usize..24, vector: bool, reset: bool) {
        let inputs = random_inputs::<f64>(seed, t, d, vector, reset);
        let diff = scan(&inputs).max_abs_diff(&sequential_reference(&inputs).unwrap()).unwrap();
        prop_assert!(diff < 1e-9, "max abs diff {diff}");
    }

    #[test]
    fn scan_matches_recurrence_32(seed in any::<u64>(), t in 1usize..80, d in 1usize..24, vector: bool, reset: bool) {
        let inputs = random_inputs::<f32>(seed, t, d, vector, reset);
        let diff = scan(&inputs).max_abs_diff(&sequential_reference(&inputs).unwrap()).unwrap();
        prop_assert!(diff < 1e-4, "max abs diff {diff}");
    }

    #[test]
    fn decay_rows_follow_the_recursion(seed in any::<u64>(), t in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..0.99)).collect();
        let dm = build_decay_matrix(&z).unwrap();
        for row in 1..t {
            prop_assert_eq!(dm.at(row, row), 1.0);
            for i in 0..row {
                let expected = dm.at(row - 1, i) * (1.0 - z[row]);
                prop_assert!((dm.at(row, i) - expected).abs() <= 1e-12 * expected.abs().max(1e-300));
            }
            for i in row + 1..t {
                prop_assert_eq!(dm.at(row, i), 0.0);
            }
        }
    }

    #[test]
    fn future_inputs_do_not_reach_the_past(seed in any::<u64>(), t in 2usize..30, d in 1usize..8, cut in 0usize..29) {
        let cut = cut % (t - 1);
        let a = random_inputs::<f64>(seed, t, d, false, false);
        let mut b = a.clone();
        for row in cut + 1..t {
            for k in 0..d {
                b.htilde.set(row, k, 0.5 - b.htilde.at(row, k));
            }
            b.z.set(row, 0, 0.5);
        }
        let (ha, hb) = (scan(&a), scan(&b));
        for row in 0..=cut {
            prop_assert_eq!(ha.row_slice(row), hb.row_slice(row));
        }
    }

    #[test]
    fn tape_paths_agree_in_value_and_gradient(seed in any::<u64>(), t in 1usize..30, d in 1usize..8, vector: bool) {
        let inputs = random_inputs::<f64>(seed, t, d, vector, false);
        let mut results = Vec::new();
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let mut store = ParamStore::new();
            let zid = store.add(Parameter::new("z", ParamKind::Weight, inputs.z.clone())).unwrap();
            let cid = store.add(Parameter::new("c", ParamKind::Weight, inputs.htilde.clone())).unwrap();
            let mut tape = Tape::new();
            let z = tape.param(&store, zid);
            let c = tape.param(&store, cid);
            let h = match mode {
                ScanMode::Sequential => cell::recur_sequential(&mut tape, z, c).unwrap(),
                ScanMode::Parallel => scan_on_tape(&mut tape, z, c).unwrap(),
            };
            let sq = tape.mul(h, h).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss, &mut store).unwrap();
            results.push((tape.value(h).clone(), store.get(zid).gradient.clone(), store.get(cid).gradient.clone()));
        }
        let (a, b) = (&results[0], &results[1]);
        prop_assert!(a.0.max_abs_diff(&b.0).unwrap() < 1e-9);
        prop_assert!(a.1.max_abs_diff(&b.1).unwrap() < 1e-8);
        prop_assert!(a.2.max_abs_diff(&b.2).unwrap() < 1e-8);
    }
}

#[test]
fn saturated_gate_does_not_produce_nan() {
    let z = Tensor::matrix(3, 1, vec![1.0f64, 1.0, 1.0]).unwrap();
    let inputs = ScanInputs {
        z,
        htilde: Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap(),
        r: None,
    };
    let h = scan_scalar(&inputs).unwrap();
    assert!(h.data().iter().all(|v| v.is_finite()));
    assert!((h.at(2, 0) - 0.3).abs() < 1e-7);
}
