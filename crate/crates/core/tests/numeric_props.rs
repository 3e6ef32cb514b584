use proptest::prelude::*;
use qrn::gradcheck::check_gradients;
use qrn::tape::{log_softmax_in_place, softmax_in_place};
use qrn::{ParamId, ParamKind, ParamStore, Parameter, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn store_with(tensors: Vec<Tensor<f64>>) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(Parameter::new(format!("p{i}"), ParamKind::Weight, t)).unwrap())
        .collect();
    (store, ids)
}

/// Checks `sum(f(params))` against central differences with step 1e-5.
fn assert_gradients(tensors: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let (mut store, ids) = store_with(tensors);
    let report = check_gradients(
        |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let out = f(tape, &vars)?;
            Ok(tape.sum(out))
        },
        &mut store,
        &ids,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_op_gradients(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, r, c, -2.0, 2.0);
        let y = random(&mut rng, r, c, 0.1, 2.0);
        assert_gradients(vec![x, y], |t, v| {
            let s = t.sigmoid(v[0]);
            let h = t.tanh(v[0]);
            let e = t.exp(h);
            let l = t.log(v[1])?;
            let m = t.mul(s, e)?;
            let a = t.add(m, l)?;
            let om = t.one_minus(a);
            let sc = t.scale(om, 0.7);
            t.sub(sc, v[1])
        });
    }

    #[test]
    fn matrix_op_gradients(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, n, k, -1.0, 1.0);
        let b = random(&mut rng, k, m, -1.0, 1.0);
        let c = random(&mut rng, m, k, -1.0, 1.0);
        assert_gradients(vec![a, b, c], |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let act = t.matmul_t(v[0], v[2])?;
            let both = t.concat_cols(&[ab, act])?;
            let rev = t.reverse_rows(both)?;
            let cs = t.cumsum_rows(rev)?;
            t.mul(cs, cs)
        });
    }

    #[test]
    fn softmax_and_selection_gradients(seed in any::<u64>(), n in 1usize..6, w in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, n, w, -3.0, 3.0);
        let pick_r = rng.random_range(0..n);
        let pick_c = rng.random_range(0..w);
        assert_gradients(vec![x], |t, v| {
            let s = t.softmax(v[0])?;
            let ls = t.log_softmax(v[0])?;
            let p = t.pick(ls, pick_r, pick_c)?;
            let sq = t.mul(s, s)?;
            let total = t.sum(sq);
            t.add(total, p)
        });
    }

    #[test]
    fn triangular_op_gradients(seed in any::<u64>(), n in 1usize..7, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, n, n, -1.0, 1.0);
        let b = random(&mut rng, n, d, -1.0, 1.0);
        assert_gradients(vec![a, b], |t, v| {
            let lower = t.lower_matmul(v[0], v[1])?;
            let masked = t.tri_mask(v[0], true)?;
            let prod = t.matmul(masked, v[1])?;
            let sum = t.add(lower, prod)?;
            t.mul(sum, sum)
        });
    }

    #[test]
    fn fused_decay_matches_the_masked_cumsum_chain(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random(&mut rng, n, 1, -3.0, 0.0);
        let mut t = Tape::new();
        let bv = t.constant(b);
        let fused = t.decay_from_log(bv).unwrap();
        let tiled = t.broadcast_cols(bv, n).unwrap();
        let strict = t.tri_mask(tiled, true).unwrap();
        let sums = t.cumsum_rows(strict).unwrap();
        let e = t.exp(sums);
        let chain = t.tri_mask(e, false).unwrap();
        for (a, b) in t.value(fused).data().iter().zip(t.value(chain).data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300) || (*a == 0.0 && *b < 1e-290));
        }
    }

    #[test]
    fn fused_decay_gradients(seed in any::<u64>(), n in 1usize..9, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random(&mut rng, n, 1, -2.0, 0.0);
        let w = random(&mut rng, n, d, -1.0, 1.0);
        assert_gradients(vec![b, w], |t, v| {
            let dm = t.decay_from_log(v[0])?;
            let h = t.lower_matmul(dm, v[1])?;
            t.mul(h, h)
        });
    }

    #[test]
    fn position_embedding_gradients(seed in any::<u64>(), d in 1usize..5, v in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random(&mut rng, d, v, -1.0, 1.0);
        let sentences: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(0..v)).collect())
            .collect();
        assert_gradients(vec![table], |t, vars| {
            let x = t.position_embed(vars[0], &sentences)?;
            t.mul(x, x)
        });
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), w in 1usize..40, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row: Vec<f64> = (0..w).map(|_| rng.random_range(-scale..scale)).collect();
        let mut logs = row.clone();
        softmax_in_place(&mut row);
        log_softmax_in_place(&mut logs);
        prop_assert!(row.iter().all(|&p| p >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (p, l) in row.iter().zip(&logs) {
            prop_assert!((p.ln() - l).abs() < 1e-9 || *p < 1e-300);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, n, n, -1.0, 1.0);
        let (store, ids) = store_with(vec![a]);
        let run = || {
            let mut t = Tape::new();
            let v = t.param(&store, ids[0]);
            let m = t.matmul(v, v).unwrap();
            let s = t.softmax(m).unwrap();
            t.value(s).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
