use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|x| x.abs() + 0.5)
}

/// Weighted sum with fixed random weights so no coordinate has a degenerate gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(y), seed ^ 0xABCD);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = tape.constant(Tensor::identity(2));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
    let s = tape.row_softmax(a).unwrap();
    assert_eq!(tape.data(s), &[0.5, 0.5]);
}

#[test]
fn cumsum_prefix_sums() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]));
    let c = tape.cumsum(a, 0).unwrap();
    assert_eq!(tape.data(c), &[1.0, 3.0, 6.0]);
}

#[test]
fn quadratic_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn logsumexp_gradient_is_softmax() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap().with_grad());
    let l = tape.logsumexp(x, 0).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
    let y = tape.leaf(Tensor::full(&[2], 3.0).with_grad());
    let loss = tape.sum_all(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    assert_eq!(tape.grad(y).unwrap(), &[1.0, 1.0]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
    );
    assert!(err.to_string().contains("matmul"));
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(tape.add(a, c).unwrap_err().to_string().starts_with("add"));
    assert!(matches!(tape.concat(&[a, c], 0), Err(TensorError::ShapeMismatch { op: "concat", .. })));
    assert!(matches!(tape.reshape(a, &[5]), Err(TensorError::ShapeMismatch { op: "reshape", .. })));
    assert!(matches!(tape.softmax(a, 2), Err(TensorError::BadAxis { op: "softmax", .. })));
}

#[test]
fn broadcasting_rules() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let row = tape.constant(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
    let col = tape.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
    let r = tape.add(a, row).unwrap();
    let c = tape.add(a, col).unwrap();
    assert_eq!(tape.data(r), &[11.0, 22.0, 13.0, 24.0]);
    assert_eq!(tape.data(c), &[11.0, 12.0, 23.0, 24.0]);
}

#[test]
fn cum_logsumexp_matches_direct_prefix() {
    let x = random(&[5, 3], 7);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let c = tape.cum_logsumexp(v, 0).unwrap();
    for p in 0..5 {
        for j in 0..3 {
            let direct: f64 = (0..=p).map(|q| x.at(&[q, j]).exp()).sum::<f64>().ln();
            assert!((tape.value(c).at(&[p, j]) - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_fill_overwrites_selected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let m = Mask::from_fn(&[2, 2], |i| i[1] > i[0]);
    let f = tape.masked_fill(a, &m, MASK_VALUE).unwrap();
    assert_eq!(tape.data(f), &[1.0, MASK_VALUE, 3.0, 4.0]);
    let s = tape.row_softmax(f).unwrap();
    assert_eq!(tape.data(s)[1], 0.0);
}

#[test]
fn constant_function_has_zero_error() {
    let x = random(&[4], 1);
    let err = finite_diff_check(
        |tape: &mut Tape, _v| -> Result<Var> { Ok(tape.constant(Tensor::scalar(3.0))) },
        &x,
        STEP,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn sum_of_squares_is_exact() {
    let x = random(&[3], 2);
    let err = finite_diff_check(
        |tape: &mut Tape, v| -> Result<Var> {
            let sq = tape.mul(v, v)?;
            Ok(tape.sum_all(sq))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn check_unary(shape: &[usize], seed: u64, positive_input: bool, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let x = if positive_input { positive(shape, seed) } else { random(shape, seed) };
    let err = finite_diff_check(
        |tape: &mut Tape, v| {
            let y = f(tape, v)?;
            probe(tape, y, seed)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "shape {shape:?}: relative error {err}");
}

fn check_binary(sa: &[usize], sb: &[usize], seed: u64, f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) {
    let xs = [random(sa, seed), positive(sb, seed + 1)];
    let err = finite_diff_check_many(
        |tape: &mut Tape, v: &[Var]| {
            let y = f(tape, v[0], v[1])?;
            probe(tape, y, seed)
        },
        &xs,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "shapes {sa:?} {sb:?}: relative error {err}");
}

const RANKS: [&[usize]; 4] = [&[5], &[3, 4], &[2, 3, 4], &[2, 2, 3, 2]];

#[test]
fn elementwise_gradients_every_rank() {
    for (k, shape) in RANKS.iter().enumerate() {
        let s = k as u64 * 10;
        check_unary(shape, s, false, |t, v| Ok(t.exp(v)));
        check_unary(shape, s + 1, true, |t, v| Ok(t.log(v)));
        check_unary(shape, s + 2, false, |t, v| Ok(t.sigmoid(v)));
        check_unary(shape, s + 3, false, |t, v| Ok(t.neg(v)));
        check_unary(shape, s + 4, false, |t, v| Ok(t.scale(v, -2.5)));
        check_unary(shape, s + 5, true, |t, v| Ok(t.relu(v)));
        check_binary(shape, shape, s + 6, |t, a, b| t.add(a, b));
        check_binary(shape, shape, s + 7, |t, a, b| t.sub(a, b));
        check_binary(shape, shape, s + 8, |t, a, b| t.mul(a, b));
        check_binary(shape, shape, s + 9, |t, a, b| t.div(a, b));
    }
}

#[test]
fn broadcast_gradients() {
    check_binary(&[2, 3, 4], &[4], 1, |t, a, b| t.add(a, b));
    check_binary(&[2, 3, 4], &[3, 1], 2, |t, a, b| t.sub(a, b));
    check_binary(&[2, 3, 4], &[2, 1, 4], 3, |t, a, b| t.mul(a, b));
    check_binary(&[3, 4], &[1, 4], 4, |t, a, b| t.div(a, b));
}

#[test]
fn axis_reduction_gradients_every_rank() {
    for (k, shape) in RANKS.iter().enumerate() {
        for axis in 0..shape.len() {
            let s = 100 + (k * 10 + axis) as u64;
            check_unary(shape, s, false, move |t, v| t.softmax(v, axis));
            check_unary(shape, s + 1, false, move |t, v| t.logsumexp(v, axis));
            check_unary(shape, s + 2, false, move |t, v| t.cum_logsumexp(v, axis));
            check_unary(shape, s + 3, false, move |t, v| t.cumsum(v, axis));
            check_unary(shape, s + 4, false, move |t, v| t.sum(v, axis));
        }
        check_unary(shape, 200 + k as u64, false, |t, v| Ok(t.sum_all(v)));
        check_unary(shape, 210 + k as u64, false, |t, v| t.layer_norm(v, 1e-5));
    }
}

#[test]
fn structural_gradients() {
    check_binary(&[3, 4], &[4, 2], 1, |t, a, b| t.matmul(a, b));
    check_binary(&[2, 3, 4], &[2, 4, 5], 2, |t, a, b| t.matmul(a, b));
    check_binary(&[2, 3, 3, 4], &[3, 4, 2], 3, |t, a, b| t.matmul(a, b));
    check_binary(&[2, 3, 4], &[4, 2], 4, |t, a, b| t.matmul(a, b));
    check_unary(&[2, 3, 4], 5, false, |t, v| t.transpose(v, 0, 2));
    check_unary(&[3, 4], 6, false, |t, v| t.t(v));
    check_unary(&[2, 3, 4], 7, false, |t, v| t.reshape(v, &[6, 4]));
    check_unary(&[2, 5, 3], 8, false, |t, v| t.slice(v, 1, 1, 3));
    check_binary(&[2, 3, 4], &[2, 2, 4], 9, |t, a, b| t.concat(&[a, b, a], 1));
    check_unary(&[3, 4], 10, false, |t, v| {
        let m = Mask::from_fn(&[3, 4], |i| (i[0] + i[1]) % 3 == 0);
        let f = t.masked_fill(v, &m, MASK_VALUE)?;
        t.row_softmax(f)
    });
    check_unary(&[5, 3], 11, false, |t, v| t.index_select(v, &[4, 0, 4, 2]));
    check_unary(&[3, 4], 12, false, |t, v| Ok(t.add_scalar(v, 1.5)));
}

#[test]
fn composite_graph_gradient() {
    // softmax attention over a small sequence, with shared inputs reused several times
    let xs = [random(&[4, 3], 1), random(&[3, 3], 2)];
    let err = finite_diff_check_many(
        |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let q = t.matmul(v[0], v[1])?;
            let kt = t.t(v[0])?;
            let s = t.matmul(q, kt)?;
            let p = t.row_softmax(s)?;
            let y = t.matmul(p, v[0])?;
            let n = t.layer_norm(y, 1e-5)?;
            let z = t.sigmoid(n);
            probe(t, z, 9)
        },
        &xs,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let a = t.constant(random(&[4, 4], 3));
        let b = t.matmul(a, a).unwrap();
        let s = t.row_softmax(b).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            let mut t = Tape::new();
            let a = t.constant(random(&[rows, cols], seed).map(|x| 20.0 * x));
            let s = t.row_softmax(a).unwrap();
            for r in t.data(s).chunks(cols) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn transpose_is_an_involution(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
            let x = random(&[a, b, c], seed);
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = t.transpose(v, 0, 2).unwrap();
            let z = t.transpose(y, 0, 2).unwrap();
            prop_assert_eq!(t.value(z).data(), x.data());
        }

        #[test]
        fn matmul_gradient_matches_differences(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
            let xs = [random(&[m, k], seed), random(&[k, n], seed.wrapping_add(1))];
            let err = finite_diff_check_many(
                |t: &mut Tape, v: &[Var]| { let y = t.matmul(v[0], v[1])?; probe(t, y, seed) },
                &xs,
                STEP,
            ).unwrap();
            prop_assert!(err < TOL);
        }
    }
}
