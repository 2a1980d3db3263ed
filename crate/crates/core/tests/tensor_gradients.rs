//! Every tape primitive against central finite differences.

use novo_core::gradcheck::{self, Objective};
use novo_core::{Element, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Stretch each row about its mean so its variance is at least `min_var`;
/// rows of nearly equal values make layer norm a step function.
fn spread_rows(x: &Tensor, min_var: f32) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let s = (min_var / var.max(1e-12)).sqrt().max(1.0);
        row.iter_mut().for_each(|v| *v = mean + (*v - mean) * s);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn assert_grad<O: Objective>(obj: &O, inputs: &[Tensor]) {
    let r = gradcheck::check(obj, inputs, H, FLOOR).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

/// Contract every output with fixed random weights so the scalar probes all
/// output entries with distinct sensitivities.
fn probe<F: Element>(tape: &mut Tape<F>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

macro_rules! objective {
    ($name:ident, |$tape:ident, $x:ident| $body:expr) => {
        struct $name;
        impl Objective for $name {
            fn eval<F: Element>(&self, $tape: &mut Tape<F>, $x: &[Var]) -> Result<Var> {
                let y = $body;
                probe($tape, y, 99)
            }
        }
    };
}

objective!(MatMul, |t, x| t.matmul(x[0], x[1])?);
objective!(Add, |t, x| t.add(x[0], x[1])?);
objective!(Sub, |t, x| t.sub(x[0], x[1])?);
objective!(Mul, |t, x| t.mul(x[0], x[1])?);
objective!(AddTiled, |t, x| t.add_tiled(x[0], x[1])?);
objective!(Gelu, |t, x| t.gelu(x[0])?);
objective!(Transpose, |t, x| t.transpose(x[0])?);
objective!(Reshape, |t, x| {
    let n = t.value(x[0]).len();
    t.reshape(x[0], &[n])?
});
objective!(Concat, |t, x| t.concat_rows(&[x[0], x[1]])?);
objective!(Slice, |t, x| {
    let r = t.shape(x[0])[0];
    t.slice_rows(x[0], r / 2, r - r / 2)?
});
objective!(Embedding, |t, x| {
    let v = t.shape(x[0])[0];
    let ids: Vec<usize> = (0..5).map(|i| (i * 7) % v).collect();
    t.embedding(x[0], &ids)?
});
objective!(Softmax0, |t, x| t.softmax(x[0], 0)?);
objective!(Softmax1, |t, x| t.softmax(x[0], 1)?);
objective!(LogSoftmax, |t, x| t.log_softmax(x[0])?);
objective!(LayerNorm, |t, x| {
    let eps = F::from_f64(1e-5).unwrap();
    t.layer_norm(x[0], x[1], x[2], eps)?
});
objective!(Attention, |t, x| t.attention(x[0], 2, 5, 2)?);
objective!(Assemble, |t, x| t.assemble_tokens(x[0], x[1], 3)?);
objective!(Overwrite, |t, x| t.overwrite_rows(x[0], x[1], 4, 1)?);
objective!(Gather, |t, x| t.gather_block_rows(x[0], 4, 1, 2)?);
objective!(Pick, |t, x| {
    let r = t.shape(x[0])[0];
    let c = t.shape(x[0])[1];
    let cols: Vec<usize> = (0..r).map(|i| (i * 3 + 1) % c).collect();
    t.pick(x[0], &cols)?
});
objective!(ScaleShift, |t, x| {
    let s = t.scale(x[0], F::from_f64(-1.5).unwrap())?;
    t.add_scalar(s, F::from_f64(0.25).unwrap())?
});

struct Reductions;
impl Objective for Reductions {
    fn eval<F: Element>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let m = t.mean(x[0])?;
        let s = t.sum(x[1])?;
        let e = t.mse(x[0], x[1])?;
        let a = t.add(m, s)?;
        t.add(a, e)
    }
}

struct LogRecip;
impl Objective for LogRecip {
    fn eval<F: Element>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        // keep the argument positive: 1 + x^2
        let sq = t.mul(x[0], x[0])?;
        let pos = t.add_scalar(sq, F::one())?;
        let l = t.log(pos)?;
        let r = t.recip(pos)?;
        let both = t.add(l, r)?;
        probe(t, both, 7)
    }
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);

    struct SumMatMul;
    impl Objective for SumMatMul {
        fn eval<F: Element>(&self, t: &mut Tape<F>, x: &[Var]) -> Result<Var> {
            let y = t.matmul(x[0], x[1])?;
            t.sum(y)
        }
    }
    // expected: ones(3x2) . b^T, i.e. row sums of b repeated for each row of a
    let expected: Vec<f64> = (0..3)
        .flat_map(|_| (0..4).map(|k| (b.row(k)[0] + b.row(k)[1]) as f64))
        .collect();
    let grads = gradcheck::analytic::<f32, _>(&SumMatMul, &[a.clone(), b.clone()]).unwrap();
    for (g, e) in grads[0].iter().zip(&expected) {
        assert!((g - e).abs() < 1e-5);
    }
    assert_grad(&SumMatMul, &[a, b]);
}

#[test]
fn fixed_shape_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = &mut rng;
    assert_grad(&MatMul, &[rand_tensor(r, &[3, 5]), rand_tensor(r, &[5, 4])]);
    assert_grad(&Add, &[rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])]);
    assert_grad(&Sub, &[rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])]);
    assert_grad(&Mul, &[rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])]);
    assert_grad(&AddTiled, &[rand_tensor(r, &[6, 4]), rand_tensor(r, &[2, 4])]);
    assert_grad(&AddTiled, &[rand_tensor(r, &[6, 4]), rand_tensor(r, &[4])]);
    assert_grad(&Gelu, &[rand_tensor(r, &[4, 4])]);
    assert_grad(&Transpose, &[rand_tensor(r, &[3, 5])]);
    assert_grad(&Reshape, &[rand_tensor(r, &[3, 5])]);
    assert_grad(&Concat, &[rand_tensor(r, &[2, 3]), rand_tensor(r, &[4, 3])]);
    assert_grad(&Slice, &[rand_tensor(r, &[5, 3])]);
    assert_grad(&Embedding, &[rand_tensor(r, &[6, 3])]);
    assert_grad(&Softmax0, &[rand_tensor(r, &[4, 3])]);
    assert_grad(&Softmax1, &[rand_tensor(r, &[4, 3])]);
    assert_grad(&LogSoftmax, &[rand_tensor(r, &[4, 6])]);
    assert_grad(
        &LayerNorm,
        &[rand_tensor(r, &[4, 6]), rand_tensor(r, &[6]), rand_tensor(r, &[6])],
    );
    assert_grad(&Attention, &[rand_tensor(r, &[10, 12])]);
    assert_grad(&Assemble, &[rand_tensor(r, &[2, 4]), rand_tensor(r, &[9, 4])]);
    assert_grad(&Overwrite, &[rand_tensor(r, &[8, 3]), rand_tensor(r, &[2, 3])]);
    assert_grad(&Gather, &[rand_tensor(r, &[8, 3])]);
    assert_grad(&Pick, &[rand_tensor(r, &[5, 4])]);
    assert_grad(&ScaleShift, &[rand_tensor(r, &[5, 4])]);
    assert_grad(&Reductions, &[rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])]);
    assert_grad(&LogRecip, &[rand_tensor(r, &[3, 4])]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_shapes_pass_gradcheck(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let r = gradcheck::check(&MatMul, &[a, b], H, FLOOR).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);

        let x = rand_tensor(&mut rng, &[m, n]);
        let spread = spread_rows(&x, 0.1);
        let g = rand_tensor(&mut rng, &[n]);
        let bias = rand_tensor(&mut rng, &[n]);
        if n > 1 {
            let r = gradcheck::check(&LayerNorm, &[spread, g, bias], H, FLOOR).unwrap();
            prop_assert!(r.max_rel_error < TOL, "{:?}", r);
        }
        let r = gradcheck::check(&LogSoftmax, &[x.clone()], H, FLOOR).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
        let r = gradcheck::check(&Softmax1, &[x.clone()], H, FLOOR).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
        let r = gradcheck::check(&Gelu, &[x], H, FLOOR).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..=16, cols in 1usize..=16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale: f32 = rng.random_range(0.1..50.0);
        let x = Tensor::randn(&[rows, cols], scale, &mut rng);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(&x);
        let y = tape.softmax(v, 1).unwrap();
        for r in tape.value(y).chunks(cols) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            let s: f32 = r.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn layer_norm_rows_standardized(cols in 2usize..=16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[3, cols], 3.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(&x);
        let g = tape.constant(&Tensor::ones(&[cols]));
        let b = tape.constant(&Tensor::zeros(&[cols]));
        let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
        for r in tape.value(y).chunks(cols) {
            let mean: f64 = r.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var: f64 = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[10, 12]);
        gradcheck::analytic::<f32, _>(&Attention, &[a]).unwrap()
    };
    let (g1, g2) = (run(), run());
    let bits = |g: &Vec<Vec<f64>>| g.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1), bits(&g2));
}


