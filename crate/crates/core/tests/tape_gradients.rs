//! Central-difference checks of every differentiable tape op in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use skipmid::gradcheck::rel_error;
use skipmid::kernels::{AttnGeom, Unary};
use skipmid::tape::{Tape, Var};
use skipmid::Tensor;

const STEP: f64 = skipmid::gradcheck::FD_STEP;
const TOLERANCE: f64 = 1e-5;

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Scalar `sum(op(inputs) * w)` for a fixed random `w`.
fn scalar_loss(inputs: &[Tensor<f64>], op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, w: Option<&Tensor<f64>>) -> (Tape<f64>, Vec<Var>, Var, Tensor<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let w = match w {
        Some(w) => w.clone(),
        None => gaussian(tape.value(out).shape(), &mut ChaCha8Rng::seed_from_u64(99)),
    };
    let wv = tape.leaf(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss, w)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let (tape, vars, loss, w) = scalar_loss(&inputs, &op, None);
    let grads = tape.backward(loss).unwrap();
    let mut inputs = inputs;
    let eval = |inputs: &[Tensor<f64>]| {
        let (tape, _, loss, _) = scalar_loss(inputs, &op, Some(&w));
        tape.value(loss).data()[0]
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = eval(&inputs);
            inputs[i].data_mut()[j] = orig - STEP;
            let down = eval(&inputs);
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = rel_error(analytic.data()[j], numeric);
            assert!(
                err < TOLERANCE,
                "{name}: input {i}[{j}] analytic {} numeric {numeric} (rel {err:.2e})",
                analytic.data()[j]
            );
        }
    }
}

#[test]
fn matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (gaussian(&[3, 4], &mut rng), gaussian(&[4, 5], &mut rng));
    check("matmul", vec![a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (gaussian(&[2, 3], &mut rng), gaussian(&[2, 3], &mut rng));
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap());
    check("mul self", vec![a], |t, v| t.mul(v[0], v[0]).unwrap());
}

#[test]
fn row_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&[4, 3], &mut rng);
    check("add_row_bias", vec![x.clone(), gaussian(&[3], &mut rng)], |t, v| {
        t.add_row_bias(v[0], v[1]).unwrap()
    });
    check("scale_rows", vec![x, gaussian(&[4], &mut rng)], |t, v| t.scale_rows(v[0], v[1]).unwrap());
}

#[test]
fn smooth_unaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(&[2, 5], &mut rng);
    for k in [Unary::Exp, Unary::Silu, Unary::Square, Unary::Scale(-1.7), Unary::Shift(0.3)] {
        check(&format!("{k:?}"), vec![x.clone()], move |t, v| t.unary(v[0], k).unwrap());
    }
    check("Ln", vec![uniform(&[2, 5], 0.2, 3.0, &mut rng)], |t, v| t.unary(v[0], Unary::Ln).unwrap());
}

#[test]
fn kinked_unaries_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let away = |lo: f64, hi: f64, kinks: &[f64], rng: &mut ChaCha8Rng| {
        let mut t = uniform(&[12], lo, hi, rng);
        for x in t.data_mut() {
            if kinks.iter().any(|k| (*x - k).abs() < 0.05) {
                *x += 0.1;
            }
        }
        t
    };
    check("Relu", vec![away(-1.0, 1.0, &[0.0], &mut rng)], |t, v| t.unary(v[0], Unary::Relu).unwrap());
    check("Clamp01", vec![away(-0.5, 1.5, &[0.0, 1.0], &mut rng)], |t, v| {
        t.unary(v[0], Unary::Clamp01).unwrap()
    });
    check("Floor", vec![away(-1.0, 1.0, &[0.2], &mut rng)], |t, v| t.unary(v[0], Unary::Floor(0.2)).unwrap());
}

#[test]
fn rmsnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, w) = (gaussian(&[3, 6], &mut rng), gaussian(&[6], &mut rng));
    check("rmsnorm", vec![x, w], |t, v| t.rmsnorm(v[0], v[1], 1e-5).unwrap());
}

#[test]
fn rope() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&[5, 8], &mut rng);
    check("rope", vec![x], |t, v| t.rope(v[0], 4, &[0, 1, 2, 3, 7], 10_000.0).unwrap());
}

#[test]
fn attention_with_and_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let geom = AttnGeom {
        batch: 2,
        seq: 4,
        heads: 4,
        kv_heads: 2,
        head_dim: 3,
    };
    let rows = geom.tokens();
    let q = gaussian(&[rows, geom.q_width()], &mut rng);
    let k = gaussian(&[rows, geom.kv_width()], &mut rng);
    let v = gaussian(&[rows, geom.kv_width()], &mut rng);
    let bias = uniform(&[rows], -3.0, 0.0, &mut rng);
    check("attention", vec![q.clone(), k.clone(), v.clone()], move |t, x| {
        t.attention(x[0], x[1], x[2], None, geom).unwrap()
    });
    check("attention bias", vec![q, k, v, bias], move |t, x| {
        t.attention(x[0], x[1], x[2], Some(x[3]), geom).unwrap()
    });
}

#[test]
fn softmax_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = gaussian(&[3, 4], &mut rng);
    let mut mask = Tensor::<f64>::zeros(&[3, 4]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[7] = f64::NEG_INFINITY;
    check("softmax", vec![x.clone()], |t, v| t.softmax_rows(v[0], None).unwrap());
    check("softmax mask", vec![x], move |t, v| t.softmax_rows(v[0], Some(&mask)).unwrap());
}

#[test]
fn gather_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let table = gaussian(&[5, 3], &mut rng);
    check("gather", vec![table.clone()], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    check("reshape", vec![table], |t, v| t.reshape(v[0], &[3, 5]).unwrap());
}

#[test]
fn reductions_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = gaussian(&[4, 6], &mut rng);
    check("sum", vec![x.clone()], |t, v| t.sum(v[0]));
    check("mean", vec![x.clone()], |t, v| t.mean(v[0]).unwrap());
    check("variance", vec![x.clone()], |t, v| t.variance(v[0]).unwrap());
    check("cross_entropy", vec![x], |t, v| t.cross_entropy(v[0], &[5, 0, 2, 2]).unwrap());
}

#[test]
fn composite_graph_with_reuse() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (x, w) = (gaussian(&[3, 4], &mut rng), gaussian(&[4, 4], &mut rng));
    check("composite", vec![x, w], |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.unary(h, Unary::Silu).unwrap();
        let h2 = t.matmul(h, v[1]).unwrap();
        let s = t.add(h2, v[0]).unwrap();
        t.softmax_rows(s, None).unwrap()
    });
}
