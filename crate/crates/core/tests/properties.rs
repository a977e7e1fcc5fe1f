use proptest::prelude::*;

use skipmid::data::{batch_at, detokenize, tokenize_bytes, TokenFile};
use skipmid::flops::{active_param_reduction, dense_flops, gated_flops, LayerLoad};
use skipmid::kernels::{self, AttnGeom, Unary};
use skipmid::model::{log_gate, GateTrace, Mode, Model, Parameters, TransformerConfig};
use skipmid::rng::RngService;
use skipmid::tape::Tape;
use skipmid::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Tensor::from_f64(&[rows, cols], &v).unwrap())
}

fn soft_masks() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(half, tokens)| {
        let value = prop_oneof![Just(0.0), Just(1.0), 0.0f64..0.5, 0.0f64..2.0];
        prop::collection::vec(prop::collection::vec(value, tokens), half).prop_map(move |s| (2 * half, s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let p = kernels::softmax_rows(&x, None).unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn identity_matmul_is_exact(x in (1usize..7, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let eye = Tensor::<f64>::identity(x.rows());
        let y = kernels::matmul(&eye, &x).unwrap();
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn backward_is_deterministic(x in matrix(3, 4), w in matrix(4, 4)) {
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.unary(h, Unary::Silu).unwrap();
        let loss = tape.cross_entropy(h, &[0, 3, 1]).unwrap();
        let (a, b) = (tape.backward(loss).unwrap(), tape.backward(loss).unwrap());
        for v in [xv, wv] {
            let (ga, gb) = (a.get(v).unwrap(), b.get(v).unwrap());
            prop_assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn gates_mirror_and_decrease((n_layers, soft) in soft_masks()) {
        let tr = GateTrace::from_soft_mask(soft, n_layers).unwrap();
        let half = n_layers / 2;
        for l in 0..n_layers {
            prop_assert_eq!(&tr.gates[l], &tr.gates[n_layers - 1 - l]);
        }
        for t in 0..tr.tokens() {
            for l in 0..half {
                let g = tr.gates[l][t];
                prop_assert!((0.0..=1.0).contains(&g));
                prop_assert_eq!(g == 0.0, tr.accumulated[l][t] >= 1.0);
                if l + 1 < half {
                    prop_assert!(tr.gates[l + 1][t] <= g);
                }
            }
        }
    }

    #[test]
    fn flops_fall_as_sparsity_rises(z in prop::collection::vec(0.0f64..=1.0, 4), bump in 0.0f64..0.5, layer in 0usize..4) {
        let cfg = TransformerConfig::toy(16, 4, 2, 2, 32);
        let mut zs = z.clone();
        let base = gated_flops(&cfg, 32, &zs).unwrap();
        zs[layer] = (zs[layer] + bump).min(1.0);
        let more = gated_flops(&cfg, 32, &zs).unwrap();
        prop_assert!(more <= base);
        prop_assert!(base <= dense_flops(&cfg, 32) * (1.0 + 1e-12));
        prop_assert_eq!(gated_flops(&cfg, 32, &[0.0; 4]).unwrap(), dense_flops(&cfg, 32));
    }

    #[test]
    fn trace_loads_never_exceed_dense((n_layers, soft) in soft_masks()) {
        let tr = GateTrace::from_soft_mask(soft, n_layers).unwrap();
        let n = tr.tokens();
        let dense = LayerLoad::dense(n);
        for load in LayerLoad::from_trace(&tr, 1).unwrap() {
            prop_assert!(load.active_tokens <= dense.active_tokens);
            prop_assert!(load.visible_pairs <= dense.visible_pairs);
        }
    }

    #[test]
    fn param_reduction_is_linear(nb in 1u64..1_000_000, a in prop::collection::vec(0.0f64..=1.0, 1..6), k in 1u64..8) {
        let r = active_param_reduction(nb, &a).unwrap();
        let scaled = active_param_reduction(nb * k, &a).unwrap();
        prop_assert!((scaled - k as f64 * r).abs() <= 1e-9 * scaled.max(1.0));
        let single: f64 = a.iter().map(|&z| active_param_reduction(nb, &[z]).unwrap()).sum();
        prop_assert!((single - r).abs() <= 1e-9 * r.max(1.0));
    }

    #[test]
    fn rope_preserves_pair_norms(x in matrix(4, 8), theta in 10.0f64..1e5) {
        let mut y = x.data().to_vec();
        kernels::rope_in_place(&mut y, 4, &[0, 1, 5, 100], theta, 1.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.chunks(2)) {
            let (na, nb) = (a[0].hypot(a[1]), b[0].hypot(b[1]));
            prop_assert!((na - nb).abs() <= 1e-12 * na.max(1.0));
        }
        kernels::rope_in_place(&mut y, 4, &[0, 1, 5, 100], theta, -1.0).unwrap();
        prop_assert!(y.iter().zip(x.data()).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn closed_keys_receive_no_mass(
        seq in 1usize..=8,
        values in prop::collection::vec(-0.5f64..0.5, 64),
        open in prop::collection::vec(prop::bool::ANY, 8),
    ) {
        let geom = AttnGeom { batch: 1, seq, heads: 2, kv_heads: 1, head_dim: 4 };
        let q: Vec<f64> = values.iter().cycle().take(seq * 8).copied().collect();
        let k: Vec<f64> = values.iter().rev().cycle().take(seq * 4).copied().collect();
        let v = k.clone();
        let mut gates: Vec<f64> = open[..seq].iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        gates[0] = 1.0;
        let bias: Vec<f64> = gates.iter().map(|&g| log_gate(g)).collect();
        let (_, probs) = kernels::attention(&q, &k, &v, Some(&bias), None, geom).unwrap();
        for h in 0..2 {
            for i in 0..seq {
                for j in 0..=i {
                    if gates[j] == 0.0 {
                        prop_assert!(probs[h * seq * seq + i * seq + j] < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn skip_matches_multiply_in_f64(seed in 0u64..1000, seq in 1usize..10, bias in -1.0f64..1.0) {
        let cfg = TransformerConfig::toy(8, 4, 2, 1, 16);
        let rng = RngService::new(seed);
        let mut params = Parameters::<f64>::init(&cfg, true, &rng).unwrap();
        for g in &mut params.gates {
            g.weight.data_mut().iter_mut().for_each(|w| *w *= 40.0);
            g.bias.data_mut()[0] = bias;
        }
        let model = Model::new(cfg, params).unwrap();
        let ids: Vec<usize> = (0..2 * seq).map(|i| (i * 5 + seed as usize) % 16).collect();
        let skip = model.forward(&ids, 2, Mode::GatedSkip).unwrap();
        let mult = model.forward(&ids, 2, Mode::GatedMultiply).unwrap();
        prop_assert!(skip.logits.max_abs_diff(&mult.logits) < 1e-10);
        prop_assert_eq!(skip.trace, mult.trace);
    }

    #[test]
    fn bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn token_files_round_trip(tokens in prop::collection::vec(0u16..300, 0..200)) {
        let file = TokenFile::new(300, tokens).unwrap();
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        prop_assert_eq!(TokenFile::read_from(&mut buf.as_slice()).unwrap(), file);
    }

    #[test]
    fn window_targets_shift_by_one(tokens in prop::collection::vec(0u16..256, 20..60), seq in 1usize..10, picks in prop::collection::vec(0usize..1000, 1..4)) {
        let offsets: Vec<usize> = picks.iter().map(|p| p % (tokens.len() - seq)).collect();
        let b = batch_at(&tokens, seq, &offsets).unwrap();
        for (w, &o) in offsets.iter().enumerate() {
            for t in 0..seq {
                prop_assert_eq!(b.inputs[w * seq + t], tokens[o + t] as usize);
                prop_assert_eq!(b.targets[w * seq + t], tokens[o + t + 1] as usize);
            }
        }
    }
}

#[test]
fn closed_gate_leakage_on_three_tokens() {
    // g = [1, 0, 1]: the last token attends to keys 0 and 2 only, up to the
    // epsilon floor.
    let geom = AttnGeom { batch: 1, seq: 3, heads: 1, kv_heads: 1, head_dim: 2 };
    let q = [0.3, -0.2, 0.1, 0.4, -0.5, 0.2];
    let k = [0.2, 0.1, -0.3, 0.5, 0.4, -0.1];
    let v = [1.0, 0.0, 0.0, 1.0, 0.5, 0.5];
    let bias: Vec<f64> = [1.0, 0.0, 1.0].iter().map(|&g| log_gate(g)).collect();
    let (out, probs) = kernels::attention(&q, &k, &v, Some(&bias), None, geom).unwrap();
    let s = |j: usize| (q[4] * k[2 * j] + q[5] * k[2 * j + 1]) / 2f64.sqrt();
    let (e0, e2) = (s(0).exp(), s(2).exp());
    let want = [(e0 * v[0] + e2 * v[4]) / (e0 + e2), (e0 * v[1] + e2 * v[5]) / (e0 + e2)];
    assert!(probs[7] < 1e-5);
    assert!((out[4] - want[0]).abs() < 1e-5 && (out[5] - want[1]).abs() < 1e-5);
}
