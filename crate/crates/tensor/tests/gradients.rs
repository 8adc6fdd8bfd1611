use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenecap_tensor::nn::{self, AttentionWeights, EncoderBlock};
use scenecap_tensor::{finite_difference_check, ParamKind, ParamStore, Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Weighted sum against a fixed random probe so every output coordinate
/// carries an O(1) gradient.
fn probe_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(t.shape(y), 1.0, &mut rng);
    let w = t.constant(&w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check_points<F>(shape: &[usize], f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for point in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let x = Tensor::randn(shape, 1.0, &mut rng);
        worst = worst.max(finite_difference_check(&f, &x, H).unwrap());
    }
    worst
}

macro_rules! grad_case {
    ($name:ident, $shape:expr, |$t:ident, $x:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check_points(&$shape, |$t: &mut Tape, $x: Var| {
                let y: Var = $body?;
                probe_sum($t, y, 7)
            });
            assert!(err < TOL, "{} max rel err {err:e}", stringify!($name));
        }
    };
}

fn fixed(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.constant(&Tensor::randn(shape, 1.0, &mut rng))
}

grad_case!(matmul_left, [2, 3], |t, x| {
    let b = fixed(t, &[3, 4], 1);
    t.matmul(x, b)
});
grad_case!(matmul_right, [3, 4], |t, x| {
    let a = fixed(t, &[2, 3], 1);
    t.matmul(a, x)
});
grad_case!(transpose, [2, 3], |t, x| t.transpose(x));
grad_case!(elementwise_mul, [2, 3], |t, x| {
    let b = fixed(t, &[2, 3], 2);
    let s = t.sub(x, b)?;
    t.mul(s, x)
});
grad_case!(add_row_bias, [3], |t, x| {
    let a = fixed(t, &[4, 3], 3);
    t.add_row(a, x)
});
grad_case!(mul_scalar, [1], |t, x| {
    let a = fixed(t, &[2, 2], 4);
    t.mul_scalar(a, x)
});
grad_case!(exp_log, [2, 3], |t, x| {
    let e = t.exp(x);
    let e1 = t.scale(e, 2.0);
    Ok::<_, scenecap_tensor::TensorError>(t.log(e1))
});
grad_case!(gelu, [3, 3], |t, x| Ok::<_, scenecap_tensor::TensorError>(t.gelu(x)));
grad_case!(clamp_inside, [4], |t, x| Ok::<_, scenecap_tensor::TensorError>(t.clamp(x, -10.0, 10.0)));
grad_case!(softmax_rows, [3, 4], |t, x| t.softmax(x, 1));
grad_case!(softmax_axis0, [3, 4], |t, x| t.softmax(x, 0));
grad_case!(log_softmax_rows, [3, 5], |t, x| t.log_softmax(x, 1));
grad_case!(layer_norm_input, [3, 5], |t, x| {
    let g = fixed(t, &[5], 5);
    let b = fixed(t, &[5], 6);
    t.layer_norm(x, g, b, 1e-5)
});
grad_case!(layer_norm_gain, [5], |t, x| {
    let a = fixed(t, &[3, 5], 5);
    let b = fixed(t, &[5], 6);
    t.layer_norm(a, x, b, 1e-5)
});
grad_case!(l2_normalize, [3, 4], |t, x| Ok::<_, scenecap_tensor::TensorError>(t.l2_normalize_rows(x)));
grad_case!(max_pool, [6, 3], |t, x| t.max_pool_groups(x, 3));
grad_case!(mean_rows, [4, 3], |t, x| t.mean_rows(x));
grad_case!(slices_and_concat, [4, 6], |t, x| {
    let a = t.slice_rows(x, 1, 2)?;
    let b = t.slice_cols(a, 2, 3)?;
    let c = t.slice_cols(a, 0, 2)?;
    let d = t.concat_cols(&[b, c])?;
    let e = t.slice_rows(x, 0, 1)?;
    let e = t.slice_cols(e, 0, 5)?;
    t.concat_rows(&[d, e])
});
grad_case!(gather, [5, 3], |t, x| t.gather_rows(x, &[4, 0, 4, 2]));
grad_case!(pick, [3, 4], |t, x| t.pick(x, &[0, 5, 11, 5]));
grad_case!(reshape, [2, 6], |t, x| t.reshape(x, &[3, 4]));

#[test]
fn single_head_attention_all_inputs() {
    for which in 0..3 {
        let err = check_points(&[2, 3], |t, x| {
            let q = if which == 0 { x } else { fixed(t, &[2, 3], 11) };
            let k = if which == 1 { x } else { fixed(t, &[2, 3], 12) };
            let v = if which == 2 { x } else { fixed(t, &[2, 3], 13) };
            let y = nn::attention(t, q, k, v, None)?;
            probe_sum(t, y, 8)
        });
        assert!(err < TOL, "attention input {which}: {err:e}");
    }
}

fn block_store(d: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut s = ParamStore::new();
    EncoderBlock::init(&mut s, "blk", d, ParamKind::Trainable { decay: true }, &mut rng);
    AttentionWeights::init(&mut s, "xattn", d, 3, ParamKind::Trainable { decay: true }, &mut rng);
    s
}

#[test]
fn causal_encoder_block_input_and_weights() {
    let store = block_store(4);
    let err = check_points(&[3, 4], |t, x| {
        let blk = EncoderBlock::bind(t, &store, "blk")?;
        let m = t.constant(&nn::causal_mask(3));
        let y = blk.forward(t, x, 2, Some(m))?;
        probe_sum(t, y, 9)
    });
    assert!(err < TOL, "block input: {err:e}");

    let wq = store.get("blk.attn.wq").unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let err = finite_difference_check(
        |t, w| {
            t.override_param("blk.attn.wq", w);
            let blk = EncoderBlock::bind(t, &store, "blk")?;
            let x = t.constant(&input);
            let y = blk.forward(t, x, 2, None)?;
            probe_sum(t, y, 10)
        },
        &wq,
        H,
    )
    .unwrap();
    assert!(err < TOL, "block wq: {err:e}");
}

#[test]
fn multi_head_cross_attention_memory() {
    let store = block_store(4);
    let err = check_points(&[5, 3], |t, mem| {
        let w = AttentionWeights::bind(t, &store, "xattn")?;
        let q = fixed(t, &[2, 4], 21);
        let y = nn::multi_head_attention(t, q, mem, &w, 2, None)?;
        probe_sum(t, y, 11)
    });
    assert!(err < TOL, "cross attention memory: {err:e}");
}

#[test]
fn matmul_backward_is_b_transpose_broadcast() {
    let mut t = Tape::new();
    let a = t.variable(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = t.constant(&Tensor::from_rows(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]).unwrap());
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    // d sum(a b) / d a_ij = sum_k b_jk
    assert_eq!(g.get(a).unwrap(), &[18.0, 27.0, 18.0, 27.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let store = block_store(4);
    let run = || {
        let mut t = Tape::new();
        let blk = EncoderBlock::bind(&mut t, &store, "blk").unwrap();
        let x = fixed(&mut t, &[3, 4], 3);
        let y = blk.forward(&mut t, x, 2, None).unwrap();
        let l = probe_sum(&mut t, y, 1).unwrap();
        let g = t.backward(l).unwrap();
        (t.data(y).to_vec(), g.get(blk.attn.wq).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-500.0f64..500.0, 1..24), cols in 1usize..6) {
        let rows = vals.len() / cols;
        prop_assume!(rows >= 1);
        let x = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(&x);
        let s = t.softmax(v, 1).unwrap();
        for r in t.data(s).chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
