//! Analytic gradients of every differentiable tape op against central
//! finite differences (step 1e-6) on random inputs in [-2, 2].

use proptest::prelude::*;
use psp::gradcheck::{check_tensor_fn, DEFAULT_FLOOR, DEFAULT_STEP};
use psp::tensor::tape::NormStats;
use psp::{RngState, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, 2.0)
}

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> psp::Result<Var> {
    // a fixed random projection so every output coordinate matters
    let mut rng = RngState::new(seed ^ 0x5eed);
    let w = rng.uniform_tensor(t.shape(y), 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> psp::Result<Var>,
{
    let r = check_tensor_fn(inputs, DEFAULT_STEP, DEFAULT_FLOOR, f).unwrap();
    assert!(r.max_rel_error < TOL, "max rel error {} at {:?}", r.max_rel_error, r.worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matmul_broadcast(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        assert_grad(&[a, b], |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, seed) });
        let a = rand_tensor(&mut rng, &[1, 3, 2]);
        let b = rand_tensor(&mut rng, &[2, 2, 3]);
        assert_grad(&[a, b], |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn binary_broadcast(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        assert_grad(&[a.clone(), b.clone()], |t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, seed) });
        assert_grad(&[a.clone(), b.clone()], |t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, seed) });
        assert_grad(&[a.clone(), b], |t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, seed) });
        // keep the divisor away from zero
        let mut d = rand_tensor(&mut rng, &[3, 1]);
        d.data_mut().iter_mut().for_each(|x| *x = x.signum() * (x.abs() + 0.5));
        assert_grad(&[a, d], |t, v| { let y = t.div(v[0], v[1])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn unary_kinds(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rand_tensor(&mut rng, &[2, 5]);
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.tanh(v[0])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.leaky_relu(v[0], 0.1)?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.exp(v[0])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y, seed) });
        let mut pos = x.clone();
        pos.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        assert_grad(std::slice::from_ref(&pos), |t, v| { let y = t.log(v[0])?; weighted_sum(t, y, seed) });
        assert_grad(&[pos], |t, v| { let y = t.sqrt(v[0])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn reductions_and_layout(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.sum(v[0], &[0, 2])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.mean(v[0], &[1])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.max(v[0], &[2])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.permute(v[0], &[2, 0, 1])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.reshape(v[0], &[6, 4])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.index_select(v[0], 2, &[3, 0, 0, 1, 3])?; weighted_sum(t, y, seed) });
        assert_grad(std::slice::from_ref(&x), |t, v| { let y = t.segment_mean(v[0], 2, &[1, 0, 1, 1], 2)?; weighted_sum(t, y, seed) });
        let z = rand_tensor(&mut rng, &[2, 1, 4]);
        assert_grad(&[x.clone(), z], |t, v| { let y = t.concat(&[v[0], v[1]], 1)?; weighted_sum(t, y, seed) });
        assert_grad(&[x], |t, v| { let y = t.logsumexp_last(v[0])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn linear_params(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        assert_grad(&[x, w, b], |t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn batch_norm_train_and_eval(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x = rand_tensor(&mut rng, &[5, 3]);
        let g = rand_tensor(&mut rng, &[3]);
        let b = rand_tensor(&mut rng, &[3]);
        assert_grad(&[x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?;
            weighted_sum(t, y, seed)
        });
        assert_grad(&[x, g, b], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Fixed { mean: &[0.1, -0.2, 0.3], var: &[1.0, 0.5, 2.0] })?;
            weighted_sum(t, y, seed)
        });
    }

    #[test]
    fn cross_entropy_and_conv(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let logits = rand_tensor(&mut rng, &[3, 4]);
        let mut y = Tensor::zeros(&[3, 4]);
        for r in 0..3 { y.set(&[r, (seed as usize + r) % 4], 1.0); }
        assert_grad(&[logits], |t, v| t.softmax_cross_entropy(v[0], &y));
        let x = rand_tensor(&mut rng, &[2, 4, 2, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        assert_grad(&[x, w], |t, v| { let y = t.temporal_conv(v[0], v[1])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn tanh_open_interval(x in -1e3f64..1e3) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_vec(vec![x]));
        let y = t.tanh(v).unwrap();
        let out = t.value(y).item();
        prop_assert!(out.abs() <= 1.0);
        if x.abs() < 15.0 { prop_assert!(out.abs() < 1.0); }
    }

    #[test]
    fn matmul_identity_exact(seed in any::<u64>(), m in 1usize..6, k in 1usize..6) {
        let mut rng = RngState::new(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let iv = t.constant(Tensor::eye(k));
        let y = t.matmul(av, iv).unwrap();
        prop_assert_eq!(t.value(y).data(), a.data());
    }
}

#[test]
fn gradient_additivity_over_independent_subgraphs() {
    let mut rng = RngState::new(3);
    let a = rng.uniform_tensor(&[4], 2.0);
    let b = rng.uniform_tensor(&[3], 2.0);

    let grads = |use_a: bool, use_b: bool| {
        let mut t = Tape::new();
        let va = t.param(a.clone());
        let vb = t.param(b.clone());
        let fa = t.tanh(va).unwrap();
        let fa = t.sum_all(fa).unwrap();
        let fb = t.mul(vb, vb).unwrap();
        let fb = t.sum_all(fb).unwrap();
        let loss = match (use_a, use_b) {
            (true, true) => t.add(fa, fb).unwrap(),
            (true, false) => fa,
            _ => fb,
        };
        t.backward(loss).unwrap();
        (t.grad(va).map(<[f64]>::to_vec), t.grad(vb).map(<[f64]>::to_vec))
    };
    let (ga, gb) = grads(true, true);
    let (ga_only, _) = grads(true, false);
    let (_, gb_only) = grads(false, true);
    assert_eq!(ga, ga_only);
    assert_eq!(gb, gb_only);
}

#[test]
fn matmul_sum_gradient_is_b_transpose_broadcast() {
    let a = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
    let b = Tensor::new(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
    let mut t = Tape::new();
    let va = t.param(a.clone());
    let vb = t.constant(b.clone());
    let c = t.matmul(va, vb).unwrap();
    let s = t.sum_all(c).unwrap();
    t.backward(s).unwrap();
    // d sum(AB) / dA[i,p] = sum_j B[p,j]
    let row_sums: Vec<f64> = (0..3).map(|p| b.at(&[p, 0]) + b.at(&[p, 1])).collect();
    let expect: Vec<f64> = (0..2).flat_map(|_| row_sums.clone()).collect();
    assert_eq!(t.grad(va).unwrap(), &expect[..]);
    let r = check_tensor_fn(&[a, b], DEFAULT_STEP, DEFAULT_FLOOR, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum_all(c)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL);
}
