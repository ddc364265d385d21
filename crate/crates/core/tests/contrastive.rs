use proptest::prelude::*;

use psp::ccl::{ccl_total, ntxent, PairProjector};
use psp::nn::{Ctx, Mode, ParamStore};
use psp::ppa::{Level, Levels};
use psp::{RngState, Tape, Tensor};

/// Plain double loop: cosine similarities, every other row in the
/// denominator (positive included), mean over all `2M` anchors.
fn ntxent_reference(u: &Tensor, tau: f64) -> f64 {
    let (rows, dim) = (u.shape()[0], u.shape()[1]);
    let half = rows / 2;
    let row = |i: usize| &u.data()[i * dim..(i + 1) * dim];
    let sim = |i: usize, k: usize| {
        let (a, b) = (row(i), row(k));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..rows {
        let pos = (i + half) % rows;
        let mut den = 0.0;
        for k in 0..rows {
            if k != i {
                den += (sim(i, k) / tau).exp();
            }
        }
        total += -((sim(i, pos) / tau).exp() / den).ln();
    }
    total / rows as f64
}

fn loss(u: &Tensor, tau: f64) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(u.clone());
    let l = ntxent(&mut t, v, tau).unwrap();
    t.value(l).item()
}

#[test]
fn matches_brute_force_reference() {
    let mut rng = RngState::new(21);
    let taus = [0.07, 0.5, 1.0];
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let m = 1 + (rng.next_u64() % 8) as usize;
        let dim = 1 + (rng.next_u64() % 16) as usize;
        let tau = taus[case % 3];
        let u = rng.uniform_tensor(&[2 * m, dim], 2.0);
        worst = worst.max((loss(&u, tau) - ntxent_reference(&u, tau)).abs());
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn worked_example() {
    // e1, e2 repeated in the motion half; each anchor sees its positive at
    // similarity 1 and two orthogonal rows
    let u = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let e = 1f64.exp();
    let want = -(e / (e + 2.0)).ln();
    assert!((loss(&u, 1.0) - want).abs() < 1e-14);
}

#[test]
fn single_pair_is_exactly_zero() {
    let mut rng = RngState::new(22);
    for tau in [0.07, 0.5, 1.0] {
        let u = rng.uniform_tensor(&[2, 5], 1.0);
        assert_eq!(loss(&u, tau), 0.0);
    }
}

#[test]
fn zero_row_is_rejected() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
    assert!(ntxent(&mut t, v, 0.5).is_err());
}

#[test]
fn single_level_total_equals_that_level() {
    let mut rng = RngState::new(23);
    let mut store = ParamStore::new();
    let projectors = Levels::from_fn(|l| PairProjector::new(&mut store, &format!("p.{}", l.name()), 4, 6, &mut rng));
    let nodes = [(Level::Body, 2), (Level::Part, 4), (Level::Joint, 6)];
    let feats: Vec<Tensor> = nodes.iter().map(|&(_, n)| rng.uniform_tensor(&[6, 4, 3, n], 1.0)).collect();
    for (li, &(level, _)) in nodes.iter().enumerate() {
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vars: Vec<_> = feats.iter().map(|f| ctx.tape.constant(f.clone())).collect();
        let features = Levels {
            body: Some(vars[0]),
            part: Some(vars[1]),
            joint: Some(vars[2]),
        };
        let out = ccl_total(&mut ctx, &projectors, &features, &[level], 0.07).unwrap();
        let total = ctx.tape.value(out.total.unwrap()).item();
        let z = projectors.get(level).forward(&mut ctx, vars[li]).unwrap();
        let direct = ntxent(&mut ctx.tape, z, 0.07).unwrap();
        assert_eq!(total.to_bits(), ctx.tape.value(direct).item().to_bits());
        for other in Level::ALL {
            assert_eq!(out.per_level.get(other).is_some(), other == level);
        }
    }
}

/// Orthonormal layout with a tunable positive similarity: anchor `i` is `e_i`,
/// its partner is `cos(theta) e_i + sin(theta) e_{M+i}`. Every negative pair
/// stays orthogonal whatever `theta` is.
fn probe(m: usize, theta: f64) -> Tensor {
    let dim = 2 * m;
    let mut u = Tensor::zeros(&[2 * m, dim]);
    for i in 0..m {
        u.set(&[i, i], 1.0);
        u.set(&[m + i, i], theta.cos());
        u.set(&[m + i, m + i], theta.sin());
    }
    u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_to_positive_row_scaling(seed in any::<u64>(), m in 1usize..6, dim in 1usize..10,
                                         tau in prop::sample::select(vec![0.07, 0.5, 1.0])) {
        let mut rng = RngState::new(seed);
        let u = rng.uniform_tensor(&[2 * m, dim], 1.0);
        prop_assume!(u.data().chunks(dim).all(|r| r.iter().any(|&x| x != 0.0)));
        let mut scaled = u.clone();
        for r in 0..2 * m {
            let s = rng.uniform(0.1, 10.0);
            for c in 0..dim {
                scaled.set(&[r, c], u.at(&[r, c]) * s);
            }
        }
        prop_assert!((loss(&u, tau) - loss(&scaled, tau)).abs() < 1e-10);
    }

    #[test]
    fn closer_positives_lower_the_loss(m in 2usize..6, a in 0.05f64..1.5, gap in 0.01f64..0.5,
                                       tau in prop::sample::select(vec![0.07, 0.5, 1.0])) {
        // smaller angle means higher positive similarity
        let near = loss(&probe(m, a), tau);
        let far = loss(&probe(m, (a + gap).min(std::f64::consts::FRAC_PI_2)), tau);
        prop_assert!(near < far);
    }
}
