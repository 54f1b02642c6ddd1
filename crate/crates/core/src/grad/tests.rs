use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::check::check_gradients;
use super::*;

fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor2 {
    Tensor2::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// `sum(out ⊙ weights)` so every output element gets a distinct upstream grad.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(out).shape();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, r, c));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

#[test]
fn sum_gives_ones() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), true);
    let loss = tape.sum(a).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap(), &Tensor2::filled(2, 2, 1.0));
}

#[test]
fn sum_of_matmul_closed_form() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(1);
    let av = random(&mut rng, 3, 4);
    let bv = random(&mut rng, 4, 2);
    let mut tape = Tape::new();
    let a = tape.leaf(av, true);
    let b = tape.leaf(bv.clone(), true);
    let m = tape.matmul(a, b).unwrap();
    let loss = tape.sum(m).unwrap();
    let g = tape.backward(loss).unwrap();
    let expected = matmul(&Tensor2::filled(3, 2, 1.0), &bv.transpose()).unwrap();
    assert!(crate::linalg::max_rel_diff(g.get(a).unwrap(), &expected).unwrap() < 1e-15);
}

use crate::linalg::matmul;

#[test]
fn kron_grad_with_identity_factor() {
    let p = 3;
    let mut rng = Xoshiro256StarStar::seed_from_u64(2);
    let mut tape = Tape::new();
    let a = tape.leaf(random(&mut rng, 2, 2), true);
    let b = tape.constant(Tensor2::identity(p));
    let w = tape.kron(a, b).unwrap();
    let gmat = tape.constant(Tensor2::identity(2 * p));
    let prod = tape.mul(w, gmat).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap(), &Tensor2::identity(2).scale(p as f64));
}

#[test]
fn kron_grad_zero_a() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor2::zeros(2, 3), true);
    let b = tape.leaf(random(&mut rng, 2, 2), true);
    let w = tape.kron(a, b).unwrap();
    let loss = weighted_sum(&mut tape, w, 4).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(b).unwrap(), &Tensor2::zeros(2, 2));
}

#[test]
fn kron_small_case_matches_finite_differences() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    let inputs = vec![random(&mut rng, 2, 2), random(&mut rng, 3, 2)];
    let res = check_gradients(&inputs, |t, v| {
        let w = t.kron(v[0], v[1])?;
        weighted_sum(t, w, 6)
    })
    .unwrap();
    assert!(res.iter().all(|c| c.passes(1e-6)), "{res:?}");
}

#[test]
fn gelu_values() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    // Φ(1) = 0.841344746068542948585232545632... (high-precision reference)
    assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    assert!((gelu_scalar(1.0) - 0.8413447).abs() < 1e-7);
}

#[test]
fn layer_norm_of_constant_rows_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor2::filled(2, 4, 3.0));
    let g = tape.constant(Tensor2::filled(1, 4, 1.0));
    let y = tape.layer_norm(x, g, None).unwrap();
    assert_eq!(tape.value(y), &Tensor2::zeros(2, 4));
    let empty = tape.constant(Tensor2::zeros(2, 0));
    let g0 = tape.constant(Tensor2::zeros(1, 0));
    assert!(matches!(tape.layer_norm(empty, g0, None), Err(GradError::Invalid { .. })));
}

#[test]
fn softmax_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor2::filled(2, 5, 0.7));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_limit() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor2::from_rows(&[[800.0, 0.0, 0.0], [0.0, 0.0, 800.0]]));
    let l = tape.cross_entropy(x, &[0, 2]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
    assert!(tape.cross_entropy(x, &[0, 3]).is_err());
    assert!(tape.cross_entropy(x, &[0]).is_err());
}

#[test]
fn non_scalar_and_detached_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor2::zeros(2, 2), true);
    assert_eq!(
        tape.backward(a).unwrap_err(),
        GradError::NonScalarLoss { rows: 2, cols: 2 }
    );
    let c = tape.constant(Tensor2::zeros(2, 2));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(GradError::Detached(_))));

    let mut other = Tape::new();
    let o = other.leaf(Tensor2::zeros(1, 1), true);
    assert!(matches!(tape.backward(o), Err(GradError::Detached(_))));
}

#[test]
fn frozen_leaves_get_no_grad() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor2::filled(2, 2, 1.0), true);
    let b = tape.leaf(Tensor2::filled(2, 2, 2.0), false);
    let m = tape.matmul(a, b).unwrap();
    let loss = tape.sum(m).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(b).is_none());
    assert!(g.get(m).is_none());
}

#[test]
fn backward_is_deterministic() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(7);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, 4, 6), true);
    let w = tape.leaf(random(&mut rng, 6, 6), true);
    let g = tape.leaf(random(&mut rng, 1, 6), true);
    let h = tape.matmul(x, w).unwrap();
    let h = tape.gelu(h).unwrap();
    let h = tape.layer_norm(h, g, None).unwrap();
    let loss = tape.cross_entropy(h, &[0, 1, 2, 3]).unwrap();
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    for v in [x, w, g] {
        let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn shared_leaf_accumulates_per_use_gradients() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(8);
    let wv = random(&mut rng, 3, 3);
    let xv = random(&mut rng, 2, 3);

    // shared: loss = Σ gelu(x·W)·W weighted
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let w = tape.leaf(wv.clone(), true);
    let h = tape.matmul(x, w).unwrap();
    let h = tape.gelu(h).unwrap();
    let h = tape.matmul(h, w).unwrap();
    let loss = weighted_sum(&mut tape, h, 9).unwrap();
    let shared = tape.backward(loss).unwrap().get(w).unwrap().clone();

    // cloned per use, then summed by hand
    let mut tape = Tape::new();
    let x = tape.constant(xv);
    let w1 = tape.leaf(wv.clone(), true);
    let w2 = tape.leaf(wv, true);
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.gelu(h).unwrap();
    let h = tape.matmul(h, w2).unwrap();
    let loss = weighted_sum(&mut tape, h, 9).unwrap();
    let g = tape.backward(loss).unwrap();
    let summed = g.get(w1).unwrap().add(g.get(w2).unwrap()).unwrap();
    assert!(crate::linalg::max_rel_diff(&shared, &summed).unwrap() < 1e-14);
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(10);
    for trial in 0..5 {
        let inputs = vec![
            random(&mut rng, 4, 6),
            random(&mut rng, 6, 4),
            random(&mut rng, 1, 4),
            random(&mut rng, 1, 4),
        ];
        let res = check_gradients(&inputs, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[3])?;
            let h = t.layer_norm(h, v[2], Some(v[3]))?;
            let h = t.gelu(h)?;
            let s = t.softmax(h)?;
            let h = t.sub(h, s)?;
            let h = t.scale(h, 1.7)?;
            let ht = t.transpose(h)?;
            let h = t.matmul(ht, h)?;
            t.cross_entropy(h, &[0, 1, 2, 3])
        })
        .unwrap();
        for c in &res {
            assert!(c.passes(1e-5), "trial {trial}: {c:?}");
        }
    }
}

#[test]
fn phm_ops_match_finite_differences() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(11);
    let n = 2;
    let inputs = vec![
        random(&mut rng, 3, 4),         // x, k = 4
        random(&mut rng, n * n, n),     // A stack
        random(&mut rng, n * 2, 1),     // s stack (p = 2, r = 1)
        random(&mut rng, n, 3),         // t stack (q = 3)
    ];
    let res = check_gradients(&inputs, |t, v| {
        let b = t.block_matmul(v[2], v[3], n)?;
        let y = t.phm_linear(v[0], v[1], b, n)?;
        let w = t.sum_kron(v[1], b, n)?;
        let y2 = t.matmul(v[0], w)?;
        let z = t.mul(y, y2)?;
        weighted_sum(t, z, 12)
    })
    .unwrap();
    for c in &res {
        assert!(c.passes(1e-5), "{c:?}");
    }
}

#[test]
fn attention_and_pool_match_finite_differences() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(13);
    let (batch, seq, heads) = (2, 3, 2);
    let inputs = vec![
        random(&mut rng, batch * seq, 4),
        random(&mut rng, batch * seq, 4),
        random(&mut rng, batch * seq, 4),
    ];
    let bias = random(&mut rng, heads * seq, seq);
    let res = check_gradients(&inputs, |t, v| {
        let o = t.attention(v[0], v[1], v[2], batch, seq, heads, Some(&bias))?;
        let p = t.mean_pool(o, seq)?;
        weighted_sum(t, p, 14)
    })
    .unwrap();
    for c in &res {
        assert!(c.passes(1e-5), "{c:?}");
    }
}
