use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::*;
use crate::grad::gelu_scalar;
use crate::linalg::{kron, max_rel_diff, probe, unstack_rows};
use crate::params::{check_param_gradients, StoreBuilder};

fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor2 {
    Tensor2::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random3(rng: &mut impl Rng, b: usize, s: usize, c: usize) -> Tensor3 {
    Tensor3::from_stacked(b, random(rng, b * s, c)).unwrap()
}

fn random_factors(rng: &mut impl Rng, n: usize, k: usize, d: usize, rank: Option<usize>) -> PhmFactors {
    let a = random(rng, n * n, n);
    let fast = match rank {
        None => FastWeights::Full(random(rng, k, d / n)),
        Some(r) => FastWeights::LowRank {
            s: random(rng, k, r),
            t: random(rng, n * r, d / n),
        },
    };
    PhmFactors::new(n, a, fast, random(rng, 1, d)).unwrap()
}

/// Sum-of-Kronecker oracle assembled from `kron` and `add` only.
fn kron_oracle(f: &PhmFactors) -> Tensor2 {
    let n = f.n();
    let a = unstack_rows(f.a_set(), n).unwrap();
    let b: Vec<Tensor2> = match f.fast() {
        FastWeights::Full(b) => unstack_rows(b, n).unwrap(),
        FastWeights::LowRank { s, t } => unstack_rows(s, n)
            .unwrap()
            .iter()
            .zip(unstack_rows(t, n).unwrap())
            .map(|(s, t)| matmul(s, &t).unwrap())
            .collect(),
    };
    let mut w = Tensor2::zeros(f.input_dim(), f.output_dim());
    for (ai, bi) in a.iter().zip(&b) {
        w = w.add(&kron(ai, bi)).unwrap();
    }
    w
}

/// Overwrites every trainable value in the store with uniform noise.
fn randomize_trainable(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids_by_path() {
        if store.get(id).spec.trainable {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = random(rng, r, c);
        }
    }
}

fn build_adapter(spec: &AdapterSpec, k: usize, seed: u64) -> (ParamStore, AdapterLayer) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut sink = StoreBuilder {
        store: &mut store,
        rng: &mut r,
    };
    let shared = (spec.kind == AdapterKind::Compacter).then(|| declare_shared_slow(&mut sink, spec.division));
    let layer = declare_adapter(&mut sink, "adapter", spec, k, true, shared).unwrap();
    (store, layer)
}

#[test]
fn materialize_n1_is_b() {
    let mut r = rng(1);
    let b = random(&mut r, 3, 5);
    let f = PhmFactors::new(1, Tensor2::identity(1), FastWeights::Full(b.clone()), Tensor2::zeros(1, 5)).unwrap();
    assert_eq!(materialize_w(&f).unwrap(), b);
}

#[test]
fn materialize_zero_a_is_zero() {
    let mut r = rng(2);
    let f = PhmFactors::new(2, Tensor2::zeros(4, 2), FastWeights::Full(random(&mut r, 4, 3)), Tensor2::zeros(1, 6)).unwrap();
    assert_eq!(materialize_w(&f).unwrap(), Tensor2::zeros(4, 6));
}

#[test]
fn materialize_matches_kron_oracle() {
    let mut r = rng(3);
    for rank in [None, Some(1), Some(2)] {
        let f = random_factors(&mut r, 2, 4, 4, rank);
        let w = materialize_w(&f).unwrap();
        assert!(max_rel_diff(&w, &kron_oracle(&f)).unwrap() < 1e-14);
    }
}

#[test]
fn factor_validation() {
    let a = Tensor2::zeros(9, 3);
    // k=8 not divisible by n=3
    let bad = PhmFactors::new(3, a.clone(), FastWeights::Full(Tensor2::zeros(8, 2)), Tensor2::zeros(1, 6));
    assert!(matches!(bad, Err(LayerError::Divisibility { k: 8, d: 6, n: 3 })));
    // rank 3 > min(k/n, d/n) = 2
    let bad = PhmFactors::new(
        3,
        a,
        FastWeights::LowRank {
            s: Tensor2::zeros(6, 3),
            t: Tensor2::zeros(9, 2),
        },
        Tensor2::zeros(1, 6),
    );
    assert!(matches!(bad, Err(LayerError::Rank { r: 3, max: 2 })));
    let spec = AdapterSpec::new(AdapterKind::Phm, 4, 3);
    assert!(matches!(spec.validate(8), Err(LayerError::Divisibility { k: 8, d: 4, n: 3 })));
    assert!(AdapterSpec::new(AdapterKind::LowRank, 4, 1).with_rank(0).validate(8).is_err());
}

#[test]
fn phm_apply_zero_input_gives_bias() {
    let mut r = rng(4);
    let f = random_factors(&mut r, 2, 4, 6, None);
    let y = phm_apply(&f, &Tensor3::zeros(2, 3, 4)).unwrap();
    for b in 0..2 {
        for i in 0..3 {
            for j in 0..6 {
                assert_eq!(y.get(b, i, j), f.bias().get(0, j));
            }
        }
    }
}

#[test]
fn phm_apply_identity() {
    let mut r = rng(5);
    let f = PhmFactors::new(1, Tensor2::identity(1), FastWeights::Full(Tensor2::identity(5)), Tensor2::zeros(1, 5)).unwrap();
    let x = random3(&mut r, 2, 3, 5);
    assert_eq!(phm_apply(&f, &x).unwrap(), x);
}

#[test]
fn phm_apply_rejects_wrong_width() {
    let mut r = rng(6);
    let f = random_factors(&mut r, 2, 4, 4, None);
    assert!(matches!(
        phm_apply(&f, &Tensor3::zeros(1, 2, 6)),
        Err(LayerError::InputDim { got: 6, expected: 4 })
    ));
}

#[test]
fn phm_apply_matches_materialization_grid() {
    let mut r = rng(7);
    for &k in &[4, 8, 12] {
        for &d in &[4, 8, 12] {
            for &n in &[1, 2, 4] {
                if k % n != 0 || d % n != 0 {
                    continue;
                }
                for rank in [None, Some(1), Some(2)] {
                    if rank.is_some_and(|r| r > (k / n).min(d / n)) {
                        continue;
                    }
                    let f = random_factors(&mut r, n, k, d, rank);
                    let x = random3(&mut r, 2, 3, k);
                    let y = phm_apply(&f, &x).unwrap().into_stacked();
                    let w = materialize_w(&f).unwrap();
                    let oracle = matmul(&x.to_stacked(), &w).unwrap().add_row(f.bias()).unwrap();
                    let err = max_rel_diff(&y, &oracle).unwrap();
                    assert!(err < 1e-12, "k={k} d={d} n={n} rank={rank:?}: {err}");
                }
            }
        }
    }
}

#[test]
fn phm_apply_never_allocates_full_weight() {
    let mut r = rng(8);
    let (k, d, n) = (12, 8, 4);
    let f = random_factors(&mut r, n, k, d, Some(2));
    let x = random3(&mut r, 1, 3, k);
    let (y, stats) = probe::track(|| phm_apply(&f, &x).unwrap());
    assert_eq!(y.cols(), d);
    assert!(!stats.saw_shape(k, d), "{:?}", stats.shapes);
    let (_, stats) = probe::track(|| materialize_w(&f).unwrap());
    assert!(stats.saw_shape(k, d));
}

#[test]
fn adapters_are_identity_at_init() {
    let mut r = rng(9);
    let specs = [
        AdapterSpec::new(AdapterKind::Dense, 4, 1),
        AdapterSpec::new(AdapterKind::LowRank, 4, 1),
        AdapterSpec::new(AdapterKind::LowRank, 4, 1).with_rank(2),
        AdapterSpec::new(AdapterKind::Phm, 4, 2),
        AdapterSpec::new(AdapterKind::Phm, 4, 4),
        AdapterSpec::new(AdapterKind::Compacter, 4, 2),
        AdapterSpec::new(AdapterKind::Compacter, 8, 4).with_rank(2),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let (store, layer) = build_adapter(spec, 8, 100 + i as u64);
        let x = random3(&mut r, 2, 3, 8);
        assert_eq!(adapter_forward(&layer, &store, &x).unwrap(), x, "{spec:?}");
    }
}

#[test]
fn dense_identity_projections_give_gelu_plus_x() {
    let spec = AdapterSpec::new(AdapterKind::Dense, 6, 1);
    let (mut store, layer) = build_adapter(&spec, 6, 10);
    for proj in [layer.down, layer.up] {
        let ProjectionWeights::Dense { w } = proj.weights else { unreachable!() };
        *store.value_mut(w) = Tensor2::identity(6);
    }
    let mut r = rng(11);
    let x = random3(&mut r, 2, 2, 6);
    let y = adapter_forward(&layer, &store, &x).unwrap();
    let expected = x.to_stacked().map(gelu_scalar).add(&x.to_stacked()).unwrap();
    assert!(max_rel_diff(&y.into_stacked(), &expected).unwrap() < 1e-15);
}

#[test]
fn compacter_matches_dense_from_materialized_weights() {
    let mut r = rng(12);
    for (k, d, n, rank) in [(8, 4, 2, 1), (12, 8, 4, 2), (8, 8, 1, 2), (16, 8, 2, 2)] {
        let spec = AdapterSpec::new(AdapterKind::Compacter, d, n).with_rank(rank);
        let (mut store, layer) = build_adapter(&spec, k, 13);
        randomize_trainable(&mut store, &mut r);

        let dense_spec = AdapterSpec::new(AdapterKind::Dense, d, 1);
        let (mut dense_store, dense) = build_adapter(&dense_spec, k, 14);
        for (src, dst) in [(layer.down, dense.down), (layer.up, dense.up)] {
            let ProjectionWeights::Dense { w } = dst.weights else { unreachable!() };
            *dense_store.value_mut(w) = src.weight(&store).unwrap();
            *dense_store.value_mut(dst.bias) = store.value(src.bias).clone();
        }

        let x = random3(&mut r, 2, 3, k);
        let y = adapter_forward(&layer, &store, &x).unwrap().into_stacked();
        let oracle = adapter_forward(&dense, &dense_store, &x).unwrap().into_stacked();
        assert!(max_rel_diff(&y, &oracle).unwrap() < 1e-12);
    }
}

#[test]
fn lowrank_weight_is_outer_product() {
    let spec = AdapterSpec::new(AdapterKind::LowRank, 4, 1);
    let (mut store, layer) = build_adapter(&spec, 8, 15);
    randomize_trainable(&mut store, &mut rng(16));
    let ProjectionWeights::LowRank { u, v } = layer.up.weights else { unreachable!() };
    let w = layer.up.weight(&store).unwrap();
    assert_eq!(w.shape(), (4, 8));
    assert!(max_rel_diff(&w, &matmul(store.value(u), store.value(v)).unwrap()).unwrap() < 1e-15);
}

/// `B = U Σ Vᵀ` gives `s = U_r Σ_r`, `t = V_rᵀ` with `r = min(p, q)`.
fn svd_factor(b: &Tensor2) -> (Tensor2, Tensor2) {
    let (p, q) = b.shape();
    let m = DMatrix::from_row_slice(p, q, b.data());
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let r = p.min(q);
    let s = Tensor2::from_fn(p, r, |i, j| u[(i, j)] * svd.singular_values[j]);
    let t = Tensor2::from_fn(r, q, |i, j| vt[(i, j)]);
    (s, t)
}

#[test]
fn lphm_at_full_rank_reproduces_phm() {
    let mut r = rng(17);
    for (n, k, d) in [(2, 4, 8), (2, 8, 4), (4, 8, 12), (1, 6, 4), (4, 16, 16)] {
        let phm = random_factors(&mut r, n, k, d, None);
        let FastWeights::Full(b) = phm.fast() else { unreachable!() };
        let (mut s_parts, mut t_parts) = (Vec::new(), Vec::new());
        for bi in unstack_rows(b, n).unwrap() {
            let (s, t) = svd_factor(&bi);
            s_parts.push(s);
            t_parts.push(t);
        }
        let lphm = PhmFactors::new(
            n,
            phm.a_set().clone(),
            FastWeights::LowRank {
                s: linalg::stack_rows(&s_parts).unwrap(),
                t: linalg::stack_rows(&t_parts).unwrap(),
            },
            phm.bias().clone(),
        )
        .unwrap();
        assert_eq!(lphm.rank(), Some((k / n).min(d / n)));
        let err = max_rel_diff(&materialize_w(&lphm).unwrap(), &materialize_w(&phm).unwrap()).unwrap();
        assert!(err < 1e-10, "n={n} k={k} d={d}: {err}");
    }
}

/// Two layers × two positions of PHM adapters, each with its own `A`.
fn phm_stack(n: usize, seed: u64) -> (ParamStore, Vec<AdapterLayer>) {
    let spec = AdapterSpec::new(AdapterKind::Phm, 4, n);
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut sink = StoreBuilder {
        store: &mut store,
        rng: &mut r,
    };
    let mut layers = Vec::new();
    for l in 0..2 {
        for pos in ["attn", "ffn"] {
            layers.push(declare_adapter(&mut sink, &format!("layer.{l}.{pos}"), &spec, 8, true, None).unwrap());
        }
    }
    (store, layers)
}

fn share(store: &mut ParamStore, layers: &mut [AdapterLayer], n: usize) -> Result<ParamId> {
    let mut handles: Vec<&mut Projection> = layers.iter_mut().flat_map(|l| [&mut l.down, &mut l.up]).collect();
    make_shared_slow_weights(store, n, &mut handles)
}

#[test]
fn shared_slow_weights_single_set() {
    let n = 2;
    let (mut store, mut layers) = phm_stack(n, 18);
    assert_eq!(store.iter().filter(|(_, p)| p.spec.path.ends_with(".a")).count(), 8);
    let a = share(&mut store, &mut layers, n).unwrap();
    let slow: Vec<_> = store.iter().filter(|(_, p)| p.spec.path.ends_with(".a")).collect();
    assert_eq!(slow.len(), 1);
    assert_eq!(slow[0].0, a);
    assert_eq!(slow[0].1.spec.numel(), n * n * n);
    assert_eq!(slow[0].1.spec.role, ParamRole::SharedSlow);
    for l in &layers {
        assert_eq!(l.down.slow_weights(), Some(a));
        assert_eq!(l.up.slow_weights(), Some(a));
        assert!(l.down.factors(&store).unwrap().is_shared());
        assert!(store.contains(match l.up.weights {
            ProjectionWeights::Phm { b, .. } => b,
            _ => unreachable!(),
        }));
    }
}

#[test]
fn shared_slow_weights_alias() {
    let n = 2;
    let (mut store, mut layers) = phm_stack(n, 19);
    let a = share(&mut store, &mut layers, n).unwrap();
    let before: Vec<Tensor2> = layers.iter().map(|l| l.down.weight(&store).unwrap()).collect();
    let replacement = random(&mut rng(20), n * n, n);
    *store.value_mut(a) = replacement.clone();
    for (l, old) in layers.iter().zip(&before) {
        let w = l.down.weight(&store).unwrap();
        assert_ne!(&w, old);
        let f = l.down.factors(&store).unwrap();
        assert_eq!(f.a_set(), &replacement);
        assert!(max_rel_diff(&w, &kron_oracle(&f)).unwrap() < 1e-14);
    }
}

#[test]
fn shared_slow_weights_errors() {
    let (mut store, mut layers) = phm_stack(2, 21);
    assert!(matches!(share(&mut store, &mut layers, 4), Err(LayerError::Sharing(_))));
    assert!(matches!(share(&mut store, &mut [], 2), Err(LayerError::Sharing(_))));
    let (mut dense_store, mut dense) = {
        let (s, l) = build_adapter(&AdapterSpec::new(AdapterKind::Dense, 4, 1), 8, 22);
        (s, vec![l])
    };
    assert!(share(&mut dense_store, &mut dense, 1).is_err());
}

fn weighted_loss(tape: &mut Tape, y: Var, seed: u64) -> std::result::Result<Var, GradError> {
    let (r, c) = tape.value(y).shape();
    let w = tape.constant(random(&mut rng(seed), r, c));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn stack_forward(
    layers: &[AdapterLayer],
    tape: &mut Tape,
    bind: &mut ParamBinding,
    store: &ParamStore,
    x: &Tensor2,
) -> Result<Var> {
    let mut h = tape.constant(x.clone());
    for l in layers {
        h = l.forward(tape, bind, store, h)?;
    }
    Ok(weighted_loss(tape, h, 23)?)
}

#[test]
fn shared_slow_gradient_is_sum_of_unshared() {
    let n = 2;
    let mut r = rng(24);
    let (mut store, mut layers) = phm_stack(n, 25);
    randomize_trainable(&mut store, &mut r);
    // unshared copies with every A set to the same value
    let common = random(&mut r, n * n, n);
    let unshared_store = {
        let mut s = store.clone();
        for l in &layers {
            for p in [l.down, l.up] {
                *s.value_mut(p.slow_weights().unwrap()) = common.clone();
            }
        }
        s
    };
    let unshared_layers = layers.clone();
    let a = share(&mut store, &mut layers, n).unwrap();
    *store.value_mut(a) = common;

    let x = random(&mut r, 5, 8);
    let grad_of = |store: &ParamStore, layers: &[AdapterLayer]| {
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new();
        let loss = stack_forward(layers, &mut tape, &mut bind, store, &x).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.scalar(loss), g, bind)
    };
    let (loss_shared, g, bind) = grad_of(&store, &layers);
    let shared_grad = g.get(bind.get(a).unwrap()).unwrap().clone();

    let (loss_unshared, g, bind) = grad_of(&unshared_store, &unshared_layers);
    assert_eq!(loss_shared, loss_unshared);
    let mut summed = Tensor2::zeros(n * n, n);
    for l in &unshared_layers {
        for p in [l.down, l.up] {
            summed.add_assign(g.get(bind.get(p.slow_weights().unwrap()).unwrap()).unwrap()).unwrap();
        }
    }
    assert!(max_rel_diff(&shared_grad, &summed).unwrap() < 1e-13);
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut r = rng(26);
    let specs = [
        AdapterSpec::new(AdapterKind::Dense, 4, 1),
        AdapterSpec::new(AdapterKind::LowRank, 4, 1),
        AdapterSpec::new(AdapterKind::Phm, 4, 2),
        AdapterSpec::new(AdapterKind::Compacter, 4, 2),
        AdapterSpec::new(AdapterKind::Compacter, 4, 4),
    ];
    for spec in &specs {
        let (mut store, layer) = build_adapter(spec, 8, 27);
        randomize_trainable(&mut store, &mut r);
        let x = random(&mut r, 3, 8);
        let res = check_param_gradients(&store, |t, b, s| stack_forward(&[layer], t, b, s, &x)).unwrap();
        assert_eq!(res.len(), store.len());
        for (id, c) in res {
            assert!(c.passes(1e-5), "{spec:?} {}: {c:?}", store.get(id).spec.path);
        }
    }
}

#[test]
fn compacter_stack_gradients_through_shared_a() {
    let mut r = rng(28);
    let spec = AdapterSpec::new(AdapterKind::Compacter, 4, 2);
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    {
        let mut sink = StoreBuilder {
            store: &mut store,
            rng: &mut r,
        };
        let a = declare_shared_slow(&mut sink, 2);
        for l in 0..3 {
            layers.push(declare_adapter(&mut sink, &format!("l{l}"), &spec, 8, true, Some(a)).unwrap());
        }
    }
    assert_eq!(store.iter().filter(|(_, p)| p.spec.role == ParamRole::SharedSlow).count(), 1);
    randomize_trainable(&mut store, &mut r);
    let x = random(&mut r, 4, 8);
    let res = check_param_gradients(&store, |t, b, s| stack_forward(&layers, t, b, s, &x)).unwrap();
    for (id, c) in res {
        assert!(c.passes(1e-5), "{}: {c:?}", store.get(id).spec.path);
    }
}

#[test]
fn compacter_without_shared_id_errors() {
    let mut store = ParamStore::new();
    let mut r = rng(29);
    let mut sink = StoreBuilder {
        store: &mut store,
        rng: &mut r,
    };
    let spec = AdapterSpec::new(AdapterKind::Compacter, 4, 2);
    assert!(matches!(
        declare_adapter(&mut sink, "x", &spec, 8, true, None),
        Err(LayerError::Sharing(_))
    ));
}

#[test]
fn kind_and_placement_names_round_trip() {
    for k in AdapterKind::ALL {
        assert_eq!(AdapterKind::parse(k.name()), Some(k));
    }
    for p in Placement::ALL {
        assert_eq!(Placement::parse(p.name()), Some(p));
    }
    assert_eq!(Placement::AfterAttnAndFfn.per_layer(), 2);
    assert_eq!(Placement::AfterFfnOnly.per_layer(), 1);
    assert!(AdapterKind::parse("bogus").is_none());
}
