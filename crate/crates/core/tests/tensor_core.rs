mod common;

use common::{probe, rand_array};
use rwsa_core::tensor::gradcheck::check;
use rwsa_core::tensor::optim::AdamW;
use rwsa_core::tensor::{Array, Graph, ParamStore};
use rwsa_core::Error;

fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
    Array::new(shape, data.to_vec()).unwrap()
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut ps = ParamStore::<f64>::new();
    let p = ps.register("p", arr(&[3], &[0.5, -1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let v = g.param(&ps, p);
    let s = g.sum(&v).unwrap();
    let grads = g.backward(&s).unwrap();
    assert_eq!(grads.param(p).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut ps = ParamStore::<f64>::new();
    let p = ps.register("p", arr(&[2], &[1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let v = g.param(&ps, p);
    let sq = g.mul(&v, &v).unwrap();
    let s = g.sum(&sq).unwrap();
    assert_eq!(g.backward(&s).unwrap().param(p).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn random_five_node_graph_matches_finite_differences() {
    for seed in 0..5 {
        let inputs = vec![rand_array(&[3, 4], seed), rand_array(&[3, 4], seed + 10), rand_array(&[2, 4], seed + 20)];
        let rep = check(
            |g, v| {
                let a = g.mul(&v[0], &v[1])?;
                let b = g.tanh(&a)?;
                let c = g.linear(&b, &v[2], None)?;
                let d = g.sin(&c)?;
                let e = g.add(&d, &c)?;
                probe(g, &e, seed)
            },
            &inputs,
            1e-5,
            64,
            seed,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "seed {seed}: {rep:?}");
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let inputs = vec![rand_array(&[1, 3, 4], 1), rand_array(&[1, 4, 2], 2)];
    let rep = check(|g, v| {
        let y = g.bmm(&v[0], &v[1], false)?;
        probe(g, &y, 3)
    }, &inputs, 1e-5, 64, 0)
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn elementwise_and_layout_ops_match_finite_differences() {
    type Op = fn(&mut Graph<f64>, &rwsa_core::tensor::Var<f64>) -> rwsa_core::Result<rwsa_core::tensor::Var<f64>>;
    let ops: Vec<(&str, Op)> = vec![
        ("exp", |g, x| g.exp(x)),
        ("square", |g, x| g.square(x)),
        ("cos", |g, x| g.cos(x)),
        ("mean", |g, x| g.mean(x)),
        ("flip", |g, x| g.flip(x, 1)),
        ("pad", |g, x| g.pad(x, 2, 1, 2)),
        ("slice", |g, x| g.slice(x, 2, 1, 2)),
        ("permute", |g, x| g.permute(x, &[2, 0, 1])),
        ("reshape", |g, x| g.reshape(x, &[6, 4])),
        ("concat", |g, x| g.concat(&[x, x], 1)),
        ("softmax", |g, x| g.softmax(x)),
    ];
    for (i, (name, op)) in ops.into_iter().enumerate() {
        let rep = check(|g, v| {
            let y = op(g, &v[0])?;
            probe(g, &y, i as u64)
        }, &[rand_array(&[2, 3, 4], 30 + i as u64)], 1e-5, 24, i as u64)
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{name}: {rep:?}");
    }
}

#[test]
fn reusing_a_subgraph_doubles_its_gradient() {
    let x = rand_array(&[4], 5);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let t = g.tanh(&v).unwrap();
    let once = g.sum(&t).unwrap();
    let g1 = g.backward(&once).unwrap().wrt(&v).unwrap().clone();
    let twice = g.add(&t, &t).unwrap();
    let s2 = g.sum(&twice).unwrap();
    let g2 = g.backward(&s2).unwrap().wrt(&v).unwrap().clone();
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn tie_shares_storage_and_sums_gradients() {
    let mut ps = ParamStore::<f64>::new();
    let w = ps.register("a.w", arr(&[2], &[1.0, -2.0])).unwrap();
    ps.tie(w, "b.w", &[2]).unwrap();
    let plus_one = ps.value(w).map(|v| v + 1.0);
    ps.write("a.w", plus_one).unwrap();
    assert_eq!(ps.read("b.w").unwrap().data(), &[2.0, -1.0]);
    ps.write("b.w", arr(&[2], &[0.5, 0.25])).unwrap();
    assert_eq!(ps.read("a.w").unwrap().data(), &[0.5, 0.25]);

    // loss = Σ a.w² + Σ 3·b.w  →  grad = 2w + 3
    let mut g = Graph::new();
    let a = g.param(&ps, ps.resolve("a.w").unwrap());
    let b = g.param(&ps, ps.resolve("b.w").unwrap());
    let f = g.square(&a).unwrap();
    let h = g.scale(&b, 3.0).unwrap();
    let fs = g.sum(&f).unwrap();
    let hs = g.sum(&h).unwrap();
    let loss = g.add(&fs, &hs).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[4.0, 3.5]);
}

#[test]
fn tie_rejects_shape_mismatch() {
    let mut ps = ParamStore::<f64>::new();
    let w = ps.register("w", Array::zeros(&[2, 3])).unwrap();
    assert!(matches!(ps.tie(w, "v", &[3, 2]), Err(Error::Shape { .. })));
}

#[test]
fn tied_sites_stay_identical_through_optimizer_steps() {
    let mut ps = ParamStore::<f64>::new();
    let w = ps.register("enc.w", rand_array(&[3], 8)).unwrap();
    ps.tie(w, "dec.w", &[3]).unwrap();
    let mut opt = AdamW::new(1e-2);
    for step in 0..20 {
        let mut g = Graph::new();
        let a = g.param(&ps, ps.resolve("enc.w").unwrap());
        let b = g.param(&ps, ps.resolve("dec.w").unwrap());
        let p = g.mul(&a, &b).unwrap();
        let s = g.sin(&p).unwrap();
        let loss = g.sum(&s).unwrap();
        let grads = g.backward(&loss).unwrap().into_params();
        opt.step(&mut ps, &grads);
        assert_eq!(ps.read("enc.w").unwrap(), ps.read("dec.w").unwrap(), "step {step}");
    }
}

#[test]
fn flip_is_an_involution() {
    let x = rand_array(&[2, 5, 3], 9);
    let mut g = Graph::<f64>::inference();
    let v = g.constant(x.clone());
    let f = g.flip(&v, 1).unwrap();
    assert_ne!(f.value(), &x);
    let ff = g.flip(&f, 1).unwrap();
    assert_eq!(ff.value(), &x);
}

#[test]
fn grid_to_sequence_reshape_round_trips_bit_exactly() {
    // [B,C,T,F] -> [B·F,T,C] -> back
    let x = rand_array(&[2, 3, 4, 5], 10);
    let mut g = Graph::<f64>::inference();
    let v = g.constant(x.clone());
    let p = g.permute(&v, &[0, 3, 2, 1]).unwrap();
    let s = g.reshape(&p, &[10, 4, 3]).unwrap();
    let back = g.reshape(&s, &[2, 5, 4, 3]).unwrap();
    let back = g.permute(&back, &[0, 3, 2, 1]).unwrap();
    assert_eq!(back.value(), &x);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(Array::zeros(&[2, 3]));
    let b = g.constant(Array::zeros(&[3, 2]));
    assert!(matches!(g.add(&a, &b), Err(Error::Shape { .. })));
    assert!(matches!(g.reshape(&a, &[4]), Err(Error::Shape { .. })));
    // Only scalar-with-array and trailing-axis broadcasting.
    let lead = g.constant(Array::zeros(&[2]));
    assert!(g.add(&a, &lead).is_err());
    let trail = g.constant(Array::zeros(&[3]));
    assert_eq!(g.add(&a, &trail).unwrap().shape(), &[2, 3]);
}

#[test]
fn backward_needs_a_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Array::zeros(&[2]));
    let y = g.exp(&x).unwrap();
    assert!(matches!(g.backward(&y), Err(Error::NonScalarRoot(_))));
}

#[test]
fn non_finite_forward_is_an_error_with_the_op_tag() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(arr(&[2], &[1.0, -1.0]));
    match g.ln(&x) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "ln"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(rand_array(&[4, 8], 11).cast());
        let w = g.constant(rand_array(&[6, 8], 12).cast());
        let y = g.linear(&x, &w, None).unwrap();
        let y = g.softmax(&y).unwrap();
        y.value().data().to_vec()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
