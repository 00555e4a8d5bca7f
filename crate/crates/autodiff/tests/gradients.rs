use std::collections::BTreeMap;

use autodiff::{check_gradients, Array, ElementwiseFn, GradCheckOptions, Graph, NodeId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn strict() -> GradCheckOptions {
    GradCheckOptions::default()
}

/// Two-layer MLP with a log-softmax readout, touching most ops.
fn two_layer(g: &mut Graph) -> NodeId {
    let x = g.input("x");
    let w1 = g.input("w1");
    let b1 = g.input("b1");
    let w2 = g.input("w2");
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.rms_norm(h);
    let o = g.matmul(h, w2);
    let l = g.log_softmax(o);
    let p = g.pick(l, vec![(0, 1), (1, 3), (2, 0)]);
    g.sum(p)
}

#[test]
fn random_two_layer_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: BTreeMap<String, Array> = [
        ("x".to_string(), random(&mut rng, &[3, 5], 1.0)),
        ("w1".to_string(), random(&mut rng, &[5, 6], 0.7)),
        ("b1".to_string(), random(&mut rng, &[6], 0.3)),
        ("w2".to_string(), random(&mut rng, &[6, 4], 0.7)),
    ]
    .into();
    let mut g = Graph::new();
    let root = two_layer(&mut g);
    let report = check_gradients(&mut g, root, &inputs, &[], &strict()).unwrap();
    assert!(report.passed, "{report:#?}");
    assert_eq!(report.checked(), 15 + 30 + 6 + 24);
}

#[test]
fn attention_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: BTreeMap<String, Array> = [
        ("h".to_string(), random(&mut rng, &[4, 6], 1.0)),
        ("wq".to_string(), random(&mut rng, &[6, 3], 0.8)),
        ("wk".to_string(), random(&mut rng, &[6, 3], 0.8)),
        ("wv".to_string(), random(&mut rng, &[6, 3], 0.8)),
        ("table".to_string(), random(&mut rng, &[5, 3], 1.0)),
    ]
    .into();
    let mut g = Graph::new();
    let h = g.input("h");
    let wq = g.input("wq");
    let wk = g.input("wk");
    let wv = g.input("wv");
    let table = g.input("table");
    let q = g.matmul(h, wq);
    let k = g.matmul(h, wk);
    let v = g.matmul(h, wv);
    let kt = g.transpose(k);
    let s = g.matmul(q, kt);
    let s = g.scale(s, 0.5);
    let p = g.causal_softmax(s);
    let o = g.matmul(p, v);
    let e = g.gather(table, vec![0, 2, 2, 4]);
    let o = g.add(o, e);
    let c = g.concat(vec![o, e]);
    let sq = g.square(c);
    let m = g.mean(sq);
    let sp = g.softplus(m);
    let root = g.sub(sp, m);
    let report = check_gradients(&mut g, root, &inputs, &[], &strict()).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn corrupted_backward_rule_fails_the_check() {
    fn f(x: f64) -> f64 {
        x.sin()
    }
    fn wrong(x: f64) -> f64 {
        // should be cos
        -x.sin()
    }
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.map(x, ElementwiseFn { name: "bad_sin", f, df: wrong });
    let root = g.sum(y);
    let inputs: BTreeMap<String, Array> =
        [("x".to_string(), Array::vector(vec![0.3, 1.2, -0.8]))].into();
    let report = check_gradients(&mut g, root, &inputs, &[], &strict()).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.1);
}

#[test]
fn coordinate_budget_caps_the_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: BTreeMap<String, Array> = [("w".to_string(), random(&mut rng, &[40, 50], 1.0))].into();
    let mut g = Graph::new();
    let w = g.input("w");
    let t = g.gelu(w);
    let root = g.sum(t);
    let opts = GradCheckOptions {
        max_coords: 100,
        ..strict()
    };
    let report = check_gradients(&mut g, root, &inputs, &[], &opts).unwrap();
    assert!(report.passed);
    assert_eq!(report.checked(), 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_softmax_rows_exponentiate_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 7), 1..5)) {
        let a = Array::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        let l = g.log_softmax(x);
        let inputs: BTreeMap<String, Array> = [("x".to_string(), a)].into();
        let out = g.forward(l, &inputs).unwrap();
        for r in 0..out.rows() {
            let total: f64 = out.row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: BTreeMap<String, Array> = [
            ("a".to_string(), random(&mut rng, &[2, 3], 2.0)),
            ("b".to_string(), random(&mut rng, &[2, 3], 2.0)),
        ].into();
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let m = g.mul(a, b);
        let s = g.sub(m, b);
        let t = g.shift(s, 0.5);
        let u = g.gelu(t);
        let v = g.softplus(u);
        let w = g.add(v, a);
        let root = g.sum(w);
        let report = check_gradients(&mut g, root, &inputs, &[], &strict()).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn doubling_a_term_doubles_its_gradient(x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let inputs: BTreeMap<String, Array> = [
            ("x".to_string(), Array::scalar(x)),
            ("y".to_string(), Array::scalar(y)),
        ].into();
        let mut g = Graph::new();
        let xi = g.input("x");
        let yi = g.input("y");
        let f = g.mul(xi, yi);
        let f = g.gelu(f);
        g.forward(f, &inputs).unwrap();
        let once = g.backward(f).unwrap();
        let ff = g.add(f, f);
        g.forward(ff, &inputs).unwrap();
        let twice = g.backward(ff).unwrap();
        prop_assert_eq!(2.0 * once["x"].item(), twice["x"].item());
        prop_assert_eq!(2.0 * once["y"].item(), twice["y"].item());
    }
}
