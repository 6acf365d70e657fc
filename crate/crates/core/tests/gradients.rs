mod common;

use gmatch::diff::{lstm_cell, LstmVars, ParamSet, Shape, Tape, Tensor, Var};
use gmatch::graph::{EntityId, RelationId, Triple};
use gmatch::rng;
use gmatch::trainer::{episode_loss, Episode};
use rand::Rng as _;

/// Central-difference check of d loss / d x where `build` maps the input
/// vector (as a parameter) to a scalar loss.
fn check_input_grad(x0: &[f64], step: f64, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut params = ParamSet::new();
    let id = params.add("x", Tensor::vector(x0.to_vec()), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(id, &params).unwrap();
    let loss = build(&mut tape, x);
    tape.backward(loss, &mut params).unwrap();
    let analytic = params.get(id).grad.clone();
    let f = |v: Vec<f64>| {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(v), true).unwrap();
        let mut t = Tape::new();
        let x = t.param(id, &ps).unwrap();
        let l = build(&mut t, x);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let (mut up, mut down) = (x0.to_vec(), x0.to_vec());
        up[i] += step;
        down[i] -= step;
        let numeric = (f(up) - f(down)) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn cosine_against_constant() {
    for seed in 0..10 {
        let y = Tensor::vector(random_vec(seed + 100, 8));
        let err = check_input_grad(&random_vec(seed, 8), 1e-4, |t, x| {
            let c = t.constant(y.clone()).unwrap();
            t.cosine(x, c).unwrap()
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_and_affine_ops() {
    let w = Tensor::matrix(3, 6, random_vec(7, 18)).unwrap();
    let b = Tensor::vector(random_vec(8, 3));
    let other = Tensor::vector(random_vec(9, 6));
    let err = check_input_grad(&random_vec(1, 6), 1e-5, |t, x| {
        let wv = t.constant(w.clone()).unwrap();
        let bv = t.constant(b.clone()).unwrap();
        let o = t.constant(other.clone()).unwrap();
        let m = t.mul(x, o).unwrap();
        let s = t.sigmoid(m).unwrap();
        let a = t.add(s, x).unwrap();
        let y = t.affine(wv, a, Some(bv)).unwrap();
        let y = t.tanh(y).unwrap();
        let z = t.concat(y, x).unwrap();
        let z = t.slice(z, 1, 6).unwrap();
        let ones = t.constant(Tensor::vector(vec![1.0; 6])).unwrap();
        t.cosine(z, ones).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn lstm_cell_inputs() {
    let h = 3;
    let wi = Tensor::matrix(4 * h, 4, random_vec(11, 16 * h)).unwrap();
    let wr = Tensor::matrix(4 * h, 5, random_vec(12, 20 * h)).unwrap();
    let bias = Tensor::vector(random_vec(13, 4 * h));
    let rec = Tensor::vector(random_vec(14, 5));
    let c0 = Tensor::vector(random_vec(15, h));
    let err = check_input_grad(&random_vec(2, 4), 1e-5, |t, x| {
        let vars = LstmVars {
            w_input: t.constant(wi.clone()).unwrap(),
            w_recurrent: t.constant(wr.clone()).unwrap(),
            bias: t.constant(bias.clone()).unwrap(),
        };
        let r = t.constant(rec.clone()).unwrap();
        let c = t.constant(c0.clone()).unwrap();
        let (hn, cn) = lstm_cell(t, x, r, c, &vars).unwrap();
        let both = t.concat(hn, cn).unwrap();
        let ones = t.constant(Tensor::vector(vec![0.5; 2 * h])).unwrap();
        t.cosine(both, ones).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mean_rows_gradient() {
    let mut params = ParamSet::new();
    let id = params.add("m", Tensor::matrix(3, 2, random_vec(3, 6)).unwrap(), true).unwrap();
    let mut tape = Tape::new();
    let m = tape.param(id, &params).unwrap();
    let mean = tape.mean_rows(m).unwrap();
    let target = tape.constant(Tensor::vector(vec![0.3, -0.2])).unwrap();
    let loss = tape.cosine(mean, target).unwrap();
    tape.backward(loss, &mut params).unwrap();
    let g = &params.get(id).grad;
    for row in 1..3 {
        assert_eq!(g[0], g[2 * row]);
        assert_eq!(g[1], g[2 * row + 1]);
    }
    assert_eq!(tape.shape(mean), Shape::Vector(2));
}

#[test]
fn unrelated_param_gets_zero_grad() {
    let mut params = ParamSet::new();
    let a = params.add("a", Tensor::vector(vec![0.5, 0.1]), true).unwrap();
    let b = params.add("b", Tensor::vector(vec![2.0]), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(a, &params).unwrap();
    let _unused = tape.param(b, &params).unwrap();
    let y = tape.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
    let loss = tape.cosine(x, y).unwrap();
    tape.backward(loss, &mut params).unwrap();
    assert_eq!(params.get(b).grad, vec![0.0]);
}

#[test]
fn matcher_composite_small_run() {
    let report = common::gradient_check(3, 7);
    assert_eq!(report.max_rel.len(), 7);
    for (group, err) in report.max_rel {
        assert!(err < 1e-4, "{group}: {err}");
    }
}

#[test]
fn satisfied_margin_gives_zero_gradient() {
    let (mut m, g) = common::small_setup(common::cfg(8, 8, 2), 3);
    let rel = RelationId(0);
    let t = |h: u32, tl: u32| Triple::new(EntityId(h), rel, EntityId(tl));
    let ep = Episode {
        relation: rel,
        reference: t(1, 2),
        positives: vec![t(3, 4), t(5, 6)],
        negatives: vec![t(3, 8), t(5, 9)],
    };
    // cosine scores differ by at most 2, so a negative margin of -2 is always met
    m.params.zero_grads();
    let loss = episode_loss(&mut m, &g, &ep, -2.0, &mut rng::seeded(0), true).unwrap();
    assert_eq!(loss, 0.0);
    assert!(m.params.iter().all(|(_, p)| p.grad.iter().all(|&x| x == 0.0)));
}
