//! Analytic-vs-finite-difference checks for every primitive operation,
//! plus the softmax normalization and determinism properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabqa_tensor::{grad_check, Graph, NodeId, ParamStore, Result, Tensor};

const POINTS: usize = 100;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng_for(op: &str, point: usize) -> ChaCha8Rng {
    // One deterministic stream per (op, point).
    let mut h: u64 = 0xcbf29ce484222325;
    for b in op.bytes().chain(point.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Mix the op output with a fixed random weighting so every output element
/// influences the scalar differently; wrong gradient routing shows up.
fn weighted_sum(g: &mut Graph, x: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let t = g.value(x);
    let (r, c) = (t.rows(), t.cols());
    let w = Tensor::randn(r, c, 1.0, rng);
    let wn = g.constant(w);
    let prod = g.mul(x, wn)?;
    g.sum_all(prod)
}

fn check_op<F>(op_name: &str, shapes: &[(usize, usize)], build: F)
where
    F: Fn(&mut Graph, &[NodeId], &mut ChaCha8Rng) -> Result<NodeId>,
{
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = rng_for(op_name, point);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            store.insert(&format!("p{i}"), Tensor::randn(r, c, 0.8, &mut rng));
        }
        let mix_rng = rng.clone();
        let err = grad_check(&store, |g, leaves| build(g, leaves, &mut mix_rng.clone()), EPS)
            .unwrap_or_else(|e| panic!("{op_name} point {point}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{op_name}: max relative error {worst} over {POINTS} points");
}

#[test]
fn matmul_gradient() {
    check_op("matmul", &[(3, 4), (4, 2)], |g, l, rng| {
        let y = g.matmul(l[0], l[1])?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn transpose_gradient() {
    check_op("transpose", &[(3, 5)], |g, l, rng| {
        let y = g.transpose(l[0])?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn concat_gradients_both_axes() {
    check_op("concat0", &[(2, 3), (4, 3)], |g, l, rng| {
        let y = g.concat(&[l[0], l[1]], 0)?;
        weighted_sum(g, y, rng)
    });
    check_op("concat1", &[(3, 2), (3, 4)], |g, l, rng| {
        let y = g.concat(&[l[0], l[1]], 1)?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn add_sub_mul_gradients_with_broadcast() {
    type BinOp = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;
    let ops: [(&str, BinOp); 3] =
        [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    for (name, make) in ops {
        check_op(&format!("{name}_same"), &[(3, 4), (3, 4)], move |g, l, rng| {
            let y = make(g, l[0], l[1])?;
            weighted_sum(g, y, rng)
        });
        check_op(&format!("{name}_rowvec"), &[(3, 4), (1, 4)], move |g, l, rng| {
            let y = make(g, l[0], l[1])?;
            weighted_sum(g, y, rng)
        });
        check_op(&format!("{name}_scalar"), &[(3, 4), (1, 1)], move |g, l, rng| {
            let y = make(g, l[0], l[1])?;
            weighted_sum(g, y, rng)
        });
    }
}

#[test]
fn scale_gradient() {
    check_op("scale", &[(2, 5)], |g, l, rng| {
        let y = g.scale(l[0], -1.7)?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn pointwise_nonlinearity_gradients() {
    check_op("tanh", &[(2, 4)], |g, l, rng| {
        let y = g.tanh(l[0])?;
        weighted_sum(g, y, rng)
    });
    check_op("sigmoid", &[(2, 4)], |g, l, rng| {
        let y = g.sigmoid(l[0])?;
        weighted_sum(g, y, rng)
    });
    check_op("softplus", &[(2, 4)], |g, l, rng| {
        let y = g.softplus(l[0])?;
        weighted_sum(g, y, rng)
    });
    check_op("exp", &[(2, 4)], |g, l, rng| {
        let y = g.exp(l[0])?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn ln_gradient_on_positive_points() {
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let mut rng = rng_for("ln", point);
        let mut store = ParamStore::new();
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(0.2..3.0)).collect();
        store.insert("p0", Tensor::new(vec![2, 4], data).unwrap());
        let mix_rng = rng.clone();
        let err = grad_check(
            &store,
            |g, l| {
                let y = g.ln(l[0])?;
                weighted_sum(g, y, &mut mix_rng.clone())
            },
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "ln: max relative error {worst}");
}

#[test]
fn softmax_gradient_and_normalization() {
    check_op("softmax", &[(3, 5)], |g, l, rng| {
        let y = g.softmax_rows(l[0])?;
        weighted_sum(g, y, rng)
    });
    // Normalization property: rows are non-negative and sum to 1 within 1e-9.
    for point in 0..POINTS {
        let mut rng = rng_for("softmax_norm", point);
        let x = Tensor::randn(4, 7, 3.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let y = g.softmax_rows(xn).unwrap();
        let t = g.value(y);
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_gradient() {
    check_op("layer_norm", &[(3, 6)], |g, l, rng| {
        let y = g.layer_norm_rows(l[0], 1e-5)?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn mean_axis_gradients() {
    check_op("mean0", &[(4, 3)], |g, l, rng| {
        let y = g.mean_axis(l[0], 0)?;
        weighted_sum(g, y, rng)
    });
    check_op("mean1", &[(4, 3)], |g, l, rng| {
        let y = g.mean_axis(l[0], 1)?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn max_axis_gradients_away_from_ties() {
    // Finite differences cross the kink when two entries are within eps of
    // each other; resample such points.
    for axis in [0usize, 1] {
        let mut worst = 0.0f64;
        let mut point = 0usize;
        let mut tested = 0usize;
        while tested < POINTS {
            let mut rng = rng_for(&format!("max{axis}"), point);
            point += 1;
            let t = Tensor::randn(4, 3, 1.0, &mut rng);
            if has_close_pair(&t, axis, 1e-3) {
                continue;
            }
            tested += 1;
            let mut store = ParamStore::new();
            store.insert("p0", t);
            let mix_rng = rng.clone();
            let err = grad_check(
                &store,
                |g, l| {
                    let y = g.max_axis(l[0], axis)?;
                    weighted_sum(g, y, &mut mix_rng.clone())
                },
                EPS,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < TOL, "max_axis({axis}): max relative error {worst}");
    }
}

fn has_close_pair(t: &Tensor, axis: usize, margin: f64) -> bool {
    let (r, c) = (t.rows(), t.cols());
    let groups: Vec<Vec<f64>> = if axis == 0 {
        (0..c).map(|j| (0..r).map(|i| t.at(i, j)).collect()).collect()
    } else {
        (0..r).map(|i| t.row_slice(i).to_vec()).collect()
    };
    groups.iter().any(|g| {
        let mut s = g.clone();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s.len() > 1 && (s[0] - s[1]).abs() < margin
    })
}

#[test]
fn sum_all_gradient() {
    check_op("sum_all", &[(3, 4)], |g, l, _| g.sum_all(l[0]));
}

#[test]
fn cosine_sim_gradient() {
    check_op("cosine_sim", &[(3, 4), (2, 4)], |g, l, rng| {
        let y = g.cosine_sim(l[0], l[1])?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn embed_gradient() {
    check_op("embed", &[(5, 3)], |g, l, rng| {
        let y = g.embed(l[0], &[2, 0, 2, 4])?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn narrow_gradients_both_axes() {
    check_op("narrow0", &[(5, 3)], |g, l, rng| {
        let y = g.narrow(l[0], 0, 1, 3)?;
        weighted_sum(g, y, rng)
    });
    check_op("narrow1", &[(3, 6)], |g, l, rng| {
        let y = g.narrow(l[0], 1, 2, 3)?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn expand_scores_gradient() {
    check_op("expand_scores", &[(1, 3)], |g, l, rng| {
        let map = [Some(0), None, Some(2), Some(0), Some(1)];
        let y = g.expand_scores(l[0], &map)?;
        weighted_sum(g, y, rng)
    });
}

#[test]
fn logsumexp_and_index_gradients() {
    check_op("logsumexp", &[(1, 6)], |g, l, _| g.logsumexp(l[0]));
    check_op("index_scalar", &[(1, 6)], |g, l, _| g.index_scalar(l[0], 3));
    // Their composition is the cross-entropy used by the generator.
    check_op("ce_compose", &[(1, 6)], |g, l, _| {
        let lse = g.logsumexp(l[0])?;
        let gold = g.index_scalar(l[0], 2)?;
        g.sub(lse, gold)
    });
}

#[test]
fn forward_values_are_bit_identical_across_runs() {
    let once = || {
        let mut rng = rng_for("determinism", 0);
        let a = Tensor::randn(6, 6, 1.0, &mut rng);
        let b = Tensor::randn(6, 6, 1.0, &mut rng);
        let mut g = Graph::new();
        let an = g.constant(a);
        let bn = g.constant(b);
        let m = g.matmul(an, bn).unwrap();
        let s = g.softmax_rows(m).unwrap();
        let l = g.layer_norm_rows(s, 1e-5).unwrap();
        g.value(l).data().to_vec()
    };
    assert_eq!(once(), once());
}
