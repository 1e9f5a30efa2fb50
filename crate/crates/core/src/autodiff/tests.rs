use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, GradCheckReport};
use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Random values bounded away from zero, for kinks such as relu.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph<'_, f64>, out: Var) -> Result<Var, AutodiffError> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0)
        .collect();
    let w = g.constant(Array::new(shape, w)?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn assert_grad(name: &str, report: GradCheckReport) {
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(
        report.max_rel_error < TOL,
        "{name}: max relative error {:e}",
        report.max_rel_error
    );
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn conv1d_output_length_formula() {
    assert_eq!(conv_out_len(16, 3, 2, 1), Some(8));
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::zeros(&[16, 2]));
    let w = g.constant(Array::zeros(&[3, 2, 4]));
    let b = g.constant(Array::zeros(&[4]));
    let y = g.conv1d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[8, 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[4, 2]);
    let mut expected = [0.0f64; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
        }
    }
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let c = g.matmul(av, bv).unwrap();
    assert_eq!(g.shape(c), &[3, 2]);
    for (got, want) in g.value(c).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-14);
    }
}

#[test]
fn shape_mismatch_names_kernel_and_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Array::zeros(&[3, 4]));
    let b = g.constant(Array::zeros(&[3, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(
        msg.contains("matmul") && msg.contains("[3, 4]") && msg.contains("[3, 2]"),
        "{msg}"
    );
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add"), "{msg}");
}

#[test]
fn non_finite_inputs_rejected_when_validating() {
    let mut g = Graph::<f64>::new().validating(true);
    let x = g.constant(Array::new(vec![2], vec![1.0, f64::NAN]).unwrap());
    assert!(matches!(
        g.tanh(x),
        Err(AutodiffError::NonFinite { kernel: "tanh" })
    ));
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::new(vec![2], vec![1.0, f64::NAN]).unwrap());
    assert!(g.tanh(x).is_ok());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Array::zeros(&[2, 2]));
    assert!(matches!(
        g.backward(x),
        Err(AutodiffError::NotScalar { .. })
    ));
}

#[test]
fn sum_gradient_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.input(rand_array(&mut rng, &[2, 3, 4]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|v| *v == 1.0));
}

#[test]
fn mse_at_minimum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = rand_array(&mut rng, &[5, 3]);
    let mut g = Graph::new();
    let x = g.input(c.clone());
    let t = g.constant(c);
    let l = g.mse(x, t).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn stop_gradient_is_identity_without_record() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.input(rand_array(&mut rng, &[4, 3]));
    let y = g.tanh(x).unwrap();
    let sg = g.stop_gradient(y);
    assert_eq!(g.value(sg), g.value(y));
    assert!(!g.has_backward_record(sg));
    assert!(!g.requires_grad(sg));

    let target = g.input(rand_array(&mut rng, &[4, 3]));
    let l = g.mse(target, sg).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none());
    assert!(grads.get(y).is_none());
    assert!(grads.get(target).is_some());
}

#[test]
fn gradients_accumulate_over_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xa = rand_array(&mut rng, &[3, 3]);

    let single = |use_tanh: bool| {
        let mut g = Graph::new();
        let x = g.input(xa.clone());
        let y = if use_tanh {
            g.tanh(x).unwrap()
        } else {
            g.sigmoid(x).unwrap()
        };
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap().get(x).unwrap().to_vec()
    };
    let mut g = Graph::new();
    let x = g.input(xa.clone());
    let a = g.tanh(x).unwrap();
    let b = g.sigmoid(x).unwrap();
    let s = g.add(a, b).unwrap();
    let l = g.sum(s).unwrap();
    let both = g.backward(l).unwrap().get(x).unwrap().to_vec();
    for ((t, s), b) in single(true).iter().zip(single(false)).zip(both) {
        assert!((t + s - b).abs() < 1e-15);
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::<f32>::new();
        let w = ps
            .init(
                "w",
                &[4, 3],
                Init::Xavier {
                    fan_in: 4,
                    fan_out: 3,
                },
                &mut rng,
            )
            .unwrap();
        let mut adam = AdamState::new(&ps, AdamConfig::default());
        let x = Array::new(vec![2, 4], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        for _ in 0..5 {
            let grads = {
                let mut g = Graph::with_params(&ps);
                let xv = g.constant(x.clone());
                let wv = g.param(w);
                let y = g.matmul(xv, wv).unwrap();
                let y = g.tanh(y).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap().into_param_grads(ps.len())
            };
            adam.step(&mut ps, &grads, 0.01).unwrap();
        }
        ps.get(w)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn param_binding_is_idempotent() {
    let mut ps = ParamStore::<f64>::new();
    let id = ps.insert("p", Array::zeros(&[2])).unwrap();
    let mut g = Graph::with_params(&ps);
    let a = g.param(id);
    let b = g.param(id);
    assert_eq!(a, b);
    assert_eq!(g.bound_params().count(), 1);
}

// Finite-difference checks, one per kernel.

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [rand_array(&mut rng, &[3, 4]), rand_array(&mut rng, &[3, 4])];
    assert_grad(
        "add",
        check(&inputs, H, |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "sub",
        check(&inputs, H, |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "mul",
        check(&inputs, H, |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "scale",
        check(&inputs[..1], H, |g, v| {
            let y = g.scale(v[0], 0.37)?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    let bias = [rand_array(&mut rng, &[3, 4]), rand_array(&mut rng, &[4])];
    assert_grad(
        "add_bias",
        check(&bias, H, |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_matmul_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_array(&mut rng, &[3, 4]), rand_array(&mut rng, &[4, 5])];
    assert_grad(
        "matmul",
        check(&inputs, H, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "transpose",
        check(&inputs[..1], H, |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "reshape",
        check(&inputs[..1], H, |g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "narrow",
        check(&inputs[1..], H, |g, v| {
            let y = g.narrow(v[0], 1, 1, 3)?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    let parts = [rand_array(&mut rng, &[2, 3]), rand_array(&mut rng, &[2, 2])];
    assert_grad(
        "concat",
        check(&parts, H, |g, v| {
            let y = g.concat(v, 1)?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    let rows = [rand_array(&mut rng, &[2, 3]), rand_array(&mut rng, &[1, 3])];
    assert_grad(
        "concat0",
        check(&rows, H, |g, v| {
            let y = g.concat(v, 0)?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c1 = [
        rand_array(&mut rng, &[9, 2]),
        rand_array(&mut rng, &[3, 2, 3]),
        rand_array(&mut rng, &[3]),
    ];
    for stride in [1, 2] {
        let r = check(&c1, H, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], stride, 1)?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_grad("conv1d", r);
    }
    let c2 = [
        rand_array(&mut rng, &[5, 6, 2]),
        rand_array(&mut rng, &[3, 3, 2, 3]),
        rand_array(&mut rng, &[3]),
    ];
    for stride in [(1, 1), (2, 1), (2, 2)] {
        let r = check(&c2, H, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, (1, 1))?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_grad("conv2d", r);
    }
}

#[test]
fn gradcheck_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = [rand_array(&mut rng, &[3, 5])];
    assert_grad(
        "sigmoid",
        check(&x, H, |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "tanh",
        check(&x, H, |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    assert_grad(
        "softmax",
        check(&x, H, |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    let xr = [rand_away_from_zero(&mut rng, &[3, 5])];
    assert_grad(
        "relu",
        check(&xr, H, |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
    let ln = [
        rand_array(&mut rng, &[3, 6]),
        rand_array(&mut rng, &[6]),
        rand_array(&mut rng, &[6]),
    ];
    assert_grad(
        "layer_norm",
        check(&ln, H, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_lookup_and_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let table = [rand_array(&mut rng, &[5, 3])];
    let r = check(&table, H, |g, v| {
        let y = g.embedding(v[0], &[4, 0, 4, 2])?;
        weighted_sum(g, y)
    })
    .unwrap();
    assert_grad("embedding", r);
    let coords = [0.0, 0.3, 2.75, 3.0, -1.0, 9.5, 1.5];
    let r = check(&table, H, |g, v| {
        let y = g.interp_rows(v[0], &coords)?;
        weighted_sum(g, y)
    })
    .unwrap();
    assert_grad("interp_rows", r);
}

#[test]
fn gradcheck_reductions_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = [rand_array(&mut rng, &[4, 3]), rand_array(&mut rng, &[4, 3])];
    assert_grad(
        "sum",
        check(&x[..1], H, |g, v| {
            let y = g.tanh(v[0])?;
            g.sum(y)
        })
        .unwrap(),
    );
    assert_grad(
        "mean",
        check(&x[..1], H, |g, v| {
            let y = g.tanh(v[0])?;
            g.mean(y)
        })
        .unwrap(),
    );
    assert_grad("mse", check(&x, H, |g, v| g.mse(v[0], v[1])).unwrap());
    assert_grad(
        "cross_entropy",
        check(&x[..1], H, |g, v| g.cross_entropy(v[0], &[2, 0, 1, 2])).unwrap(),
    );
}
