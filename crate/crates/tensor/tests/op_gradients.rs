use compseg_tensor::gradcheck::check_gradients;
use compseg_tensor::{BnMode, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduce any output to a scalar with fixed random weights so every element
/// of the gradient is exercised.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, g.shape(y));
    g.dot_const(y, r)
}

fn assert_close(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let reports = check_gradients(inputs, STEP, build).unwrap();
    for (i, r) in reports.iter().enumerate() {
        assert!(
            r.relative_error() < TOL,
            "input {i}: relative error {}",
            r.relative_error()
        );
    }
}

#[test]
fn conv2d_same_and_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stride in [1, 2] {
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 6, 6]),
            rand_tensor(&mut rng, &[4, 3, 3, 3]),
            rand_tensor(&mut rng, &[4]),
        ];
        assert_close(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            project(g, y, 7)
        });
    }
}

#[test]
fn pointwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![rand_tensor(&mut rng, &[2, 3, 4, 4]), rand_tensor(&mut rng, &[2, 3, 1, 1])];
    assert_close(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0)?;
        project(g, y, 8)
    });
}

#[test]
fn transposed_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 3, 3, 2]),
        rand_tensor(&mut rng, &[3, 2, 2, 2]),
        rand_tensor(&mut rng, &[2]),
    ];
    assert_close(&inputs, |g, v| {
        let y = g.conv_transpose2x2(v[0], v[1], Some(v[2]))?;
        project(g, y, 9)
    });
}

#[test]
fn batch_norm_train_and_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        rand_tensor(&mut rng, &[3, 2, 2, 2]),
        rand_tensor(&mut rng, &[2]),
        rand_tensor(&mut rng, &[2]),
    ];
    assert_close(&inputs, |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train { key: 0 }, 1e-5)?;
        project(g, y, 10)
    });
    let mean = [0.1, -0.2];
    let var = [0.5, 2.0];
    assert_close(&inputs, |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Frozen { mean: &mean, var: &var }, 1e-5)?;
        project(g, y, 10)
    });
    // rank-2 input (1-D batch norm)
    let inputs = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])];
    assert_close(&inputs, |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train { key: 0 }, 1e-5)?;
        project(g, y, 11)
    });
}

#[test]
fn linear_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 5, 3]),
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[4]),
    ];
    assert_close(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        let y = g.leaky_relu(y, 0.01);
        let y = g.sigmoid(y);
        let y = g.mul_const(y, (0..40).map(|i| (i % 3) as f64).collect())?;
        project(g, y, 12)
    });
}

#[test]
fn token_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 3, 2, 2]),
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[3]),
    ];
    assert_close(&inputs, |g, v| {
        let tok = g.to_tokens(v[0])?;
        let meta = g.broadcast_tokens(v[1], 4)?;
        let a = g.token_dot(tok, v[2], 0.5)?;
        let glob = g.token_weighted_sum(a, tok)?;
        let mixed = g.mul_global(glob, meta)?;
        let nrm = g.normalize_rows(tok, 1e-12)?;
        let s = g.add(mixed, nrm)?;
        let back = g.from_tokens(s, 2, 2)?;
        let cat = g.concat_channels(back, v[0])?;
        project(g, cat, 13)
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = Tensor::from_fn(vec![2, 3, 2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let inputs = vec![rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[2, 1])];
    for first in [0, 1] {
        let target = target.clone();
        assert_close(&inputs, move |g, v| {
            let p = g.softmax_channels(v[0])?;
            let dice = g.dice_loss(p, target.clone(), 1e-6, first)?;
            let ce = g.cross_entropy(v[1], vec![3, 0])?;
            let l1 = g.l1_loss(v[2], vec![0.25, -3.0])?;
            g.weighted_sum(vec![(dice, 0.7), (ce, 0.3), (l1, 0.3)])
        });
    }
}

#[test]
fn normalize_rows_guard_passes_gradient_scaled_by_eps() {
    let mut g = Graph::<f64>::new();
    let x = g.param(0, Tensor::zeros(vec![1, 1, 2]));
    let y = g.normalize_rows(x, 0.5).unwrap();
    let l = g.dot_const(y, Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f32>::new();
    let x = g.param(0, Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn train_batch_norm_records_unbiased_statistics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
    let ga = g.constant(Tensor::full(vec![1], 1.0));
    let be = g.constant(Tensor::zeros(vec![1]));
    let y = g.batch_norm(x, ga, be, BnMode::Train { key: 42 }, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    let upd = &g.bn_updates()[0];
    assert_eq!((upd.key, upd.mean[0], upd.var[0]), (42, 2.0, 2.0));
}
