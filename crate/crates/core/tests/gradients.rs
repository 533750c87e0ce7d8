//! Finite-difference validation of every differentiable primitive.
//!
//! Each check builds a scalar loss through the tape, takes analytic
//! gradients, and compares them against central differences of the same
//! forward computation. 20 seeded random instances per primitive, step
//! h = 1e-5, relative error below 1e-4.

use drivegaze_core::autograd::Tape;
use drivegaze_core::gradcheck::{finite_diff, relative_error};
use drivegaze_core::ops;
use drivegaze_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

/// Uniform draw bounded away from zero so kinked activations (relu, leaky)
/// never sit within h of their corner.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::random(shape, 0.05, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

#[test]
fn conv3d_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let input = Tensor::random(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
        let kernels = Tensor::random(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
        let bias = Tensor::random(&[3], -0.5, 0.5, &mut rng);
        let target = Tensor::random(&[3, 4, 5, 5], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let k = tape.leaf(kernels.clone());
        let b = tape.leaf(bias.clone());
        let t = tape.leaf(target.clone());
        let loss = x.conv3d(&k, &b).unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input, kernels, bias];
        let mut f = |w: &[Tensor]| {
            ops::mse(&ops::conv3d(&w[0], &w[1], &w[2]).unwrap(), &target).unwrap()
        };
        for (which, var) in [(0, &x), (1, &k), (2, &b)] {
            let fd = finite_diff(&mut f, &inputs, which, H);
            let err = relative_error(&grads.get(var), &fd);
            assert!(err < TOL, "conv3d seed {} input {} err {}", seed, which, err);
        }
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let input = Tensor::random(&[3, 6, 6], -1.0, 1.0, &mut rng);
        let kernels = Tensor::random(&[2, 3, 3, 3], -0.5, 0.5, &mut rng);
        let bias = Tensor::random(&[2], -0.5, 0.5, &mut rng);
        let target = Tensor::random(&[2, 6, 6], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let k = tape.leaf(kernels.clone());
        let b = tape.leaf(bias.clone());
        let t = tape.leaf(target.clone());
        let loss = x.conv2d(&k, &b).unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input, kernels, bias];
        let mut f = |w: &[Tensor]| {
            ops::mse(&ops::conv2d(&w[0], &w[1], &w[2]).unwrap(), &target).unwrap()
        };
        for (which, var) in [(0, &x), (1, &k), (2, &b)] {
            let fd = finite_diff(&mut f, &inputs, which, H);
            let err = relative_error(&grads.get(var), &fd);
            assert!(err < TOL, "conv2d seed {} input {} err {}", seed, which, err);
        }
    }
}

#[test]
fn pool3d_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        // Continuous draws make pooling ties measure-zero events.
        let input = Tensor::random(&[2, 4, 6, 6], -1.0, 1.0, &mut rng);
        let target = Tensor::random(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let pool = (2, 2, 2);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let loss = x.pool3d(pool, false).unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input];
        let mut f =
            |w: &[Tensor]| ops::mse(&ops::pool3d(&w[0], pool).unwrap(), &target).unwrap();
        let fd = finite_diff(&mut f, &inputs, 0, H);
        let err = relative_error(&grads.get(&x), &fd);
        assert!(err < TOL, "pool3d seed {} err {}", seed, err);
    }
}

#[test]
fn pool3d_ceil_mode_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(350 + seed);
        let input = Tensor::random(&[2, 3, 7, 7], -1.0, 1.0, &mut rng);
        let target = Tensor::random(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let pool = (2, 2, 2);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let loss = x.pool3d(pool, true).unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input];
        let mut f = |w: &[Tensor]| {
            let (out, _) = ops::pool3d_with_argmax(&w[0], pool, true).unwrap();
            ops::mse(&out, &target).unwrap()
        };
        let fd = finite_diff(&mut f, &inputs, 0, H);
        let err = relative_error(&grads.get(&x), &fd);
        assert!(err < TOL, "pool3d ceil seed {} err {}", seed, err);
    }
}

#[test]
fn upsample2x_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let input = Tensor::random(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let target = Tensor::random(&[3, 8, 8], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let loss = x.upsample2x().unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input];
        let mut f =
            |w: &[Tensor]| ops::mse(&ops::upsample2x(&w[0]).unwrap(), &target).unwrap();
        let fd = finite_diff(&mut f, &inputs, 0, H);
        let err = relative_error(&grads.get(&x), &fd);
        assert!(err < TOL, "upsample seed {} err {}", seed, err);
    }
}

#[test]
fn relu_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let input = away_from_zero(&[4, 5, 5], &mut rng);
        let target = Tensor::random(&[4, 5, 5], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let loss = x.relu().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input];
        let mut f = |w: &[Tensor]| ops::mse(&ops::relu(&w[0]), &target).unwrap();
        let fd = finite_diff(&mut f, &inputs, 0, H);
        let err = relative_error(&grads.get(&x), &fd);
        assert!(err < TOL, "relu seed {} err {}", seed, err);
    }
}

#[test]
fn leaky_relu_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let input = away_from_zero(&[4, 5, 5], &mut rng);
        let target = Tensor::random(&[4, 5, 5], -1.0, 1.0, &mut rng);
        let alpha = 0.001;

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let loss = x.leaky_relu(alpha).unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input];
        let mut f =
            |w: &[Tensor]| ops::mse(&ops::leaky_relu(&w[0], alpha).unwrap(), &target).unwrap();
        let fd = finite_diff(&mut f, &inputs, 0, H);
        let err = relative_error(&grads.get(&x), &fd);
        assert!(err < TOL, "leaky seed {} err {}", seed, err);
    }
}

#[test]
fn mse_gradients_both_sides() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let prediction = Tensor::random(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let target = Tensor::random(&[2, 6, 6], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let p = tape.leaf(prediction.clone());
        let t = tape.leaf(target.clone());
        let loss = p.mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [prediction, target];
        let mut f = |w: &[Tensor]| ops::mse(&w[0], &w[1]).unwrap();
        for (which, var) in [(0, &p), (1, &t)] {
            let fd = finite_diff(&mut f, &inputs, which, H);
            let err = relative_error(&grads.get(var), &fd);
            assert!(err < TOL, "mse seed {} side {} err {}", seed, which, err);
        }
    }
}

#[test]
fn crop_center_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let input = Tensor::random(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let target = Tensor::random(&[2, 6, 6], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let t = tape.leaf(target.clone());
        let loss = x.crop_center2d(6, 6).unwrap().mse(&t).unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input];
        let mut f = |w: &[Tensor]| {
            ops::mse(&ops::crop_center2d(&w[0], 6, 6).unwrap(), &target).unwrap()
        };
        let fd = finite_diff(&mut f, &inputs, 0, H);
        let err = relative_error(&grads.get(&x), &fd);
        assert!(err < TOL, "crop seed {} err {}", seed, err);
    }
}

#[test]
fn concat_channels_gradients() {
    use drivegaze_core::autograd::Var;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let a = Tensor::random(&[1, 5, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::random(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let target = Tensor::random(&[4, 5, 5], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let t = tape.leaf(target.clone());
        let loss = Var::concat_channels(&[&va, &vb])
            .unwrap()
            .mse(&t)
            .unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [a, b];
        let mut f = |w: &[Tensor]| {
            ops::mse(&ops::concat_channels(&[&w[0], &w[1]]).unwrap(), &target).unwrap()
        };
        for (which, var) in [(0, &va), (1, &vb)] {
            let fd = finite_diff(&mut f, &inputs, which, H);
            let err = relative_error(&grads.get(var), &fd);
            assert!(err < TOL, "concat seed {} part {} err {}", seed, which, err);
        }
    }
}

#[test]
fn composite_chain_gradients() {
    // conv2d -> leaky -> upsample -> crop -> mse, the decoder's layer shape.
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let input = Tensor::random(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let kernels = Tensor::random(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let bias = Tensor::random(&[3], -0.2, 0.2, &mut rng);
        let target = Tensor::random(&[3, 6, 6], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let k = tape.leaf(kernels.clone());
        let b = tape.leaf(bias.clone());
        let t = tape.leaf(target.clone());
        let loss = x
            .conv2d(&k, &b)
            .unwrap()
            .leaky_relu(0.001)
            .unwrap()
            .upsample2x()
            .unwrap()
            .crop_center2d(6, 6)
            .unwrap()
            .mse(&t)
            .unwrap();
        let grads = loss.backward().unwrap();

        let inputs = [input, kernels, bias];
        let mut f = |w: &[Tensor]| {
            let y = ops::conv2d(&w[0], &w[1], &w[2]).unwrap();
            let y = ops::leaky_relu(&y, 0.001).unwrap();
            let y = ops::upsample2x(&y).unwrap();
            let y = ops::crop_center2d(&y, 6, 6).unwrap();
            ops::mse(&y, &target).unwrap()
        };
        for (which, var) in [(0, &x), (1, &k), (2, &b)] {
            let fd = finite_diff(&mut f, &inputs, which, H);
            let err = relative_error(&grads.get(var), &fd);
            assert!(err < TOL, "chain seed {} input {} err {}", seed, which, err);
        }
    }
}
