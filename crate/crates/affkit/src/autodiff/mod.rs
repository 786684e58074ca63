//! Minimal dense-tensor numeric core with reverse-mode differentiation.
//!
//! Three pieces: [`Tensor`] (f32 storage, optional gradient buffer),
//! [`Tape`] (operation record + backward replay), and [`check`]
//! (finite-difference verification used across the crate).

pub mod check;
mod tape;
mod tensor;

pub use tape::{Pool, Precision, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::check::{finite_diff_check, rel_err, FD_TOLERANCE};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn t(shape: &[usize], values: &[f32]) -> Tensor {
        Tensor::from_slice(shape, values).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t(shape, &values)
    }

    #[test]
    fn elementwise_componentwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum), vec![4.0, 6.0]);

        let zero = tape.scalar_const(0.0);
        let x = tape.leaf(&t(&[2], &[2.0, 3.0]));
        let prod = tape.mul(x, zero).unwrap();
        assert_eq!(tape.value(prod), vec![0.0, 0.0]);
    }

    #[test]
    fn sub_self_is_zero_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let d = tape.sub(x, x).unwrap();
        assert_eq!(tape.value(d), vec![0.0, 0.0, 0.0]);
        let s = tape.sum(d).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_row_sums() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), vec![3.0, -1.0, 2.5, 7.0]);

        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.leaf(&t(&[2, 1], &[1.0, 1.0]));
        let sums = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(sums), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch_and_rank() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
        let v = tape.leaf(&t(&[3], &[0.0; 3]));
        assert!(tape.matmul(a, v).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let report = finite_diff_check(&[a, b], |tape, vars| {
            let c = tape.matmul(vars[0], vars[1])?;
            tape.sum(c)
        })
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_zero_kernels_yield_bias() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 4, 4], &[0.5; 16]));
        let kernels = tape.leaf(&Tensor::zeros(vec![2, 1, 3, 3]).unwrap());
        let bias = tape.leaf(&t(&[2], &[1.5, -0.5]));
        let out = tape.conv2d_pool(input, kernels, bias, Pool::None).unwrap();
        let v = tape.value(out);
        assert!(v[..16].iter().all(|&x| x == 1.5));
        assert!(v[16..].iter().all(|&x| x == -0.5));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let img = random_tensor(&mut rng, &[1, 1, 5, 5]);
        let input = tape.leaf(&img);
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0; // center tap
        let kernels = tape.leaf(&t(&[1, 1, 3, 3], &k));
        let bias = tape.leaf(&t(&[1], &[0.0]));
        let out = tape.conv2d(input, kernels, bias).unwrap();
        assert_eq!(tape.value(out), img.values());
    }

    #[test]
    fn conv_rejects_odd_dims_with_avg2() {
        let mut tape = Tape::new();
        let input = tape.leaf(&Tensor::zeros(vec![1, 1, 5, 5]).unwrap());
        let kernels = tape.leaf(&Tensor::zeros(vec![1, 1, 3, 3]).unwrap());
        let bias = tape.leaf(&Tensor::zeros(vec![1]).unwrap());
        assert!(tape.conv2d_pool(input, kernels, bias, Pool::Avg2).is_err());
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let input = random_tensor(&mut rng, &[1, 1, 6, 6]);
        let kernels = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let bias = random_tensor(&mut rng, &[2]);
        let weights = random_tensor(&mut rng, &[1, 2 * 3 * 3]);
        let report = finite_diff_check(&[input, kernels, bias], move |tape, vars| {
            let out = tape.conv2d_pool(vars[0], vars[1], vars[2], Pool::Avg2)?;
            let flat = tape.reshape(out, vec![1, 2 * 3 * 3])?;
            // Weight the outputs so the check sees a non-uniform pullback.
            let w = tape.constant(&weights);
            let prod = tape.mul(flat, w)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_rows_normalized_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -50.0]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for &p in &v {
            assert!(p.is_finite() && p >= 0.0 && p <= 1.0);
        }
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((v[0..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((v[3..6].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(v[3] > 0.999);
    }

    #[test]
    fn sigmoid_and_tanh_ranges() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 10.0, -10.0]));
        let s = tape.sigmoid(x).unwrap();
        let v = tape.value(s);
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] < 1.0 && v[2] > 0.0 && v[2] < 1.0);
        let th = tape.tanh(x).unwrap();
        let v = tape.value(th);
        assert!(v.iter().all(|&y| (-1.0..=1.0).contains(&y)));
        // Extreme inputs saturate but stay finite and in range.
        let big = tape.leaf(&t(&[2], &[500.0, -500.0]));
        let sb = tape.sigmoid(big).unwrap();
        let vb = tape.value(sb);
        assert!(vb.iter().all(|&y| y.is_finite() && (0.0..=1.0).contains(&y)));
    }

    #[test]
    fn reductions_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.scalar_value(s).unwrap(), 6.0);

        let c = tape.leaf(&t(&[4], &[2.5; 4]));
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.scalar_value(m).unwrap(), 2.5);

        let g = tape.leaf(&t(&[2, 2], &[1.0, 10.0, 3.0, 20.0]));
        let mc = tape.mean_per_column(g).unwrap();
        assert_eq!(tape.value(mc), vec![2.0, 15.0]);
    }

    #[test]
    fn mean_gradient_distributes_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn backward_analytic_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let c = tape.scalar_const(5.0);
        tape.backward(c).unwrap();
        assert!(tape.grad(x).is_none());
        let _ = x;
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3.0, -1.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_linearity() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g)
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x0 = random_tensor(&mut rng, &[4]);
        let (a, b) = (0.7f32, -1.3f32);

        let grad_of = |scale_f: f32, scale_g: f32, both: bool| -> Vec<f32> {
            let mut tape = Tape::new();
            let x = tape.leaf(&x0);
            let f = {
                let sq = tape.mul(x, x).unwrap();
                tape.sum(sq).unwrap()
            };
            let g = {
                let th = tape.tanh(x).unwrap();
                tape.mean(th).unwrap()
            };
            let loss = if both {
                let sf = tape.scale(f, scale_f).unwrap();
                let sg = tape.scale(g, scale_g).unwrap();
                tape.add(sf, sg).unwrap()
            } else if scale_f != 0.0 {
                f
            } else {
                g
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()
        };

        let combined = grad_of(a, b, true);
        let gf = grad_of(1.0, 0.0, false);
        let gg = grad_of(0.0, 1.0, false);
        for i in 0..4 {
            let expect = a * gf[i] + b * gg[i];
            assert!((combined[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // conv -> relu -> pool -> flatten -> matmul -> softmax -> log loss
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let input = random_tensor(&mut rng, &[2, 1, 4, 4]);
        let kernels = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let bias = random_tensor(&mut rng, &[2]);
        let w = random_tensor(&mut rng, &[8, 3]);
        let report = finite_diff_check(&[input, kernels, bias, w], |tape, vars| {
            let conv = tape.conv2d_pool(vars[0], vars[1], vars[2], Pool::Avg2)?;
            let act = tape.relu(conv)?;
            let flat = tape.reshape(act, vec![2, 8])?;
            let logits = tape.matmul(flat, vars[3])?;
            let probs = tape.softmax_rows(logits)?;
            let logp = tape.log_clamped(probs)?;
            let m = tape.mean(logp)?;
            tape.neg(m)
        })
        .unwrap();
        assert!(
            report.max_rel_err < FD_TOLERANCE,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a = random_tensor(&mut rng, &[6]);
        let mut b = random_tensor(&mut rng, &[6]);
        // Keep divisor away from zero for a well-conditioned check.
        for v in b.values_mut() {
            *v = v.signum().max(0.0) * 2.0 - 1.0 + *v * 0.25;
        }
        let report = finite_diff_check(&[a, b], |tape, vars| {
            let s = tape.sub(vars[0], vars[1])?;
            let p = tape.mul(s, vars[0])?;
            let q = tape.div(p, vars[1])?;
            let n = tape.neg(q)?;
            let sc = tape.scale(n, 0.5)?;
            let th = tape.tanh(sc)?;
            let sg = tape.sigmoid(th)?;
            tape.mean(sg)
        })
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gather_and_select_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x = random_tensor(&mut rng, &[4, 3]);
        let report = finite_diff_check(&[x], |tape, vars| {
            let g = tape.gather_rows(vars[0], &[0, 2, 2])?;
            let c0 = tape.select_column(g, 0)?;
            let c2 = tape.select_column(g, 2)?;
            let p = tape.mul(c0, c2)?;
            let colmeans = tape.mean_per_column(g)?;
            let ms = tape.sum(colmeans)?;
            let ps = tape.sum(p)?;
            tape.add(ps, ms)
        })
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn scalar_broadcast_backward() {
        // d/ds sum(x - s) = -N, d/ds sum(x * s) = sum(x)
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.leaf(&Tensor::scalar(0.5));
        let d = tape.sub(x, s).unwrap();
        let p = tape.mul(d, s).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        // loss = s*sum(x) - 3*s^2 => dloss/ds = sum(x) - 6s = 6 - 3 = 3
        let gs = tape.grad(s).unwrap();
        assert!((gs[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let x = random_tensor(&mut rng, &[2, 1, 4, 4]);
            let k = random_tensor(&mut rng, &[3, 1, 3, 3]);
            let b = random_tensor(&mut rng, &[3]);
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.leaf(&x), tape.leaf(&k), tape.leaf(&b));
            let out = tape.conv2d_pool(xv, kv, bv, Pool::Avg2).unwrap();
            let act = tape.tanh(out).unwrap();
            let loss = tape.mean(act).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(out), tape.grad(kv).unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn rel_err_floor_behaves() {
        assert!(rel_err(0.0, 9e-6) < 1e-3);
        assert!(rel_err(0.0, 2e-5) > 1e-3);
        assert!(rel_err(100.0, 100.05) < 1e-3);
    }
}
