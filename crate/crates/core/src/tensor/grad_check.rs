//! Central-difference gradient verification.

use super::{Result, Tape, Tensor, TensorError};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// The analytic gradient comes from the ordinary f32 backward pass. The
/// finite differences replay the recorded graph in f64 so the check is not
/// drowned in f32 storage rounding; what remains measures the correctness of
/// the backward rules themselves.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / max(1e-8, |central|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let x_id = x.node().expect("recording tape assigns leaf nodes");
    let loss = f(&mut tape, &x)?;
    if loss.numel() != 1 {
        return Err(TensorError::Contract {
            context: "grad_check",
            message: "function must be scalar-valued".into(),
        });
    }
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            context: "grad_check",
        });
    }
    let loss_id = loss.node().ok_or(TensorError::Contract {
        context: "grad_check",
        message: "function output does not depend on the input".into(),
    })?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<f32> = grads
        .get(&x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let base: Vec<f64> = point.data().iter().map(|&v| v as f64).collect();
    let eps = eps as f64;
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = tape.replay_f64(loss_id, &[(x_id, &plus)])[0];
        let fm = tape.replay_f64(loss_id, &[(x_id, &minus)])[0];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                context: "grad_check",
            });
        }
        let central = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] as f64 - central).abs() / central.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let point = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(&sq))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "quadratic grad error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::from_vec([1, 1, 1, 2], vec![0.5, -0.5]).unwrap();
        let err = grad_check(
            |tape, x| {
                let z = tape.mul_scalar(x, 0.0);
                Ok(tape.sum(&z))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn conv_with_fixed_random_weights() {
        let mut rng = SplitMix64::new(23);
        let point = Tensor::from_vec(
            [1, 2, 5, 5],
            (0..50).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let wdata: Vec<f32> = (0..2 * 2 * 9).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let err = grad_check(
            |tape, x| {
                let w = Tensor::from_vec([2, 2, 3, 3], wdata.clone())?;
                let b = Tensor::zeros([1, 2, 1, 1]);
                let y = tape.conv2d(x, &w, &b, 1, 1)?;
                let sq = tape.mul(&y, &y)?;
                Ok(tape.sum(&sq))
            },
            &point,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "conv grad error {err}");
    }

    #[test]
    fn composite_conv_activation_sum_matches_finite_differences() {
        let mut rng = SplitMix64::new(31);
        let point = Tensor::from_vec(
            [1, 2, 5, 5],
            (0..50).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let wdata: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.uniform(-0.6, 0.6) as f32).collect();
        let err = grad_check(
            |tape, x| {
                let w = Tensor::from_vec([3, 2, 3, 3], wdata.clone())?;
                let b = Tensor::full([1, 3, 1, 1], 0.1);
                let y = tape.conv2d(x, &w, &b, 1, 1)?;
                let a = tape.leaky_relu(&y, 0.01)?;
                let sq = tape.mul(&a, &a)?;
                Ok(tape.sum(&sq))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "composite grad error {err}");
    }

    #[test]
    fn elementwise_ops_pass_at_random_points() {
        let mut rng = SplitMix64::new(47);
        for trial in 0..10 {
            let point = Tensor::from_vec(
                [1, 1, 2, 4],
                (0..8).map(|_| rng.uniform(0.3, 2.0) as f32).collect(),
            )
            .unwrap();
            let err = grad_check(
                |tape, x| {
                    let s = tape.softplus(x);
                    let c = tape.normal_cdf(&s);
                    let l = tape.ln(&c);
                    let d = tape.div(&l, &s)?;
                    Ok(tape.sum(&d))
                },
                &point,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "trial {trial}: elementwise grad error {err}");
        }
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = SplitMix64::new(53);
        let point = Tensor::from_vec(
            [1, 2, 3, 3],
            (0..18).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let wdata: Vec<f32> = (0..2 * 2 * 9).map(|_| rng.uniform(-0.7, 0.7) as f32).collect();
        let err = grad_check(
            |tape, x| {
                let w = Tensor::from_vec([2, 2, 3, 3], wdata.clone())?;
                let b = Tensor::full([1, 2, 1, 1], -0.05);
                let y = tape.conv2d_transposed(x, &w, &b, 2, 1)?;
                let sq = tape.mul(&y, &y)?;
                Ok(tape.sum(&sq))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "transposed conv grad error {err}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = SplitMix64::new(61);
        let point = Tensor::from_vec(
            [1, 4, 4, 4],
            (0..64).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let err = grad_check(
            |tape, x| {
                let zeros = Tensor::zeros([1, 4, 4, 4]);
                let half = tape.mux(x, &zeros)?;
                let packed = tape.space_to_depth(&half)?;
                let back = tape.depth_to_space(&packed)?;
                let cat = tape.concat_channels(&back, &half)?;
                let sq = tape.mul(&cat, &cat)?;
                Ok(tape.sum(&sq))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "structural grad error {err}");
    }
}
