//! Central finite-difference checks for every tape primitive.
//!
//! The analytic side is the tape's reverse sweep; the numeric side only ever
//! evaluates forward values, so the two routes share nothing but the forward
//! kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::{with_dtype, DType, Element, Tensor, TensorError};

/// Norm-wise relative error `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let a = analytic.to_f64_vec();
    let n = numeric.to_f64_vec();
    let diff: f64 = a.iter().zip(&n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn eval<F>(inputs: &[Tensor], build: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).to_f64_vec()[0])
}

/// Compares tape gradients of the scalar returned by `build` against central
/// differences with step `h`, for every input. Returns the worst relative
/// error across inputs.
pub fn check<F>(inputs: &[Tensor], build: F, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| input.zeros_like())
            .cast(DType::F64);
        let mut numeric = vec![0.0; input.len()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let (up, down, span) = with_dtype!(input.dtype(), T => {
                let x = input.typed::<T>()[j];
                let step = T::of(h);
                let (xp, xm) = (x + step, x - step);
                probe[i].typed_mut::<T>()[j] = xp;
                let up = eval(&probe, &build)?;
                probe[i].typed_mut::<T>()[j] = xm;
                let down = eval(&probe, &build)?;
                probe[i].typed_mut::<T>()[j] = x;
                let span: f64 = num_traits::cast(xp - xm).expect("finite step");
                (up, down, span)
            });
            *slot = (up - down) / span;
        }
        let numeric = Tensor::from_f64(input.dims(), &numeric)?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64, dtype: DType) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_values(dims, &v, dtype).expect("valid dims")
}

/// Values bounded away from zero so ReLU's kink is never straddled.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_values(dims, &v, dtype).expect("valid dims")
}

/// Distinct values spaced 0.05 apart so every pooling window has a clear maximum.
fn distinct(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Tensor {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::from_values(dims, &v, dtype).expect("valid dims")
}

fn projected(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    tape.weighted_sum(out, weights)
}

/// Runs `instances` random checks per primitive in `dtype` with step `h`.
pub fn layer_suite(dtype: DType, instances: usize, seed: u64, h: f64) -> Result<Vec<LayerCheck>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |layer: &str, errors: Vec<f64>| {
        results.push(LayerCheck {
            layer: layer.to_string(),
            instances: errors.len(),
            max_rel_error: errors.into_iter().fold(0.0, f64::max),
        });
    };

    let mut errs = Vec::new();
    for _ in 0..instances {
        let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
        let inputs = [
            uniform(&mut rng, &[b, i], -1.0, 1.0, dtype),
            uniform(&mut rng, &[i, o], -1.0, 1.0, dtype),
            uniform(&mut rng, &[o], -1.0, 1.0, dtype),
        ];
        let r = uniform(&mut rng, &[b, o], -1.0, 1.0, dtype);
        errs.push(check(&inputs, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            projected(t, y, &r)
        }, h)?);
    }
    record("dense", errs);

    for stride in [1usize, 2] {
        let mut errs = Vec::new();
        for _ in 0..instances {
            let (b, c, f) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
            let (hh, ww) = (rng.random_range(1..6), rng.random_range(1..6));
            let inputs = [
                uniform(&mut rng, &[b, c, hh, ww], -1.0, 1.0, dtype),
                uniform(&mut rng, &[f, c, 3, 3], -1.0, 1.0, dtype),
                uniform(&mut rng, &[f], -1.0, 1.0, dtype),
            ];
            let (oh, ow) = ((hh - 1) / stride + 1, (ww - 1) / stride + 1);
            let r = uniform(&mut rng, &[b, f, oh, ow], -1.0, 1.0, dtype);
            errs.push(check(&inputs, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride)?;
                projected(t, y, &r)
            }, h)?);
        }
        record(&format!("conv3x3_stride{stride}"), errs);
    }

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dims = [rng.random_range(1..4), rng.random_range(1..7)];
        let inputs = [signed_away_from_zero(&mut rng, &dims, dtype)];
        let r = uniform(&mut rng, &dims, -1.0, 1.0, dtype);
        errs.push(check(&inputs, |t, v| {
            let y = t.relu(v[0])?;
            projected(t, y, &r)
        }, h)?);
    }
    record("relu", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dims = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..6), rng.random_range(2..6)];
        let inputs = [distinct(&mut rng, &dims, dtype)];
        let r = uniform(&mut rng, &[dims[0], dims[1], dims[2] / 2, dims[3] / 2], -1.0, 1.0, dtype);
        errs.push(check(&inputs, |t, v| {
            let y = t.maxpool2x2(v[0])?;
            projected(t, y, &r)
        }, h)?);
    }
    record("maxpool2x2", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dims = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
        let inputs = [uniform(&mut rng, &dims, -1.0, 1.0, dtype)];
        let r = uniform(&mut rng, &[dims[0], dims[1] * dims[2] * dims[3]], -1.0, 1.0, dtype);
        errs.push(check(&inputs, |t, v| {
            let y = t.flatten(v[0])?;
            projected(t, y, &r)
        }, h)?);
    }
    record("flatten", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let dims = [rng.random_range(1..4), rng.random_range(1..5)];
        let inputs = [
            uniform(&mut rng, &dims, -1.0, 1.0, dtype),
            uniform(&mut rng, &dims, -1.0, 1.0, dtype),
        ];
        let r = uniform(&mut rng, &dims, -1.0, 1.0, dtype);
        errs.push(check(&inputs, |t, v| {
            let y = t.add(v[0], v[1])?;
            projected(t, y, &r)
        }, h)?);
    }
    record("residual_add", errs);

    let mut errs = Vec::new();
    for _ in 0..instances {
        let (b, c) = (rng.random_range(1..5), rng.random_range(2..6));
        let inputs = [uniform(&mut rng, &[b, c], -2.0, 2.0, dtype)];
        let labels: Vec<u16> = (0..b).map(|_| rng.random_range(0..c as u16)).collect();
        errs.push(check(&inputs, |t, v| t.softmax_cross_entropy(v[0], &labels), h)?);
    }
    record("softmax_cross_entropy", errs);

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        let a = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let b = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        assert_eq!(relative_error(&a, &b), 0.0);
        let z = Tensor::zeros(&[2], DType::F64).unwrap();
        assert_eq!(relative_error(&z, &z), 0.0);
        assert_eq!(relative_error(&a, &z), 1.0);
    }

    #[test]
    fn linear_loss_checks_clean() {
        let x = Tensor::from_f64(&[1, 2], &[0.5, -0.3]).unwrap();
        let err = check(&[x], |t, v| t.sum(v[0]), 1e-5).unwrap();
        assert!(err < 1e-9);
    }
}
