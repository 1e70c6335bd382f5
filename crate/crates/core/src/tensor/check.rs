//! Central-difference gradient verification.

use super::{Shape, Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences and returns the worst relative error.
///
/// `f` receives a fresh tape and the input tensor and must return a scalar.
/// Differences use step `h`, which must lie in `[1e-7, 1e-3]`; relative
/// error for element i is `|ad_i - fd_i| / max(|ad_i|, |fd_i|, 1e-8)`, so
/// near-zero gradients are compared on an absolute scale.
///
/// The numeric side never touches `backward`: each probe point is a plain
/// forward evaluation, which keeps the check independent of the code it
/// verifies.
pub fn finite_diff_check<F>(f: F, x: &[f64], shape: Shape, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(
            "finite_diff_check",
            format!("step {h:e} outside [1e-7, 1e-3]"),
        ));
    }
    if x.len() != shape.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("data length {} does not match shape {shape}", x.len()),
        ));
    }

    let eval = |point: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = tape.constant(point.to_vec(), shape)?;
        let y = f(&mut tape, t)?;
        if tape.shape(y) != Shape::Scalar {
            return Err(Error::contract(
                "finite_diff_check",
                format!("f must return a scalar, got {}", tape.shape(y)),
            ));
        }
        Ok(tape.scalar_value(y))
    };

    let mut tape = Tape::new();
    let t = tape.leaf(x.to_vec(), shape)?;
    let y = f(&mut tape, t)?;
    if tape.shape(y) != Shape::Scalar {
        return Err(Error::contract(
            "finite_diff_check",
            format!("f must return a scalar, got {}", tape.shape(y)),
        ));
    }
    let grads = tape.backward(y)?;
    let ad = grads.wrt(t).to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = ad[i].abs().max(fd.abs()).max(1e-8);
        let rel = (ad[i] - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
