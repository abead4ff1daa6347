use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `theta`.
///
/// `f` is evaluated twice at `theta` first; differing results mean the
/// function is not deterministic (e.g. it consumes a shared RNG) and the
/// estimate would be meaningless.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be > 0, got {h}")));
    }
    let f0 = f(theta);
    let f1 = f(theta);
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::contract(format!(
            "objective is not deterministic: {f0} then {f1} at the same point"
        )));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_difference_gradient(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_is_flat() {
        let g = finite_difference_gradient(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn leaky_rng_flagged() {
        let mut calls = 0u32;
        let r = finite_difference_gradient(
            |t| {
                calls += 1;
                t[0] + f64::from(calls)
            },
            &[0.0],
            1e-5,
        );
        assert!(r.is_err());
    }
}
