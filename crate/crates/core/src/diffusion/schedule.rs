use crate::error::{Error, Result};

/// Linear-β DDPM noise schedule. Noise levels are indexed `1..=T`, with `T`
/// the noisiest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// `T` steps with β interpolated linearly from `beta_1` to `beta_t`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_t})"
            )));
        }
        let betas = (0..steps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        debug_assert!((1..=self.steps()).contains(&t));
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.idx(t)]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "noise level {t} outside [1, {}]",
                self.steps()
            )))
        }
    }
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(
    schedule: &DiffusionSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_level(t)?;
    if x0.len() != eps.len() {
        return Err(Error::contract("x0 and noise lengths differ"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Posterior mean `(x_t − β/√(1−ᾱ)·ε̂) / √α`.
#[inline]
pub fn posterior_mean(x_t: f64, eps_pred: f64, alpha: f64, beta: f64, alpha_bar: f64) -> f64 {
    let coef = if beta == 0.0 {
        0.0
    } else {
        beta / (1.0 - alpha_bar).sqrt()
    };
    (x_t - coef * eps_pred) / alpha.sqrt()
}

/// One ancestral step from level `t` to `t − 1`. The injected noise is
/// ignored at `t = 1`.
pub fn reverse_step(
    schedule: &DiffusionSchedule,
    x_t: &[f64],
    t: usize,
    eps_pred: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_level(t)?;
    if x_t.len() != eps_pred.len() || x_t.len() != noise.len() {
        return Err(Error::contract("reverse_step length mismatch"));
    }
    let (a, b, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
    let sigma = if t == 1 { 0.0 } else { schedule.sigma(t) };
    Ok(x_t
        .iter()
        .zip(eps_pred)
        .zip(noise)
        .map(|((&x, &e), &z)| posterior_mean(x, e, a, b, ab) + sigma * z)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> DiffusionSchedule {
        DiffusionSchedule::linear(2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn cumulative_products() {
        let s = two_step();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn constant_and_decreasing() {
        let s = DiffusionSchedule::linear(10, 0.05, 0.05).unwrap();
        assert!((1..=10).all(|t| s.beta(t) == 0.05));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
    }

    #[test]
    fn invalid_bounds() {
        assert!(DiffusionSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn noising() {
        let s = two_step();
        let x = forward_noise(&s, &[2.0], 1, &[0.0]).unwrap();
        assert!((x[0] - 2.0 * 0.9f64.sqrt()).abs() < 1e-15);
        let x = forward_noise(&s, &[1.0], 2, &[1.0]).unwrap();
        assert!((x[0] - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-15);
        assert!((x[0] - 1.3778).abs() < 1e-3);
        assert!(forward_noise(&s, &[1.0], 3, &[1.0]).is_err());
        assert!(forward_noise(&s, &[1.0], 0, &[1.0]).is_err());
    }

    #[test]
    fn noising_limit() {
        let s = DiffusionSchedule::linear(3, 1e-12, 1e-12).unwrap();
        let x = forward_noise(&s, &[0.7], 1, &[5.0]).unwrap();
        assert!((x[0] - 0.7).abs() < 1e-5);
    }

    #[test]
    fn reverse_examples() {
        let s = two_step();
        let x = reverse_step(&s, &[1.0], 2, &[0.0], &[0.0]).unwrap();
        assert!((x[0] - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
        let x = reverse_step(&s, &[1.0], 2, &[0.5], &[0.0]).unwrap();
        assert!((x[0] - 0.9068).abs() < 1e-4, "{}", x[0]);
        // no noise on the final step
        let a = reverse_step(&s, &[1.0], 1, &[0.5], &[0.0]).unwrap();
        let b = reverse_step(&s, &[1.0], 1, &[0.5], &[3.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(posterior_mean(0.4, 9.0, 1.0, 0.0, 0.5), 0.4);
    }
}
