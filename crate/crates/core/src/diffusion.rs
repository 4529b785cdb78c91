//! Few-step variance-preserving diffusion in wavelet-packet space.
//!
//! The schedule discretizes the continuous VP SDE: beta[i] = 1 − exp(−βmin/T
//! − (βmax−βmin)(2i−1)/(2T²)), which telescopes so that alpha_bar[T] =
//! exp(−(βmin+βmax)/2) regardless of T — the end of the chain is (nearly)
//! pure noise even at T = 2. The sampler predicts x₀ directly and draws
//! x_{t−1} from the exact diffusion posterior q(x_{t−1} | x_t, x₀_hat); at
//! t = 1 the posterior collapses (variance 0) and the prediction is returned
//! verbatim, which is what makes a perfect denoiser reproduce x₀ bit-for-bit.

use crate::wavelet::WaveletPacket;
use crate::{Error, Result, Tensor};

pub use crate::rng::NoiseState;

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;
pub const MAX_STEPS: usize = 8;

/// Precomputed schedule quantities, all indexed by t in 1..=T.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    coef_x0: Vec<f64>,
    coef_xt: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.steps {
            return Err(Error::Index(format!(
                "timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    /// alpha_bar[t] = prod_{i<=t} alpha[i]; alpha_bar(0) is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn coef_x0(&self, t: usize) -> Result<f64> {
        Ok(self.coef_x0[self.idx(t)?])
    }

    pub fn coef_xt(&self, t: usize) -> Result<f64> {
        Ok(self.coef_xt[self.idx(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.idx(t)?])
    }

    /// Validates 1 <= t <= T without touching any array.
    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.idx(t).map(|_| ())
    }

    /// Raw betas, for checkpoint serialization: reloading reconstructs the
    /// schedule from these rather than from possibly-changed defaults.
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Rebuilds all derived arrays from an explicit beta sequence.
    pub fn from_betas(betas: &[f64]) -> Result<DiffusionSchedule> {
        let steps = betas.len();
        if steps < 1 || steps > MAX_STEPS {
            return Err(Error::Config(format!(
                "schedule length {steps} outside [1, {MAX_STEPS}]"
            )));
        }
        let mut prev = 0.0f64;
        for (i, b) in betas.iter().enumerate() {
            if !(*b > 0.0 && *b < 1.0) {
                return Err(Error::Config(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
            }
            if *b <= prev {
                return Err(Error::Config(format!(
                    "beta sequence not strictly increasing at t = {}",
                    i + 1
                )));
            }
            prev = *b;
        }
        let beta = betas.to_vec();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar[steps - 1] >= 1e-3 {
            return Err(Error::Config(format!(
                "alpha_bar[T] = {} >= 1e-3: chain does not end near pure noise",
                alpha_bar[steps - 1]
            )));
        }
        let mut coef_x0 = Vec::with_capacity(steps);
        let mut coef_xt = Vec::with_capacity(steps);
        let mut posterior_var = Vec::with_capacity(steps);
        for t in 1..=steps {
            if t == 1 {
                // alpha_bar[0] = 1 collapses the posterior onto the x0
                // prediction: the analytic limit, pinned exactly.
                coef_x0.push(1.0);
                coef_xt.push(0.0);
                posterior_var.push(0.0);
            } else {
                let ab_prev = alpha_bar[t - 2];
                let ab = alpha_bar[t - 1];
                let b = beta[t - 1];
                coef_x0.push(ab_prev.sqrt() * b / (1.0 - ab));
                coef_xt.push(alpha[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
                posterior_var.push((1.0 - ab_prev) / (1.0 - ab) * b);
            }
        }
        Ok(DiffusionSchedule {
            steps,
            beta,
            alpha,
            alpha_bar,
            coef_x0,
            coef_xt,
            posterior_var,
        })
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps < 1 || steps > MAX_STEPS {
        return Err(Error::Config(format!(
            "diffusion steps {steps} outside [1, {MAX_STEPS}]"
        )));
    }
    if !(beta_min > 0.0) || beta_min >= beta_max {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max, got [{beta_min}, {beta_max}]"
        )));
    }
    let t = steps as f64;
    let betas: Vec<f64> = (1..=steps)
        .map(|i| {
            let e = -beta_min / t - (beta_max - beta_min) * (2 * i - 1) as f64 / (2.0 * t * t);
            1.0 - e.exp()
        })
        .collect();
    DiffusionSchedule::from_betas(&betas)
}

/// Closed-form forward perturbation: sqrt(ab[t]) x0 + sqrt(1 − ab[t]) noise.
pub fn q_sample_tensor(x0: &Tensor, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    if noise.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match x0 shape {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    Ok(x0
        .mul_scalar(ab.sqrt() as f32)
        .add(&noise.mul_scalar((1.0 - ab).sqrt() as f32)))
}

pub fn q_sample(x0: &WaveletPacket, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    q_sample_tensor(&x0.to_tensor(), t, noise, sched)
}

/// Mean and variance of q(x_{t−1} | x_t, x0 = x0_hat).
pub fn posterior_params(
    x0_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<(Tensor, f64)> {
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "x0_hat shape {:?} does not match x_t shape {:?}",
            x0_hat.shape(),
            x_t.shape()
        )));
    }
    let c0 = sched.coef_x0(t)?;
    let ct = sched.coef_xt(t)?;
    let mean = x0_hat
        .mul_scalar(c0 as f32)
        .add(&x_t.mul_scalar(ct as f32));
    Ok((mean, sched.posterior_var(t)?))
}

/// The denoising network seen by the sampler: predicts x0 from (x_t, x_lr, t).
pub trait Denoiser {
    fn denoise(&self, x_t: &Tensor, x_lr: &Tensor, t: usize) -> Tensor;
}

impl<F: Fn(&Tensor, &Tensor, usize) -> Tensor> Denoiser for F {
    fn denoise(&self, x_t: &Tensor, x_lr: &Tensor, t: usize) -> Tensor {
        self(x_t, x_lr, t)
    }
}

/// One reverse step. Returns (x_{t−1}, x0_hat). At t = 1 the prediction is
/// returned verbatim — no arithmetic, so a perfect denoiser is bit-exact.
pub fn p_sample_step(
    gen: &impl Denoiser,
    x_t: &Tensor,
    x_lr: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &mut NoiseState,
) -> Result<(Tensor, Tensor)> {
    sched.idx(t)?;
    let x0_hat = gen.denoise(x_t, x_lr, t);
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "generator output shape {:?} does not match x_t shape {:?}",
            x0_hat.shape(),
            x_t.shape()
        )));
    }
    if t == 1 {
        return Ok((x0_hat.clone(), x0_hat));
    }
    let (mean, var) = posterior_params(&x0_hat, x_t, t, sched)?;
    let z = noise.normal(x_t.shape());
    let x_prev = mean.add(&z.mul_scalar(var.sqrt() as f32));
    Ok((x_prev, x0_hat))
}

/// Full reverse chain from pure noise, conditioned on the LR packet.
/// Deterministic given (seed, counter); runs without building any graph.
pub fn sample(
    gen: &impl Denoiser,
    x_lr: &WaveletPacket,
    sched: &DiffusionSchedule,
    noise: &mut NoiseState,
) -> Result<WaveletPacket> {
    crate::tensor::no_grad(|| {
        let cond = x_lr.to_tensor();
        let shape = cond.shape().to_vec();
        let mut x_t = noise.normal(&shape);
        let mut x0_hat = x_t.clone();
        for t in (1..=sched.steps()).rev() {
            let (prev, pred) = p_sample_step(gen, &x_t, &cond, t, sched, noise)?;
            x_t = prev;
            x0_hat = pred;
        }
        WaveletPacket::from_tensor(&x0_hat, true)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::dwt2d;

    /// Frozen high-precision evaluations of the closed forms (independent
    /// 50-digit arithmetic), defaults beta_min = 0.1, beta_max = 20, T = 2.
    const T2_BETA: [f64; 2] = [0.920936187547005, 0.999453786154646];
    const T2_ALPHA_BAR: [f64; 2] = [0.079063812452995, 4.31857490603170e-5];
    const T2_COEF_X0_2: f64 = 0.281041431798752;
    const T2_COEF_XT_2: f64 = 0.0215243302422402;
    const T2_VAR_2: f64 = 0.920472910762390;
    const SQRT_AB2: f64 = 6.57158649493026e-3;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn schedule_matches_frozen_oracle() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        assert!(close(s.beta(1).unwrap(), T2_BETA[0], 1e-12));
        assert!(close(s.beta(2).unwrap(), T2_BETA[1], 1e-12));
        assert!(close(s.alpha_bar(1).unwrap(), T2_ALPHA_BAR[0], 1e-12));
        assert!(close(s.alpha_bar(2).unwrap(), T2_ALPHA_BAR[1], 1e-12));
        assert!(close(s.coef_x0(2).unwrap(), T2_COEF_X0_2, 1e-12));
        assert!(close(s.coef_xt(2).unwrap(), T2_COEF_XT_2, 1e-12));
        assert!(close(s.posterior_var(2).unwrap(), T2_VAR_2, 1e-12));
    }

    #[test]
    fn first_step_coefficients_are_exact() {
        for t_steps in 1..=8 {
            let s = make_schedule(t_steps, 0.1, 20.0).unwrap();
            assert_eq!(s.coef_x0(1).unwrap(), 1.0);
            assert_eq!(s.coef_xt(1).unwrap(), 0.0);
            assert_eq!(s.posterior_var(1).unwrap(), 0.0);
        }
    }

    #[test]
    fn chain_end_telescopes_to_fixed_noise_level() {
        // alpha_bar[T] = exp(-(beta_min + beta_max)/2) for every T.
        let expect = (-10.05f64).exp();
        for t_steps in 1..=8 {
            let s = make_schedule(t_steps, 0.1, 20.0).unwrap();
            assert!(close(s.alpha_bar(t_steps).unwrap(), expect, 1e-10), "T = {t_steps}");
        }
    }

    #[test]
    fn betas_increase_and_alpha_bar_decreases() {
        for t_steps in 2..=8 {
            let s = make_schedule(t_steps, 0.1, 20.0).unwrap();
            for t in 2..=t_steps {
                assert!(s.beta(t).unwrap() > s.beta(t - 1).unwrap());
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                assert!(s.beta(t).unwrap() > 0.0 && s.beta(t).unwrap() < 1.0);
            }
        }
    }

    #[test]
    fn schedule_validation_errors() {
        assert!(matches!(make_schedule(0, 0.1, 20.0), Err(Error::Config(_))));
        assert!(matches!(make_schedule(9, 0.1, 20.0), Err(Error::Config(_))));
        assert!(matches!(make_schedule(2, 20.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(make_schedule(2, 0.0, 20.0), Err(Error::Config(_))));
        // Too-gentle schedule leaves signal at the end of the chain.
        assert!(matches!(make_schedule(2, 0.001, 0.01), Err(Error::Config(_))));
    }

    #[test]
    fn from_betas_roundtrip() {
        let s = make_schedule(4, 0.1, 20.0).unwrap();
        let s2 = DiffusionSchedule::from_betas(s.betas()).unwrap();
        for t in 1..=4 {
            assert_eq!(s.coef_x0(t).unwrap(), s2.coef_x0(t).unwrap());
            assert_eq!(s.coef_xt(t).unwrap(), s2.coef_xt(t).unwrap());
            assert_eq!(s.posterior_var(t).unwrap(), s2.posterior_var(t).unwrap());
        }
    }

    fn test_packet(seed: f32) -> WaveletPacket {
        let img: Vec<f32> = (0..3 * 8 * 8).map(|i| (i as f32 * 0.311 + seed).sin()).collect();
        dwt2d(&img, 3, 8, 8, true).unwrap()
    }

    #[test]
    fn q_sample_zero_noise_and_zero_signal() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        let x0 = test_packet(0.0);
        let zero = Tensor::zeros(&[1, 12, 4, 4]);
        for t in 1..=2 {
            let out = q_sample(&x0, t, &zero, &s).unwrap();
            let scale = s.alpha_bar(t).unwrap().sqrt() as f32;
            for (o, x) in out.data().iter().zip(x0.data()) {
                assert!((o - scale * x).abs() < 1e-6);
            }
        }
        let noise = Tensor::from_vec((0..192).map(|i| (i as f32 * 0.7).cos()).collect(), &[1, 12, 4, 4]);
        let zero_x0 = WaveletPacket::from_data(vec![0.0; 192], 3, 4, 4, true).unwrap();
        let out = q_sample(&zero_x0, 2, &noise, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(2).unwrap()).sqrt() as f32;
        for (o, n) in out.data().iter().zip(noise.data()) {
            assert!((o - scale * n).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_unit_signal_golden() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        let ones = WaveletPacket::from_data(vec![1.0; 192], 3, 4, 4, true).unwrap();
        let zero = Tensor::zeros(&[1, 12, 4, 4]);
        let out = q_sample(&ones, 2, &zero, &s).unwrap();
        for v in out.data() {
            assert!((*v as f64 - SQRT_AB2).abs() < 1e-8, "{v} vs {SQRT_AB2}");
        }
    }

    #[test]
    fn q_sample_rejects_bad_t_and_shape() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        let x0 = test_packet(1.0);
        let zero = Tensor::zeros(&[1, 12, 4, 4]);
        assert!(matches!(q_sample(&x0, 0, &zero, &s), Err(Error::Index(_))));
        assert!(matches!(q_sample(&x0, 3, &zero, &s), Err(Error::Index(_))));
        let bad = Tensor::zeros(&[1, 12, 2, 2]);
        assert!(matches!(q_sample(&x0, 1, &bad, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn posterior_collapses_at_t1() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        let x0_hat = test_packet(2.0).to_tensor();
        let x_t = test_packet(3.0).to_tensor();
        let (mean, var) = posterior_params(&x0_hat, &x_t, 1, &s).unwrap();
        assert_eq!(var, 0.0);
        for (m, x) in mean.data().iter().zip(x0_hat.data()) {
            assert_eq!(m, x);
        }
    }

    #[test]
    fn posterior_linearity_on_equal_inputs() {
        let s = make_schedule(4, 0.1, 20.0).unwrap();
        let v = test_packet(4.0).to_tensor();
        for t in 2..=4 {
            let (mean, _) = posterior_params(&v, &v, t, &s).unwrap();
            let k = (s.coef_x0(t).unwrap() + s.coef_xt(t).unwrap()) as f32;
            for (m, x) in mean.data().iter().zip(v.data()) {
                assert!((m - k * x).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampler_returns_prediction_verbatim_with_perfect_denoiser() {
        let x0 = test_packet(5.0);
        for t_steps in [1usize, 2, 8] {
            let s = make_schedule(t_steps, 0.1, 20.0).unwrap();
            let truth = x0.clone();
            let stub = move |_: &Tensor, _: &Tensor, _: usize| truth.to_tensor();
            let mut ns = NoiseState::new(7);
            let out = sample(&stub, &test_packet(6.0), &s, &mut ns).unwrap();
            assert_eq!(out.data(), x0.data(), "T = {t_steps}");
        }
    }

    #[test]
    fn sampling_is_reproducible_and_seed_sensitive() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        // A denoiser that actually depends on x_t, so noise draws matter.
        let gen = |x_t: &Tensor, x_lr: &Tensor, _t: usize| x_t.mul_scalar(0.5).add(&x_lr.mul_scalar(0.3));
        let x_lr = test_packet(7.0);
        let mut ns1 = NoiseState::new(42);
        let out1 = sample(&gen, &x_lr, &s, &mut ns1).unwrap();
        let mut ns2 = NoiseState::new(42);
        let out2 = sample(&gen, &x_lr, &s, &mut ns2).unwrap();
        assert_eq!(out1.data(), out2.data());
        let mut ns3 = NoiseState::new(43);
        let out3 = sample(&gen, &x_lr, &s, &mut ns3).unwrap();
        assert_ne!(out1.data(), out3.data());
    }

    #[test]
    fn step_rejects_wrong_generator_shape() {
        let s = make_schedule(2, 0.1, 20.0).unwrap();
        let bad = |_: &Tensor, _: &Tensor, _: usize| Tensor::zeros(&[1, 12, 2, 2]);
        let x_t = Tensor::zeros(&[1, 12, 4, 4]);
        let x_lr = Tensor::zeros(&[1, 12, 4, 4]);
        let mut ns = NoiseState::new(0);
        assert!(matches!(
            p_sample_step(&bad, &x_t, &x_lr, 2, &s, &mut ns),
            Err(Error::Shape(_))
        ));
    }

    /// Small-scale chain consistency: iterating the single-step forward
    /// kernel matches the closed-form marginal within 4 standard errors.
    /// (The acceptance suite runs the full-size version.)
    #[test]
    fn forward_chain_matches_closed_form_marginals() {
        let s = make_schedule(4, 0.1, 20.0).unwrap();
        let x0v = 0.6f32;
        let n_draws = 4000;
        let t_check = 3;
        let mut ns = NoiseState::new(11);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n_draws {
            let mut x = x0v;
            for t in 1..=t_check {
                let z = ns.normal(&[1]).item();
                x = (s.alpha(t).unwrap().sqrt() as f32) * x + (s.beta(t).unwrap().sqrt() as f32) * z;
            }
            sum += x as f64;
            sumsq += (x as f64) * (x as f64);
        }
        let mean = sum / n_draws as f64;
        let var = sumsq / n_draws as f64 - mean * mean;
        let expect_mean = s.alpha_bar(t_check).unwrap().sqrt() * x0v as f64;
        let expect_std = (1.0 - s.alpha_bar(t_check).unwrap()).sqrt();
        let se_mean = expect_std / (n_draws as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() < 4.0 * se_mean,
            "mean {mean} vs {expect_mean} (se {se_mean})"
        );
        let se_var = expect_std * expect_std * (2.0 / (n_draws as f64 - 1.0)).sqrt();
        assert!(
            (var - expect_std * expect_std).abs() < 4.0 * se_var,
            "var {var} vs {} (se {se_var})",
            expect_std * expect_std
        );
    }
}
