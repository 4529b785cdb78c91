//! Adversarial training: losses, R1 regularization, Adam, EMA, and the
//! alternating discriminator/generator step.
//!
//! The discriminator judges (x_{t-1}, x_t) pairs: real x_{t-1} comes from the
//! closed-form forward process, fake x_{t-1} from the posterior around the
//! generator's x0 prediction. One step updates D (with a lazy R1 penalty every
//! `lazy_reg_interval`-th iteration), then G (adversarial + L1 reconstruction),
//! then folds the new generator weights into an EMA copy.
//!
//! Scalar losses ([`d_loss`], [`g_adv_loss`], [`total_g_loss`]) are the f64
//! reference forms used for reporting and tests; the graph-building tensor
//! versions use the same stable softplus rewrite in f32.

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Params};
use crate::rng::{InitRng, NoiseState};
use crate::tensor::{backward, no_grad, GradMap, Tensor};

/// Overflow-free softplus: ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|}).
fn softplus64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Non-saturating discriminator loss softplus(-real) + softplus(fake),
/// equal to -ln sigma(real) - ln(1 - sigma(fake)) wherever the latter is
/// finite, but stable for any logit magnitude.
pub fn d_loss(real_logit: f64, fake_logit: f64) -> Result<f64> {
    let v = softplus64(-real_logit) + softplus64(fake_logit);
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "d_loss({real_logit}, {fake_logit}) is non-finite"
        )));
    }
    Ok(v)
}

/// Non-saturating generator adversarial loss softplus(-fake).
pub fn g_adv_loss(fake_logit: f64) -> Result<f64> {
    let v = softplus64(-fake_logit);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("g_adv_loss({fake_logit}) is non-finite")));
    }
    Ok(v)
}

/// Total generator objective: adversarial + lambda * reconstruction.
pub fn total_g_loss(adv: f64, rec: f64, lambda_rec: f64) -> f64 {
    adv + lambda_rec * rec
}

/// Graph form of [`d_loss`], batch-averaged over logit vectors.
pub fn d_loss_tensor(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    let real_term = real_logits.neg().softplus().mean_all();
    let fake_term = fake_logits.softplus().mean_all();
    real_term.add(&fake_term)
}

/// Graph form of [`g_adv_loss`], batch-averaged.
pub fn g_adv_tensor(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean_all()
}

/// Mean absolute error between prediction and target.
pub fn rec_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "rec_loss: prediction shape {:?} does not match target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target).abs().mean_all())
}

/// R1 gradient penalty for an arbitrary logit map:
/// (gamma / 2) * E_batch[ ||d logits / d x_prev||^2 ].
///
/// `x_prev` must have been marked with `require_grad`; the returned scalar
/// stays on the graph, so backpropagating through it reaches the weights
/// inside `forward` (gradient-of-gradient).
pub fn r1_penalty_with(
    forward: impl FnOnce(&Tensor) -> Result<Tensor>,
    x_prev: &Tensor,
    gamma: f64,
) -> Result<Tensor> {
    if !x_prev.requires_grad() {
        return Err(Error::Config(
            "r1_penalty: x_prev does not track gradients (call require_grad first)".into(),
        ));
    }
    let n = x_prev.shape()[0];
    let logits = forward(x_prev)?;
    let grads = backward(&logits.sum_all(), true);
    let gx = grads.get(x_prev).ok_or_else(|| {
        Error::Config("r1_penalty: no gradient reached x_prev".into())
    })?;
    Ok(gx.mul(gx).sum_all().mul_scalar((0.5 * gamma / n as f64) as f32))
}

/// R1 penalty with the discriminator's own forward pass.
pub fn r1_penalty(
    disc: &Discriminator,
    params: &Params,
    x_prev: &Tensor,
    x_t: &Tensor,
    t: &[usize],
    gamma: f64,
) -> Result<Tensor> {
    r1_penalty_with(|x| disc.forward(params, x, x_t, t), x_prev, gamma)
}

/// Blend `live` weights into `ema`: ema <- decay * ema + (1 - decay) * live.
/// decay = 0 copies `live` exactly.
pub fn ema_update(ema: &mut Params, live: &Params, decay: f64) -> Result<()> {
    if ema.len() != live.len() {
        return Err(Error::Shape(format!(
            "ema_update: {} parameters vs {}",
            ema.len(),
            live.len()
        )));
    }
    for i in 0..ema.len() {
        if ema.name(i) != live.name(i) || ema.tensor(i).shape() != live.tensor(i).shape() {
            return Err(Error::Shape(format!(
                "ema_update: parameter {i} mismatch ({} {:?} vs {} {:?})",
                ema.name(i),
                ema.tensor(i).shape(),
                live.name(i),
                live.tensor(i).shape()
            )));
        }
        let e = ema.tensor(i).data().to_vec();
        let l = live.tensor(i).data();
        let blended: Vec<f32> = e
            .iter()
            .zip(l)
            .map(|(&e, &l)| (decay * e as f64 + (1.0 - decay) * l as f64) as f32)
            .collect();
        ema.set_data(i, blended);
    }
    Ok(())
}

/// Adam with f64 moment buffers. A parameter absent from the gradient map is
/// left untouched (moments included).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &Params) -> Adam {
        let m = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        Adam { lr, beta1, beta2, eps, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Raw optimizer state for checkpointing: (step, m, v).
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} moment buffers, expected {}",
                m.len(),
                self.m.len()
            )));
        }
        for (i, (mm, vv)) in m.iter().zip(&v).enumerate() {
            if mm.len() != self.m[i].len() || vv.len() != self.v[i].len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment buffer {i} has length {}, expected {}",
                    mm.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut Params, grads: &GradMap) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let p = params.tensor(i).clone();
            let Some(g) = grads.get(&p) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    params.name(i),
                    p.shape()
                )));
            }
            let gd = g.data();
            let mut x = p.data().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..x.len() {
                let gj = gd[j] as f64;
                if !gj.is_finite() {
                    return Err(Error::Numeric(format!(
                        "adam: non-finite gradient for parameter {}",
                        params.name(i)
                    )));
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                x[j] = (x[j] as f64 - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
            params.set_data(i, x);
        }
        Ok(())
    }
}

/// Optimization hyperparameters. Batch size and iteration count belong to the
/// run configuration; these knobs fully determine one training step.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub lambda_rec: f64,
    pub r1_gamma: f64,
    pub lazy_reg_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr_gen: 2e-4,
            lr_disc: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            ema_decay: 0.9999,
            lambda_rec: 1.0,
            r1_gamma: 1.0,
            lazy_reg_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_gen", self.lr_gen),
            ("lr_disc", self.lr_disc),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must be in [0, 1], got {}",
                self.ema_decay
            )));
        }
        for (name, v) in [("lambda_rec", self.lambda_rec), ("r1_gamma", self.r1_gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lazy_reg_interval == 0 {
            return Err(Error::Config("lazy_reg_interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar record of one completed training step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// 0-based index of the step that produced these numbers.
    pub iteration: u64,
    pub d_adv: f64,
    /// R1 penalty value on the iterations where it fired, None otherwise.
    pub r1: Option<f64>,
    pub d_total: f64,
    pub g_adv: f64,
    pub rec: f64,
    pub g_total: f64,
}

/// Repeat one value per sample across its channel row, then broadcast to
/// NCHW. Used for per-sample schedule coefficients.
fn per_sample_bcast(vals: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(vals.len() * c);
    for &v in vals {
        data.extend(std::iter::repeat(v as f32).take(c));
    }
    Tensor::from_vec(data, &[vals.len(), c]).bcast_nc_hw(h, w)
}

fn gather(t: &[usize], f: impl Fn(usize) -> Result<f64>) -> Result<Vec<f64>> {
    t.iter().map(|&ti| f(ti)).collect()
}

/// Draw the correlated training pair (x_{t-1}, x_t): x_{t-1} from the closed
/// form q(x_{t-1} | x0), then x_t by one forward kernel step
/// sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z. Marginally x_t ~ q(x_t | x0), but
/// the pair shares the sub-t noise, matching what the sampler sees at test
/// time. Consumes exactly two normal draws.
pub fn sample_training_chain(
    x0: &Tensor,
    t: &[usize],
    sched: &DiffusionSchedule,
    noise: &mut NoiseState,
) -> Result<(Tensor, Tensor)> {
    let s = x0.shape();
    if s.len() != 4 || s[0] != t.len() {
        return Err(Error::Shape(format!(
            "sample_training_chain: x0 shape {s:?} does not match {} timesteps",
            t.len()
        )));
    }
    for &ti in t {
        sched.check_timestep(ti)?;
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let a_prev = per_sample_bcast(
        &gather(t, |ti| Ok(sched.alpha_bar(ti - 1)?.sqrt()))?,
        c,
        h,
        w,
    );
    let b_prev = per_sample_bcast(
        &gather(t, |ti| Ok((1.0 - sched.alpha_bar(ti - 1)?).sqrt()))?,
        c,
        h,
        w,
    );
    let sqrt_alpha = per_sample_bcast(
        &gather(t, |ti| Ok(sched.alpha(ti)?.sqrt()))?,
        c,
        h,
        w,
    );
    let sqrt_beta = per_sample_bcast(
        &gather(t, |ti| Ok(sched.beta(ti)?.sqrt()))?,
        c,
        h,
        w,
    );
    let eps_prev = noise.normal(s);
    let z_step = noise.normal(s);
    let x_prev = a_prev.mul(x0).add(&b_prev.mul(&eps_prev));
    let x_t = sqrt_alpha.mul(&x_prev).add(&sqrt_beta.mul(&z_step));
    Ok((x_prev, x_t))
}

/// Everything that evolves during training. Reproducible end to end: given
/// the same configs, seed, and batches, two states produce bitwise identical
/// weights and losses.
pub struct TrainState {
    pub gen: Generator,
    pub disc: Discriminator,
    pub gen_params: Params,
    pub disc_params: Params,
    pub ema_params: Params,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub schedule: DiffusionSchedule,
    pub noise: NoiseState,
    pub cfg: TrainConfig,
    pub iteration: u64,
    /// How many times the R1 penalty has fired.
    pub r1_count: u64,
}

impl TrainState {
    pub fn new(
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        schedule: DiffusionSchedule,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<TrainState> {
        cfg.validate()?;
        if disc_cfg.in_channels != 2 * gen_cfg.out_channels {
            return Err(Error::Config(format!(
                "discriminator in_channels {} must be twice the generator out_channels {} \
                 (it judges (x_prev, x_t) pairs)",
                disc_cfg.in_channels, gen_cfg.out_channels
            )));
        }
        let mut init = InitRng::new(seed);
        let mut gen_params = Params::new();
        let gen = Generator::new(gen_cfg, &mut gen_params, &mut init)?;
        let mut disc_params = Params::new();
        let disc = Discriminator::new(disc_cfg, &mut disc_params, &mut init)?;
        let ema_params = gen_params.clone_values();
        let opt_gen = Adam::new(cfg.lr_gen, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, &gen_params);
        let opt_disc =
            Adam::new(cfg.lr_disc, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, &disc_params);
        Ok(TrainState {
            gen,
            disc,
            gen_params,
            disc_params,
            ema_params,
            opt_gen,
            opt_disc,
            schedule,
            noise: NoiseState::new(seed),
            cfg,
            iteration: 0,
            r1_count: 0,
        })
    }

    /// Stack packet data from a batch of pairs into [n, c, h, w] tensors
    /// (x0, x_lr).
    fn stack_batch(&self, batch: &[&crate::datapipe::SamplePair]) -> Result<(Tensor, Tensor)> {
        let first = batch[0];
        let (c, h, w) = (first.x0.channels(), first.x0.height(), first.x0.width());
        let mut x0 = Vec::with_capacity(batch.len() * c * h * w);
        let mut x_lr = Vec::with_capacity(batch.len() * c * h * w);
        for p in batch {
            for (packet, name) in [(&p.x0, "x0"), (&p.x_lr, "x_lr")] {
                if packet.channels() != c || packet.height() != h || packet.width() != w {
                    return Err(Error::Shape(format!(
                        "batch: {name} of '{}' is {}x{}x{}, expected {c}x{h}x{w}",
                        p.id,
                        packet.channels(),
                        packet.height(),
                        packet.width()
                    )));
                }
                if !packet.scaled() {
                    return Err(Error::Config(format!(
                        "batch: packet {name} of '{}' is not scaled",
                        p.id
                    )));
                }
            }
            x0.extend_from_slice(p.x0.data());
            x_lr.extend_from_slice(p.x_lr.data());
        }
        let shape = [batch.len(), c, h, w];
        Ok((Tensor::from_vec(x0, &shape), Tensor::from_vec(x_lr, &shape)))
    }

    /// One alternating D/G update on a batch of pairs.
    ///
    /// Noise draw order is fixed — t indices, chain noise (2 draws), D-phase
    /// posterior noise, G-phase posterior noise — so the draw counter
    /// advances by batch_size + 4 per step regardless of which timesteps were
    /// drawn or whether R1 fired.
    pub fn train_step(&mut self, batch: &[&crate::datapipe::SamplePair]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("train_step: empty batch".into()));
        }
        let (x0, x_lr) = self.stack_batch(batch)?;
        let s = x0.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);

        let t_max = self.schedule.steps() as u32;
        let t: Vec<usize> =
            (0..n).map(|_| self.noise.uniform_int(1, t_max) as usize).collect();
        let (x_prev_real, x_t) = sample_training_chain(&x0, &t, &self.schedule, &mut self.noise)?;
        let z_d = self.noise.normal(&s);
        let z_g = self.noise.normal(&s);

        // Posterior coefficients around the model's x0 prediction; at t = 1
        // the posterior collapses onto the prediction itself.
        let c0 = per_sample_bcast(&gather(&t, |ti| self.schedule.coef_x0(ti))?, c, h, w);
        let ct = per_sample_bcast(&gather(&t, |ti| self.schedule.coef_xt(ti))?, c, h, w);
        let sv = per_sample_bcast(
            &gather(&t, |ti| Ok(self.schedule.posterior_var(ti)?.sqrt()))?,
            c,
            h,
            w,
        );

        let fired = (self.iteration + 1) % self.cfg.lazy_reg_interval == 0;

        // --- Discriminator update. The generator runs detached.
        let x0_hat_d = no_grad(|| self.gen.forward(&self.gen_params, &x_t, &x_lr, &t))?;
        let fake_prev_d = c0.mul(&x0_hat_d).add(&ct.mul(&x_t)).add(&sv.mul(&z_d));
        let x_prev_d = if fired { x_prev_real.require_grad() } else { x_prev_real.clone() };

        let real_logits = self.disc.forward(&self.disc_params, &x_prev_d, &x_t, &t)?;
        let fake_logits = self.disc.forward(&self.disc_params, &fake_prev_d, &x_t, &t)?;
        let mut d_total_t = d_loss_tensor(&real_logits, &fake_logits);
        let d_adv = d_total_t.item() as f64;
        let mut r1 = None;
        if fired {
            let pen = r1_penalty(
                &self.disc,
                &self.disc_params,
                &x_prev_d,
                &x_t,
                &t,
                self.cfg.r1_gamma,
            )?;
            r1 = Some(pen.item() as f64);
            d_total_t = d_total_t.add(&pen);
        }
        let d_total = d_total_t.item() as f64;
        if !d_total.is_finite() {
            return Err(Error::Numeric(format!(
                "iteration {}: d_loss is non-finite ({d_total})",
                self.iteration
            )));
        }
        let d_grads = backward(&d_total_t, false);
        self.opt_disc.step(&mut self.disc_params, &d_grads)?;

        // --- Generator update against the just-updated discriminator.
        let x0_hat = self.gen.forward(&self.gen_params, &x_t, &x_lr, &t)?;
        let fake_prev_g = c0.mul(&x0_hat).add(&ct.mul(&x_t)).add(&sv.mul(&z_g));
        let fake_logits_g = self.disc.forward(&self.disc_params, &fake_prev_g, &x_t, &t)?;
        let g_adv_t = g_adv_tensor(&fake_logits_g);
        let rec_t = rec_loss(&x0_hat, &x0)?;
        let g_total_t = g_adv_t.add(&rec_t.mul_scalar(self.cfg.lambda_rec as f32));
        let g_adv = g_adv_t.item() as f64;
        let rec = rec_t.item() as f64;
        let g_total = g_total_t.item() as f64;
        if !g_total.is_finite() {
            return Err(Error::Numeric(format!(
                "iteration {}: g_loss is non-finite ({g_total})",
                self.iteration
            )));
        }
        let g_grads = backward(&g_total_t, false);
        self.opt_gen.step(&mut self.gen_params, &g_grads)?;

        ema_update(&mut self.ema_params, &self.gen_params, self.cfg.ema_decay)?;

        let stats = StepStats {
            iteration: self.iteration,
            d_adv,
            r1,
            d_total,
            g_adv,
            rec,
            g_total,
        };
        self.iteration += 1;
        if fired {
            self.r1_count += 1;
        }
        Ok(stats)
    }
}
