//! Guided subspace reverse diffusion: both factors (reduced coefficient and
//! spectral basis) start as Gaussian noise and are denoised jointly, with the
//! observation residual steering each step through moment-corrected guidance
//! and an optional per-step residual refinement (ARGM).

use crate::datapipe::HsiCube;
use crate::degradation::DegradationModel;
use crate::diffusion::{reverse_step_kernel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::networks::NoiseModel;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// How the guidance gradient treats the noise predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    /// Differentiate through the networks (the exact gradient path).
    #[default]
    FullBackprop,
    /// Treat network outputs as constants; the clean-estimate gradient
    /// reduces to the cheap 1/sqrt(abar_t) factor.
    FixedEps,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full-backprop" => Ok(GuidanceMode::FullBackprop),
            "fixed-eps" => Ok(GuidanceMode::FixedEps),
            other => Err(Error::Config(format!("unknown guidance mode '{other}'"))),
        }
    }
}

/// All scalar knobs of the sampling loop.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Balance weight of the multispectral term in the guidance loss.
    pub lambda1: f64,
    /// Balance weight of the multispectral term in the refinement loss.
    pub lambda2: f64,
    /// Guidance step size for the coefficient.
    pub rho1: f64,
    /// Guidance step size for the basis.
    pub rho2: f64,
    /// Refinement steps are rho/step_ratio.
    pub step_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Division-safety constant in the moment-normalized step.
    pub eps_div: f64,
    /// Number of diffusion steps T.
    pub steps: usize,
    /// Subspace dimension d.
    pub subspace_dim: usize,
    pub argm_enabled: bool,
    pub guidance_mode: GuidanceMode,
    /// Ablation switch: when false the coefficient keeps its initialization.
    pub update_spatial: bool,
    /// Ablation switch: when false the basis keeps its initialization.
    pub update_spectral: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            rho1: 0.05,
            rho2: 0.05,
            step_ratio: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_div: 1e-8,
            steps: 500,
            subspace_dim: 8,
            argm_enabled: true,
            guidance_mode: GuidanceMode::FullBackprop,
            update_spatial: true,
            update_spectral: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho1 < 0.0 || self.rho2 < 0.0 || self.step_ratio <= 0.0 {
            return Err(Error::Parameter { name: "rho", detail: "step sizes must be >= 0".into() });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter { name: "beta", detail: "decay rates must be in (0,1)".into() });
        }
        if self.subspace_dim < 1 {
            return Err(Error::Parameter { name: "subspace_dim", detail: "d must be >= 1".into() });
        }
        if self.steps < 2 {
            return Err(Error::Parameter { name: "steps", detail: "T must be >= 2".into() });
        }
        Ok(())
    }
}

/// The evolving pair plus guidance moments.
#[derive(Debug, Clone)]
pub struct SamplerState {
    /// Reduced coefficient `[d x H x W]` (channels first).
    pub coeff: Tensor,
    /// Spectral basis `[d x C]`.
    pub basis: Tensor,
    pub m_coeff: Vec<f64>,
    pub v_coeff: Vec<f64>,
    pub m_basis: Vec<f64>,
    pub v_basis: Vec<f64>,
    /// Current step, counting down from T to 1.
    pub t: usize,
}

impl SamplerState {
    /// Fresh state at t = T: both factors standard normal, moments zero.
    /// Draw order: coefficient first, then basis.
    pub fn init(d: usize, h: usize, w: usize, bands: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let coeff = Tensor::randn(&[d, h, w], rng).with_grad();
        let basis = Tensor::randn(&[d, bands], rng).with_grad();
        let (nc, nb) = (coeff.numel(), basis.numel());
        SamplerState {
            coeff,
            basis,
            m_coeff: vec![0.0; nc],
            v_coeff: vec![0.0; nc],
            m_basis: vec![0.0; nb],
            v_basis: vec![0.0; nb],
            t: steps,
        }
    }
}

/// Per-run traces: the guidance loss and the refinement residual, one value
/// per step (the residual is evaluated even when refinement is disabled).
#[derive(Debug, Clone, Default)]
pub struct FusionDiagnostics {
    pub guidance_loss: Vec<f64>,
    pub residual_loss: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Moment algebra
// ---------------------------------------------------------------------------

/// First/second moment decay update.
pub fn moment_update(m: &mut [f64], v: &mut [f64], g: &[f64], beta1: f64, beta2: f64) {
    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
    }
}

/// Bias correction after `k` updates (k = 1 on the first step).
pub fn bias_correct(m: &[f64], v: &[f64], k: usize, beta1: f64, beta2: f64) -> (Vec<f64>, Vec<f64>) {
    let c1 = 1.0 - beta1.powi(k as i32);
    let c2 = 1.0 - beta2.powi(k as i32);
    let m_hat = m.iter().map(|x| x / c1).collect();
    let v_hat = v.iter().map(|x| x / c2).collect();
    (m_hat, v_hat)
}

/// Moment-corrected noise estimate: `eps - rho * m_hat / (sqrt(v_hat) + eps_div)`.
pub fn guided_eps(eps: &[f64], m_hat: &[f64], v_hat: &[f64], rho: f64, eps_div: f64) -> Vec<f64> {
    eps.iter()
        .zip(m_hat.iter().zip(v_hat))
        .map(|(&e, (&m, &v))| e - rho * (m / (v.sqrt() + eps_div)))
        .collect()
}

// ---------------------------------------------------------------------------
// Observation loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Reduction {
    Sum,
    Mean,
}

/// Constant tape inputs shared by every step of one fusion run.
struct ObsConstants {
    x_pix: Tensor,   // [h*w x C]
    y_pix: Tensor,   // [H*W x c]
    srf_t: Tensor,   // [C x c]
    rows: usize,     // H
    cols: usize,     // W
    scale: usize,
}

impl ObsConstants {
    fn new(lr_hsi: &HsiCube, hr_msi: &HsiCube, model: &DegradationModel) -> Result<Self> {
        if hr_msi.rows != lr_hsi.rows * model.scale || hr_msi.cols != lr_hsi.cols * model.scale {
            return Err(Error::Dimension {
                op: "run_fusion",
                detail: format!(
                    "MSI {}x{} is not scale {} of HSI {}x{}",
                    hr_msi.rows, hr_msi.cols, model.scale, lr_hsi.rows, lr_hsi.cols
                ),
            });
        }
        if model.srf.in_bands != lr_hsi.bands || model.srf.out_bands != hr_msi.bands {
            return Err(Error::Dimension {
                op: "run_fusion",
                detail: format!(
                    "SRF {}x{} vs HSI bands {} / MSI bands {}",
                    model.srf.out_bands, model.srf.in_bands, lr_hsi.bands, hr_msi.bands
                ),
            });
        }
        Ok(ObsConstants {
            x_pix: lr_hsi.to_pixmat(),
            y_pix: hr_msi.to_pixmat(),
            srf_t: model.srf.transposed(),
            rows: hr_msi.rows,
            cols: hr_msi.cols,
            scale: model.scale,
        })
    }

    /// Data-fidelity graph on `tape` given factor nodes `a0` `[d x H x W]`
    /// and `e0` `[d x C]`.
    ///
    /// `Reduction::Sum` is the guidance form; its gradient scale cancels in
    /// the moment-normalized step. The refinement step uses plain gradients,
    /// so it takes `Reduction::Mean`: with per-term means the descent step
    /// rho/step_ratio is stable independent of image size (the summed form's
    /// curvature grows with the pixel count and diverges at the default
    /// step sizes).
    fn loss_graph(&self, tape: &mut Tape, a0: Var, e0: Var, lambda: f64, red: Reduction) -> Result<Var> {
        let a0_mat = tape.chw_to_pixmat(a0)?;
        let z0 = tape.matmul(a0_mat, e0)?;
        let xv = tape.input(&self.x_pix)?;
        let yv = tape.input(&self.y_pix)?;
        let rt = tape.input(&self.srf_t)?;
        let xhat = tape.bicubic_down(z0, self.rows, self.cols, self.scale)?;
        let yhat = tape.matmul(z0, rt)?;
        let (loss_x, loss_y) = match red {
            Reduction::Sum => (tape.sum_squared_diff(xhat, xv)?, tape.sum_squared_diff(yhat, yv)?),
            Reduction::Mean => (tape.mse_loss(xhat, xv)?, tape.mse_loss(yhat, yv)?),
        };
        let weighted = tape.scale(loss_y, lambda)?;
        tape.add(loss_x, weighted)
    }
}

/// Data-fidelity value for a candidate factor pair: squared residual of the
/// downsampled product against the LR-HSI plus `lambda` times the squared
/// residual of the spectrally mixed product against the HR-MSI.
pub fn guidance_loss(
    coeff: &Tensor,
    basis: &Tensor,
    lr_hsi: &HsiCube,
    hr_msi: &HsiCube,
    model: &DegradationModel,
    lambda: f64,
) -> Result<f64> {
    let obs = ObsConstants::new(lr_hsi, hr_msi, model)?;
    let mut tape = Tape::new();
    let a0 = tape.constant(&coeff.shape, &coeff.data)?;
    let e0 = tape.constant(&basis.shape, &basis.data)?;
    let loss = obs.loss_graph(&mut tape, a0, e0, lambda, Reduction::Sum)?;
    Ok(tape.value(loss)[0])
}

/// Clean-pair estimate at the state's current step using the raw network
/// outputs.
pub fn estimate_clean_pair<SA: NoiseModel, SP: NoiseModel>(
    state: &SamplerState,
    spatial: &SA,
    spectral: &SP,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    if state.t < 1 || state.t > schedule.steps {
        return Err(Error::Parameter {
            name: "t",
            detail: format!("{} outside 1..={}", state.t, schedule.steps),
        });
    }
    let abar = schedule.abar(state.t);
    let mut tape = Tape::new();
    let a = tape.constant(&state.coeff.shape, &state.coeff.data)?;
    let e = tape.constant(&state.basis.shape, &state.basis.data)?;
    let eps_a = spatial.forward(&mut tape, a, state.t)?;
    let eps_e = spectral.forward(&mut tape, e, state.t)?;
    let a0 = tape.predict_x0(a, eps_a, abar)?;
    let e0 = tape.predict_x0(e, eps_e, abar)?;
    Ok((tape.value_tensor(a0), tape.value_tensor(e0)))
}

/// One refinement step on a factor pair: plain gradient descent on the
/// residual loss with step sizes rho/step_ratio. Returns the refined pair
/// and the pre-refinement residual value.
pub fn argm_refine(
    coeff: &Tensor,
    basis: &Tensor,
    lr_hsi: &HsiCube,
    hr_msi: &HsiCube,
    model: &DegradationModel,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Tensor, f64)> {
    let obs = ObsConstants::new(lr_hsi, hr_msi, model)?;
    refine_with(&obs, coeff, basis, cfg)
}

fn refine_with(
    obs: &ObsConstants,
    coeff: &Tensor,
    basis: &Tensor,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Tensor, f64)> {
    let mut tape = Tape::new();
    let mut a_in = coeff.clone();
    a_in.requires_grad = true;
    let mut e_in = basis.clone();
    e_in.requires_grad = true;
    let a = tape.input(&a_in)?;
    let e = tape.input(&e_in)?;
    let loss = obs.loss_graph(&mut tape, a, e, cfg.lambda2, Reduction::Mean)?;
    let loss_val = tape.value(loss)[0];
    tape.backward(loss)?;

    let ga = tape.grad(a).ok_or_else(|| Error::Tape("missing coefficient gradient".into()))?;
    let ge = tape.grad(e).ok_or_else(|| Error::Tape("missing basis gradient".into()))?;
    if !ga.iter().all(|v| v.is_finite()) || !ge.iter().all(|v| v.is_finite()) {
        return Err(Error::SamplerDiverged { step: 0 });
    }
    let step_a = cfg.rho1 / cfg.step_ratio;
    let step_e = cfg.rho2 / cfg.step_ratio;
    let mut a_out = coeff.clone();
    let mut e_out = basis.clone();
    if cfg.update_spatial {
        for (x, g) in a_out.data.iter_mut().zip(ga) {
            *x -= step_a * g;
        }
    }
    if cfg.update_spectral {
        for (x, g) in e_out.data.iter_mut().zip(ge) {
            *x -= step_e * g;
        }
    }
    Ok((a_out, e_out, loss_val))
}

// ---------------------------------------------------------------------------
// The sampling loop
// ---------------------------------------------------------------------------

/// Result of one guided step: moment-corrected noise estimates and the raw
/// clean estimates feeding the reverse update.
struct GuidedStep {
    eps_hat_a: Vec<f64>,
    eps_hat_e: Vec<f64>,
    x0_a: Vec<f64>,
    x0_e: Vec<f64>,
    loss: f64,
}

fn guided_noise_step<SA: NoiseModel, SP: NoiseModel>(
    state: &mut SamplerState,
    spatial: &SA,
    spectral: &SP,
    obs: &ObsConstants,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<GuidedStep> {
    let t = state.t;
    let abar = schedule.abar(t);
    let map_diverge = |e: Error| match e {
        Error::NonFinite { .. } => Error::SamplerDiverged { step: t },
        other => other,
    };

    let mut tape = Tape::new();
    let a_in = tape.input(&state.coeff)?;
    let e_in = tape.input(&state.basis)?;
    let eps_a_raw = spatial.forward(&mut tape, a_in, t).map_err(map_diverge)?;
    let eps_e_raw = spectral.forward(&mut tape, e_in, t).map_err(map_diverge)?;
    let (eps_a_node, eps_e_node) = match cfg.guidance_mode {
        GuidanceMode::FullBackprop => (eps_a_raw, eps_e_raw),
        GuidanceMode::FixedEps => (tape.detach(eps_a_raw)?, tape.detach(eps_e_raw)?),
    };
    let a0 = tape.predict_x0(a_in, eps_a_node, abar)?;
    let e0 = tape.predict_x0(e_in, eps_e_node, abar)?;
    let loss = obs.loss_graph(&mut tape, a0, e0, cfg.lambda1, Reduction::Sum).map_err(map_diverge)?;
    let loss_val = tape.value(loss)[0];
    tape.backward(loss)?;

    let ga = tape.grad(a_in).ok_or_else(|| Error::Tape("missing coefficient gradient".into()))?;
    let ge = tape.grad(e_in).ok_or_else(|| Error::Tape("missing basis gradient".into()))?;
    if !ga.iter().all(|v| v.is_finite()) || !ge.iter().all(|v| v.is_finite()) {
        return Err(Error::SamplerDiverged { step: t });
    }

    // moments with first-step-normalized bias correction
    let k = schedule.steps - t + 1;
    moment_update(&mut state.m_coeff, &mut state.v_coeff, ga, cfg.beta1, cfg.beta2);
    moment_update(&mut state.m_basis, &mut state.v_basis, ge, cfg.beta1, cfg.beta2);
    let (mha, vha) = bias_correct(&state.m_coeff, &state.v_coeff, k, cfg.beta1, cfg.beta2);
    let (mhe, vhe) = bias_correct(&state.m_basis, &state.v_basis, k, cfg.beta1, cfg.beta2);

    Ok(GuidedStep {
        eps_hat_a: guided_eps(tape.value(eps_a_raw), &mha, &vha, cfg.rho1, cfg.eps_div),
        eps_hat_e: guided_eps(tape.value(eps_e_raw), &mhe, &vhe, cfg.rho2, cfg.eps_div),
        x0_a: tape.value(a0).to_vec(),
        x0_e: tape.value(e0).to_vec(),
        loss: loss_val,
    })
}

/// Full guided reverse diffusion from Gaussian noise to the fused image
/// `Z0 = A0 x3 E0`, clamped to [0, 1].
pub fn run_fusion<SA: NoiseModel, SP: NoiseModel>(
    lr_hsi: &HsiCube,
    hr_msi: &HsiCube,
    spatial: &SA,
    spectral: &SP,
    model: &DegradationModel,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(HsiCube, FusionDiagnostics)> {
    cfg.validate()?;
    if schedule.steps != cfg.steps {
        return Err(Error::Parameter {
            name: "steps",
            detail: format!("schedule has {} steps, config {}", schedule.steps, cfg.steps),
        });
    }
    let obs = ObsConstants::new(lr_hsi, hr_msi, model)?;
    let (h, w, bands) = (hr_msi.rows, hr_msi.cols, lr_hsi.bands);
    let mut state = SamplerState::init(cfg.subspace_dim, h, w, bands, cfg.steps, rng);
    let mut diag = FusionDiagnostics::default();

    for t in (1..=cfg.steps).rev() {
        state.t = t;
        let step = guided_noise_step(&mut state, spatial, spectral, &obs, cfg, schedule)?;
        diag.guidance_loss.push(step.loss);

        let abar_prev = schedule.abar_prev(t);
        if cfg.update_spatial {
            reverse_step_kernel(&step.x0_a, &step.eps_hat_a, abar_prev, &mut state.coeff.data);
        }
        if cfg.update_spectral {
            reverse_step_kernel(&step.x0_e, &step.eps_hat_e, abar_prev, &mut state.basis.data);
        }

        if cfg.argm_enabled {
            let (a_ref, e_ref, residual) = refine_with(&obs, &state.coeff, &state.basis, cfg)
                .map_err(|e| match e {
                    Error::SamplerDiverged { .. } => Error::SamplerDiverged { step: t },
                    other => other,
                })?;
            state.coeff = a_ref;
            state.basis = e_ref;
            diag.residual_loss.push(residual);
        } else {
            // trace the residual without touching the trajectory
            let residual = residual_loss_value(&obs, &state.coeff, &state.basis, cfg.lambda2)?;
            diag.residual_loss.push(residual);
        }
    }

    // Z0 = A0 x3 E0, clamped to the nominal range
    let mut tape = Tape::new();
    let a = tape.constant(&state.coeff.shape, &state.coeff.data)?;
    let e = tape.constant(&state.basis.shape, &state.basis.data)?;
    let a_mat = tape.chw_to_pixmat(a)?;
    let z = tape.matmul(a_mat, e).map_err(|e| match e {
        Error::NonFinite { .. } => Error::SamplerDiverged { step: 0 },
        other => other,
    })?;
    let mut data = tape.value(z).to_vec();
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    let fused = HsiCube::new(h, w, bands, data)?;
    Ok((fused, diag))
}

fn residual_loss_value(obs: &ObsConstants, coeff: &Tensor, basis: &Tensor, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(&coeff.shape, &coeff.data)?;
    let e = tape.constant(&basis.shape, &basis.data)?;
    let loss = obs.loss_graph(&mut tape, a, e, lambda, Reduction::Mean)?;
    Ok(tape.value(loss)[0])
}
