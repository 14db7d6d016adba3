//! Deterministic DDIM-style sampling loop: batch construction, guidance,
//! capture and decoding around the denoiser. eta = 0 throughout, so a
//! config fully determines every output byte.

use std::sync::Arc;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::guidance::build_batch;
use crate::inspect::{consistency_metrics, ConsistencyReport, NullSink, RunCapture};
use crate::model::{Encoders, GeneratedImage, ToyDenoiser};
use crate::tensor::{seeded_normal, SeededRng, Tensor};

/// Linear beta schedule with cumulative alpha products and the evenly
/// strided inference timesteps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Selected inference timesteps, ascending.
    pub timesteps: Vec<usize>,
}

/// Builds a schedule; alpha_bar is strictly decreasing and stays in (0,1).
pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_steps: usize,
) -> Result<NoiseSchedule> {
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "schedule requires 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    if train_steps == 0 || inference_steps == 0 || inference_steps > train_steps {
        return Err(Error::config(format!(
            "schedule requires 0 < inference_steps ({inference_steps}) <= train_steps ({train_steps})"
        )));
    }
    let mut betas = Vec::with_capacity(train_steps);
    if train_steps == 1 {
        betas.push(beta_start);
    } else {
        let span = beta_end - beta_start;
        for i in 0..train_steps {
            betas.push(beta_start + span * i as f64 / (train_steps - 1) as f64);
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut prod = 1.0f64;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    for w in alpha_bars.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::logic("alpha_bar is not strictly decreasing"));
        }
    }
    if alpha_bars.iter().any(|&a| !(0.0..1.0).contains(&a)) {
        return Err(Error::logic("alpha_bar left (0,1)"));
    }
    let ratio = train_steps / inference_steps;
    let timesteps: Vec<usize> = (0..inference_steps).map(|k| (k + 1) * ratio - 1).collect();
    Ok(NoiseSchedule {
        train_steps,
        betas,
        alphas,
        alpha_bars,
        timesteps,
    })
}

/// Batch latents plus the step bookkeeping.
#[derive(Debug, Clone)]
pub struct LatentState {
    /// `[B, h, w, c]`, finite at every step.
    pub z: Tensor,
    /// Count of completed denoising updates.
    pub step: usize,
    pub schedule: Arc<NoiseSchedule>,
}

/// The pure eta=0 update:
/// `x0 = (z - sqrt(1-abar_t) * eps) / sqrt(abar_t)`,
/// `z' = sqrt(abar_prev) * x0 + sqrt(1-abar_prev) * eps`.
pub fn ddim_update(z: &Tensor, eps: &Tensor, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<Tensor> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t < 1.0 && alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0) {
        return Err(Error::config(format!(
            "alpha bars out of range: t {alpha_bar_t}, prev {alpha_bar_prev}"
        )));
    }
    let x0 = z
        .add(&eps.scale(-(1.0 - alpha_bar_t).sqrt() as f32)?)?
        .scale((1.0 / alpha_bar_t.sqrt()) as f32)?;
    x0.scale(alpha_bar_prev.sqrt() as f32)?
        .add(&eps.scale((1.0 - alpha_bar_prev).sqrt() as f32)?)
}

/// One deterministic DDIM step from timestep `t` down to `t_prev`
/// (`None` ends at the clean sample, alpha_bar = 1).
pub fn ddim_step(
    state: &LatentState,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
) -> Result<LatentState> {
    if t >= state.schedule.train_steps {
        return Err(Error::logic(format!(
            "timestep {t} outside schedule of {} steps",
            state.schedule.train_steps
        )));
    }
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::logic(format!(
                "non-monotone timestep pair: t {t} -> t_prev {p}"
            )));
        }
    }
    let abar_t = state.schedule.alpha_bars[t];
    let abar_prev = match t_prev {
        Some(p) => state.schedule.alpha_bars[p],
        None => 1.0,
    };
    let z = ddim_update(&state.z, eps, abar_t, abar_prev)?;
    Ok(LatentState {
        z,
        step: state.step + 1,
        schedule: Arc::clone(&state.schedule),
    })
}

/// Everything one `generate` run produces.
pub struct GenerateResult {
    pub run_id: String,
    pub images: Vec<GeneratedImage>,
    pub capture: RunCapture,
    pub metrics: ConsistencyReport,
}

/// Writes one run's output tree under `root/<run_id>`: the config echo,
/// both PPM images, the metrics report, and (when capture is on) the map
/// archive and feature trace. Every byte is a pure function of the
/// config, so re-running overwrites identically. Returns the run dir.
pub fn write_outputs(
    cfg: &RunConfig,
    result: &GenerateResult,
    root: &std::path::Path,
) -> Result<std::path::PathBuf> {
    let dir = root.join(&result.run_id);
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::write(dir.join("config.toml"), cfg.echo_toml())?;
    for image in &result.images {
        crate::imageio::save_ppm(
            &images_dir.join(format!("slot{}.ppm", image.slot)),
            &image.pixels,
        )?;
    }
    let metrics = serde_json::to_string_pretty(&result.metrics)
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("metrics.json"), metrics + "\n")?;
    if cfg.capture {
        result.capture.save(&dir)?;
    }
    Ok(dir)
}

/// The full pipeline: build the batch, draw the seeded initial noise,
/// loop denoise + DDIM update, decode both slots, compute metrics.
/// Fully deterministic in the config.
pub fn generate(cfg: &RunConfig) -> Result<GenerateResult> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let model = ToyDenoiser::new(cfg.model_config())?;
    let encoders = Encoders::new(&cfg.model_config())?;
    let pair = cfg.condition_pair()?;
    let contexts = build_batch(&pair, &encoders)?;
    let uncond_contexts = match cfg.sampler.cfg_scale {
        Some(_) => Some(build_batch(&cfg.uncond_pair()?, &encoders)?),
        None => None,
    };
    let schedule = Arc::new(make_schedule(
        cfg.schedule.train_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
        cfg.schedule.inference_steps,
    )?);

    // Initial noise: one stream per run, shared across slots by default
    // so guidance effects are isolated from noise effects.
    let root = SeededRng::new(cfg.model.seed);
    let mcfg = cfg.model_config();
    let shape = [mcfg.latent_size, mcfg.latent_size, mcfg.channels];
    let slots: Vec<Tensor> = if cfg.sampler.shared_init_noise {
        let mut rng = root.derive("init_noise");
        let z = seeded_normal(&shape, &mut rng)?;
        vec![z.clone(), z]
    } else {
        (0..2)
            .map(|b| {
                let mut rng = root.derive(&format!("init_noise.{b}"));
                seeded_normal(&shape, &mut rng)
            })
            .collect::<Result<_>>()?
    };
    let refs: Vec<&Tensor> = slots.iter().collect();
    let mut state = LatentState {
        z: Tensor::stack(&refs)?,
        step: 0,
        schedule: Arc::clone(&schedule),
    };

    let mut capture = RunCapture::new(run_id.clone());
    let gcfg = cfg.guidance_config();
    let order: Vec<usize> = schedule.timesteps.iter().rev().cloned().collect();
    for (step, &t) in order.iter().enumerate() {
        let mut eps = model.denoise(&state.z, t, step, &contexts, &gcfg, &mut capture)?;
        if let (Some(scale), Some(uncond)) = (cfg.sampler.cfg_scale, uncond_contexts.as_ref()) {
            // Classifier-free hook: second, unconditional pass; its maps
            // are not archived (they would collide with the main keys).
            let eps_u = model.denoise(&state.z, t, step, uncond, &gcfg, &mut NullSink)?;
            eps = eps_u.add(&eps.add(&eps_u.scale(-1.0)?)?.scale(scale)?)?;
        }
        let t_prev = order.get(step + 1).copied();
        state = ddim_step(&state, &eps, t, t_prev)?;
        if state.z.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampling step"));
        }
    }

    let mut images = Vec::with_capacity(2);
    for slot in 0..2 {
        let z = state.z.index_axis0(slot)?;
        images.push(model.decode_latents(&z, &run_id, slot)?);
    }
    capture.audit()?;
    let metrics = consistency_metrics(&capture, cfg.guidance.tau)?;
    Ok(GenerateResult {
        run_id,
        images,
        capture,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_monotone_for_defaults() {
        let s = make_schedule(1000, 1e-4, 0.02, 20).unwrap();
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars[0] > 0.99);
        // Direct product evaluation at t = 0.
        assert!((s.alpha_bars[0] - (1.0 - 1e-4)).abs() < 1e-12);
        assert_eq!(s.timesteps.len(), 20);
        assert_eq!(*s.timesteps.last().unwrap(), 999);
        assert_eq!(s.timesteps[0], 49);
    }

    #[test]
    fn inference_steps_equal_train_selects_all() {
        let s = make_schedule(40, 1e-4, 0.02, 40).unwrap();
        let want: Vec<usize> = (0..40).collect();
        assert_eq!(s.timesteps, want);
    }

    #[test]
    fn schedule_rejects_bad_params() {
        assert!(make_schedule(100, 0.02, 1e-4, 10).is_err());
        assert!(make_schedule(100, 0.0, 0.02, 10).is_err());
        assert!(make_schedule(100, 1e-4, 1.0, 10).is_err());
        assert!(make_schedule(100, 1e-4, 0.02, 101).is_err());
        assert!(make_schedule(100, 1e-4, 0.02, 0).is_err());
    }

    #[test]
    fn zero_eps_is_pure_rescale() {
        let z = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let eps = Tensor::zeros(vec![2, 2]).unwrap();
        let out = ddim_update(&z, &eps, 0.25, 0.81).unwrap();
        let factor = (0.81f64 / 0.25).sqrt() as f32;
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((o - i * factor).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_alpha_bars_are_a_fixed_point() {
        let z = Tensor::matrix(1, 3, vec![0.3, -0.7, 2.0]).unwrap();
        let eps = Tensor::matrix(1, 3, vec![1.0, 0.25, -0.5]).unwrap();
        let out = ddim_update(&z, &eps, 0.49, 0.49).unwrap();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((o - i).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_case_matches_high_precision_oracle() {
        // z = 1, eps = 0.5, abar_t = 0.25, abar_prev = 0.81.
        let z = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let eps = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let out = ddim_update(&z, &eps, 0.25, 0.81).unwrap();
        let x0 = (1.0f64 - 0.5 * 0.75f64.sqrt()) / 0.25f64.sqrt();
        let want = 0.81f64.sqrt() * x0 + 0.19f64.sqrt() * 0.5;
        assert!((out.data()[0] as f64 - want).abs() < 1e-6);
        // Frozen value of the oracle for the record.
        assert!((out.data()[0] as f64 - 1.238_522_083_771_038_9).abs() < 1e-6);
    }

    #[test]
    fn ddim_step_rejects_non_monotone_pairs() {
        let schedule = Arc::new(make_schedule(100, 1e-4, 0.02, 10).unwrap());
        let state = LatentState {
            z: Tensor::zeros(vec![1, 2, 2, 1]).unwrap(),
            step: 0,
            schedule,
        };
        let eps = Tensor::zeros(vec![1, 2, 2, 1]).unwrap();
        assert!(ddim_step(&state, &eps, 50, Some(50)).is_err());
        assert!(ddim_step(&state, &eps, 50, Some(60)).is_err());
        assert!(ddim_step(&state, &eps, 100, Some(50)).is_err());
        let next = ddim_step(&state, &eps, 50, Some(40)).unwrap();
        assert_eq!(next.step, 1);
    }
}
