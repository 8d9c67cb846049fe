use super::{guided_noise, NoisePredictor, NoiseSchedule};
use crate::error::{DefError, Result};
use crate::nn::Slab;
use crate::seed;

fn check_finite(x: &Slab, t: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(DefError::NonFinite(format!("sampler state at t={t}")))
    }
}

fn initial_noise(shape: [usize; 3], seed: u64) -> (Slab, rand_chacha::ChaCha8Rng) {
    let [c, h, w] = shape;
    let mut rng = seed::rng(seed);
    let z = seed::standard_normal(&mut rng, c * h * w);
    (Slab { channels: c, height: h, width: w, data: z }, rng)
}

/// Full `T`-step ancestral chain from `z_T ~ N(0, I)` with reverse variance
/// `beta_t` and no noise on the final step.
pub fn sample_ancestral<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: Option<&Slab>,
    omega: f64,
    shape: [usize; 3],
    seed: u64,
) -> Result<Slab> {
    let sched = model.schedule();
    let (mut x, mut rng) = initial_noise(shape, seed);
    for t in (1..=sched.steps()).rev() {
        let eps = guided_noise(model, &x, t, cond, omega)?;
        let beta = sched.beta(t);
        let k = beta / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        for (xi, e) in x.data.iter_mut().zip(&eps.data) {
            *xi = inv_sqrt_alpha * (*xi - k * e);
        }
        if t > 1 {
            let sigma = beta.sqrt();
            let z = seed::standard_normal(&mut rng, x.data.len());
            for (xi, zi) in x.data.iter_mut().zip(&z) {
                *xi += sigma * zi;
            }
        }
        check_finite(&x, t)?;
    }
    Ok(x)
}

/// Solver timesteps for `steps` model evaluations: points evenly spaced in
/// half-log-SNR between `t = T` and `t = 1`, rounded to the nearest discrete
/// step and made strictly decreasing. The final jump to `t = 0` is implicit.
pub fn dpm_timesteps(sched: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let max = sched.steps();
    if steps == 0 || steps > max {
        return Err(DefError::InvalidConfig(format!("solver steps {steps} outside [1, {max}]")));
    }
    if steps == 1 {
        return Ok(vec![max]);
    }
    if steps == max {
        return Ok((1..=max).rev().collect());
    }
    let (lo, hi) = (sched.lambda(max), sched.lambda(1));
    let lambdas: Vec<f64> = (1..=max).map(|t| sched.lambda(t)).collect();
    let mut out: Vec<usize> = Vec::with_capacity(steps);
    for i in 0..steps {
        let target = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        // lambda decreases in t, so search the reversed order.
        let idx = lambdas.partition_point(|l| *l > target);
        let t = [idx, idx + 1]
            .into_iter()
            .filter(|t| (1..=max).contains(t))
            .min_by(|a, b| {
                (lambdas[a - 1] - target).abs().total_cmp(&(lambdas[b - 1] - target).abs())
            })
            .unwrap_or(1);
        if out.last().map_or(true, |&p| t < p) {
            out.push(t);
        }
    }
    Ok(out)
}

/// DPM-Solver++(2M) in data-prediction form. The first step and the final
/// step to `t = 0` are first order.
pub fn sample_dpm2m<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: Option<&Slab>,
    omega: f64,
    steps: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Slab> {
    let sched = model.schedule();
    let ts = dpm_timesteps(sched, steps)?;
    let (mut x, _) = initial_noise(shape, seed);
    let alpha = |t: usize| sched.alpha_bar(t).sqrt();
    let sigma = |t: usize| (1.0 - sched.alpha_bar(t)).sqrt();

    let mut prev: Option<(Slab, f64)> = None;
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_noise(model, &x, t, cond, omega)?;
        let (a, s) = (alpha(t), sigma(t));
        let mut x0 = x.clone();
        for (v, e) in x0.data.iter_mut().zip(&eps.data) {
            *v = (*v - s * e) / a;
        }
        if let Some(b) = model.x0_bound() {
            x0.data.iter_mut().for_each(|v| *v = v.clamp(-b, b));
        }
        let Some(&t_next) = ts.get(i + 1) else {
            check_finite(&x0, 0)?;
            return Ok(x0);
        };
        let h = sched.lambda(t_next) - sched.lambda(t);
        let d = match &prev {
            Some((x0_prev, h_prev)) => {
                let r = h_prev / h;
                let c = 1.0 / (2.0 * r);
                let mut d = x0.clone();
                for (v, p) in d.data.iter_mut().zip(&x0_prev.data) {
                    *v = (1.0 + c) * *v - c * p;
                }
                d
            }
            None => x0.clone(),
        };
        let ratio = sigma(t_next) / s;
        let k = alpha(t_next) * ((-h).exp() - 1.0);
        for (xi, di) in x.data.iter_mut().zip(&d.data) {
            *xi = ratio * *xi - k * di;
        }
        check_finite(&x, t_next)?;
        prev = Some((x0, h));
    }
    unreachable!("timestep list is never empty")
}
