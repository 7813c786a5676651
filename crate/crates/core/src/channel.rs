//! Random scenario generation: device placement on a disk, log-distance path
//! loss, Rayleigh fading and randomized task sizes and CPU caps.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::model::{DeviceCaps, RadioParams, Scenario, TaskSpec};
use crate::uncertainty::ThrottleModel;

/// Converts a power level in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Active device at the origin followed by `count` points drawn uniformly
/// over the disk of the given radius (uniform in area).
pub fn place_devices<R: Rng + ?Sized>(count: usize, radius: f64, rng: &mut R) -> Vec<[f64; 2]> {
    let mut positions = Vec::with_capacity(count + 1);
    positions.push([0.0, 0.0]);
    positions.extend((0..count).map(|_| disk_point(radius, rng)));
    positions
}

fn disk_point<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = std::f64::consts::TAU * rng.random::<f64>();
    [r * theta.cos(), r * theta.sin()]
}

/// Path loss in dB at distance `d_km` kilometers: `148 + 40 log10(d)`.
pub fn path_loss_db(d_km: f64) -> Result<f64> {
    if !(d_km.is_finite() && d_km > 0.0) {
        return Err(Error::invalid(format!(
            "path loss needs a positive distance, got {d_km} km"
        )));
    }
    Ok(148.0 + 40.0 * d_km.log10())
}

/// Channel power gain for a fading power `fading` (mean one) at `d_km`.
pub fn gain_with_fading(d_km: f64, fading: f64) -> Result<f64> {
    Ok(fading * 10f64.powf(-path_loss_db(d_km)? / 10.0))
}

/// Rayleigh-faded channel gain at distance `d_km`.
pub fn sample_gain<R: Rng + ?Sized>(d_km: f64, rng: &mut R) -> Result<f64> {
    let fading: f64 = Exp1.sample(rng);
    // Exp1 can return exactly zero; a vanishing gain is not a usable link
    gain_with_fading(d_km, fading.max(f64::MIN_POSITIVE))
}

/// Draws one scenario. Draw order is: task size, then per offloading device
/// its position, fading and CPU cap. A scenario with more devices therefore
/// extends the one with fewer devices drawn from the same seed.
pub fn generate_scenario<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Scenario> {
    cfg.validate()?;
    let u: f64 = rng.random();
    let bits = cfg.task_bits_min + u * (cfg.task_bits_max - cfg.task_bits_min);
    let task = TaskSpec::new(bits, cfg.cycles_per_bit, cfg.t_max_s)?;
    let radio = RadioParams::new(
        cfg.bandwidth_hz,
        dbm_to_watts(cfg.noise_dbm),
        cfg.p_max_w,
    )?;
    let throttle = ThrottleModel::uniform(cfg.throttle_lo, cfg.throttle_hi)?;

    let mut positions = vec![[0.0, 0.0]];
    let mut gains = Vec::with_capacity(cfg.offload_devices);
    let mut f_max = vec![cfg.f0_max_hz];
    for _ in 0..cfg.offload_devices {
        let pos = disk_point(cfg.placement_radius_m, rng);
        let fading: f64 = Exp1.sample(rng);
        let u: f64 = rng.random();
        let d = pos[0].hypot(pos[1]);
        if d > cfg.max_link_radius_m {
            // outside D2D range: not an offloading candidate
            continue;
        }
        let d_km = d.max(cfg.min_distance_m) / 1000.0;
        gains.push(gain_with_fading(d_km, fading.max(f64::MIN_POSITIVE))?);
        positions.push(pos);
        f_max.push(cfg.f_min_hz + u * (cfg.f_max_hz - cfg.f_min_hz));
    }
    let devices = positions.len();
    Scenario::new(
        task,
        radio,
        DeviceCaps::new(f_max, cfg.kappa)?,
        gains,
        vec![throttle; devices],
        positions,
    )
}

/// Seed of run `index` under `master`, via the splitmix64 finalizer.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
