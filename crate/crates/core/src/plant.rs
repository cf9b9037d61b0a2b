//! Per-joint actuator dynamics and FIR identification from step responses.
//!
//! A joint is a discrete SISO transfer function in powers of z⁻¹, followed by
//! a pure delay, a rate limiter and position clamps. Identification differences
//! a measured step response into an impulse response, crops it, and optionally
//! tapers it with a 4-term Blackman-Harris window.

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// `G(z) = (b0 + b1 z⁻¹ + ...) / (a0 + a1 z⁻¹ + ...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl TransferFunction {
    pub fn identity() -> Self {
        Self {
            num: vec![1.0],
            den: vec![1.0],
        }
    }

    /// `(1 - a) / (1 - a z⁻¹)`, unity DC gain.
    pub fn first_order(a: f64) -> Self {
        Self {
            num: vec![1.0 - a],
            den: vec![1.0, -a],
        }
    }

    /// Critically damped double pole at `exp(-2π f T)`, unity DC gain.
    pub fn critically_damped(bandwidth_hz: f64, sample_time: f64) -> Self {
        let p = (-std::f64::consts::TAU * bandwidth_hz * sample_time).exp();
        Self {
            num: vec![(1.0 - p) * (1.0 - p)],
            den: vec![1.0, -2.0 * p, p * p],
        }
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    pub fn response(&self, omega: f64) -> Complex64 {
        poly_response(&self.num, omega) / poly_response(&self.den, omega)
    }

    /// Roots of the denominator in the z-plane.
    pub fn poles(&self) -> Vec<Complex64> {
        let den = trim_trailing_zeros(&self.den);
        let order = den.len().saturating_sub(1);
        if order == 0 {
            return Vec::new();
        }
        // z^order + (a1/a0) z^(order-1) + ... as a companion matrix
        let mut c = nalgebra::DMatrix::<f64>::zeros(order, order);
        for j in 0..order {
            c[(0, j)] = -den[j + 1] / den[0];
        }
        for i in 1..order {
            c[(i, i - 1)] = 1.0;
        }
        c.complex_eigenvalues().iter().copied().collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num.is_empty() || self.den.is_empty() || self.den[0] == 0.0 {
            return Err(Error::invalid("transfer function needs coefficients and a non-zero a0"));
        }
        if !self.num.iter().chain(&self.den).all(|v| v.is_finite()) {
            return Err(Error::invalid("transfer function coefficients must be finite"));
        }
        if !self.is_stable() {
            return Err(Error::invalid(
                "transfer function has poles on or outside the unit circle",
            ));
        }
        Ok(())
    }
}

fn trim_trailing_zeros(c: &[f64]) -> &[f64] {
    let end = c.iter().rposition(|v| *v != 0.0).map_or(0, |i| i + 1);
    &c[..end]
}

pub(crate) fn poly_response(c: &[f64], omega: f64) -> Complex64 {
    c.iter()
        .enumerate()
        .map(|(k, v)| Complex64::from_polar(*v, -omega * k as f64))
        .sum()
}

/// Direct-form difference equation with zero initial conditions.
pub fn lfilter(b: &[f64], a: &[f64], x: &[f64]) -> Vec<f64> {
    let a0 = a[0];
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let mut acc = 0.0;
        for (k, bk) in b.iter().enumerate().take(n + 1) {
            acc += bk * x[n - k];
        }
        for (k, ak) in a.iter().enumerate().skip(1).take(n) {
            acc -= ak * y[n - k];
        }
        y[n] = acc / a0;
    }
    y
}

/// Full linear convolution.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointUnits {
    #[default]
    Radians,
    Meters,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Saturation {
    /// Output position clamp `[lo, hi]`.
    pub position: Option<[f64; 2]>,
    /// Largest output change per sample.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPlant {
    #[serde(default)]
    pub name: String,
    pub tf: TransferFunction,
    pub sample_time: f64,
    #[serde(default)]
    pub delay: usize,
    #[serde(default)]
    pub saturation: Saturation,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub units: JointUnits,
}

impl JointPlant {
    pub fn linear(tf: TransferFunction, sample_time: f64, delay: usize) -> Self {
        Self {
            name: String::new(),
            tf,
            sample_time,
            delay,
            saturation: Saturation::default(),
            noise_sigma: 0.0,
            units: JointUnits::Radians,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tf.validate()?;
        if !(self.sample_time > 0.0) {
            return Err(Error::invalid("sample time must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if let Some(r) = self.saturation.rate {
            if !(r > 0.0) {
                return Err(Error::invalid("rate limit must be positive"));
            }
        }
        Ok(())
    }

    /// Impulse response of the linear part (delay included), `len` samples.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut x = vec![0.0; len];
        if self.delay < len {
            x[self.delay] = 1.0;
        }
        lfilter(&self.tf.num, &self.tf.den, &x)
    }

    /// `G(e^{jω}) e^{-jωd}`.
    pub fn response(&self, omega: f64) -> Complex64 {
        self.tf.response(omega) * Complex64::from_polar(1.0, -omega * self.delay as f64)
    }
}

/// Default actuators sampled at `1 / sample_time`: joints 1-3 critically
/// damped at 10 Hz, joint 4 at 4 Hz with a tighter rate margin, all with a
/// 5-sample transport delay.
pub fn default_plants(sample_time: f64) -> [JointPlant; 4] {
    let deg = std::f64::consts::PI / 180.0;
    let make = |name: &str, bw: f64, rate_per_s: f64, position: [f64; 2], units| JointPlant {
        name: name.into(),
        tf: TransferFunction::critically_damped(bw, sample_time),
        sample_time,
        delay: 5,
        saturation: Saturation {
            position: Some(position),
            rate: Some(rate_per_s * sample_time),
        },
        noise_sigma: 0.0,
        units,
    };
    [
        make("pan", 10.0, 3.0, [-30.0 * deg, 30.0 * deg], JointUnits::Radians),
        make("tilt", 10.0, 3.0, [-30.0 * deg, 30.0 * deg], JointUnits::Radians),
        make("insertion", 10.0, 0.05, [0.0, 0.025], JointUnits::Meters),
        make("roll", 4.0, 20.0, [-360.0 * deg, 360.0 * deg], JointUnits::Radians),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantOutput {
    pub y: Vec<f64>,
    /// Samples where the rate or position clamp was active.
    pub saturated: Vec<bool>,
}

impl PlantOutput {
    pub fn saturation_count(&self) -> usize {
        self.saturated.iter().filter(|s| **s).count()
    }

    pub fn saturation_fraction(&self) -> f64 {
        if self.y.is_empty() {
            0.0
        } else {
            self.saturation_count() as f64 / self.y.len() as f64
        }
    }
}

/// Simulates a plant starting at rest at zero.
pub fn simulate_plant(plant: &JointPlant, u: &[f64], seed: u64) -> Result<PlantOutput> {
    simulate_plant_from_rest(plant, u, 0.0, seed)
}

/// Simulates a plant whose input and output have been steady at `rest` (input)
/// and `G(1)·rest` (output) before the first sample.
pub fn simulate_plant_from_rest(plant: &JointPlant, u: &[f64], rest: f64, seed: u64) -> Result<PlantOutput> {
    plant.validate()?;
    if !u.iter().all(|v| v.is_finite()) || !rest.is_finite() {
        return Err(Error::invalid("plant input must be finite"));
    }
    let n = u.len();
    let mut shifted = vec![0.0; n];
    for k in plant.delay..n {
        shifted[k] = u[k - plant.delay] - rest;
    }
    let settled = plant.tf.dc_gain() * rest;
    let linear = lfilter(&plant.tf.num, &plant.tf.den, &shifted);

    let mut y = Vec::with_capacity(n);
    let mut saturated = Vec::with_capacity(n);
    let mut previous = settled;
    for v in linear {
        let wanted = settled + v;
        let mut out = wanted;
        if let Some(rate) = plant.saturation.rate {
            out = out.clamp(previous - rate, previous + rate);
        }
        if let Some([lo, hi]) = plant.saturation.position {
            out = out.clamp(lo, hi);
        }
        saturated.push(out != wanted);
        previous = out;
        y.push(out);
    }

    if plant.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, plant.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = rng::stream(seed);
        for v in y.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(PlantOutput { y, saturated })
}

/// Step response normalized by the input amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub g: Vec<f64>,
    pub sample_time: f64,
    pub input_amplitude: f64,
}

pub fn measure_step_response(plant: &JointPlant, amplitude: f64, duration: usize, seed: u64) -> Result<StepResponse> {
    if duration < 2 {
        return Err(Error::invalid("step response needs at least two samples"));
    }
    if !(amplitude != 0.0 && amplitude.is_finite()) {
        return Err(Error::invalid("step amplitude must be non-zero and finite"));
    }
    let out = simulate_plant(plant, &vec![amplitude; duration], seed)?;
    if let Some(first) = out.saturated.iter().position(|s| *s) {
        return Err(Error::IdentificationInvalid(format!(
            "plant saturated at sample {first} ({} samples total); the step amplitude is too large",
            out.saturation_count()
        )));
    }
    Ok(StepResponse {
        g: out.y.iter().map(|v| v / amplitude).collect(),
        sample_time: plant.sample_time,
        input_amplitude: amplitude,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    None,
    #[default]
    BlackmanHarris,
}

const BH: [f64; 4] = [0.35875, 0.48829, 0.14128, 0.01168];

/// 4-term Blackman-Harris evaluated at (possibly fractional) position `m` of
/// an `len`-point window; zero outside `[0, len - 1]`.
fn blackman_harris_at(m: f64, len: usize) -> f64 {
    if len == 1 {
        return if m == 0.0 { 1.0 } else { 0.0 };
    }
    let span = (len - 1) as f64;
    if m < 0.0 || m > span {
        return 0.0;
    }
    let x = std::f64::consts::TAU * m / span;
    BH[0] - BH[1] * x.cos() + BH[2] * (2.0 * x).cos() - BH[3] * (3.0 * x).cos()
}

pub fn blackman_harris(len: usize) -> Vec<f64> {
    (0..len).map(|n| blackman_harris_at(n as f64, len).max(0.0)).collect()
}

/// Identified impulse response `h(0..N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirModel {
    pub h: Vec<f64>,
    pub sample_time: f64,
    pub window: Window,
    pub crop_length: usize,
    /// Whether the step response had settled over the tail of the crop.
    pub settled: bool,
}

impl FirModel {
    pub fn window_applied(&self) -> bool {
        self.window == Window::BlackmanHarris
    }

    pub fn dc_gain(&self) -> f64 {
        self.h.iter().sum()
    }

    pub fn response(&self, omega: f64) -> Complex64 {
        poly_response(&self.h, omega)
    }
}

/// Earliest index after which `g` stays within `tol` (relative) of its last value.
pub fn settling_index(g: &[f64], tol: f64) -> usize {
    let last = *g.last().unwrap_or(&0.0);
    let band = tol * last.abs();
    g.iter().rposition(|v| (v - last).abs() >= band).map_or(0, |i| i + 1)
}

/// Settling index (1 %) plus a 20 % margin, capped to the record length.
pub fn default_crop(g: &[f64]) -> usize {
    let settle = settling_index(g, 0.01);
    ((settle as f64 * 1.2).ceil() as usize).clamp(2.min(g.len()), g.len())
}

/// Differences the step response, crops it to `crop` samples and applies the
/// window with its peak aligned to the largest |h| sample.
pub fn identify_fir(step: &StepResponse, crop: usize, window: Window) -> Result<FirModel> {
    if crop < 2 {
        return Err(Error::invalid("crop must be at least 2 samples"));
    }
    if crop > step.g.len() {
        return Err(Error::invalid(format!(
            "crop {crop} exceeds step response length {}",
            step.g.len()
        )));
    }
    let g = &step.g[..crop];
    let final_value = *step.g.last().expect("non-empty");
    let tail = (crop / 10).max(1);
    let settled = g[crop - tail..]
        .iter()
        .all(|v| (v - final_value).abs() < 0.01 * final_value.abs());
    if !settled {
        log::warn!("step response has not settled within the {crop}-sample crop");
    }

    let mut h: Vec<f64> = g
        .iter()
        .scan(0.0, |prev, v| {
            let d = v - *prev;
            *prev = *v;
            Some(d)
        })
        .collect();

    if window == Window::BlackmanHarris {
        let peak = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map_or(0, |(i, _)| i);
        let center = (crop - 1) as f64 / 2.0;
        for (n, v) in h.iter_mut().enumerate() {
            *v *= blackman_harris_at(n as f64 - peak as f64 + center, crop).max(0.0);
        }
    }
    Ok(FirModel {
        h,
        sample_time: step.sample_time,
        window,
        crop_length: crop,
        settled,
    })
}

/// `H(e^{jω})` on `n` evenly spaced frequencies covering `[0, π]`.
pub fn frequency_response(fir: &FirModel, n: usize) -> Result<Vec<Complex64>> {
    if n < 2 {
        return Err(Error::invalid("need at least two frequencies"));
    }
    Ok(frequency_grid(n).map(|w| fir.response(w)).collect())
}

pub fn frequency_grid(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| std::f64::consts::PI * k as f64 / (n - 1) as f64)
}
