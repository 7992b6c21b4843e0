//! Grayscale image stimuli: standardized pink noise, gratings, point probes,
//! contrast scaling and circular apertures.
//!
//! Pixel `(a, b)` is row `a`, column `b`, stored row-major. Centered
//! coordinates put the origin at `(size/2, size/2)`.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::rng;

/// Width of the raised-cosine ramp at the aperture edge, as a fraction of the radius.
pub const APERTURE_RAMP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(invalid_arg(format!(
                "image of size {size} needs {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("image pixels must be finite"));
        }
        Ok(Self { size, pixels })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn constant(size: usize, value: f64) -> Self {
        Self {
            size,
            pixels: vec![value; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.pixels[a * self.size + b]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Root-mean-square intensity (not mean-centered).
    pub fn rms(&self) -> f64 {
        (self.pixels.iter().map(|v| v * v).sum::<f64>() / self.pixels.len() as f64).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            size: self.size,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub images: Vec<Image>,
    pub seed: u64,
}

impl StimulusSet {
    pub fn new(images: Vec<Image>, seed: u64) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(invalid_arg("stimulus set must be nonempty"));
        };
        let size = first.size();
        if images.iter().any(|im| im.size() != size) {
            return Err(invalid_arg("stimulus set images must share one size"));
        }
        Ok(Self { images, seed })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images[0].size()
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn standardize(pixels: &mut [f64]) {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    pixels.iter_mut().for_each(|v| *v -= mean);
    let rms = (pixels.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if rms > 0.0 {
        pixels.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Standardized 2D pink noise: amplitude spectrum `1/|ω|` with uniform random
/// phases and zero DC, inverse-transformed, then shifted and scaled to mean 0
/// and RMS 1.
pub fn generate_pink_noise(size: usize, seed: u64) -> Result<Image> {
    if size < 2 {
        return Err(invalid_arg(format!("pink noise needs size >= 2, got {size}")));
    }
    let mut rng = rng::stream(seed, 0);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); size * size];
    for u in 0..size {
        let fu = signed_freq(u, size);
        for v in 0..size {
            let fv = signed_freq(v, size);
            let radius = (fu * fu + fv * fv).sqrt();
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            if radius > 0.0 {
                spectrum[u * size + v] = Complex64::from_polar(1.0 / radius, phase);
            }
        }
    }
    fft2(&mut spectrum, size, true);
    let mut pixels: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    standardize(&mut pixels);
    Image::new(size, pixels)
}

/// In-place 2D FFT over a row-major `size x size` buffer.
pub(crate) fn fft2(buf: &mut [Complex64], size: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(size)
    } else {
        planner.plan_fft_forward(size)
    };
    for row in buf.chunks_mut(size) {
        fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); size];
    for b in 0..size {
        for a in 0..size {
            column[a] = buf[a * size + b];
        }
        fft.process(&mut column);
        for a in 0..size {
            buf[a * size + b] = column[a];
        }
    }
}

pub fn scale_contrast(w: &Image, t: f64) -> Result<Image> {
    if !(t >= 0.0) {
        return Err(invalid_arg(format!("contrast must be >= 0, got {t}")));
    }
    Ok(w.map(|v| t * v))
}

/// Full-field cosine grating, `frequency` cycles per image along direction
/// `orientation`.
pub fn generate_grating(size: usize, frequency: f64, orientation: f64, phase: f64) -> Result<Image> {
    if !(frequency >= 0.0) {
        return Err(invalid_arg(format!("grating frequency must be >= 0, got {frequency}")));
    }
    let half = size as f64 / 2.0;
    let (sin_t, cos_t) = orientation.sin_cos();
    let mut pixels = Vec::with_capacity(size * size);
    for a in 0..size {
        let x = a as f64 - half;
        for b in 0..size {
            let y = b as f64 - half;
            let along = x * cos_t + y * sin_t;
            pixels.push((2.0 * PI * frequency * along / size as f64 + phase).cos());
        }
    }
    Image::new(size, pixels)
}

pub fn point_stimulus(size: usize, a0: usize, b0: usize, amplitude: f64) -> Result<Image> {
    if a0 >= size || b0 >= size {
        return Err(invalid_arg(format!(
            "point ({a0}, {b0}) outside a {size}x{size} image"
        )));
    }
    let mut im = Image::zeros(size);
    im.pixels[a0 * size + b0] = amplitude;
    Ok(im)
}

/// Attenuation applied by [`apply_aperture`] at distance `distance` from the
/// center, for an aperture of radius `radius`.
pub fn aperture_weight(distance: f64, radius: f64) -> f64 {
    let inner = radius * (1.0 - APERTURE_RAMP);
    if distance <= inner {
        1.0
    } else if distance >= radius {
        0.0
    } else {
        0.5 * (1.0 + (PI * (distance - inner) / (radius - inner)).cos())
    }
}

pub fn apply_aperture(w: &Image, radius_fraction: f64) -> Result<Image> {
    if !(radius_fraction > 0.0 && radius_fraction <= 1.0) {
        return Err(invalid_arg(format!(
            "aperture radius fraction must lie in (0, 1], got {radius_fraction}"
        )));
    }
    let size = w.size();
    let half = size as f64 / 2.0;
    let radius = radius_fraction * half;
    let mut pixels = w.pixels.clone();
    for a in 0..size {
        for b in 0..size {
            let d = ((a as f64 - half).powi(2) + (b as f64 - half).powi(2)).sqrt();
            pixels[a * size + b] *= aperture_weight(d, radius);
        }
    }
    Image::new(size, pixels)
}

/// `n` standardized pink-noise images; image `i` is seeded from `(seed, i)`.
pub fn sample_stimulus_set(size: usize, n: usize, seed: u64, aperture: bool) -> Result<StimulusSet> {
    if n == 0 {
        return Err(invalid_arg("stimulus set needs n >= 1"));
    }
    let images = (0..n)
        .map(|i| {
            let noise = generate_pink_noise(size, rng::mix(seed, i as u64))?;
            if aperture {
                apply_aperture(&noise, 1.0)
            } else {
                Ok(noise)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    StimulusSet::new(images, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Radially averaged power spectrum slope in log-log coordinates.
    fn spectral_slope(im: &Image) -> f64 {
        let n = im.size();
        let mut buf: Vec<Complex64> = im.pixels().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut buf, n, false);
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for u in 0..n {
            for v in 0..n {
                let r = (signed_freq(u, n).powi(2) + signed_freq(v, n).powi(2)).sqrt();
                let bin = r.round() as usize;
                if bin >= 1 && bin < n / 2 {
                    sums[bin] += buf[u * n + v].norm_sqr();
                    counts[bin] += 1;
                }
            }
        }
        let pts: Vec<(f64, f64)> = (1..n / 2)
            .filter(|&k| counts[k] > 0)
            .map(|k| ((k as f64).ln(), (sums[k] / counts[k] as f64).ln()))
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn pink_noise_is_standardized_and_deterministic() {
        let a = generate_pink_noise(32, 7).unwrap();
        assert!(a.mean().abs() < 1e-12);
        assert!((a.rms() - 1.0).abs() < 1e-12);
        let b = generate_pink_noise(32, 7).unwrap();
        assert_eq!(a, b);
        assert!(generate_pink_noise(1, 7).is_err());
    }

    #[test]
    fn pink_noise_spectrum_falls_as_inverse_square() {
        let im = generate_pink_noise(64, 3).unwrap();
        let slope = spectral_slope(&im);
        assert!((slope + 2.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn contrast_scaling() {
        let w = generate_pink_noise(16, 1).unwrap();
        assert!(scale_contrast(&w, 0.0).unwrap().pixels().iter().all(|&v| v == 0.0));
        assert!((scale_contrast(&w, 2.0).unwrap().rms() - 2.0).abs() < 1e-12);
        assert_eq!(scale_contrast(&w, 1.0).unwrap(), w);
        assert!(scale_contrast(&w, -0.1).is_err());
    }

    #[test]
    fn grating_basics() {
        let flat = generate_grating(16, 0.0, 0.0, 0.0).unwrap();
        assert!(flat.pixels().iter().all(|&v| v == 1.0));
        for &theta in &[0.0, 0.3, 1.2, 2.5] {
            let g1 = generate_grating(24, 3.0, theta, 0.0).unwrap();
            let g2 = generate_grating(24, 3.0, theta + PI, 0.0).unwrap();
            for (x, y) in g1.pixels().iter().zip(g2.pixels()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(generate_grating(8, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn grating_periodogram_peak() {
        let n = 64;
        let (f, theta) = (8.0, PI / 4.0);
        let g = generate_grating(n, f, theta, 0.0).unwrap();
        let mut buf: Vec<Complex64> = g.pixels().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut buf, n, false);
        let (mut best, mut best_k) = (0.0, 0);
        for (k, c) in buf.iter().enumerate() {
            if c.norm_sqr() > best {
                best = c.norm_sqr();
                best_k = k;
            }
        }
        let (u, v) = (signed_freq(best_k / n, n), signed_freq(best_k % n, n));
        let expect = ((f * theta.cos()).round(), (f * theta.sin()).round());
        assert!(
            (u, v) == expect || (u, v) == (-expect.0, -expect.1),
            "peak at ({u}, {v}), expected ±{expect:?}"
        );
    }

    #[test]
    fn point_stimuli_partition_the_image() {
        let one = point_stimulus(8, 0, 0, 1.0).unwrap();
        assert_eq!(one.pixels().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(point_stimulus(8, 3, 4, 0.0).unwrap().pixels().iter().all(|&v| v == 0.0));
        let mut total = vec![0.0; 64];
        for a in 0..8 {
            for b in 0..8 {
                for (t, v) in total.iter_mut().zip(point_stimulus(8, a, b, 1.0).unwrap().pixels()) {
                    *t += v;
                }
            }
        }
        assert!(total.iter().all(|&v| v == 1.0));
        assert!(point_stimulus(8, 8, 0, 1.0).is_err());
    }

    #[test]
    fn aperture_edges() {
        let c = Image::constant(32, 3.0);
        let out = apply_aperture(&c, 1.0).unwrap();
        assert_eq!(out.get(16, 16), 3.0);
        for &(a, b) in &[(0, 0), (0, 31), (31, 0), (31, 31)] {
            assert_eq!(out.get(a, b), 0.0);
        }
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let w = aperture_weight(i as f64 * 0.01, 16.0);
            assert!(w <= prev);
            prev = w;
        }
        assert!(apply_aperture(&c, 0.0).is_err());
    }

    #[test]
    fn stimulus_sets() {
        let a = sample_stimulus_set(32, 5, 1, false).unwrap();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(a.images[i], a.images[j]);
            }
        }
        assert_eq!(a, sample_stimulus_set(32, 5, 1, false).unwrap());
        let big = sample_stimulus_set(32, 100, 1, false).unwrap();
        assert!(big.images.iter().all(|im| im.mean().abs() < 1e-12));
    }
}
