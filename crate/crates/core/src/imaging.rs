//! Focal-plane forward model: isotropic Gaussian PSF, pixel-integrated responses,
//! the sub-pixel steering matrix and noisy scene rendering.
//!
//! Coordinates are in pixel units with the origin at the sensor's top-left corner.
//! Pixel `(i, j)` covers `[i*D, (i+1)*D) x [j*D, (j+1)*D)` and is centered at
//! `((i + 0.5)*D, (j + 0.5)*D)`. Images are stored row-major with `y` selecting
//! the row, so pixel `(i, j)` is element `j * U + i`.

use std::f64::consts::{PI, SQRT_2};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    #[serde(rename = "U")]
    pub width_px: usize,
    #[serde(rename = "V")]
    pub height_px: usize,
    /// Side length of one pixel.
    #[serde(rename = "D")]
    pub pixel_width: f64,
    pub sigma_psf: f64,
    /// Standard deviation of additive white Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            width_px: 11,
            height_px: 11,
            pixel_width: 1.0,
            sigma_psf: 0.5,
            noise_sigma: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width_px >= 1
            && self.height_px >= 1
            && self.pixel_width.is_finite()
            && self.pixel_width > 0.0
            && self.sigma_psf.is_finite()
            && self.sigma_psf > 0.0
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sensor {self:?}")))
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width_px * self.height_px
    }

    pub fn extent(&self) -> (f64, f64) {
        (
            self.width_px as f64 * self.pixel_width,
            self.height_px as f64 * self.pixel_width,
        )
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.pixel_width,
            (j as f64 + 0.5) * self.pixel_width,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
}

impl Target {
    pub fn new(x: f64, y: f64, intensity: f64) -> Self {
        Self { x, y, intensity }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScene {
    pub targets: Vec<Target>,
    pub sensor: SensorConfig,
}

impl TargetScene {
    /// Validates positions and intensities against the sensor.
    pub fn new(targets: Vec<Target>, sensor: SensorConfig) -> Result<Self> {
        let scene = Self { targets, sensor };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let (w, h) = self.sensor.extent();
        for (k, t) in self.targets.iter().enumerate() {
            if !(t.intensity.is_finite() && t.intensity > 0.0) {
                return Err(Error::Domain(format!(
                    "target {k} has non-positive intensity {}",
                    t.intensity
                )));
            }
            if !(t.x >= 0.0 && t.x < w && t.y >= 0.0 && t.y < h) {
                return Err(Error::Domain(format!(
                    "target {k} at ({}, {}) lies outside the {w}x{h} sensor",
                    t.x, t.y
                )));
            }
        }
        Ok(())
    }
}

/// Observed low-resolution image `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalPlaneImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl FocalPlaneImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pixels[j * self.width + i]
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite {what}")))
    }
}

/// Normalized 2-D Gaussian PSF density at `(x, y)`.
pub fn psf_value(x: f64, y: f64, center: (f64, f64), sigma_psf: f64) -> Result<f64> {
    check_finite(&[x, y, center.0, center.1, sigma_psf], "PSF argument")?;
    if sigma_psf <= 0.0 {
        return Err(Error::Domain(format!("sigma_psf must be positive, got {sigma_psf}")));
    }
    let s2 = sigma_psf * sigma_psf;
    let r2 = (x - center.0).powi(2) + (y - center.1).powi(2);
    Ok((-r2 / (2.0 * s2)).exp() / (2.0 * PI * s2))
}

/// Mass of a 1-D normal `N(mu, sigma^2)` inside `[center - D/2, center + D/2]`.
/// Uses `erfc` on the far side of the mean so tail values keep relative precision.
pub(crate) fn interval_mass(center: f64, half_width: f64, mu: f64, sigma: f64) -> f64 {
    let scale = 1.0 / (sigma * SQRT_2);
    let a = (center - half_width - mu) * scale;
    let b = (center + half_width - mu) * scale;
    let v = if a > 0.0 {
        0.5 * (libm::erfc(a) - libm::erfc(b))
    } else if b < 0.0 {
        0.5 * (libm::erfc(-b) - libm::erfc(-a))
    } else {
        0.5 * (libm::erf(b) - libm::erf(a))
    };
    v.max(0.0)
}

/// Fraction of a unit point source's energy collected by the pixel centered at
/// `pixel_center`. The Gaussian factorizes, so the 2-D integral is a product of
/// two 1-D CDF differences.
pub fn pixel_response(
    pixel_center: (f64, f64),
    target: &Target,
    pixel_width: f64,
    sigma_psf: f64,
) -> Result<f64> {
    check_finite(
        &[pixel_center.0, pixel_center.1, target.x, target.y, pixel_width, sigma_psf],
        "pixel response argument",
    )?;
    if pixel_width <= 0.0 || sigma_psf <= 0.0 {
        return Err(Error::Domain(format!(
            "pixel width {pixel_width} and sigma {sigma_psf} must be positive"
        )));
    }
    let half = 0.5 * pixel_width;
    Ok(interval_mass(pixel_center.0, half, target.x, sigma_psf)
        * interval_mass(pixel_center.1, half, target.y, sigma_psf))
}

/// Candidate target locations: every pixel split into an `n x n` grid of cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SubPixelGrid {
    pub factor: usize,
    pub width_px: usize,
    pub height_px: usize,
    pub pixel_width: f64,
    /// Cell centers, row-major over the `(U*n) x (V*n)` high-resolution grid.
    pub centers: Vec<(f64, f64)>,
}

impl SubPixelGrid {
    pub fn new(sensor: &SensorConfig, factor: usize) -> Result<Self> {
        sensor.validate()?;
        if factor == 0 {
            return Err(Error::Config("sub-pixel factor must be at least 1".into()));
        }
        let (w, h) = (sensor.width_px * factor, sensor.height_px * factor);
        let step = sensor.pixel_width / factor as f64;
        let mut centers = Vec::with_capacity(w * h);
        for hy in 0..h {
            for hx in 0..w {
                centers.push(((hx as f64 + 0.5) * step, (hy as f64 + 0.5) * step));
            }
        }
        Ok(Self {
            factor,
            width_px: sensor.width_px,
            height_px: sensor.height_px,
            pixel_width: sensor.pixel_width,
            centers,
        })
    }

    /// Number of cells, `U * V * n^2`.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn hi_res_width(&self) -> usize {
        self.width_px * self.factor
    }

    pub fn hi_res_height(&self) -> usize {
        self.height_px * self.factor
    }
}

/// Dictionary `G` of shape `(U*V) x L`; column `l` is the pixel response of a
/// unit source at grid cell `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringMatrix {
    pub matrix: DenseMatrix,
    pub factor: usize,
}

impl SteeringMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    /// CRC-64 over the shape and little-endian entries; identifies the exact
    /// dictionary a model was trained against.
    pub fn fingerprint(&self) -> String {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut digest = crc.digest();
        digest.update(&(self.rows() as u64).to_le_bytes());
        digest.update(&(self.cols() as u64).to_le_bytes());
        for v in self.matrix.data() {
            digest.update(&v.to_le_bytes());
        }
        format!("{:016x}", digest.finalize())
    }
}

pub fn build_steering_matrix(grid: &SubPixelGrid, sensor: &SensorConfig) -> Result<SteeringMatrix> {
    sensor.validate()?;
    if grid.width_px != sensor.width_px
        || grid.height_px != sensor.height_px
        || grid.pixel_width != sensor.pixel_width
    {
        return Err(Error::Config(format!(
            "grid of {}x{} pixels (D={}) does not match sensor {}x{} (D={})",
            grid.width_px,
            grid.height_px,
            grid.pixel_width,
            sensor.width_px,
            sensor.height_px,
            sensor.pixel_width
        )));
    }
    let (u, v, n) = (sensor.width_px, sensor.height_px, grid.factor);
    let (hw, hh) = (u * n, v * n);
    let half = 0.5 * sensor.pixel_width;
    let sigma = sensor.sigma_psf;
    let step = sensor.pixel_width / n as f64;
    // separable 1-D tables: tx[px * hw + hx], ty[py * hh + hy]
    let tx: Vec<f64> = (0..u)
        .flat_map(|px| {
            let c = sensor.pixel_center(px, 0).0;
            (0..hw).map(move |hx| interval_mass(c, half, (hx as f64 + 0.5) * step, sigma))
        })
        .collect();
    let ty: Vec<f64> = (0..v)
        .flat_map(|py| {
            let c = sensor.pixel_center(0, py).1;
            (0..hh).map(move |hy| interval_mass(c, half, (hy as f64 + 0.5) * step, sigma))
        })
        .collect();
    let cols = hw * hh;
    let mut data = vec![0.0; u * v * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
        let (px, py) = (p % u, p / u);
        for hy in 0..hh {
            let fy = ty[py * hh + hy];
            for hx in 0..hw {
                row[hy * hw + hx] = tx[px * hw + hx] * fy;
            }
        }
    });
    Ok(SteeringMatrix {
        matrix: DenseMatrix::from_vec(u * v, cols, data)?,
        factor: n,
    })
}

/// Renders `z = sum_i g_i * response_i + noise` at the exact target positions.
/// With `noise_sigma == 0` no random numbers are drawn.
pub fn render_scene(scene: &TargetScene, rng_seed: u64) -> Result<FocalPlaneImage> {
    scene.validate()?;
    let s = &scene.sensor;
    let mut img = FocalPlaneImage::zeros(s.width_px, s.height_px);
    let half = 0.5 * s.pixel_width;
    for t in &scene.targets {
        let fx: Vec<f64> = (0..s.width_px)
            .map(|i| interval_mass(s.pixel_center(i, 0).0, half, t.x, s.sigma_psf))
            .collect();
        for j in 0..s.height_px {
            let fy = interval_mass(s.pixel_center(0, j).1, half, t.y, s.sigma_psf);
            for (i, fxi) in fx.iter().enumerate() {
                img.pixels[j * s.width_px + i] += t.intensity * (fxi * fy);
            }
        }
    }
    if s.noise_sigma > 0.0 {
        let mut rng = rng_from_seed(rng_seed);
        for p in &mut img.pixels {
            let n: f64 = StandardNormal.sample(&mut rng);
            *p += s.noise_sigma * n;
        }
    }
    Ok(img)
}
