//! Synthetic dataset generation: scene sampling under separation and intensity
//! constraints, high-resolution ground-truth encoding, and the on-disk dataset
//! format (a JSON manifest plus one little-endian `f32` record file per split).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{render_scene, FocalPlaneImage, SensorConfig, Target, TargetScene};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const FORMAT_VERSION: &str = "cso-unmix-dataset/1";

/// Candidate draws allowed per scene before generation gives up.
pub const REJECTION_BUDGET: usize = 10_000;

// consecutive rejections before the partial placement is discarded
const RESTART_AFTER: usize = 200;

/// Classical resolution limit of a Gaussian PSF, `1.9 * sigma`.
pub fn rayleigh_unit(sigma_psf: f64) -> f64 {
    1.9 * sigma_psf
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl PlacementRegion {
    /// The pixel at the center of the sensor.
    pub fn central_pixel(sensor: &SensorConfig) -> Self {
        let d = sensor.pixel_width;
        let (i, j) = (sensor.width_px / 2, sensor.height_px / 2);
        Self {
            x_min: i as f64 * d,
            x_max: (i + 1) as f64 * d,
            y_min: j as f64 * d,
            y_max: (j + 1) as f64 * d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_samples: usize,
    /// Train, validation and test fractions.
    pub split_fractions: [f64; 3],
    /// Probabilities of 1, 2, ... targets per scene.
    pub count_distribution: Vec<f64>,
    pub intensity_range: [f64; 2],
    pub min_separation: f64,
    pub placement_region: PlacementRegion,
    pub grid_factor: usize,
    pub rng_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let sensor = SensorConfig::default();
        Self {
            num_samples: 6000,
            split_fractions: [0.8, 0.1, 0.1],
            count_distribution: vec![0.2; 5],
            intensity_range: [220.0, 250.0],
            min_separation: 0.52 * rayleigh_unit(sensor.sigma_psf),
            placement_region: PlacementRegion::central_pixel(&sensor),
            grid_factor: 3,
            rng_seed: 0,
        }
    }
}

impl DatasetConfig {
    /// 5000 / 500 / 500 samples.
    pub fn desk_scale() -> Self {
        Self {
            num_samples: 6000,
            split_fractions: [5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let fsum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
            || (fsum - 1.0).abs() > 1e-12
        {
            return bad(format!(
                "split fractions {:?} must be nonnegative and sum to 1",
                self.split_fractions
            ));
        }
        let csum: f64 = self.count_distribution.iter().sum();
        if self.count_distribution.is_empty()
            || self.count_distribution.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (csum - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "count distribution {:?} must be a probability vector",
                self.count_distribution
            ));
        }
        let [g_min, g_max] = self.intensity_range;
        if !(g_min.is_finite() && g_max.is_finite() && g_min > 0.0 && g_min <= g_max) {
            return bad(format!("intensity range [{g_min}, {g_max}] is invalid"));
        }
        if !(self.min_separation.is_finite() && self.min_separation >= 0.0) {
            return bad(format!("min_separation {} must be >= 0", self.min_separation));
        }
        if self.grid_factor < 1 {
            return bad("grid_factor must be >= 1".into());
        }
        let r = &self.placement_region;
        if !(r.x_min.is_finite() && r.y_min.is_finite() && r.x_min < r.x_max && r.y_min < r.y_max)
        {
            return bad(format!("placement region {r:?} is empty"));
        }
        Ok(())
    }

    fn validate_against(&self, sensor: &SensorConfig) -> Result<()> {
        self.validate()?;
        sensor.validate()?;
        let (w, h) = sensor.extent();
        let r = &self.placement_region;
        if r.x_min < 0.0 || r.y_min < 0.0 || r.x_max > w || r.y_max > h {
            return Err(Error::Config(format!(
                "placement region {r:?} exceeds the {w}x{h} sensor"
            )));
        }
        Ok(())
    }

    /// Per-split sample counts; train and validation are rounded, test takes the rest.
    pub fn split_counts(&self) -> Result<SplitCounts> {
        let n = self.num_samples as f64;
        let train = (n * self.split_fractions[0]).round() as usize;
        let val = (n * self.split_fractions[1]).round() as usize;
        if train + val > self.num_samples {
            return Err(Error::Config("split fractions over-allocate samples".into()));
        }
        Ok(SplitCounts {
            train,
            val,
            test: self.num_samples - train - val,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Val => "val.bin",
            Split::Test => "test.bin",
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Draws one scene: a target count, then positions by rejection sampling so all
/// pairwise distances are at least `min_separation`, then uniform intensities.
/// Draws that would share a high-resolution cell with an earlier target are
/// rejected as well, which only matters for separations below one cell.
pub fn sample_scene(config: &DatasetConfig, sensor: &SensorConfig, rng: &mut Rng) -> Result<TargetScene> {
    let count = {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = config.count_distribution.len();
        for (i, p) in config.count_distribution.iter().enumerate() {
            acc += p;
            if u < acc {
                k = i + 1;
                break;
            }
        }
        k
    };
    let r = config.placement_region;
    let min_sep2 = config.min_separation * config.min_separation;
    let mut positions: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut draws = 0;
    let mut streak = 0;
    while positions.len() < count {
        if draws == REJECTION_BUDGET {
            return Err(Error::Generation(format!(
                "could not place {count} targets with min_separation {} inside {:?} within {} draws",
                config.min_separation, r, REJECTION_BUDGET
            )));
        }
        draws += 1;
        let x = r.x_min + rng.gen::<f64>() * (r.x_max - r.x_min);
        let y = r.y_min + rng.gen::<f64>() * (r.y_max - r.y_min);
        let cell = |px: f64, py: f64| {
            let f = |v: f64| hi_res_coordinate(v, sensor.pixel_width, config.grid_factor).round();
            (f(px), f(py))
        };
        let clear = positions.iter().all(|&(px, py)| {
            (px - x).powi(2) + (py - y).powi(2) >= min_sep2 && cell(px, py) != cell(x, y)
        });
        if clear {
            positions.push((x, y));
            streak = 0;
        } else {
            streak += 1;
            if streak == RESTART_AFTER {
                positions.clear();
                streak = 0;
            }
        }
    }
    let [g_min, g_max] = config.intensity_range;
    let targets = positions
        .into_iter()
        .map(|(x, y)| Target::new(x, y, g_min + rng.gen::<f64>() * (g_max - g_min)))
        .collect();
    TargetScene::new(targets, *sensor)
}

/// High-resolution intensity grid of size `(U*c) x (V*c)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGridImage {
    pub width: usize,
    pub height: usize,
    pub factor: usize,
    pub values: Vec<f64>,
}

impl SparseGridImage {
    pub fn zeros(width: usize, height: usize, factor: usize) -> Self {
        Self {
            width,
            height,
            factor,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, factor: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            factor,
            values,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Continuous high-resolution index of a sensor coordinate along one axis.
///
/// The sensor frame puts pixel centers at half-integers; the cell-index formula
/// `c * x + (c - 1) / 2` expects pixel centers at integers, hence the half-pixel
/// shift.
pub fn hi_res_coordinate(pos: f64, pixel_width: f64, factor: usize) -> f64 {
    let c = factor as f64;
    let centered = pos / pixel_width - 0.5;
    c * centered + (c - 1.0) / 2.0
}

/// Places each target's intensity on the nearest high-resolution cell.
pub fn encode_ground_truth(scene: &TargetScene, factor: usize) -> Result<SparseGridImage> {
    if factor < 1 {
        return Err(Error::Config("grid factor must be >= 1".into()));
    }
    let s = &scene.sensor;
    let (w, h) = (s.width_px * factor, s.height_px * factor);
    let mut grid = SparseGridImage::zeros(w, h, factor);
    for (k, t) in scene.targets.iter().enumerate() {
        let hx = hi_res_coordinate(t.x, s.pixel_width, factor).round();
        let hy = hi_res_coordinate(t.y, s.pixel_width, factor).round();
        if !(hx >= 0.0 && hy >= 0.0 && hx < w as f64 && hy < h as f64) {
            return Err(Error::Encoding(format!(
                "target {k} at ({}, {}) maps to cell ({hx}, {hy}) outside the {w}x{h} grid",
                t.x, t.y
            )));
        }
        let idx = hy as usize * w + hx as usize;
        if grid.values[idx] != 0.0 {
            return Err(Error::Encoding(format!(
                "target {k} collides with another target in cell ({hx}, {hy})"
            )));
        }
        grid.values[idx] = t.intensity;
    }
    Ok(grid)
}

/// One stored sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub targets: Vec<Target>,
    pub observed: FocalPlaneImage,
    pub truth: SparseGridImage,
}

impl Record {
    fn encode(&self, out: &mut Vec<u8>) {
        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        put(self.targets.len() as f64);
        for t in &self.targets {
            put(t.x);
            put(t.y);
            put(t.intensity);
        }
        for v in &self.observed.pixels {
            put(*v);
        }
        for v in &self.truth.values {
            put(*v);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub sensor: SensorConfig,
    pub dataset: DatasetConfig,
    pub counts: SplitCounts,
    /// CRC-64/XZ of train.bin, val.bin and test.bin concatenated, as hex.
    pub checksum: String,
    /// Byte offsets of each record within its split file, in split order.
    #[serde(skip)]
    pub offsets: [Vec<u64>; 3],
}

impl DatasetManifest {
    pub fn seed(&self) -> u64 {
        self.dataset.rng_seed
    }
}

fn make_sample(config: &DatasetConfig, sensor: &SensorConfig, index: usize) -> Result<Record> {
    let mut rng = rng_from_seed(derive_seed(config.rng_seed, index as u64));
    let scene = sample_scene(config, sensor, &mut rng)?;
    let noise_seed: u64 = rng.gen();
    let observed = render_scene(&scene, noise_seed)?;
    let mut truth = encode_ground_truth(&scene, config.grid_factor)?;
    // store what the f32 file will hold so in-memory and on-disk records agree
    let round = |v: f64| v as f32 as f64;
    truth.values.iter_mut().for_each(|v| *v = round(*v));
    Ok(Record {
        targets: scene
            .targets
            .iter()
            .map(|t| Target::new(round(t.x), round(t.y), round(t.intensity)))
            .collect(),
        observed: FocalPlaneImage {
            pixels: observed.pixels.iter().map(|v| round(*v)).collect(),
            ..observed
        },
        truth,
    })
}

/// Generates every sample, writes the split files and `manifest.json` into
/// `out_dir`, and returns the manifest. Output is byte-identical for a fixed seed
/// regardless of thread count.
pub fn generate_dataset(
    config: &DatasetConfig,
    sensor: &SensorConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate_against(sensor)?;
    let counts = config.split_counts()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records: Vec<Vec<u8>> = (0..config.num_samples)
        .into_par_iter()
        .map(|i| {
            let rec = make_sample(config, sensor, i)?;
            let mut buf = Vec::new();
            rec.encode(&mut buf);
            Ok(buf)
        })
        .collect::<Result<_>>()?;

    let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
    let mut digest = crc.digest();
    let mut offsets: [Vec<u64>; 3] = Default::default();
    let mut start = 0;
    for (s, split) in Split::ALL.iter().enumerate() {
        let n = counts.get(*split);
        let path = out_dir.join(split.file_name());
        let mut bytes = Vec::new();
        for rec in &records[start..start + n] {
            offsets[s].push(bytes.len() as u64);
            bytes.extend_from_slice(rec);
        }
        start += n;
        digest.update(&bytes);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    }

    let manifest = DatasetManifest {
        version: FORMAT_VERSION.to_string(),
        sensor: *sensor,
        dataset: config.clone(),
        counts,
        checksum: format!("{:016x}", digest.finalize()),
        offsets,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported version {}", manifest.version),
            ));
        }
        manifest.sensor.validate()?;
        manifest.dataset.validate()?;
        let mut ds = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        for (s, split) in Split::ALL.iter().enumerate() {
            let (_, offsets) = ds.read_split(*split)?;
            ds.manifest.offsets[s] = offsets;
        }
        Ok(ds)
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.manifest.sensor
    }

    pub fn grid_factor(&self) -> usize {
        self.manifest.dataset.grid_factor
    }

    fn read_split(&self, split: Split) -> Result<(Vec<Record>, Vec<u64>)> {
        let path = self.dir.join(split.file_name());
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::format(&path, "length is not a multiple of 4"));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let s = &self.manifest.sensor;
        let c = self.manifest.dataset.grid_factor;
        let (uv, hw, hh) = (s.num_pixels(), s.width_px * c, s.height_px * c);
        let mut pos = 0;
        let mut records = Vec::new();
        let mut offsets = Vec::new();
        while pos < floats.len() {
            offsets.push(pos as u64 * 4);
            let n = floats[pos];
            if !(n >= 0.0 && n.fract() == 0.0) {
                return Err(Error::format(&path, format!("bad target count {n} at float {pos}")));
            }
            let n = n as usize;
            let need = 1 + 3 * n + uv + hw * hh;
            if pos + need > floats.len() {
                return Err(Error::format(&path, "truncated record"));
            }
            let f = |k: usize| floats[pos + k] as f64;
            let targets = (0..n)
                .map(|t| Target::new(f(1 + 3 * t), f(2 + 3 * t), f(3 + 3 * t)))
                .collect();
            let zoff = 1 + 3 * n;
            let observed = FocalPlaneImage {
                width: s.width_px,
                height: s.height_px,
                pixels: (0..uv).map(|k| f(zoff + k)).collect(),
            };
            let truth = SparseGridImage {
                width: hw,
                height: hh,
                factor: c,
                values: (0..hw * hh).map(|k| f(zoff + uv + k)).collect(),
            };
            records.push(Record {
                targets,
                observed,
                truth,
            });
            pos += need;
        }
        let expected = self.manifest.counts.get(split);
        if records.len() != expected {
            return Err(Error::format(
                &path,
                format!("{} records, manifest says {expected}", records.len()),
            ));
        }
        Ok((records, offsets))
    }

    pub fn load(&self, split: Split) -> Result<Vec<Record>> {
        Ok(self.read_split(split)?.0)
    }

    /// Recomputes the CRC-64 of the split files.
    pub fn compute_checksum(&self) -> Result<String> {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut digest = crc.digest();
        for split in Split::ALL {
            let path = self.dir.join(split.file_name());
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            digest.update(&bytes);
        }
        Ok(format!("{:016x}", digest.finalize()))
    }
}
