//! Side-by-side grayscale PNGs: measurement (upsampled), reconstruction, truth.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context as _, Result};
use cso_unmix::scenegen::{Record, SparseGridImage};

use crate::RenderArgs;

const GAP: usize = 2;

/// Panel scaled so its largest value maps to 255; returns the scale used.
fn panel(values: &[f64]) -> (Vec<u8>, f64) {
    let max = values.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 1.0 };
    let px = values
        .iter()
        .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    (px, scale)
}

fn upsample(values: &[f64], w: usize, h: usize, factor: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            out.push(values[(y / factor) * w + x / factor]);
        }
    }
    out
}

pub fn write_triplets(args: &RenderArgs, report: &Path, records: &[Record], preds: &[SparseGridImage]) -> Result<()> {
    if args.render == 0 {
        return Ok(());
    }
    let dir = match &args.render_dir {
        Some(d) => d.clone(),
        None => report.parent().unwrap_or(Path::new(".")).join("renders"),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, (r, p)) in records.iter().zip(preds).take(args.render).enumerate() {
        let (w, h, c) = (p.width, p.height, p.factor);
        let z = upsample(&r.observed.pixels, r.observed.width, r.observed.height, c);
        let (zp, zs) = panel(&z);
        let (pp, ps) = panel(&p.values);
        let (tp, ts) = panel(&r.truth.values);
        let width = 3 * w + 2 * GAP;
        let mut img = vec![0u8; width * h];
        for y in 0..h {
            for (k, src) in [&zp, &pp, &tp].into_iter().enumerate() {
                let off = y * width + k * (w + GAP);
                img[off..off + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        let name = format!("sample{i:04}_z{zs:.6}_pred{ps:.6}_truth{ts:.6}.png");
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&img)?;
    }
    Ok(())
}
