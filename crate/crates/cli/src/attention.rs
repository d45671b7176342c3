//! Attention-map images: bilinear upsampling and plain PGM.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lsta_core::train::{attention_maps, Model};
use lsta_core::synth::ToyActivitySample;
use lsta_core::{ParamSet, Tensor};

use crate::error::{CliError, Result};

/// Bilinear resize of an `h x w` grid to `out_h x out_w`, sampling at pixel
/// centres with clamped borders.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(map.len(), h * w);
    let coord = |dst: usize, src_n: usize, dst_n: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Gray levels `round(255 (v - min) / (max - min))`; a constant image maps
/// to mid gray.
pub fn gray_levels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| (255.0 * (v - lo) / (hi - lo)).round() as u8).collect()
}

/// Plain-text P2 image with maxval 255, one image row per line.
pub fn encode_pgm(levels: &[u8], h: usize, w: usize) -> String {
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in levels.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// CSV with one row per time step: `step` then the raw map probabilities in
/// row-major order.
pub fn encode_map_csv(maps: &[Tensor]) -> String {
    let n = maps.first().map_or(0, |m| m.len());
    let mut s = String::from("step");
    for i in 0..n {
        write!(s, ",p{i}").unwrap();
    }
    s.push('\n');
    for (t, m) in maps.iter().enumerate() {
        write!(s, "{t}").unwrap();
        for v in m.data() {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `step_XX.pgm` for every time step plus `attention.csv` into
/// `dir`, returning the paths written.
pub fn export_attention(
    model: &Model,
    params: &ParamSet,
    sample: &ToyActivitySample,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = attention_maps(model, params, sample)?;
    let (h0, w0) = (model.meta.height, model.meta.width);
    let mut written = Vec::new();
    for (t, m) in maps.iter().enumerate() {
        let (_, h, w) = m.shape().chw().ok_or_else(|| CliError::Runtime("attention map is not [1 x H x W]".into()))?;
        let up = upsample_bilinear(m.data(), h, w, h0, w0);
        let path = dir.join(format!("step_{t:02}.pgm"));
        std::fs::write(&path, encode_pgm(&gray_levels(&up), h0, w0)).map_err(CliError::io(&path))?;
        written.push(path);
    }
    let path = dir.join("attention.csv");
    std::fs::write(&path, encode_map_csv(&maps)).map_err(CliError::io(&path))?;
    written.push(path);
    Ok(written)
}
