//! Latent traversals: decode a code while sweeping one coordinate, render
//! the frames as a pixmap strip, and measure which colour channel carries
//! the decoded energy.

use crate::datasets::GroupedDataset;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Offsets `-range..=range` in `steps` evenly spaced frames.
pub fn offsets(range: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps).map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Codes `mu + offset * e_dim` for each offset, one per row.
pub fn traversal_codes<T: Scalar>(mu: &[T], dim: usize, range: f64, steps: usize) -> Result<Tensor<T>> {
    if dim >= mu.len() {
        return Err(Error::invalid("traverse", format!("dimension {dim} out of range for a {}-d code", mu.len())));
    }
    let m = mu.len();
    let offs = offsets(range, steps);
    let mut data = Vec::with_capacity(offs.len() * m);
    for o in &offs {
        let mut row = mu.to_vec();
        row[dim] += T::lit(*o);
        data.extend(row);
    }
    Tensor::new(&[offs.len(), m], data)
}

/// Decoded frames (`steps x C x H x W`) for one latent coordinate.
pub fn traverse<T: Scalar>(model: &Model<T>, mu: &[T], dim: usize, range: f64, steps: usize) -> Result<Tensor<T>> {
    model.decode_values(&traversal_codes(mu, dim, range, steps)?)
}

/// Sum of squared clipped intensities per channel of one `C x H x W` image.
pub fn channel_energy<T: Scalar>(image: &[T], channels: usize) -> Vec<f64> {
    let plane = image.len() / channels.max(1);
    (0..channels)
        .map(|c| image[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64().clamp(0.0, 1.0).powi(2)).sum())
        .collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn dominant(energy: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in energy.iter().enumerate() {
        if e > energy[best] {
            best = i;
        }
    }
    best
}

/// Binary P6 pixmap of frames laid out left to right. Frames must have
/// three channels; values are clipped to `[0, 1]` and scaled to 255.
pub fn strip_ppm<T: Scalar>(frames: &Tensor<T>) -> Result<Vec<u8>> {
    let &[n, 3, h, w] = frames.shape() else {
        return Err(Error::shape("strip_ppm", &[frames.shape()]));
    };
    let mut out = format!("P6\n{} {}\n255\n", n * w, h).into_bytes();
    let plane = h * w;
    let data = frames.data();
    for y in 0..h {
        for f in 0..n {
            for x in 0..w {
                for c in 0..3 {
                    let v = data[(f * 3 + c) * plane + y * w + x].as_f64().clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
    }
    Ok(out)
}

/// How a latent coordinate behaves when swept on real inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorControl {
    pub dim: usize,
    pub probes: usize,
    /// Fraction of probes whose end frames have different dominant channels.
    pub flip_rate: f64,
    /// Fraction of probes whose predicted class stays fixed along the sweep.
    pub invariant_rate: f64,
    /// Fraction with both a channel flip and a fixed prediction.
    pub joint_rate: f64,
}

/// Sweeps `dim` over `±range` on the first `probes` examples of `data`.
pub fn color_control<T: Scalar>(
    model: &Model<T>,
    data: &GroupedDataset,
    dim: usize,
    range: f64,
    steps: usize,
    probes: usize,
) -> Result<ColorControl> {
    let n = probes.min(data.len());
    if n == 0 || steps < 2 {
        return Err(Error::invalid("color_control", "need at least one probe and two steps"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (mu, _) = model.encode_values(&data.batch::<T>(&idx))?;
    let channels = model.arch.image.channels;
    let (mut flips, mut fixed, mut joint) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let codes = traversal_codes(mu.row(i), dim, range, steps)?;
        let frames = model.decode_values(&codes)?;
        let first = dominant(&channel_energy(frames.row(0), channels));
        let last = dominant(&channel_energy(frames.row(steps - 1), channels));
        let preds = model.classify_values(&codes)?.argmax_rows();
        let flip = first != last;
        let stable = preds.iter().all(|&p| p == preds[0]);
        flips += flip as usize;
        fixed += stable as usize;
        joint += (flip && stable) as usize;
    }
    let rate = |k: usize| k as f64 / n as f64;
    Ok(ColorControl { dim, probes: n, flip_rate: rate(flips), invariant_rate: rate(fixed), joint_rate: rate(joint) })
}
