//! Channel importance from calibration activations.
//!
//! Each calibration input is convolved with the layer and globally average
//! pooled, giving one score per output channel. A channel's importance is
//! the entropy of its scores across inputs, binned with the largest
//! equal-width bin count that leaves no bin empty.

use rayon::prelude::*;
use thiserror::Error;

use crate::container::{ConvDims, ModelContainer};
use crate::entropy::{count_product, entropy_bits};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScorerError {
    #[error("input has {input} channels, kernel expects {kernel}")]
    ShapeMismatch { input: usize, kernel: usize },
    #[error("kernel {kernel} does not fit padded input {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("tensor holds {actual} values, shape implies {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("no calibration inputs")]
    NoInputs,
    #[error("bin {bin} of {m} is empty")]
    EmptyBin { bin: usize, m: usize },
    #[error("score is not finite")]
    NonFinite,
    #[error("calibration tensor {0} is not a c x h x w tensor")]
    BadCalibrationTensor(String),
}

/// A `channels x height x width` activation tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, ScorerError> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(ScorerError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Cross-correlation with zero padding, no bias. Products accumulate in
/// f64 and each output is rounded once to f32.
pub fn conv_forward(
    input: &FeatureMap,
    weights: &[f32],
    dims: ConvDims,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap, ScorerError> {
    if input.channels != dims.in_channels {
        return Err(ScorerError::ShapeMismatch {
            input: input.channels,
            kernel: dims.in_channels,
        });
    }
    if weights.len() != dims.total() {
        return Err(ScorerError::DataLength {
            expected: dims.total(),
            actual: weights.len(),
        });
    }
    if stride == 0 {
        return Err(ScorerError::ZeroStride);
    }
    let (ph, pw) = (input.height + 2 * padding, input.width + 2 * padding);
    if dims.kernel_h > ph || dims.kernel_w > pw {
        return Err(ScorerError::KernelTooLarge {
            kernel: dims.kernel_h.max(dims.kernel_w),
            padded: ph.min(pw),
        });
    }
    let oh = (ph - dims.kernel_h) / stride + 1;
    let ow = (pw - dims.kernel_w) / stride + 1;
    let mut out = FeatureMap::zeros(dims.out_channels, oh, ow);
    let per = dims.per_channel();
    for o in 0..dims.out_channels {
        let kernel = &weights[o * per..(o + 1) * per];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f64;
                for ci in 0..dims.in_channels {
                    for ky in 0..dims.kernel_h {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= input.height as isize {
                            continue;
                        }
                        for kx in 0..dims.kernel_w {
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if x < 0 || x >= input.width as isize {
                                continue;
                            }
                            let k = kernel[(ci * dims.kernel_h + ky) * dims.kernel_w + kx];
                            acc += k as f64 * input.at(ci, y as usize, x as usize) as f64;
                        }
                    }
                }
                out.data[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// `rows x cols` scores; row `g` belongs to calibration input `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, ScorerError> {
        if values.len() != rows * cols {
            return Err(ScorerError::DataLength {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ScorerError::NonFinite);
        }
        Ok(ScoreMatrix { rows, cols, values })
    }

    pub fn column(&self, l: usize) -> Vec<f64> {
        (0..self.rows).map(|g| self.values[g * self.cols + l]).collect()
    }
}

/// Global-average-pooled conv outputs, one row per input.
pub fn channel_scores(
    weights: &[f32],
    dims: ConvDims,
    stride: usize,
    padding: usize,
    inputs: &[FeatureMap],
) -> Result<ScoreMatrix, ScorerError> {
    if inputs.is_empty() {
        return Err(ScorerError::NoInputs);
    }
    let rows = inputs
        .par_iter()
        .map(|img| {
            let out = conv_forward(img, weights, dims, stride, padding)?;
            let area = out.height * out.width;
            Ok((0..out.channels)
                .map(|o| {
                    let s: f64 = out.data[o * area..(o + 1) * area]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                    s / area as f64
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>, ScorerError>>()?;
    ScoreMatrix::new(inputs.len(), dims.out_channels, rows.concat())
}

/// Equal-width bin occupancy over `[min, max]`. A value on an interior edge
/// goes to the higher bin; the maximum goes to the last bin.
pub fn bin_occupancy(column: &[f64], m: usize) -> Vec<u64> {
    let mut counts = vec![0u64; m.max(1)];
    if column.is_empty() {
        return counts;
    }
    let (lo, hi) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for &v in column {
        let bin = if range > 0.0 {
            (((v - lo) * m as f64 / range).floor() as usize).min(m - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    counts
}

/// Largest `m` in `[1, len]` whose equal-width binning has no empty bin.
pub fn bin_count_search(column: &[f64]) -> usize {
    (1..=column.len().max(1))
        .rev()
        .find(|&m| bin_occupancy(column, m).iter().all(|&n| n > 0))
        .unwrap_or(1)
}

pub fn channel_entropy(column: &[f64], m: usize) -> Result<f64, ScorerError> {
    let counts = bin_occupancy(column, m);
    if let Some(bin) = counts.iter().position(|&n| n == 0) {
        return Err(ScorerError::EmptyBin { bin, m });
    }
    Ok(entropy_bits(&counts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRank {
    pub entropies: Vec<f64>,
    /// Channels by ascending entropy, ties by index.
    pub order: Vec<usize>,
    pub bin_counts: Vec<usize>,
}

/// Ranks channels by entropy. Every column has the same number of scores,
/// so the order is decided exactly on count products rather than on
/// rounded entropies; mathematically equal entropies tie and fall back to
/// channel index.
pub fn rank_channels(scores: &ScoreMatrix) -> ChannelRank {
    let mut entropies = Vec::with_capacity(scores.cols);
    let mut bin_counts = Vec::with_capacity(scores.cols);
    let mut keys = Vec::with_capacity(scores.cols);
    for l in 0..scores.cols {
        let col = scores.column(l);
        let m = bin_count_search(&col);
        let counts = bin_occupancy(&col, m);
        entropies.push(entropy_bits(&counts));
        bin_counts.push(m);
        keys.push(count_product(&counts));
    }
    let mut order: Vec<usize> = (0..scores.cols).collect();
    order.sort_by(|&a, &b| keys[b].cmp(&keys[a]).then(a.cmp(&b)));
    ChannelRank {
        entropies,
        order,
        bin_counts,
    }
}

/// Collects calibration inputs for `layer` from a container: tensors named
/// `layer{idx}/input_NNNN` if any exist, otherwise `input_NNNN`, sorted by
/// name. Each must be a rank-3 `c x h x w` tensor.
pub fn calibration_inputs(calib: &ModelContainer, layer: usize) -> Result<Vec<FeatureMap>, ScorerError> {
    let scoped = format!("layer{layer}/input_");
    let mut picked: Vec<_> = calib
        .tensors
        .iter()
        .filter(|t| t.name.starts_with(&scoped))
        .collect();
    if picked.is_empty() {
        picked = calib
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("input_"))
            .collect();
    }
    if picked.is_empty() {
        return Err(ScorerError::NoInputs);
    }
    picked.sort_by(|a, b| a.name.cmp(&b.name));
    picked
        .into_iter()
        .map(|t| match t.shape[..] {
            [c, h, w] => FeatureMap::new(c, h, w, t.data.clone()),
            _ => Err(ScorerError::BadCalibrationTensor(t.name.clone())),
        })
        .collect()
}
