//! Key-point heatmap representation and manipulation: peak finding, Gaussian
//! rendering, peak-centered dilation and selection-driven stacking.
//!
//! Coordinates are 0-indexed with `x` the column and `y` the row; pixel
//! `(x, y)` of a map lives at flat index `y * width + x` (row-major).

use crate::error::{Error, Result};

/// Foreground key-point channels produced by the landmark estimator.
pub const NUM_KEYPOINT_CHANNELS: usize = 20;
/// Foreground channels plus the reserved background channel. The background,
/// when present, always occupies the last channel.
pub const NUM_CHANNELS_WITH_BACKGROUND: usize = 21;
/// Default square map extent.
pub const DEFAULT_MAP_SIZE: usize = 56;
/// Number of key-points selected per orientation group.
pub const NUM_SELECTED_KEYPOINTS: usize = 7;
/// Default dilation kernel width.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// A single-channel response map. Construction enforces non-empty dimensions,
/// so every map has at least one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(
                "heatmap dimensions",
                "height >= 1 and width >= 1",
                format!("{height}x{width}"),
            ));
        }
        if values.len() != height * width {
            return Err(Error::dim("heatmap values", height * width, values.len()));
        }
        Ok(Heatmap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Heatmap::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        assert!(x < self.width && y < self.height, "heatmap index out of bounds");
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        assert!(x < self.width && y < self.height, "heatmap index out of bounds");
        self.values[y * self.width + x] = value;
    }
}

/// Location and value of a map's maximal pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakLocation {
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// A fixed-geometry stack of response maps, one channel per key-point.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: Vec<Heatmap>,
}

impl HeatmapStack {
    /// All channels must share dimensions; at least one channel is required.
    pub fn new(channels: Vec<Heatmap>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::dim("heatmap stack", "at least 1 channel", 0))?;
        let (h, w) = (first.height(), first.width());
        for (k, ch) in channels.iter().enumerate() {
            if ch.height() != h || ch.width() != w {
                return Err(Error::dim(
                    format!("stack channel {k}"),
                    format!("{h}x{w}"),
                    format!("{}x{}", ch.height(), ch.width()),
                ));
            }
        }
        Ok(HeatmapStack { channels })
    }

    pub fn zeros(num_channels: usize, height: usize, width: usize) -> Result<Self> {
        let ch = Heatmap::zeros(height, width)?;
        HeatmapStack::new(vec![ch; num_channels])
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn channels(&self) -> &[Heatmap] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> &Heatmap {
        &self.channels[index]
    }

    /// Mutable access to one channel's pixel buffer. Dimensions stay fixed.
    pub fn channel_values_mut(&mut self, index: usize) -> &mut [f64] {
        self.channels[index].values_mut()
    }
}

/// Returns the maximal-value pixel. Ties are broken by the smallest row-major
/// index, i.e. lower `y` first, then lower `x`.
pub fn find_peak(map: &Heatmap) -> PeakLocation {
    let mut best_idx = 0;
    let mut best = map.values()[0];
    for (idx, &v) in map.values().iter().enumerate().skip(1) {
        if v > best {
            best = v;
            best_idx = idx;
        }
    }
    PeakLocation {
        x: best_idx % map.width(),
        y: best_idx / map.width(),
        value: best,
    }
}

/// Renders `exp(-((y - cy)^2 + (x - cx)^2) / (2 sigma^2))` over an
/// `height x width` grid. The kernel is peak-normalized: the value at the
/// center is exactly 1, with no rescaling to unit mass.
pub fn render_gaussian(
    center_x: usize,
    center_y: usize,
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<Heatmap> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::dim(
            "gaussian grid",
            "height >= 1 and width >= 1",
            format!("{height}x{width}"),
        ));
    }
    if center_x >= width || center_y >= height {
        return Err(Error::InvalidArgument(format!(
            "gaussian center ({center_x}, {center_y}) outside {width}x{height} grid"
        )));
    }
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let dy = y as f64 - center_y as f64;
        for x in 0..width {
            let dx = x as f64 - center_x as f64;
            values.push((-(dx * dx + dy * dy) * inv_two_sigma_sq).exp());
        }
    }
    Heatmap::new(height, width, values)
}

/// Replaces the map with a Gaussian kernel centered on its peak. The original
/// responses are discarded; only the argmax location survives.
pub fn dilate_at_peak(map: &Heatmap, sigma: f64) -> Result<Heatmap> {
    let peak = find_peak(map);
    render_gaussian(peak.x, peak.y, sigma, map.height(), map.width())
}

/// Builds the 7-channel stack for a selected key-point group: output channel
/// `k` is the dilation of input channel `indices[k]` (1-based key-point ids).
pub fn stack_selected(
    stack: &HeatmapStack,
    indices: &[usize; NUM_SELECTED_KEYPOINTS],
    sigma: f64,
) -> Result<HeatmapStack> {
    let mut seen = [false; NUM_KEYPOINT_CHANNELS];
    for &idx in indices {
        if !(1..=NUM_KEYPOINT_CHANNELS).contains(&idx) {
            return Err(Error::InvalidArgument(format!(
                "key-point index {idx} outside 1..={NUM_KEYPOINT_CHANNELS}"
            )));
        }
        if idx > stack.num_channels() {
            return Err(Error::dim(
                "selected key-point channel",
                format!("stack with >= {idx} channels"),
                stack.num_channels(),
            ));
        }
        if seen[idx - 1] {
            return Err(Error::InvalidArgument(format!(
                "duplicate key-point index {idx}"
            )));
        }
        seen[idx - 1] = true;
    }
    let channels = indices
        .iter()
        .map(|&idx| dilate_at_peak(stack.channel(idx - 1), sigma))
        .collect::<Result<Vec<_>>>()?;
    HeatmapStack::new(channels)
}
