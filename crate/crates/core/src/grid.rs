//! Dense volumetric containers and the per-voxel channel kernels.
//!
//! Axis order is `(D, H, W)` everywhere, row-major with `W` fastest. Multi-channel
//! tensors are channel-major: channel `c` occupies `data[c * V .. (c + 1) * V]`
//! where `V = D * H * W`.

use crate::error::{Error, Result};

/// Number of classes in the default organ set: background plus 13 organs.
pub const DEFAULT_CLASSES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (z, y, x)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::DimMismatch(format!("zero extent in {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Millimetres per voxel along `(z, y, x)`.
#[derive(Clone, Copy, Debug)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const UNIT: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn mean(&self) -> f64 {
        (self.0[0] + self.0[1] + self.0[2]) / 3.0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!("invalid spacing {:?}", self.0)))
        }
    }
}

impl PartialEq for Spacing {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl Eq for Spacing {}

impl Default for Spacing {
    fn default() -> Self {
        Self::UNIT
    }
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for dims {dims}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("volume".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }
}

/// Per-voxel organ class IDs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} labels for dims {dims}",
                data.len()
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0; dims.len()],
        }
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Foreground classes present, ascending.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn mask_of(&self, class: u8) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            bits: self.data.iter().map(|&l| l == class).collect(),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }
}

/// Channel-major per-class scores (logits or probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTensor {
    pub channels: usize,
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl LogitTensor {
    pub fn new(channels: usize, dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if channels == 0 || data.len() != channels * dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for {channels} channels of {dims}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("logit tensor".into()));
        }
        Ok(Self {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: Dims, spacing: Spacing) -> Self {
        Self {
            channels,
            dims,
            spacing,
            data: vec![0.0; channels * dims.len()],
        }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize) -> f64 {
        self.data[c * self.voxels() + i]
    }

    pub fn same_shape(&self, other: &LogitTensor) -> Result<()> {
        if self.channels != other.channels || self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.channels, self.dims, other.channels, other.dims
            )));
        }
        Ok(())
    }
}

/// Boolean voxel set with physical spacing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub spacing: Spacing,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            bits: vec![false; dims.len()],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = self.dims.index(z, y, x);
        self.bits[i] = value;
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[self.dims.index(z, y, x)]
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Channel softmax with max subtraction. Accumulation order per voxel is
/// channel 0 upward.
pub fn softmax_channels(logits: &LogitTensor) -> LogitTensor {
    let v = logits.voxels();
    let c = logits.channels;
    let mut out = LogitTensor::zeros(c, logits.dims, logits.spacing);
    for i in 0..v {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            max = max.max(logits.data[k * v + i]);
        }
        let mut sum = 0.0;
        for k in 0..c {
            let e = (logits.data[k * v + i] - max).exp();
            out.data[k * v + i] = e;
            sum += e;
        }
        for k in 0..c {
            out.data[k * v + i] /= sum;
        }
    }
    out
}

/// Per-voxel argmax; ties resolve to the lowest channel index.
pub fn argmax_channels(scores: &LogitTensor) -> LabelMap {
    let v = scores.voxels();
    let mut labels = vec![0u8; v];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_val = scores.data[i];
        for k in 1..scores.channels {
            let val = scores.data[k * v + i];
            if val > best_val {
                best = k;
                best_val = val;
            }
        }
        *label = best as u8;
    }
    LabelMap {
        dims: scores.dims,
        spacing: scores.spacing,
        data: labels,
    }
}

pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<LogitTensor> {
    labels.check_classes(classes)?;
    let v = labels.dims.len();
    let mut out = LogitTensor::zeros(classes, labels.dims, labels.spacing);
    for (i, &l) in labels.data.iter().enumerate() {
        out.data[l as usize * v + i] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub fn extent(&self, dims: Dims) -> usize {
        match self {
            Axis::Axial => dims.d,
            Axis::Coronal => dims.h,
            Axis::Sagittal => dims.w,
        }
    }

    /// `(width, height)` of a slice along this axis.
    pub fn plane(&self, dims: Dims) -> (usize, usize) {
        match self {
            Axis::Axial => (dims.w, dims.h),
            Axis::Coronal => (dims.w, dims.d),
            Axis::Sagittal => (dims.h, dims.d),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" | "z" => Ok(Axis::Axial),
            "coronal" | "y" => Ok(Axis::Coronal),
            "sagittal" | "x" => Ok(Axis::Sagittal),
            other => Err(Error::ConfigInvalid(format!("unknown axis {other:?}"))),
        }
    }
}

/// A 2D plane cut from a grid.
///
/// Orientation: axial fixes `z` (rows = `y`, columns = `x`), coronal fixes `y`
/// (rows = `z`, columns = `x`), sagittal fixes `x` (rows = `z`, columns = `y`).
/// Row 0 is the lowest index along the row axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl SliceImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Anything that can be read voxel-by-voxel as a scalar field.
pub trait ScalarGrid {
    fn grid_dims(&self) -> Dims;
    fn value(&self, i: usize) -> f64;
}

impl ScalarGrid for Volume {
    fn grid_dims(&self) -> Dims {
        self.dims
    }
    fn value(&self, i: usize) -> f64 {
        self.data[i]
    }
}

impl ScalarGrid for LabelMap {
    fn grid_dims(&self) -> Dims {
        self.dims
    }
    fn value(&self, i: usize) -> f64 {
        self.data[i] as f64
    }
}

/// One channel of a [`LogitTensor`].
pub struct ChannelView<'a> {
    pub tensor: &'a LogitTensor,
    pub channel: usize,
}

impl ScalarGrid for ChannelView<'_> {
    fn grid_dims(&self) -> Dims {
        self.tensor.dims
    }
    fn value(&self, i: usize) -> f64 {
        self.tensor.at(self.channel, i)
    }
}

pub fn extract_slice<G: ScalarGrid + ?Sized>(grid: &G, axis: Axis, index: usize) -> Result<SliceImage> {
    let dims = grid.grid_dims();
    let extent = axis.extent(dims);
    if index >= extent {
        return Err(Error::IndexOutOfRange { index, extent });
    }
    let (width, height) = axis.plane(dims);
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let i = match axis {
                Axis::Axial => dims.index(index, row, col),
                Axis::Coronal => dims.index(row, index, col),
                Axis::Sagittal => dims.index(row, col, index),
            };
            pixels.push(grid.value(i));
        }
    }
    Ok(SliceImage {
        axis,
        index,
        width,
        height,
        pixels,
    })
}
