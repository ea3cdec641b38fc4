//! 2D slice representation and pixel-level transforms.
//!
//! Images are stored row-major as `f32`. Every image carries a [`ValueDomain`]
//! tag so that HU-only operations (windowing, cropping thresholds) can refuse
//! data that has already been normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest HU value accepted in an HU-tagged image.
pub const HU_MIN: f32 = -2048.0;
/// Highest HU value accepted in an HU-tagged image.
pub const HU_MAX: f32 = 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDomain {
    /// Hounsfield units, within [`HU_MIN`, `HU_MAX`].
    Hu,
    /// Display range `[0, 1]`.
    Unit,
    /// Zero-mean, unit-variance (or any unbounded real-valued data).
    ZScored,
}

impl ValueDomain {
    pub fn name(self) -> &'static str {
        match self {
            ValueDomain::Hu => "HU",
            ValueDomain::Unit => "unit",
            ValueDomain::ZScored => "z-scored",
        }
    }

    fn check(self, index: usize, value: f32) -> Result<()> {
        let ok = value.is_finite()
            && match self {
                ValueDomain::Hu => (HU_MIN..=HU_MAX).contains(&value),
                ValueDomain::Unit => (0.0..=1.0).contains(&value),
                ValueDomain::ZScored => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue { index, value })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    data: Vec<f32>,
    domain: ValueDomain,
}

impl Image2D {
    /// Builds an image, validating dimensions and the value domain.
    pub fn new(height: usize, width: usize, data: Vec<f32>, domain: ValueDomain) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("height/width", "must be at least 1"));
        }
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            domain.check(i, v)?;
        }
        Ok(Self {
            height,
            width,
            data,
            domain,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        domain: ValueDomain,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data, domain)
    }

    pub fn filled(height: usize, width: usize, value: f32, domain: ValueDomain) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], domain)
    }

    /// Internal constructor for outputs whose invariants hold by construction.
    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f32>, domain: ValueDomain) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
            domain,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Re-tags the image, validating the values against the new domain.
    pub fn with_domain(self, domain: ValueDomain) -> Result<Self> {
        Self::new(self.height, self.width, self.data, domain)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Copies the inclusive window `[row_min, row_max] x [col_min, col_max]`.
    pub fn crop(&self, row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max || row_max >= self.height || col_max >= self.width {
            return Err(Error::param(
                "crop window",
                format!(
                    "({row_min}..={row_max}, {col_min}..={col_max}) outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity((row_max - row_min + 1) * (col_max - col_min + 1));
        for r in row_min..=row_max {
            data.extend_from_slice(&self.data[r * self.width + col_min..=r * self.width + col_max]);
        }
        Ok(Self::from_parts(
            row_max - row_min + 1,
            col_max - col_min + 1,
            data,
            self.domain,
        ))
    }

    pub(crate) fn ensure_same_dims(&self, other_dims: (usize, usize), what: &str) -> Result<()> {
        if self.dims() != other_dims {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other_dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("height/width", "must be at least 1"));
        }
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub(crate) fn values_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other.dims(), "mask intersection")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Self::new(self.height, self.width, data)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn crop(&self, row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max || row_max >= self.height || col_max >= self.width {
            return Err(Error::param("crop window", "outside mask bounds"));
        }
        let mut data = Vec::with_capacity((row_max - row_min + 1) * (col_max - col_min + 1));
        for r in row_min..=row_max {
            data.extend_from_slice(&self.data[r * self.width + col_min..=r * self.width + col_max]);
        }
        Self::new(row_max - row_min + 1, col_max - col_min + 1, data)
    }

    /// Nearest-neighbour resize (half-pixel centres), which keeps the mask binary.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::param("out_h/out_w", "must be at least 1"));
        }
        if (out_h, out_w) == self.dims() {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        Ok(Self::from_fn(out_h, out_w, |r, c| {
            let sr = (((r as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let sc = (((c as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(sr, sc)
        }))
    }

    pub(crate) fn ensure_same_dims(&self, other_dims: (usize, usize), what: &str) -> Result<()> {
        if self.dims() != other_dims {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other_dims
            )));
        }
        Ok(())
    }
}

/// Radiological display window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub center: f32,
    pub width: f32,
}

impl WindowSpec {
    pub fn new(center: f32, width: f32) -> Result<Self> {
        if !(width > 0.0) || !center.is_finite() || !width.is_finite() {
            return Err(Error::param(
                "window width",
                format!("must be finite and > 0, got {width}"),
            ));
        }
        Ok(Self { center, width })
    }

    /// The lung window used throughout the pipeline: center -500 HU, width 1500 HU.
    pub fn lung() -> Self {
        Self {
            center: -500.0,
            width: 1500.0,
        }
    }

    pub fn floor(&self) -> f32 {
        self.center - self.width / 2.0
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::lung()
    }
}

/// Maps an HU image linearly onto `[0, 1]`, clamping outside the window.
pub fn apply_window(img: &Image2D, spec: &WindowSpec) -> Result<Image2D> {
    if img.domain != ValueDomain::Hu {
        return Err(Error::DomainMismatch {
            expected: ValueDomain::Hu.name(),
            actual: img.domain.name(),
        });
    }
    let spec = WindowSpec::new(spec.center, spec.width)?;
    let floor = spec.floor() as f64;
    let width = spec.width as f64;
    let data = img
        .data
        .iter()
        .map(|&v| ((v as f64 - floor) / width).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Image2D::from_parts(img.height, img.width, data, ValueDomain::Unit))
}

/// Population-std z-score of a single image.
pub fn zscore_normalize(img: &Image2D) -> Result<Image2D> {
    if img.len() < 2 {
        return Err(Error::param("image", "z-score needs at least 2 pixels"));
    }
    let n = img.len() as f64;
    let mean = img.mean();
    let var = img.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Err(Error::ConstantImage(std));
    }
    let data = img.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    Ok(Image2D::from_parts(img.height, img.width, data, ValueDomain::ZScored))
}

/// Bilinear resize using half-pixel centres (`align_corners = false`).
pub fn resize(img: &Image2D, out_h: usize, out_w: usize) -> Result<Image2D> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("out_h/out_w", "must be at least 1"));
    }
    if (out_h, out_w) == img.dims() {
        return Ok(img.clone());
    }
    let rows: Vec<(usize, usize, f64)> = axis_taps(img.height, out_h);
    let cols: Vec<(usize, usize, f64)> = axis_taps(img.width, out_w);
    let (lo, hi) = img.min_max();
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = img.get(r0, c0) as f64 * (1.0 - fx) + img.get(r0, c1) as f64 * fx;
            let bottom = img.get(r1, c0) as f64 * (1.0 - fx) + img.get(r1, c1) as f64 * fx;
            // Rounding can step a hair outside the convex hull of the taps.
            data.push(((top * (1.0 - fy) + bottom * fy) as f32).clamp(lo, hi));
        }
    }
    Ok(Image2D::from_parts(out_h, out_w, data, img.domain))
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Default blur sigma for the 5x5 augmentation kernel.
pub const DEFAULT_BLUR_SIGMA: f32 = 1.0;

/// Normalized 1D Gaussian taps; the 2D kernel is their outer product.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f32) -> Result<Vec<f64>> {
    if kernel_size.is_multiple_of(2) {
        return Err(Error::param("kernel_size", format!("must be odd, got {kernel_size}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be > 0, got {sigma}")));
    }
    let half = (kernel_size / 2) as f64;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / s2).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image2D, kernel_size: usize, sigma: f32) -> Result<Image2D> {
    let k = gaussian_kernel_1d(kernel_size, sigma)?;
    let half = (kernel_size / 2) as isize;
    let (h, w) = img.dims();
    let mut tmp = vec![0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sc = reflect_index(c as isize + t as isize - half, w);
                acc += kv * img.data[r * w + sc] as f64;
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sr = reflect_index(r as isize + t as isize - half, h);
                acc += kv * tmp[sr * w + c];
            }
            data.push(acc as f32);
        }
    }
    let out = Image2D::from_parts(h, w, data, img.domain);
    // A convex combination cannot leave [0, 1]; clamp away float noise for unit images.
    if img.domain == ValueDomain::Unit {
        let data = out.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        return Ok(Image2D::from_parts(h, w, data, ValueDomain::Unit));
    }
    Ok(out)
}
