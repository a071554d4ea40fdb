//! Chromosome crop preprocessing.
//!
//! Everything here works on [`GrayImage`], a row-major raster of intensities
//! in `[0, 1]` where 1.0 is white background and chromosome material is dark.
//! The boundary pipeline follows a fixed sequence: min-max normalization,
//! Gaussian smoothing, dark-region thresholding, disk closing, Sobel gradient
//! energy and an edge threshold. The resulting ring mask is converted into a
//! per-row left/right [`BoundaryTrace`] from which the middle line, its
//! tangent and the centromere are derived.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Number of histogram bins used by [`normalize_and_equalize`].
pub const EQUALIZE_BINS: usize = 256;
/// Smoothing sigma of the boundary finder ("variance 1").
pub const BOUNDARY_SIGMA: f64 = 1.0;
/// Pixels darker than this are chromosome material.
pub const DARK_THRESHOLD: f64 = 220.0 / 256.0;
/// Renormalized gradient energy at or above this is an edge.
pub const EDGE_THRESHOLD: f64 = 150.0 / 256.0;
/// Radius of the disk used to close the dark-region mask.
pub const CLOSING_RADIUS: i64 = 2;
/// Output size of the fixed-size network input.
pub const NETWORK_INPUT_SIZE: (usize, usize) = (200, 100);
/// Fill value for pixels uncovered by rotation.
pub const BACKGROUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be nonempty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "image must be nonempty");
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Pixel access with clamp-to-edge semantics for out-of-range indices.
    #[inline]
    pub fn get_clamped(&self, row: i64, col: i64) -> f64 {
        let r = row.clamp(0, self.height as i64 - 1) as usize;
        let c = col.clamp(0, self.width as i64 - 1) as usize;
        self.get(r, c)
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(c, r))
    }

    /// 180 degree rotation.
    pub fn flipped(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(h, w, |r, c| self.get(h - 1 - r, w - 1 - c))
    }

    /// 90 degree counter-clockwise rotation.
    pub fn rotated_90(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.width, self.height, |r, c| self.get(c, w - 1 - r))
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.pixels.len() as f64
    }

    /// Reads an 8- or 16-bit grayscale PNG or TIFF. Color inputs are reduced to luma.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let decoded = image::open(path)?;
        let (pixels, w, h) = match decoded {
            DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                let px = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
                (px, w, h)
            }
            other => {
                let buf = other.into_luma16();
                let (w, h) = buf.dimensions();
                let px = buf
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 65535.0)
                    .collect();
                (px, w, h)
            }
        };
        Self::new(h as usize, w as usize, pixels)
    }

    /// 16-bit grayscale PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u16> = self
            .pixels
            .iter()
            .map(|v| (v * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .ok_or_else(|| Error::Internal("png buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Writes a 16-bit grayscale PNG atomically.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::textio::write_atomic(path, &self.encode_png()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] == 1
    }

    #[inline]
    fn get_or(&self, row: i64, col: i64, outside: bool) -> bool {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            outside
        } else {
            self.get(row as usize, col as usize)
        }
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.pixels[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |r, c| self.get(c, r))
    }
}

/// Min-max stretch to `[0, 1]`. A constant image is returned unchanged.
pub fn normalize(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return img.clone();
    }
    GrayImage {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|v| (v - lo) / range).collect(),
    }
}

/// Histogram equalization with [`EQUALIZE_BINS`] bins; each pixel maps to the
/// cumulative fraction of pixels in its bin or below.
pub fn equalize(img: &GrayImage) -> GrayImage {
    let bins = EQUALIZE_BINS;
    let bin_of = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    let mut hist = vec![0usize; bins];
    for &v in &img.pixels {
        hist[bin_of(v)] += 1;
    }
    let total = img.pixels.len() as f64;
    let mut cdf = vec![0.0; bins];
    let mut running = 0usize;
    for (b, &count) in hist.iter().enumerate() {
        running += count;
        cdf[b] = running as f64 / total;
    }
    GrayImage {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|&v| cdf[bin_of(v)]).collect(),
    }
}

pub fn normalize_and_equalize(img: &GrayImage) -> Result<GrayImage> {
    if img.pixels.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(equalize(&normalize(img)))
}

/// Normalized 1D Gaussian kernel truncated at three sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with clamp-to-edge borders; not range-clamped.
pub(crate) fn convolve_separable(
    h: usize,
    w: usize,
    src: &[f64],
    row_kernel: &[f64],
    col_kernel: &[f64],
) -> Vec<f64> {
    let rr = (row_kernel.len() / 2) as i64;
    let cr = (col_kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in col_kernel.iter().enumerate() {
                let cc = (c as i64 + k as i64 - cr).clamp(0, w as i64 - 1) as usize;
                acc += kv * src[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in row_kernel.iter().enumerate() {
                let rr2 = (r as i64 + k as i64 - rr).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[rr2 * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let pixels = convolve_separable(img.height, img.width, &img.pixels, &k, &k)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GrayImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}

pub fn threshold_below(img: &GrayImage, level: f64) -> BinaryMask {
    BinaryMask::from_fn(img.height, img.width, |r, c| img.get(r, c) < level)
}

fn disk_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            if dr * dr + dc * dc <= radius * radius {
                out.push((dr, dc));
            }
        }
    }
    out
}

pub fn dilate(mask: &BinaryMask, radius: i64) -> BinaryMask {
    let offsets = disk_offsets(radius);
    BinaryMask::from_fn(mask.height, mask.width, |r, c| {
        offsets
            .iter()
            .any(|(dr, dc)| mask.get_or(r as i64 + dr, c as i64 + dc, false))
    })
}

/// Erosion treats pixels beyond the border as set.
pub fn erode(mask: &BinaryMask, radius: i64) -> BinaryMask {
    let offsets = disk_offsets(radius);
    BinaryMask::from_fn(mask.height, mask.width, |r, c| {
        offsets
            .iter()
            .all(|(dr, dc)| mask.get_or(r as i64 + dr, c as i64 + dc, true))
    })
}

pub fn close(mask: &BinaryMask, radius: i64) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}

/// Sobel gradient energy `gx^2 + gy^2` of a mask, clamp-to-edge borders.
pub fn sobel_energy(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let at = |r: i64, c: i64| -> f64 {
        let r = r.clamp(0, h - 1) as usize;
        let c = c.clamp(0, w - 1) as usize;
        mask.get(r, c) as u8 as f64
    };
    let mut out = Vec::with_capacity((h * w) as usize);
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out.push(gx * gx + gy * gy);
        }
    }
    out
}

/// Edge mask of the dark object in `img`.
///
/// Gradient energy is left squared and rescaled by its maximum before the
/// edge threshold, so the threshold is relative to the strongest edge.
pub fn find_boundary(img: &GrayImage) -> BinaryMask {
    let norm = normalize(img);
    let smooth = gaussian_blur(&norm, BOUNDARY_SIGMA);
    let dark = threshold_below(&smooth, DARK_THRESHOLD);
    let closed = close(&dark, CLOSING_RADIUS);
    let energy = sobel_energy(&closed);
    let peak = energy.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return BinaryMask::zeros(img.height, img.width);
    }
    let mut mask = BinaryMask::zeros(img.height, img.width);
    for (i, e) in energy.iter().enumerate() {
        if e / peak >= EDGE_THRESHOLD {
            mask.pixels[i] = 1;
        }
    }
    mask
}

/// Zhang-Suen thinning iterated to idempotence.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let mut cur = mask.clone();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for r in 0..cur.height {
                for c in 0..cur.width {
                    if !cur.get(r, c) {
                        continue;
                    }
                    let (ri, ci) = (r as i64, c as i64);
                    // p2..p9 clockwise from north
                    let n = [
                        cur.get_or(ri - 1, ci, false),
                        cur.get_or(ri - 1, ci + 1, false),
                        cur.get_or(ri, ci + 1, false),
                        cur.get_or(ri + 1, ci + 1, false),
                        cur.get_or(ri + 1, ci, false),
                        cur.get_or(ri + 1, ci - 1, false),
                        cur.get_or(ri, ci - 1, false),
                        cur.get_or(ri - 1, ci - 1, false),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push((r, c));
                    }
                }
            }
            if !remove.is_empty() {
                changed = true;
                for (r, c) in remove {
                    cur.set(r, c, false);
                }
            }
        }
        if !changed {
            return cur;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub row: usize,
    pub col: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    left: Vec<BoundaryPoint>,
    right: Vec<BoundaryPoint>,
    middle: Vec<BoundaryPoint>,
    centromere_row: Option<usize>,
}

impl BoundaryTrace {
    /// Builds a trace from per-row left/right columns starting at `top_row`.
    pub fn from_columns(top_row: usize, left: &[f64], right: &[f64]) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::InvalidInput(format!(
                "left/right length mismatch: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        if left.len() < 2 {
            return Err(Error::NoBoundary(format!(
                "need at least 2 boundary rows, got {}",
                left.len()
            )));
        }
        if let Some(i) = (0..left.len()).find(|&i| left[i] > right[i]) {
            return Err(Error::InvalidInput(format!(
                "left column {} exceeds right column {} at row {}",
                left[i],
                right[i],
                top_row + i
            )));
        }
        let pts = |cols: &[f64]| -> Vec<BoundaryPoint> {
            cols.iter()
                .enumerate()
                .map(|(i, &col)| BoundaryPoint {
                    row: top_row + i,
                    col,
                })
                .collect()
        };
        let middle: Vec<f64> = left.iter().zip(right).map(|(l, r)| (l + r) / 2.0).collect();
        Ok(Self {
            left: pts(left),
            right: pts(right),
            middle: pts(&middle),
            centromere_row: None,
        })
    }

    pub fn with_centromere(mut self, row: Option<usize>) -> Self {
        self.centromere_row = row;
        self
    }

    pub fn left(&self) -> &[BoundaryPoint] {
        &self.left
    }

    pub fn right(&self) -> &[BoundaryPoint] {
        &self.right
    }

    pub fn middle(&self) -> &[BoundaryPoint] {
        &self.middle
    }

    pub fn centromere_row(&self) -> Option<usize> {
        self.centromere_row
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn top_row(&self) -> usize {
        self.left[0].row
    }

    pub fn bottom_row(&self) -> usize {
        self.left[self.left.len() - 1].row
    }

    pub fn widths(&self) -> Vec<f64> {
        self.left
            .iter()
            .zip(&self.right)
            .map(|(l, r)| r.col - l.col)
            .collect()
    }

    pub fn left_cols(&self) -> Vec<f64> {
        self.left.iter().map(|p| p.col).collect()
    }

    pub fn right_cols(&self) -> Vec<f64> {
        self.right.iter().map(|p| p.col).collect()
    }

    pub fn middle_cols(&self) -> Vec<f64> {
        self.middle.iter().map(|p| p.col).collect()
    }

    /// Index into the trace arrays for an absolute image row.
    pub fn index_of_row(&self, row: usize) -> Option<usize> {
        row.checked_sub(self.top_row()).filter(|&i| i < self.len())
    }
}

/// Leftmost and rightmost mask pixel per row; gaps inside the occupied row
/// span are linearly interpolated.
pub fn trace_boundary(mask: &BinaryMask) -> Result<BoundaryTrace> {
    let extents: Vec<Option<(usize, usize)>> = (0..mask.height)
        .map(|r| {
            let mut cols = (0..mask.width).filter(|&c| mask.get(r, c));
            let first = cols.next()?;
            let last = cols.next_back().unwrap_or(first);
            Some((first, last))
        })
        .collect();
    let occupied: Vec<usize> = (0..mask.height).filter(|&r| extents[r].is_some()).collect();
    if occupied.len() < 2 {
        return Err(Error::NoBoundary(format!(
            "mask has {} occupied rows",
            occupied.len()
        )));
    }
    let top = occupied[0];
    let bottom = occupied[occupied.len() - 1];
    let mut left = Vec::with_capacity(bottom - top + 1);
    let mut right = Vec::with_capacity(bottom - top + 1);
    let mut prev = top;
    for r in top..=bottom {
        match extents[r] {
            Some((l, rt)) => {
                left.push(l as f64);
                right.push(rt as f64);
                prev = r;
            }
            None => {
                let next = (r + 1..=bottom).find(|&k| extents[k].is_some()).unwrap();
                let (pl, pr) = extents[prev].unwrap();
                let (nl, nr) = extents[next].unwrap();
                let t = (r - prev) as f64 / (next - prev) as f64;
                left.push(pl as f64 + t * (nl as f64 - pl as f64));
                right.push(pr as f64 + t * (nr as f64 - pr as f64));
            }
        }
    }
    BoundaryTrace::from_columns(top, &left, &right)
}

/// Slope of the least-squares line `col = m * row + b` through the middle
/// points, from the closed-form normal equations.
pub fn middle_line_tangent(trace: &BoundaryTrace) -> Result<f64> {
    let pts = trace.middle();
    if pts.len() < 2 {
        return Err(Error::DegenerateGeometry("middle line needs 2 points".into()));
    }
    let n = pts.len() as f64;
    let (mut sr, mut srr, mut sc, mut src) = (0.0, 0.0, 0.0, 0.0);
    for p in pts {
        let r = p.row as f64;
        sr += r;
        srr += r * r;
        sc += p.col;
        src += r * p.col;
    }
    // det(A^T A) for A = [row, 1]
    let det = n * srr - sr * sr;
    if det.abs() <= 1e-12 * (n * srr).max(1.0) {
        return Err(Error::DegenerateGeometry(
            "middle points share a single row".into(),
        ));
    }
    Ok((n * src - sr * sc) / det)
}

/// Least-squares quadratic coefficient `a` of `y = a x^2 + b x + c`.
/// Returns `None` for fewer than three distinct abscissae.
pub fn quadratic_coefficient(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 3 || xs.len() != ys.len() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let x = x - mean;
        let row = Vector3::new(x * x, x, 1.0);
        ata += row * row.transpose();
        aty += row * y;
    }
    let scale = ata.abs().max().max(1.0);
    let sol = (ata / scale).try_inverse()? * (aty / scale);
    let a = sol[0];
    if !a.is_finite() {
        return None;
    }
    // reject near-singular systems: fewer than three distinct x values
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    (distinct.len() >= 3).then_some(a)
}

/// Curvature (`2a` of a quadratic fit) of `cols` over a window of
/// `window` points around index `center`, shifted to stay in range.
pub fn window_curvature(cols: &[f64], first_row: usize, center: usize, window: usize) -> f64 {
    let n = cols.len();
    let window = window.min(n);
    let start = center.saturating_sub(window / 2).min(n - window);
    let xs: Vec<f64> = (start..start + window).map(|i| (first_row + i) as f64).collect();
    quadratic_coefficient(&xs, &cols[start..start + window])
        .map(|a| 2.0 * a)
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentromereParams {
    /// Width-profile minima kept as candidates, by prominence.
    pub candidates: usize,
    /// Highest-curvature candidates kept per side.
    pub per_side: usize,
    /// Maximum row offset between a left and right point of one pair.
    pub align_tolerance: usize,
    /// Boundary points in each quadratic curvature fit.
    pub curvature_window: usize,
    /// Minimum prominence, in pixels, of a width minimum.
    pub min_prominence: f64,
    /// Moving-average window applied to the width profile.
    pub smoothing: usize,
}

impl Default for CentromereParams {
    fn default() -> Self {
        Self {
            candidates: 10,
            per_side: 3,
            align_tolerance: 5,
            curvature_window: 10,
            min_prominence: 2.0,
            smoothing: 5,
        }
    }
}

pub(crate) fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Interior local minima with their topographic prominence. Plateaus report
/// their middle index.
pub fn minima_with_prominence(values: &[f64]) -> Vec<(usize, f64)> {
    let n = values.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        let v = values[i];
        if values[i - 1] <= v {
            i += 1;
            continue;
        }
        let mut end = i;
        while end + 1 < n && values[end + 1] == v {
            end += 1;
        }
        if end + 1 < n && values[end + 1] > v {
            let mut left_peak = v;
            for k in (0..i).rev() {
                if values[k] < v {
                    break;
                }
                left_peak = left_peak.max(values[k]);
            }
            let mut right_peak = v;
            for &x in &values[end + 1..] {
                if x < v {
                    break;
                }
                right_peak = right_peak.max(x);
            }
            out.push(((i + end) / 2, left_peak.min(right_peak) - v));
        }
        i = end + 1;
    }
    out
}

/// Finds the centromere as an aligned pair of inward-curving left and right
/// boundary points among the most prominent width-profile minima. Returns
/// `None` when no pair aligns.
pub fn locate_centromere(trace: &BoundaryTrace) -> Option<usize> {
    locate_centromere_with(trace, &CentromereParams::default())
}

pub fn locate_centromere_with(trace: &BoundaryTrace, params: &CentromereParams) -> Option<usize> {
    let widths = moving_average(&trace.widths(), params.smoothing);
    let mut candidates: Vec<(usize, f64)> = minima_with_prominence(&widths)
        .into_iter()
        .filter(|&(_, p)| p >= params.min_prominence)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(params.candidates);
    if candidates.is_empty() {
        return None;
    }

    let top = trace.top_row();
    let left = trace.left_cols();
    let right = trace.right_cols();
    // left boundary bends inward as a local max of column, right as a local min
    let pick = |cols: &[f64], sign: f64| -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64, f64)> = candidates
            .iter()
            .map(|&(i, p)| {
                (i, p, sign * window_curvature(cols, top, i, params.curvature_window))
            })
            .filter(|&(_, _, k)| k > 0.0)
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        scored.truncate(params.per_side);
        scored.into_iter().map(|(i, p, _)| (i, p)).collect()
    };
    let left_best = pick(&left, -1.0);
    let right_best = pick(&right, 1.0);

    let mut best: Option<(f64, usize)> = None;
    for &(li, lp) in &left_best {
        for &(ri, rp) in &right_best {
            if li.abs_diff(ri) > params.align_tolerance {
                continue;
            }
            let score = lp + rp;
            let row = top + (li + ri) / 2;
            if best.is_none_or(|(s, r)| score > s || (score == s && row < r)) {
                best = Some((score, row));
            }
        }
    }
    best.map(|(_, row)| row)
}

/// Residual slope below which rotation refinement stops.
const VERTICAL_TOLERANCE: f64 = 0.01;
const MAX_ROTATION_REFINEMENTS: usize = 4;

struct Rotation {
    sin: f64,
    cos: f64,
    src_center: (f64, f64),
    dst_center: (f64, f64),
    out_h: usize,
    out_w: usize,
}

impl Rotation {
    /// Rotation taking the direction `(cos theta, sin theta)` in (row, col)
    /// space onto the row axis.
    fn new(img: &GrayImage, theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        let (h, w) = (img.height as f64, img.width as f64);
        let out_h = ((h * cos.abs() + w * sin.abs()) - 1e-9).round().max(1.0) as usize;
        let out_w = ((h * sin.abs() + w * cos.abs()) - 1e-9).round().max(1.0) as usize;
        Self {
            sin,
            cos,
            src_center: ((h - 1.0) / 2.0, (w - 1.0) / 2.0),
            dst_center: ((out_h as f64 - 1.0) / 2.0, (out_w as f64 - 1.0) / 2.0),
            out_h,
            out_w,
        }
    }

    fn forward(&self, row: f64, col: f64) -> (f64, f64) {
        let (dr, dc) = (row - self.src_center.0, col - self.src_center.1);
        (
            self.cos * dr + self.sin * dc + self.dst_center.0,
            -self.sin * dr + self.cos * dc + self.dst_center.1,
        )
    }

    fn apply(&self, img: &GrayImage) -> GrayImage {
        let (h, w) = (img.height as f64, img.width as f64);
        GrayImage::from_fn(self.out_h, self.out_w, |r, col| {
            let (dr, dc) = (r as f64 - self.dst_center.0, col as f64 - self.dst_center.1);
            let sr = self.cos * dr - self.sin * dc + self.src_center.0;
            let sc = self.sin * dr + self.cos * dc + self.src_center.1;
            let (ri, ci) = (sr.round(), sc.round());
            if ri < 0.0 || ci < 0.0 || ri >= h || ci >= w {
                BACKGROUND
            } else {
                img.get(ri as usize, ci as usize)
            }
        })
    }
}

/// Rotates the image so the middle line is vertical, then turns it 180
/// degrees if the centromere lies in the lower half. Nearest-neighbor
/// resampling; the canvas grows to hold the rotated extent.
///
/// Row-extent traces of tilted objects bias the fitted slope near the
/// chromosome ends, so the angle is refined by re-tracing the rotated
/// image until the residual slope is below 0.01. Each refinement resamples
/// the original image, never a previous output.
pub fn rotate_vertical(img: &GrayImage, trace: &BoundaryTrace) -> Result<GrayImage> {
    let mut theta = middle_line_tangent(trace)?.atan();
    let mut rotation = Rotation::new(img, theta);
    let mut rotated = rotation.apply(img);
    for _ in 0..MAX_ROTATION_REFINEMENTS {
        let residual = trace_boundary(&find_boundary(&rotated))
            .and_then(|t| middle_line_tangent(&t));
        match residual {
            Ok(m) if m.abs() >= VERTICAL_TOLERANCE => {
                theta += m.atan();
                rotation = Rotation::new(img, theta);
                rotated = rotation.apply(img);
            }
            _ => break,
        }
    }

    let Some(cen_row) = trace.centromere_row() else {
        return Ok(rotated);
    };
    let mid = trace.middle();
    let cen_idx = trace
        .index_of_row(cen_row)
        .ok_or_else(|| Error::InvalidInput(format!("centromere row {cen_row} outside trace")))?;
    let end_a = rotation.forward(mid[0].row as f64, mid[0].col).0;
    let last = mid[mid.len() - 1];
    let end_b = rotation.forward(last.row as f64, last.col).0;
    let cen = rotation.forward(mid[cen_idx].row as f64, mid[cen_idx].col).0;
    let (top, bottom) = (end_a.min(end_b), end_a.max(end_b));
    if cen - top > (bottom - top) / 2.0 {
        Ok(rotated.flipped())
    } else {
        Ok(rotated)
    }
}

/// Nearest-neighbor resize with `src = floor(dst * src_len / dst_len)`.
pub fn resize_nn(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(GrayImage::from_fn(out_h, out_w, |r, c| {
        img.get(r * img.height / out_h, c * img.width / out_w)
    }))
}
