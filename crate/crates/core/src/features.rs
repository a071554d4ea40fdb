//! Engineered morphological and structural chromosome features, and a
//! lightweight multi-scale orientation-histogram descriptor.
//!
//! Profiles are computed per image row inside the traced boundary and then
//! linearly resampled to [`PROFILE_LEN`] samples spanning the chromosome, so
//! chromosomes of different heights share one layout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    self, find_boundary, locate_centromere, middle_line_tangent, minima_with_prominence,
    moving_average, thin, trace_boundary, window_curvature, BinaryMask, BoundaryTrace, GrayImage,
};

pub const PROFILE_LEN: usize = 334;
pub const CURVATURE_LEN: usize = 30;
pub const STRUCTURAL_LEN: usize = 21;
/// Boundary points used for the curvature at the centromere.
pub const CENTROMERE_CURVATURE_WINDOW: usize = 10;

pub const STRUCTURAL_NAMES: [&str; STRUCTURAL_LEN] = [
    "sum_of_proportions",
    "q_to_p_ratio",
    "relative_length",
    "std_below_centromere",
    "density_near_centromere",
    "length1",
    "length2",
    "highest_peak_rel_distance",
    "centromere_curvature_left",
    "centromere_curvature_right",
    "centromere_width",
    "area",
    "thickness",
    "reserved_0",
    "reserved_1",
    "reserved_2",
    "reserved_3",
    "reserved_4",
    "reserved_5",
    "reserved_6",
    "reserved_7",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Intensity,
    Width,
    Curvature,
    Shape,
    WeightedIntensity,
    HighPeak,
}

impl ProfileKind {
    pub fn expected_len(self) -> usize {
        match self {
            ProfileKind::Curvature => CURVATURE_LEN,
            _ => PROFILE_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileVector {
    pub kind: ProfileKind,
    pub values: Vec<f64>,
}

impl ProfileVector {
    fn new(kind: ProfileKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != kind.expected_len() {
            return Err(Error::Internal(format!(
                "{kind:?} profile has {} values, expected {}",
                values.len(),
                kind.expected_len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Internal(format!("{kind:?} profile is not finite")));
        }
        Ok(Self { kind, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Linear resampling of `values` onto `n` evenly spaced positions covering
/// the first to the last element.
pub fn resample(values: &[f64], n: usize) -> Vec<f64> {
    match values.len() {
        0 => vec![0.0; n],
        1 => vec![values[0]; n],
        m => (0..n)
            .map(|k| {
                let pos = if n == 1 {
                    0.0
                } else {
                    k as f64 * (m - 1) as f64 / (n - 1) as f64
                };
                let lo = (pos.floor() as usize).min(m - 1);
                let hi = (lo + 1).min(m - 1);
                let t = pos - lo as f64;
                if t == 0.0 {
                    values[lo]
                } else {
                    values[lo] + t * (values[hi] - values[lo])
                }
            })
            .collect(),
    }
}

/// Pixels strictly between the boundary points of trace index `i`, as
/// `(col, intensity)`. The boundary pixels belong to the edge ring, whose
/// outer half is background. Rows too narrow to have an interior fall
/// back to the middle-line pixel.
fn row_pixels(img: &GrayImage, trace: &BoundaryTrace, i: usize) -> Vec<(usize, f64)> {
    let row = trace.left()[i].row;
    let lo = (trace.left()[i].col.floor() as i64 + 1).max(0);
    let hi = (trace.right()[i].col.ceil() as i64 - 1).min(img.width() as i64 - 1);
    if hi < lo {
        let c = (trace.middle()[i].col.round().max(0.0) as usize).min(img.width() - 1);
        return vec![(c, img.get(row, c))];
    }
    (lo as usize..=hi as usize).map(|c| (c, img.get(row, c))).collect()
}

fn check_trace_fits(img: &GrayImage, trace: &BoundaryTrace) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::FeatureUnavailable("empty trace".into()));
    }
    if trace.bottom_row() >= img.height() {
        return Err(Error::FeatureUnavailable(format!(
            "trace row {} outside {}-row image",
            trace.bottom_row(),
            img.height()
        )));
    }
    Ok(())
}

/// Mean in-boundary intensity of every trace row.
pub fn row_means(img: &GrayImage, trace: &BoundaryTrace) -> Result<Vec<f64>> {
    check_trace_fits(img, trace)?;
    Ok((0..trace.len())
        .map(|i| {
            let px = row_pixels(img, trace, i);
            px.iter().map(|p| p.1).sum::<f64>() / px.len() as f64
        })
        .collect())
}

pub fn intensity_profile(img: &GrayImage, trace: &BoundaryTrace) -> Result<ProfileVector> {
    ProfileVector::new(
        ProfileKind::Intensity,
        resample(&row_means(img, trace)?, PROFILE_LEN),
    )
}

pub fn width_profile(trace: &BoundaryTrace) -> Result<ProfileVector> {
    if trace.is_empty() {
        return Err(Error::FeatureUnavailable("empty trace".into()));
    }
    ProfileVector::new(ProfileKind::Width, resample(&trace.widths(), PROFILE_LEN))
}

/// Quadratic-fit curvature of the middle line over equal row bands.
pub fn curvature_profile(trace: &BoundaryTrace) -> Result<ProfileVector> {
    let n = trace.len();
    if n < CURVATURE_LEN {
        return Err(Error::FeatureUnavailable(format!(
            "curvature profile needs {CURVATURE_LEN} rows, trace has {n}"
        )));
    }
    let mid = trace.middle();
    let values = (0..CURVATURE_LEN)
        .map(|b| {
            let start = b * n / CURVATURE_LEN;
            let end = (b + 1) * n / CURVATURE_LEN;
            let xs: Vec<f64> = mid[start..end].iter().map(|p| p.row as f64).collect();
            let ys: Vec<f64> = mid[start..end].iter().map(|p| p.col).collect();
            imaging::quadratic_coefficient(&xs, &ys).map_or(0.0, |a| 2.0 * a)
        })
        .collect();
    ProfileVector::new(ProfileKind::Curvature, values)
}

/// Intensity-weighted mean squared distance from the middle line.
/// Rows whose intensities are all zero give 0.
pub fn shape_value(intensities: &[f64], distances: &[f64]) -> f64 {
    let num: f64 = intensities
        .iter()
        .zip(distances)
        .map(|(g, d)| g * d * d)
        .sum();
    let den: f64 = intensities.iter().sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Squared-distance-weighted mean intensity. Rows whose distances are all
/// zero give the plain mean intensity.
pub fn weighted_intensity_value(intensities: &[f64], distances: &[f64]) -> f64 {
    let num: f64 = intensities
        .iter()
        .zip(distances)
        .map(|(g, d)| g * d * d)
        .sum();
    let den: f64 = distances.iter().map(|d| d * d).sum();
    if den == 0.0 {
        intensities.iter().sum::<f64>() / intensities.len().max(1) as f64
    } else {
        num / den
    }
}

fn row_weighted(
    img: &GrayImage,
    trace: &BoundaryTrace,
    f: fn(&[f64], &[f64]) -> f64,
) -> Result<Vec<f64>> {
    check_trace_fits(img, trace)?;
    Ok((0..trace.len())
        .map(|i| {
            let mid = trace.middle()[i].col;
            let px = row_pixels(img, trace, i);
            let g: Vec<f64> = px.iter().map(|p| p.1).collect();
            let d: Vec<f64> = px.iter().map(|p| p.0 as f64 - mid).collect();
            f(&g, &d)
        })
        .collect())
}

pub fn shape_profile(img: &GrayImage, trace: &BoundaryTrace) -> Result<ProfileVector> {
    let rows = row_weighted(img, trace, shape_value)?;
    ProfileVector::new(ProfileKind::Shape, resample(&rows, PROFILE_LEN))
}

pub fn weighted_intensity_profile(img: &GrayImage, trace: &BoundaryTrace) -> Result<ProfileVector> {
    let rows = row_weighted(img, trace, weighted_intensity_value)?;
    ProfileVector::new(ProfileKind::WeightedIntensity, resample(&rows, PROFILE_LEN))
}

/// Indices of strict local maxima (greater than both neighbors).
fn strict_local_maxima(values: &[f64]) -> impl Iterator<Item = usize> + '_ {
    (1..values.len().saturating_sub(1))
        .filter(move |&i| values[i] > values[i - 1] && values[i] > values[i + 1])
}

/// Boundary-point distances to the vertical line through the mean middle
/// column, keeping local maxima along each side, largest first and
/// zero-padded to [`PROFILE_LEN`].
pub fn high_peak_features(trace: &BoundaryTrace) -> ProfileVector {
    let mid = trace.middle_cols();
    let reference = mid.iter().sum::<f64>() / mid.len().max(1) as f64;
    let mut peaks = Vec::new();
    for side in [trace.left_cols(), trace.right_cols()] {
        let dist: Vec<f64> = side.iter().map(|c| (c - reference).abs()).collect();
        peaks.extend(strict_local_maxima(&dist).map(|i| dist[i]));
    }
    peaks.sort_by(|a, b| b.total_cmp(a));
    peaks.resize(PROFILE_LEN, 0.0);
    ProfileVector {
        kind: ProfileKind::HighPeak,
        values: peaks,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructuralFeatures {
    pub sum_of_proportions: f64,
    pub q_to_p_ratio: f64,
    pub relative_length: f64,
    pub std_below_centromere: f64,
    pub density_near_centromere: f64,
    pub length1: f64,
    pub length2: f64,
    pub highest_peak_rel_distance: f64,
    pub centromere_curvature_left: f64,
    pub centromere_curvature_right: f64,
    pub centromere_width: f64,
    pub area: f64,
    pub thickness: f64,
    /// False when the centromere was absent and its dependents are zero.
    pub centromere_present: bool,
}

impl StructuralFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.sum_of_proportions,
            self.q_to_p_ratio,
            self.relative_length,
            self.std_below_centromere,
            self.density_near_centromere,
            self.length1,
            self.length2,
            self.highest_peak_rel_distance,
            self.centromere_curvature_left,
            self.centromere_curvature_right,
            self.centromere_width,
            self.area,
            self.thickness,
        ];
        v.resize(STRUCTURAL_LEN, 0.0);
        v
    }
}

/// Band peaks are minima of the smoothed row-mean intensity (dark bands).
const BAND_SMOOTHING: usize = 3;
const BAND_MIN_PROMINENCE: f64 = 0.01;

/// Dark band centers as trace indices, with their smoothed intensity.
pub fn band_peaks(row_means: &[f64]) -> Vec<(usize, f64)> {
    let smooth = moving_average(row_means, BAND_SMOOTHING);
    minima_with_prominence(&smooth)
        .into_iter()
        .filter(|&(_, p)| p >= BAND_MIN_PROMINENCE)
        .map(|(i, _)| (i, smooth[i]))
        .collect()
}

fn darkest(peaks: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    peaks
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|p| p.0)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Rasterized closed outline of the trace (left chain, right chain, caps).
pub fn outline_mask(trace: &BoundaryTrace, height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(height, width);
    let mut plot = |r: i64, c: i64| {
        if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
            mask.set(r as usize, c as usize, true);
        }
    };
    let mut line = |(r0, c0): (i64, i64), (r1, c1): (i64, i64)| {
        // Bresenham
        let (dr, dc) = ((r1 - r0).abs(), -(c1 - c0).abs());
        let (sr, sc) = (if r0 < r1 { 1 } else { -1 }, if c0 < c1 { 1 } else { -1 });
        let (mut r, mut c, mut err) = (r0, c0, dr + dc);
        loop {
            plot(r, c);
            if r == r1 && c == c1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dc {
                err += dc;
                r += sr;
            }
            if e2 <= dr {
                err += dr;
                c += sc;
            }
        }
    };
    let pt = |p: &imaging::BoundaryPoint| (p.row as i64, p.col.round() as i64);
    for side in [trace.left(), trace.right()] {
        for w in side.windows(2) {
            line(pt(&w[0]), pt(&w[1]));
        }
    }
    let n = trace.len();
    line(pt(&trace.left()[0]), pt(&trace.right()[0]));
    line(pt(&trace.left()[n - 1]), pt(&trace.right()[n - 1]));
    mask
}

pub fn structural_features(img: &GrayImage, trace: &BoundaryTrace) -> Result<StructuralFeatures> {
    let means = row_means(img, trace)?;
    let n = trace.len();
    let height = n as f64;
    let widths = width_profile(trace)?.values;
    let area: f64 = widths.iter().sum();
    let thickness = area / widths.len() as f64;
    let peaks = band_peaks(&means);

    let middle_sum: f64 = trace
        .middle()
        .iter()
        .map(|p| {
            let c = (p.col.round().max(0.0) as usize).min(img.width() - 1);
            img.get(p.row, c)
        })
        .sum();
    let relative_length = ratio(middle_sum, img.sum().sqrt());

    let outline = thin(&outline_mask(trace, img.height(), img.width()));
    let length2 = ratio(outline.count() as f64 / 2.0, thickness);

    let highest_peak_rel_distance = darkest(peaks.iter().copied())
        .map_or(0.0, |h| ratio(height - h as f64, h as f64));

    let mut out = StructuralFeatures {
        relative_length,
        length1: height,
        length2,
        highest_peak_rel_distance,
        area,
        thickness,
        ..Default::default()
    };

    let Some(cen) = trace.centromere_row().and_then(|r| trace.index_of_row(r)) else {
        return Ok(out);
    };
    out.centromere_present = true;
    let c = cen as f64;
    out.q_to_p_ratio = ratio(height - c, c);

    let p_peak = darkest(peaks.iter().copied().filter(|p| p.0 < cen));
    let q_peak = darkest(peaks.iter().copied().filter(|p| p.0 > cen));
    if let (Some(p), Some(q)) = (p_peak, q_peak) {
        // peak distances to the ends of their own arm
        let (d_up, d_dp) = (p as f64, c - p as f64);
        let (d_uq, d_dq) = (q as f64 - c, height - q as f64);
        out.sum_of_proportions = ratio(ratio(d_uq, d_dq), ratio(d_up, d_dp));
    }

    let above = peaks.iter().map(|p| p.0).filter(|&i| i < cen).max();
    let below = peaks.iter().map(|p| p.0).filter(|&i| i > cen).min();
    if let Some(b) = below {
        let px: Vec<f64> = (cen + 1..b)
            .flat_map(|i| row_pixels(img, trace, i).into_iter().map(|p| p.1))
            .collect();
        if !px.is_empty() {
            let m = px.iter().sum::<f64>() / px.len() as f64;
            let var = px.iter().map(|v| (v - m).powi(2)).sum::<f64>() / px.len() as f64;
            out.std_below_centromere = var.sqrt();
        }
    }
    if let (Some(a), Some(b)) = (above, below) {
        let px: Vec<f64> = (a..=b)
            .flat_map(|i| row_pixels(img, trace, i).into_iter().map(|p| p.1))
            .collect();
        let m = px.iter().sum::<f64>() / px.len() as f64;
        out.density_near_centromere = ratio(m, img.mean());
    }

    let top = trace.top_row();
    out.centromere_curvature_left =
        window_curvature(&trace.left_cols(), top, cen, CENTROMERE_CURVATURE_WINDOW);
    out.centromere_curvature_right =
        window_curvature(&trace.right_cols(), top, cen, CENTROMERE_CURVATURE_WINDOW);
    out.centromere_width = trace.widths()[cen];
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous segment map of a feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub segments: Vec<Segment>,
    /// Names of scalar slots inside the structural segment, when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub structural_names: Vec<String>,
}

impl FeatureLayout {
    pub fn from_lengths<'a>(parts: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(name, len)| {
                let seg = Segment {
                    name: name.to_string(),
                    offset,
                    len,
                };
                offset += len;
                seg
            })
            .collect();
        Self {
            segments,
            structural_names: Vec::new(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segments must tile `[0, total_len)` in order.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.segments {
            if s.offset != expected {
                return Err(Error::Internal(format!(
                    "segment {} starts at {}, expected {}",
                    s.name, s.offset, expected
                )));
            }
            expected += s.len;
        }
        Ok(())
    }

    /// One column name per value, `segment.index`.
    pub fn column_names(&self) -> Vec<String> {
        self.segments
            .iter()
            .flat_map(|s| (0..s.len).map(move |i| format!("{}.{}", s.name, i)))
            .collect()
    }
}

pub fn engineered_layout() -> FeatureLayout {
    let mut layout = FeatureLayout::from_lengths([
        ("intensity", PROFILE_LEN),
        ("width", PROFILE_LEN),
        ("shape", PROFILE_LEN),
        ("weighted_intensity", PROFILE_LEN),
        ("high_peak", PROFILE_LEN),
        ("curvature", CURVATURE_LEN),
        ("tangent", 1),
        ("width_variance", 1),
        ("height_variance", 1),
        ("structural", STRUCTURAL_LEN),
    ]);
    layout.structural_names = STRUCTURAL_NAMES.iter().map(|s| s.to_string()).collect();
    layout
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Arc<FeatureLayout>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, layout: Arc<FeatureLayout>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total_len() {
            return Err(Error::Internal(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }
}

/// The per-chromosome components concatenated by [`assemble_feature_vector`].
#[derive(Debug, Clone)]
pub struct EngineeredParts {
    pub intensity: ProfileVector,
    pub width: ProfileVector,
    pub shape: ProfileVector,
    pub weighted_intensity: ProfileVector,
    pub high_peak: ProfileVector,
    pub curvature: ProfileVector,
    pub structural: StructuralFeatures,
    pub tangent: f64,
    pub width_variance: f64,
    pub height_variance: f64,
}

pub fn assemble_feature_vector(parts: &EngineeredParts, layout: Arc<FeatureLayout>) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(layout.total_len());
    let pieces: [(&str, Vec<f64>); 10] = [
        ("intensity", parts.intensity.values.clone()),
        ("width", parts.width.values.clone()),
        ("shape", parts.shape.values.clone()),
        ("weighted_intensity", parts.weighted_intensity.values.clone()),
        ("high_peak", parts.high_peak.values.clone()),
        ("curvature", parts.curvature.values.clone()),
        ("tangent", vec![parts.tangent]),
        ("width_variance", vec![parts.width_variance]),
        ("height_variance", vec![parts.height_variance]),
        ("structural", parts.structural.to_vec()),
    ];
    for (name, piece) in pieces {
        let seg = layout
            .segment(name)
            .ok_or_else(|| Error::Internal(format!("layout lacks segment {name}")))?;
        if seg.len != piece.len() || seg.offset != values.len() {
            return Err(Error::Internal(format!(
                "segment {name}: layout {}@{}, component {}@{}",
                seg.len,
                seg.offset,
                piece.len(),
                values.len()
            )));
        }
        values.extend(piece);
    }
    FeatureVector::new(values, layout)
}

fn population_variance(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len().max(1) as f64;
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len().max(1) as f64
}

/// Full engineered extraction from a vertical chromosome image.
pub fn extract_engineered(vertical: &GrayImage) -> Result<EngineeredParts> {
    let mask = find_boundary(vertical);
    let trace = trace_boundary(&mask)?;
    let cen = locate_centromere(&trace);
    let trace = trace.with_centromere(cen);
    let width = width_profile(&trace)?;
    let height_trace = trace_boundary(&mask.transpose())?;
    let height_profile = resample(&height_trace.widths(), PROFILE_LEN);
    Ok(EngineeredParts {
        intensity: intensity_profile(vertical, &trace)?,
        shape: shape_profile(vertical, &trace)?,
        weighted_intensity: weighted_intensity_profile(vertical, &trace)?,
        high_peak: high_peak_features(&trace),
        curvature: curvature_profile(&trace)?,
        structural: structural_features(vertical, &trace)?,
        tangent: middle_line_tangent(&trace)?,
        width_variance: population_variance(&width.values),
        height_variance: population_variance(&height_profile),
        width,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub n_keypoints: usize,
    pub n_orientations: usize,
    pub gradient_floor: f64,
}

pub const KEYPOINT_CHOICES: [usize; 3] = [5, 25, 50];
pub const ORIENTATION_CHOICES: [usize; 4] = [32, 64, 128, 256];

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 50,
            n_orientations: 128,
            gradient_floor: 0.01,
        }
    }
}

impl DescriptorConfig {
    pub fn new(n_keypoints: usize, n_orientations: usize, gradient_floor: f64) -> Result<Self> {
        let cfg = Self {
            n_keypoints,
            n_orientations,
            gradient_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !KEYPOINT_CHOICES.contains(&self.n_keypoints) {
            return Err(Error::InvalidConfig(format!(
                "keypoints must be one of {KEYPOINT_CHOICES:?}, got {}",
                self.n_keypoints
            )));
        }
        if !ORIENTATION_CHOICES.contains(&self.n_orientations) {
            return Err(Error::InvalidConfig(format!(
                "orientations must be one of {ORIENTATION_CHOICES:?}, got {}",
                self.n_orientations
            )));
        }
        if !(self.gradient_floor >= 0.0 && self.gradient_floor.is_finite()) {
            return Err(Error::InvalidConfig("gradient floor must be >= 0".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        let names: Vec<String> = (0..self.n_keypoints).map(|i| format!("keypoint_{i}")).collect();
        FeatureLayout::from_lengths(names.iter().map(|n| (n.as_str(), self.n_orientations)))
    }
}

pub const DESCRIPTOR_SCALES: [f64; 4] = [1.0, 1.6, 2.56, 4.096];
pub const DESCRIPTOR_PATCH_RADIUS: i64 = 8;
pub const DESCRIPTOR_MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub response: f64,
}

/// Orientation bin of a gradient. The vector is first rotated into the
/// first quadrant with exact sign swaps so a quarter-turn of the image
/// shifts bins by exactly `bins / 4`.
pub fn orientation_bin(gx: f64, gy: f64, bins: usize) -> usize {
    let (quadrant, x, y) = if gx > 0.0 && gy >= 0.0 {
        (0, gx, gy)
    } else if gx <= 0.0 && gy > 0.0 {
        (1, gy, -gx)
    } else if gx < 0.0 && gy <= 0.0 {
        (2, -gx, -gy)
    } else {
        (3, -gy, gx)
    };
    let per_quadrant = bins / 4;
    let frac = y.atan2(x) / std::f64::consts::FRAC_PI_2;
    let within = ((frac * per_quadrant as f64) as usize).min(per_quadrant - 1);
    quadrant * per_quadrant + within
}

struct ScaleLevel {
    smooth: Vec<f64>,
    log: Vec<f64>,
}

fn scale_space(img: &GrayImage) -> Vec<ScaleLevel> {
    let (h, w) = (img.height(), img.width());
    DESCRIPTOR_SCALES
        .iter()
        .map(|&sigma| {
            let k = imaging::gaussian_kernel(sigma);
            let smooth = imaging::convolve_separable(h, w, img.pixels(), &k, &k);
            let at = |r: i64, c: i64| {
                smooth[(r.clamp(0, h as i64 - 1) as usize) * w + c.clamp(0, w as i64 - 1) as usize]
            };
            let mut log = vec![0.0; h * w];
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let lap = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
                    log[r as usize * w + c as usize] = sigma * sigma * lap;
                }
            }
            ScaleLevel { smooth, log }
        })
        .collect()
}

/// Scale-space maxima of absolute normalized LoG response, strongest first.
pub fn detect_keypoints(img: &GrayImage) -> Vec<Keypoint> {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let levels = scale_space(img);
    let mut out = Vec::new();
    for (s, level) in levels.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let v = level.log[(r * w + c) as usize].abs();
                if v <= 1e-12 {
                    continue;
                }
                let mut is_max = true;
                'scan: for ds in -1i64..=1 {
                    let ss = s as i64 + ds;
                    if ss < 0 || ss >= levels.len() as i64 {
                        continue;
                    }
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            if ds == 0 && dr == 0 && dc == 0 {
                                continue;
                            }
                            let (rr, cc) = (r + dr, c + dc);
                            if rr < 0 || cc < 0 || rr >= h || cc >= w {
                                continue;
                            }
                            if levels[ss as usize].log[(rr * w + cc) as usize].abs() >= v {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max {
                    out.push(Keypoint {
                        scale: s,
                        row: r as usize,
                        col: c as usize,
                        response: v,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.scale.cmp(&b.scale))
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    out
}

/// Multi-scale keypoint orientation histograms, one `n_orientations` slot
/// per keypoint, zero-padded to `n_keypoints` slots.
pub fn sift_lite(img: &GrayImage, cfg: &DescriptorConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    if img.height().min(img.width()) < DESCRIPTOR_MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "descriptor needs a side of at least {DESCRIPTOR_MIN_SIDE}, image is {}x{}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height() as i64, img.width() as i64);
    let levels = scale_space(img);
    let keypoints = detect_keypoints(img);
    let bins = cfg.n_orientations;
    let mut values = vec![0.0; cfg.n_keypoints * bins];
    for (slot, kp) in keypoints.iter().take(cfg.n_keypoints).enumerate() {
        let smooth = &levels[kp.scale].smooth;
        let hist = &mut values[slot * bins..(slot + 1) * bins];
        let r = DESCRIPTOR_PATCH_RADIUS;
        for dr in -r..=r {
            for dc in -r..=r {
                let (y, x) = (kp.row as i64 + dr, kp.col as i64 + dc);
                if y < 1 || x < 1 || y >= h - 1 || x >= w - 1 {
                    continue;
                }
                let gx = smooth[(y * w + x + 1) as usize] - smooth[(y * w + x - 1) as usize];
                let gy = smooth[((y + 1) * w + x) as usize] - smooth[((y - 1) * w + x) as usize];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag < cfg.gradient_floor || mag == 0.0 {
                    continue;
                }
                hist[orientation_bin(gx, gy, bins)] += mag;
            }
        }
    }
    FeatureVector::new(values, Arc::new(cfg.layout()))
}
