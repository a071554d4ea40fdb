//! Seeded generator of synthetic banded chromosome crops with ground truth.
//!
//! Each class has a band template, a length and a centromere position. An
//! instance is a stadium silhouette pinched at the centromere, shaded by its
//! bands, optionally bent, crossed by a second chromosome or scrambled, then
//! blurred and noised. Every instance draws from its own ChaCha stream, so
//! output does not depend on thread scheduling.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, GrayImage};
use crate::pipeline::{DatasetManifest, Instance, PruneLabel, MAX_LABEL};
use crate::textio::{fmt_real, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// Along the axis, relative to length, top = 0.
    pub position: f64,
    /// Gaussian half-width, relative to length.
    pub width: f64,
    /// Intensity subtracted at the band center.
    pub darkness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub label: u32,
    pub length: f64,
    pub half_width: f64,
    /// Relative position of the waist, p-arm on top.
    pub centromere: f64,
    pub bands: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    /// Shortest and longest class lengths in pixels; class 1 is longest.
    pub length_range: (f64, f64),
    /// Per-instance relative length jitter.
    pub length_jitter: f64,
    /// Fractional width lost at the waist.
    pub waist_depth: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Largest bow of a curved instance, relative to its length.
    pub curvature_amplitude: f64,
    pub max_tilt_deg: f64,
    /// Chance an instance is drawn upside down.
    pub flip_probability: f64,
    pub curved_probability: f64,
    pub overlap_probability: f64,
    pub garbage_probability: f64,
    pub images_per_subject: f64,
    pub seed: u64,
    /// Filled from `seed` when empty.
    pub templates: Vec<ClassTemplate>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: MAX_LABEL as usize,
            length_range: (60.0, 120.0),
            length_jitter: 0.08,
            waist_depth: 0.4,
            noise_sigma: 0.06,
            blur_sigma: 1.8,
            curvature_amplitude: 0.3,
            max_tilt_deg: 20.0,
            flip_probability: 0.5,
            curved_probability: 0.12,
            overlap_probability: 0.08,
            garbage_probability: 0.05,
            images_per_subject: 6.7,
            seed: 0,
            templates: Vec::new(),
        }
    }
}

const BACKGROUND: f64 = 1.0;
const BODY: f64 = 0.72;
const MARGIN: usize = 10;

impl SynthSpec {
    /// Spec with templates filled in and checked.
    pub fn resolved(mut self) -> Result<Self> {
        if self.templates.is_empty() {
            self.templates = default_templates(self.n_classes, self.length_range, self.seed)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_classes == 0 || self.n_classes > MAX_LABEL as usize {
            return bad(format!("n_classes {} outside 1..={MAX_LABEL}", self.n_classes));
        }
        let probs = [
            self.flip_probability,
            self.curved_probability,
            self.overlap_probability,
            self.garbage_probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.curved_probability + self.overlap_probability + self.garbage_probability > 1.0 {
            return bad("curved, overlap and garbage probabilities sum above 1".into());
        }
        let (lo, hi) = self.length_range;
        if !(lo >= 20.0 && hi >= lo) {
            return bad(format!("length range ({lo}, {hi}) must satisfy 20 <= min <= max"));
        }
        let nonneg = [
            self.length_jitter,
            self.noise_sigma,
            self.blur_sigma,
            self.curvature_amplitude,
            self.max_tilt_deg,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.length_jitter >= 0.5 {
            return bad("jitter, noise, blur, curvature and tilt must be finite and nonnegative".into());
        }
        if !(0.0..0.9).contains(&self.waist_depth) {
            return bad(format!("waist depth {} outside [0, 0.9)", self.waist_depth));
        }
        if !(self.images_per_subject >= 1.0) {
            return bad("images_per_subject must be at least 1".into());
        }
        if self.templates.len() != self.n_classes {
            return bad(format!("{} templates for {} classes", self.templates.len(), self.n_classes));
        }
        for t in &self.templates {
            if !(0.0 < t.centromere && t.centromere < 1.0) || t.length < 20.0 || t.half_width < 2.0 {
                return bad(format!("template {} has bad geometry", t.label));
            }
            let mut prev = 0.0;
            for b in &t.bands {
                if !(prev < b.position && b.position < 1.0) || b.width <= 0.0 || !(0.0..=BODY).contains(&b.darkness) {
                    return bad(format!("template {}: band positions must ascend inside (0, 1)", t.label));
                }
                prev = b.position;
            }
        }
        Ok(())
    }
}

/// Deterministic per-class templates: lengths fall linearly with the label,
/// centromere positions are spread over classes by a stride permutation,
/// bands are drawn from `seed`.
pub fn default_templates(n_classes: usize, length_range: (f64, f64), seed: u64) -> Result<Vec<ClassTemplate>> {
    if n_classes == 0 {
        return Err(Error::InvalidConfig("n_classes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (n_classes - 1).max(1) as f64;
    Ok((0..n_classes)
        .map(|c| {
            let frac = c as f64 / span;
            let length = length_range.1 - (length_range.1 - length_range.0) * frac;
            // stride 7 is coprime with 24, spreading neighbors apart
            let slot = (c * 7) % n_classes;
            let centromere = 0.22 + 0.22 * slot as f64 / span;
            let n_bands = rng.random_range(3..=6);
            let mut bands = Vec::with_capacity(n_bands);
            let mut pos = 0.06;
            for k in 0..n_bands {
                let room = (0.94 - pos) / (n_bands - k) as f64;
                pos += rng.random_range(0.4 * room..room).max(0.07);
                if pos >= 0.95 {
                    break;
                }
                bands.push(Band {
                    position: pos,
                    width: rng.random_range(0.02..0.045),
                    darkness: rng.random_range(0.2..0.42),
                });
            }
            ClassTemplate {
                label: c as u32 + 1,
                length,
                half_width: 10.0 - 2.0 * frac,
                centromere,
                bands,
            }
        })
        .collect())
}

/// Where the generator put the centromere, in output pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub centromere_row: f64,
    pub centromere_col: f64,
    pub tilt_deg: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: Vec<GrayImage>,
    pub truth: Vec<Truth>,
    /// Splits are left unassigned.
    pub manifest: DatasetManifest,
}

/// One chromosome body placed on the canvas.
struct Body<'a> {
    template: &'a ClassTemplate,
    length: f64,
    bands: Vec<Band>,
    /// Radians, counter-clockwise from vertical.
    tilt: f64,
    flipped: bool,
    /// Signed bow amplitude in pixels.
    bow: f64,
    center: (f64, f64),
    waist_depth: f64,
}

impl Body<'_> {
    fn half_width(&self, u: f64) -> f64 {
        let w = self.template.half_width;
        let cap = (u.min(self.length - u) / w).clamp(0.0, 1.0);
        let round = (1.0 - (1.0 - cap).powi(2)).sqrt();
        let cen = self.template.centromere * self.length;
        let scale = 0.035 * self.length + 2.0;
        let pinch = 1.0 - self.waist_depth * (-((u - cen) / scale).powi(2)).exp();
        w * round * pinch
    }

    fn bow_at(&self, u: f64) -> f64 {
        self.bow * (PI * u / self.length).sin()
    }

    /// Axis coordinate and signed offset of canvas point `(y, x)`.
    fn body_coords(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.tilt.sin_cos();
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let along = c * dy + s * dx;
        let across = -s * dy + c * dx;
        let u = if self.flipped {
            self.length / 2.0 - along
        } else {
            along + self.length / 2.0
        };
        (u, across - self.bow_at(u.clamp(0.0, self.length)))
    }

    fn canvas_point(&self, u: f64) -> (f64, f64) {
        let along = if self.flipped {
            self.length / 2.0 - u
        } else {
            u - self.length / 2.0
        };
        let across = self.bow_at(u);
        let (s, c) = self.tilt.sin_cos();
        (self.center.0 + c * along - s * across, self.center.1 + s * along + c * across)
    }

    fn intensity(&self, y: f64, x: f64) -> Option<f64> {
        let (u, v) = self.body_coords(y, x);
        if !(0.0..=self.length).contains(&u) || v.abs() > self.half_width(u) {
            return None;
        }
        let shade: f64 = self
            .bands
            .iter()
            .map(|b| b.darkness * (-((u - b.position * self.length) / (b.width * self.length)).powi(2)).exp())
            .sum();
        Some((BODY - shade).max(0.05))
    }

    fn reach(&self) -> f64 {
        self.length / 2.0 + self.bow.abs() + self.template.half_width
    }
}

fn draw_prune(spec: &SynthSpec, rng: &mut impl Rng) -> PruneLabel {
    let u: f64 = rng.random();
    if u < spec.curved_probability {
        PruneLabel::Curved
    } else if u < spec.curved_probability + spec.overlap_probability {
        PruneLabel::Overlap
    } else if u < spec.curved_probability + spec.overlap_probability + spec.garbage_probability {
        PruneLabel::Garbage
    } else {
        PruneLabel::SemiStraight
    }
}

fn instance_body<'a>(spec: &SynthSpec, template: &'a ClassTemplate, rng: &mut ChaCha8Rng) -> Body<'a> {
    let length = template.length * (1.0 + rng.random_range(-1.0..=1.0) * spec.length_jitter);
    let bands = template
        .bands
        .iter()
        .map(|b| Band {
            position: (b.position + rng.random_range(-0.008..=0.008)).clamp(0.01, 0.99),
            width: b.width,
            darkness: b.darkness * rng.random_range(0.9..=1.1),
        })
        .collect();
    let tilt = rng.random_range(-1.0..=1.0) * spec.max_tilt_deg.to_radians();
    let flipped = rng.random::<f64>() < spec.flip_probability;
    Body {
        template,
        length,
        bands,
        tilt,
        flipped,
        bow: 0.0,
        center: (0.0, 0.0),
        waist_depth: spec.waist_depth,
    }
}

fn render(bodies: &[Body], height: usize, width: usize) -> GrayImage {
    GrayImage::from_fn(height, width, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        bodies
            .iter()
            .filter_map(|b| b.intensity(y, x))
            .fold(BACKGROUND, f64::min)
    })
}

/// Cuts the image into horizontal strips, shuffles and shears them and
/// drops one, leaving an implausible fragment.
fn scramble(img: &GrayImage, rng: &mut ChaCha8Rng) -> GrayImage {
    let h = img.height();
    let n = rng.random_range(3..=5);
    let mut cuts: Vec<usize> = (1..n).map(|k| k * h / n).collect();
    cuts.insert(0, 0);
    cuts.push(h);
    let mut strips: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    strips.shuffle(rng);
    strips.truncate(n - 1);
    let shift = (img.width() / 4).max(1) as i64;
    let shifts: Vec<i64> = strips.iter().map(|_| rng.random_range(-shift..=shift)).collect();
    let rows: Vec<(usize, i64)> = strips
        .iter()
        .zip(&shifts)
        .flat_map(|(&(a, b), &s)| (a..b).map(move |r| (r, s)))
        .collect();
    let w = img.width() as i64;
    GrayImage::from_fn(rows.len(), img.width(), |r, c| {
        let (src, s) = rows[r];
        let cc = c as i64 - s;
        if (0..w).contains(&cc) {
            img.get(src, cc as usize)
        } else {
            BACKGROUND
        }
    })
}

/// Bounding box of non-background pixels, grown by `margin`.
fn crop_box(img: &GrayImage, margin: usize) -> (usize, usize, usize, usize) {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..img.height() {
        for c in 0..img.width() {
            if img.get(r, c) < BACKGROUND {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return (0, img.height(), 0, img.width());
    }
    (
        r0.saturating_sub(margin),
        (r1 + margin + 1).min(img.height()),
        c0.saturating_sub(margin),
        (c1 + margin + 1).min(img.width()),
    )
}

/// Pads by `margin` background pixels on every side.
fn pad(img: &GrayImage, margin: usize) -> GrayImage {
    GrayImage::from_fn(img.height() + 2 * margin, img.width() + 2 * margin, |r, c| {
        if r < margin || c < margin || r >= img.height() + margin || c >= img.width() + margin {
            BACKGROUND
        } else {
            img.get(r - margin, c - margin)
        }
    })
}

fn instance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_one(spec: &SynthSpec, class: usize, index: usize) -> Result<(GrayImage, Truth, PruneLabel)> {
    let mut rng = instance_rng(spec.seed, index as u64 + 1);
    let prune = draw_prune(spec, &mut rng);
    let template = &spec.templates[class];
    let mut body = instance_body(spec, template, &mut rng);
    if prune == PruneLabel::Curved {
        let amp = spec.curvature_amplitude * rng.random_range(0.7..=1.3) * body.length;
        body.bow = if rng.random::<bool>() { amp } else { -amp };
    }
    let mut bodies = vec![body];
    if prune == PruneLabel::Overlap {
        let other = &spec.templates[rng.random_range(0..spec.templates.len())];
        let mut second = instance_body(spec, other, &mut rng);
        let cross = rng.random_range(40.0f64..=90.0).to_radians();
        second.tilt = bodies[0].tilt + if rng.random::<bool>() { cross } else { -cross };
        let along = rng.random_range(-0.25..=0.25) * bodies[0].length;
        let (s, c) = bodies[0].tilt.sin_cos();
        second.center = (c * along, s * along);
        bodies.push(second);
    }
    let extent = bodies
        .iter()
        .map(|b| b.center.0.abs().max(b.center.1.abs()) + b.reach())
        .fold(0.0, f64::max);
    let side = (2.0 * extent).ceil() as usize + 2 * MARGIN;
    let mid = side as f64 / 2.0;
    for b in &mut bodies {
        b.center = (b.center.0 + mid, b.center.1 + mid);
    }
    let canvas = render(&bodies, side, side);
    let (r0, r1, c0, c1) = crop_box(&canvas, MARGIN);
    let mut img = GrayImage::from_fn(r1 - r0, c1 - c0, |r, c| canvas.get(r + r0, c + c0));
    let (cy, cx) = bodies[0].canvas_point(template.centromere * bodies[0].length);
    let mut truth = Truth {
        centromere_row: cy - 0.5 - r0 as f64,
        centromere_col: cx - 0.5 - c0 as f64,
        tilt_deg: bodies[0].tilt.to_degrees(),
        flipped: bodies[0].flipped,
    };
    if prune == PruneLabel::Garbage {
        img = pad(&scramble(&img, &mut rng), MARGIN);
        truth.centromere_row = f64::NAN;
        truth.centromere_col = f64::NAN;
    }
    let img = gaussian_blur(&img, spec.blur_sigma);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (h, w) = (img.height(), img.width());
    let mut pixels = img.pixels().to_vec();
    for p in &mut pixels {
        if spec.noise_sigma > 0.0 {
            *p += noise.sample(&mut rng);
        }
        // quantized as stored, so in-memory and reloaded corpora agree
        *p = (p.clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
    }
    Ok((GrayImage::new(h, w, pixels)?, truth, prune))
}

pub fn image_path(label: u32, index: usize) -> String {
    format!("images/{label:02}_{index:05}.png")
}

/// Renders `n_per_class` instances of every class. Subjects group
/// consecutive runs of a seeded shuffle of the instances, sized so the mean
/// is `images_per_subject`.
pub fn generate(spec: &SynthSpec, n_per_class: usize) -> Result<Corpus> {
    let spec = spec.clone().resolved()?;
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes)
        .flat_map(|c| (0..n_per_class).map(move |k| (c, c * n_per_class + k)))
        .collect();
    let rendered: Vec<(GrayImage, Truth, PruneLabel)> = jobs
        .par_iter()
        .map(|&(c, i)| generate_one(&spec, c, i))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.shuffle(&mut instance_rng(spec.seed, 0));
    let mut subject_of = vec![0usize; jobs.len()];
    let (mut k, mut start) = (0usize, 0usize);
    while start < order.len() {
        let end = (((k + 1) as f64 * spec.images_per_subject).floor() as usize).min(order.len());
        for &i in &order[start..end.max(start + 1)] {
            subject_of[i] = k;
        }
        start = end.max(start + 1);
        k += 1;
    }

    let mut images = Vec::with_capacity(jobs.len());
    let mut truth = Vec::with_capacity(jobs.len());
    let mut instances = Vec::with_capacity(jobs.len());
    for (&(c, i), (img, t, prune)) in jobs.iter().zip(rendered) {
        let label = spec.templates[c].label;
        instances.push(Instance {
            path: image_path(label, i),
            label,
            subject: format!("S{:04}", subject_of[i] + 1),
            prune_label: Some(prune),
            split: None,
        });
        images.push(img);
        truth.push(t);
    }
    Ok(Corpus {
        images,
        truth,
        manifest: DatasetManifest {
            instances,
            root: Default::default(),
        },
    })
}

/// Writes images, a truth table and the manifest under `dir`; the manifest
/// is written last.
pub fn write_corpus(corpus: &Corpus, manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    corpus
        .images
        .par_iter()
        .zip(&manifest.instances)
        .try_for_each(|(img, inst)| img.save_png(&dir.join(&inst.path)))?;
    let mut truth = String::from("path\tcentromere_row\tcentromere_col\ttilt_deg\tflipped\n");
    for (t, inst) in corpus.truth.iter().zip(&manifest.instances) {
        let cell = |v: f64| if v.is_finite() { fmt_real(v) } else { "NA".into() };
        truth.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            inst.path,
            cell(t.centromere_row),
            cell(t.centromere_col),
            fmt_real(t.tilt_deg),
            t.flipped
        ));
    }
    write_atomic(&dir.join("truth.tsv"), truth.as_bytes())?;
    manifest.save(&dir.join("manifest.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{find_boundary, locate_centromere, normalize, trace_boundary};

    fn clean_spec() -> SynthSpec {
        SynthSpec {
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            curvature_amplitude: 0.0,
            max_tilt_deg: 0.0,
            flip_probability: 0.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec {
            n_classes: 6,
            seed: 9,
            ..SynthSpec::default()
        };
        let a = generate(&spec, 4).unwrap();
        let b = generate(&spec, 4).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 10, ..spec }, 4).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn default_templates_validate() {
        let spec = SynthSpec::default().resolved().unwrap();
        assert_eq!(spec.templates.len(), 24);
        assert!(spec.templates.iter().all(|t| t.bands.len() >= 2));
        let mut bad = spec.clone();
        bad.templates[0].bands.reverse();
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            curved_probability: 0.7,
            overlap_probability: 0.4,
            ..SynthSpec::default()
        };
        assert!(bad.resolved().is_err());
    }

    #[test]
    fn centromere_recovered_on_clean_straight_instances() {
        let corpus = generate(&clean_spec(), 5).unwrap();
        let mut total = 0;
        let mut hits = 0;
        for ((img, t), inst) in corpus.images.iter().zip(&corpus.truth).zip(&corpus.manifest.instances) {
            if inst.prune_label != Some(PruneLabel::SemiStraight) {
                continue;
            }
            total += 1;
            let trace = trace_boundary(&find_boundary(&normalize(img))).unwrap();
            if let Some(row) = locate_centromere(&trace) {
                hits += ((row as f64 - t.centromere_row).abs() <= 3.0) as usize;
            }
        }
        assert!(total >= 80);
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn width_minimum_sits_at_the_centromere() {
        let corpus = generate(&clean_spec(), 3).unwrap();
        for ((img, t), inst) in corpus.images.iter().zip(&corpus.truth).zip(&corpus.manifest.instances) {
            if inst.prune_label != Some(PruneLabel::SemiStraight) {
                continue;
            }
            let trace = trace_boundary(&find_boundary(&normalize(img))).unwrap();
            let widths = trace.widths();
            // the rounded caps are narrower still; search the body
            let cap = 12;
            let body = &widths[cap..widths.len() - cap];
            let min = body.iter().copied().fold(f64::INFINITY, f64::min);
            // integer widths plateau at the waist; take the plateau center
            let at_min: Vec<usize> = (0..body.len()).filter(|&i| body[i] == min).collect();
            let i = (at_min[0] + at_min[at_min.len() - 1]) / 2;
            let row = trace.left()[i + cap].row as f64;
            assert!((row - t.centromere_row).abs() <= 3.0, "{} vs {}", row, t.centromere_row);
        }
    }

    #[test]
    fn prune_marginals_match_probabilities() {
        let spec = SynthSpec::default().resolved().unwrap();
        let n = 20_000u64;
        let mut counts = [0u64; 4];
        for i in 0..n {
            let mut rng = instance_rng(spec.seed, i + 1);
            counts[draw_prune(&spec, &mut rng) as usize] += 1;
        }
        let p = [
            1.0 - spec.curved_probability - spec.overlap_probability - spec.garbage_probability,
            spec.garbage_probability,
            spec.curved_probability,
            spec.overlap_probability,
        ];
        for (k, &c) in counts.iter().enumerate() {
            let mean = n as f64 * p[k];
            let sd = (n as f64 * p[k] * (1.0 - p[k])).sqrt();
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "class {k}: {c} vs {mean}");
        }
    }

    #[test]
    fn subjects_average_the_configured_size() {
        let corpus = generate(
            &SynthSpec {
                n_classes: 4,
                ..SynthSpec::default()
            },
            50,
        )
        .unwrap();
        let subjects: std::collections::BTreeSet<_> = corpus.manifest.instances.iter().map(|i| &i.subject).collect();
        let mean = corpus.manifest.instances.len() as f64 / subjects.len() as f64;
        assert!((mean - 6.7).abs() < 0.2, "{mean}");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let spec = SynthSpec {
            n_classes: 3,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, &corpus.manifest, dir.path()).unwrap();
        let m = DatasetManifest::load(&dir.path().join("manifest.csv")).unwrap();
        for (inst, img) in m.instances.iter().zip(&corpus.images) {
            assert_eq!(&GrayImage::load(&m.resolve(inst)).unwrap(), img);
        }
    }
}
