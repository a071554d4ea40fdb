#![allow(dead_code)]

use karyogate::features::DescriptorConfig;
use karyogate::imaging::GrayImage;
use karyogate::pipeline::{extract_row, preprocess_image, PreprocessOptions};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Preprocessed feature rows; `None` where the pipeline found no chromosome.
pub fn feature_rows(images: &[GrayImage], descriptor: Option<&DescriptorConfig>) -> Vec<Option<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let vertical = preprocess_image(img, &PreprocessOptions::default()).ok()?;
            extract_row(&vertical, descriptor).ok()
        })
        .collect()
}

pub fn matrix(rows: &[&Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}
