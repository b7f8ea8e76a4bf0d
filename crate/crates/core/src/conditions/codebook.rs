use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, KMeansParams};
use crate::scene::{Dataset, Image};

pub const GRID_COLS: usize = 4;
pub const GRID_ROWS: usize = 4;
pub const TILE_WIDTH: usize = 8;
pub const TILE_HEIGHT: usize = 6;

/// (mean intensity, mean |horizontal gradient|, mean |vertical gradient|)
pub type Descriptor = [f64; 3];

/// Descriptors of the 4x4 tile grid in raster order (row of tiles first).
pub fn patch_descriptors(image: &Image) -> Result<Vec<Descriptor>> {
    if image.width != GRID_COLS * TILE_WIDTH || image.height != GRID_ROWS * TILE_HEIGHT {
        return Err(Error::InvalidInput(format!(
            "image {}x{} does not match the {}x{} codebook grid",
            image.width,
            image.height,
            GRID_COLS * TILE_WIDTH,
            GRID_ROWS * TILE_HEIGHT
        )));
    }
    let mut out = Vec::with_capacity(GRID_COLS * GRID_ROWS);
    for ty in 0..GRID_ROWS {
        for tx in 0..GRID_COLS {
            let (x0, y0) = (tx * TILE_WIDTH, ty * TILE_HEIGHT);
            let px = |x: usize, y: usize| image.get(x0 + x, y0 + y) as f64;
            let mut sum = 0.0;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for y in 0..TILE_HEIGHT {
                for x in 0..TILE_WIDTH {
                    sum += px(x, y);
                    if x + 1 < TILE_WIDTH {
                        dx += (px(x + 1, y) - px(x, y)).abs();
                    }
                    if y + 1 < TILE_HEIGHT {
                        dy += (px(x, y + 1) - px(x, y)).abs();
                    }
                }
            }
            out.push([
                sum / (TILE_WIDTH * TILE_HEIGHT) as f64,
                dx / ((TILE_WIDTH - 1) * TILE_HEIGHT) as f64,
                dy / (TILE_WIDTH * (TILE_HEIGHT - 1)) as f64,
            ]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<Descriptor>,
    /// More words were requested than distinct descriptors exist.
    pub degenerate: bool,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn quantize(&self, descriptor: &Descriptor) -> usize {
        nearest(&self.centroids, descriptor).0
    }

    pub fn words(&self, image: &Image) -> Result<Vec<usize>> {
        Ok(patch_descriptors(image)?
            .iter()
            .map(|d| self.quantize(d))
            .collect())
    }
}

pub fn build_codebook_from_descriptors(
    descriptors: &[Descriptor],
    words: usize,
    seed: u64,
) -> Result<Codebook> {
    if descriptors.is_empty() {
        return Err(Error::InvalidInput("no descriptors for the codebook".into()));
    }
    let distinct: HashSet<[u64; 3]> = descriptors
        .iter()
        .map(|d| d.map(f64::to_bits))
        .collect();
    let degenerate = distinct.len() < words;
    if degenerate {
        log::warn!(
            "codebook: {words} words requested but only {} distinct descriptors",
            distinct.len()
        );
    }
    if descriptors.len() < words {
        return Err(Error::InvalidInput(format!(
            "{} descriptors cannot seed {words} visual words",
            descriptors.len()
        )));
    }
    let fit = kmeans(descriptors, &KMeansParams::new(words, seed).with_restarts(2))?;
    Ok(Codebook {
        centroids: fit
            .centroids
            .into_iter()
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
        degenerate,
    })
}

/// Clusters every train-split patch descriptor into `words` visual words.
pub fn build_codebook(dataset: &Dataset, words: usize, seed: u64) -> Result<Codebook> {
    let mut descriptors = Vec::new();
    for sample in dataset.train() {
        descriptors.extend(patch_descriptors(&sample.image)?);
    }
    if descriptors.is_empty() {
        return Err(Error::InvalidInput("dataset has no train samples".into()));
    }
    build_codebook_from_descriptors(&descriptors, words, seed)
}
