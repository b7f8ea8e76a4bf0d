//! Procedural obstacle scenes under controllable environmental conditions.
//!
//! A scene is a 32x24 grayscale frame: sky above a horizon row, ground
//! below, and one obstacle whose apparent height follows a pinhole
//! projection of a 2 m object. Weather and time of day are applied as fixed
//! pixel effects so their impact on the image is exactly reproducible.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, mix, Stream};

pub const IMAGE_WIDTH: usize = 32;
pub const IMAGE_HEIGHT: usize = 24;
/// Pinhole focal constant in pixel-meters.
pub const FOCAL_PX_M: f64 = 40.0;
pub const OBSTACLE_HEIGHT_M: f64 = 2.0;
pub const MIN_DISTANCE_M: f64 = 2.0;
pub const MAX_DISTANCE_M: f64 = 30.0;
pub const MAX_LATERAL_OFFSET: f64 = 0.3;

const SKY: f64 = 0.85;
const GROUND: f64 = 0.45;
const OBSTACLE: f64 = 0.15;
const FOG_TARGET: f64 = 0.5;
const FOG_STRENGTH: f64 = 0.7;
const RAIN_STREAKS: usize = 12;
const RAIN_STREAK_LEN: usize = IMAGE_HEIGHT / 2;
const RAIN_DARKENING: f64 = 0.2;
const SNOW_FLAKES: usize = 40;
const NOISE_AMPLITUDE: f64 = 0.02;

macro_rules! level_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident = $code:literal => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant = $code),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let lower = s.to_ascii_lowercase();
                $name::ALL
                    .iter()
                    .copied()
                    .find(|level| level.label() == lower)
                    .ok_or_else(|| Error::InvalidArgument(format!(
                        "unknown {} level `{s}`", stringify!($name)
                    )))
            }
        }
    };
}

level_enum!(ObstacleKind { Box = 0 => "box", Barrel = 1 => "barrel", Wall = 2 => "wall" });
level_enum!(Weather { Clear = 0 => "clear", Rain = 1 => "rain", Snow = 2 => "snow", Fog = 3 => "fog" });
level_enum!(TimeOfDay { Day = 0 => "day", Dusk = 1 => "dusk", Night = 2 => "night" });

impl TimeOfDay {
    pub fn brightness(self) -> f64 {
        match self {
            TimeOfDay::Day => 1.0,
            TimeOfDay::Dusk => 0.5,
            TimeOfDay::Night => 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub distance_m: f64,
    pub obstacle_kind: ObstacleKind,
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    /// Horizontal obstacle offset as a fraction of the image width.
    pub lateral_offset: f64,
    pub noise_seed: u64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_DISTANCE_M..=MAX_DISTANCE_M).contains(&self.distance_m) {
            return Err(Error::InvalidParameter(format!(
                "distance_m {} outside [{MIN_DISTANCE_M}, {MAX_DISTANCE_M}]",
                self.distance_m
            )));
        }
        if !(-MAX_LATERAL_OFFSET..=MAX_LATERAL_OFFSET).contains(&self.lateral_offset) {
            return Err(Error::InvalidParameter(format!(
                "lateral_offset {} outside [-{MAX_LATERAL_OFFSET}, {MAX_LATERAL_OFFSET}]",
                self.lateral_offset
            )));
        }
        Ok(())
    }
}

/// Row-major luminance image with every pixel in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Luminance inversion `1 - p`, used to build out-of-regime inputs.
    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| 1.0 - p).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub params: SceneParams,
    pub true_distance_m: f64,
}

impl Sample {
    pub fn render(params: SceneParams) -> Result<Self> {
        Ok(Self {
            image: render(&params)?,
            true_distance_m: params.distance_m,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Assess = 1,
}

/// Per-factor sampling weights for scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorWeights {
    pub obstacle_kind: [f64; 3],
    pub weather: [f64; 4],
    pub time_of_day: [f64; 3],
    /// Distances are uniform on this closed range.
    pub distance_range: (f64, f64),
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self {
            obstacle_kind: [1.0; 3],
            weather: [1.0; 4],
            time_of_day: [1.0; 3],
            distance_range: (MIN_DISTANCE_M, MAX_DISTANCE_M),
        }
    }
}

impl FactorWeights {
    pub fn only_time(time: TimeOfDay) -> Self {
        let mut w = Self::default();
        w.time_of_day = [0.0; 3];
        w.time_of_day[time.index()] = 1.0;
        w
    }

    pub fn validate(&self) -> Result<()> {
        fn check(name: &str, w: &[f64]) -> Result<()> {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} weights must be finite and nonnegative"
                )));
            }
            if !w.iter().any(|v| *v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} weights need at least one positive entry"
                )));
            }
            Ok(())
        }
        check("obstacle_kind", &self.obstacle_kind)?;
        check("weather", &self.weather)?;
        check("time_of_day", &self.time_of_day)?;
        let (lo, hi) = self.distance_range;
        if !(MIN_DISTANCE_M..=MAX_DISTANCE_M).contains(&lo)
            || !(MIN_DISTANCE_M..=MAX_DISTANCE_M).contains(&hi)
            || lo > hi
        {
            return Err(Error::InvalidArgument(format!(
                "distance range ({lo}, {hi}) must lie in [{MIN_DISTANCE_M}, {MAX_DISTANCE_M}]"
            )));
        }
        Ok(())
    }

    /// Draws scene parameters from the generator seeded by `seed`; the same
    /// seed becomes the render noise seed.
    pub fn draw(&self, seed: u64) -> SceneParams {
        let mut rng = rng::rng(seed, Stream::SceneParams);
        let pick = |w: &[f64], rng: &mut rand_chacha::ChaCha8Rng| {
            WeightedIndex::new(w)
                .expect("weights validated")
                .sample(rng)
        };
        let kind = pick(&self.obstacle_kind, &mut rng);
        let weather = pick(&self.weather, &mut rng);
        let time = pick(&self.time_of_day, &mut rng);
        let (lo, hi) = self.distance_range;
        let distance_m = lo + (hi - lo) * rng.random::<f64>();
        let lateral_offset = MAX_LATERAL_OFFSET * (2.0 * rng.random::<f64>() - 1.0);
        SceneParams {
            distance_m,
            obstacle_kind: ObstacleKind::ALL[kind],
            weather: Weather::ALL[weather],
            time_of_day: TimeOfDay::ALL[time],
            lateral_offset,
            noise_seed: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Vec<Split>,
    pub master_seed: u64,
    pub weights: FactorWeights,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> impl Iterator<Item = usize> + '_ {
        self.split
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == split)
            .map(|(i, _)| i)
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> + '_ {
        self.indices(Split::Train).map(|i| &self.samples[i])
    }

    pub fn assess(&self) -> impl Iterator<Item = &Sample> + '_ {
        self.indices(Split::Assess).map(|i| &self.samples[i])
    }

    /// Keeps only samples matching `keep`, preserving order and split labels.
    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        let (samples, split) = self
            .samples
            .iter()
            .zip(&self.split)
            .filter(|(s, _)| keep(s))
            .map(|(s, sp)| (s.clone(), *sp))
            .unzip();
        Dataset {
            samples,
            split,
            master_seed: self.master_seed,
            weights: self.weights.clone(),
        }
    }
}

/// Apparent obstacle height in pixels, `round(f * H / d)` clamped to the frame.
pub fn apparent_height_px(distance_m: f64) -> usize {
    let h = (FOCAL_PX_M * OBSTACLE_HEIGHT_M / distance_m).round() as usize;
    h.clamp(1, IMAGE_HEIGHT)
}

fn obstacle_width_px(kind: ObstacleKind, height_px: usize) -> usize {
    match kind {
        ObstacleKind::Box => height_px,
        ObstacleKind::Barrel => ((0.6 * height_px as f64).round() as usize).max(1),
        ObstacleKind::Wall => (3 * height_px).min(IMAGE_WIDTH),
    }
}

/// Pixel mask of the obstacle footprint.
pub fn obstacle_mask(params: &SceneParams) -> Vec<bool> {
    let h = apparent_height_px(params.distance_m);
    let w = obstacle_width_px(params.obstacle_kind, h);
    let horizon = IMAGE_HEIGHT / 2;
    let top = horizon.saturating_sub(h / 2);
    let center_x = (0.5 + params.lateral_offset) * IMAGE_WIDTH as f64;
    let left = (center_x - w as f64 / 2.0).round() as isize;
    let mut mask = vec![false; IMAGE_WIDTH * IMAGE_HEIGHT];
    for y in top..(top + h).min(IMAGE_HEIGHT) {
        for x in left..left + w as isize {
            if (0..IMAGE_WIDTH as isize).contains(&x) {
                mask[y * IMAGE_WIDTH + x as usize] = true;
            }
        }
    }
    mask
}

/// Deterministic part of the render: layout, time-of-day brightness and fog.
/// Rain streaks, snow and sensor noise are left out.
pub fn render_clean(params: &SceneParams) -> Result<Image> {
    params.validate()?;
    Ok(to_image(&clean_layer(params)))
}

fn clean_layer(params: &SceneParams) -> Vec<f64> {
    let mask = obstacle_mask(params);
    let horizon = IMAGE_HEIGHT / 2;
    let scale = params.time_of_day.brightness();
    let fog = (params.distance_m / MAX_DISTANCE_M).min(1.0) * FOG_STRENGTH;
    let mut px = Vec::with_capacity(IMAGE_WIDTH * IMAGE_HEIGHT);
    for y in 0..IMAGE_HEIGHT {
        for x in 0..IMAGE_WIDTH {
            let on_obstacle = mask[y * IMAGE_WIDTH + x];
            let base = if on_obstacle {
                OBSTACLE
            } else if y < horizon {
                SKY
            } else {
                GROUND
            };
            let mut v = base * scale;
            if on_obstacle && params.weather == Weather::Fog {
                v += (FOG_TARGET - v) * fog;
            }
            px.push(v);
        }
    }
    px
}

fn to_image(px: &[f64]) -> Image {
    Image {
        width: IMAGE_WIDTH,
        height: IMAGE_HEIGHT,
        pixels: px.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    }
}

pub fn render(params: &SceneParams) -> Result<Image> {
    params.validate()?;
    let mut px = clean_layer(params);
    let mut rng = rng::rng(params.noise_seed, Stream::Render);
    match params.weather {
        Weather::Rain => {
            for _ in 0..RAIN_STREAKS {
                let x = rng.random_range(0..IMAGE_WIDTH);
                let top = rng.random_range(0..IMAGE_HEIGHT);
                for y in top..(top + RAIN_STREAK_LEN).min(IMAGE_HEIGHT) {
                    px[y * IMAGE_WIDTH + x] -= RAIN_DARKENING;
                }
            }
        }
        Weather::Snow => {
            for _ in 0..SNOW_FLAKES {
                let i = rng.random_range(0..px.len());
                px[i] = 1.0;
            }
        }
        Weather::Clear | Weather::Fog => {}
    }
    for v in &mut px {
        *v += NOISE_AMPLITUDE * (2.0 * rng.random::<f64>() - 1.0);
    }
    Ok(to_image(&px))
}

pub fn generate_dataset(n: usize, master_seed: u64, weights: &FactorWeights) -> Result<Dataset> {
    generate_dataset_with_workers(n, master_seed, weights, None)
}

/// Like [`generate_dataset`], on a dedicated pool of `workers` threads
/// (`None` uses the global pool). Output does not depend on the worker count.
pub fn generate_dataset_with_workers(
    n: usize,
    master_seed: u64,
    weights: &FactorWeights,
    workers: Option<usize>,
) -> Result<Dataset> {
    if n == 0 || n % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "sample count must be even and at least 2, got {n}"
        )));
    }
    weights.validate()?;
    let build = || -> Result<Vec<Sample>> {
        (0..n)
            .into_par_iter()
            .map(|i| Sample::render(weights.draw(mix(master_seed, i as u64))))
            .collect()
    };
    let samples = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Configuration(e.to_string()))?
            .install(build)?,
        None => build()?,
    };
    let split = (0..n)
        .map(|i| if i % 2 == 0 { Split::Train } else { Split::Assess })
        .collect();
    Ok(Dataset {
        samples,
        split,
        master_seed,
        weights: weights.clone(),
    })
}

const MAGIC: &[u8; 8] = b"CAMLDS1\0";

/// Writes the binary dataset body (little-endian). Master seed and weights
/// travel in a separate JSON sidecar.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(dataset.len() as u32).to_le_bytes())?;
    out.write_all(&(IMAGE_WIDTH as u16).to_le_bytes())?;
    out.write_all(&(IMAGE_HEIGHT as u16).to_le_bytes())?;
    for (sample, split) in dataset.samples.iter().zip(&dataset.split) {
        let p = &sample.params;
        out.write_all(&(p.distance_m as f32).to_le_bytes())?;
        out.write_all(&[p.obstacle_kind.code(), p.weather.code(), p.time_of_day.code()])?;
        out.write_all(&(p.lateral_offset as f32).to_le_bytes())?;
        out.write_all(&p.noise_seed.to_le_bytes())?;
        out.write_all(&[*split as u8])?;
        for px in &sample.image.pixels {
            out.write_all(&px.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dataset body written by [`write_dataset`]. Distances and offsets
/// come back at f32 precision.
pub fn read_dataset<R: Read>(
    mut input: R,
    master_seed: u64,
    weights: FactorWeights,
) -> Result<Dataset> {
    fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
        Ok(buf)
    }
    if &take::<8, _>(&mut input)? != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut input)?) as usize;
    let width = u16::from_le_bytes(take(&mut input)?) as usize;
    let height = u16::from_le_bytes(take(&mut input)?) as usize;
    let mut samples = Vec::with_capacity(count);
    let mut split = Vec::with_capacity(count);
    for i in 0..count {
        let distance_m = f32::from_le_bytes(take(&mut input)?) as f64;
        let [kind, weather, time] = take::<3, _>(&mut input)?;
        let lateral_offset = f32::from_le_bytes(take(&mut input)?) as f64;
        let noise_seed = u64::from_le_bytes(take(&mut input)?);
        let [sp] = take::<1, _>(&mut input)?;
        let bad = |what: &str| Error::Format(format!("sample {i}: bad {what} code"));
        let params = SceneParams {
            distance_m,
            obstacle_kind: ObstacleKind::from_code(kind).ok_or_else(|| bad("obstacle kind"))?,
            weather: Weather::from_code(weather).ok_or_else(|| bad("weather"))?,
            time_of_day: TimeOfDay::from_code(time).ok_or_else(|| bad("time of day"))?,
            lateral_offset,
            noise_seed,
        };
        split.push(match sp {
            0 => Split::Train,
            1 => Split::Assess,
            _ => return Err(bad("split")),
        });
        let mut pixels = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            pixels.push(f32::from_le_bytes(take(&mut input)?));
        }
        samples.push(Sample {
            image: Image::new(width, height, pixels)?,
            true_distance_m: distance_m,
            params,
        });
    }
    Ok(Dataset {
        samples,
        split,
        master_seed,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(distance_m: f64) -> SceneParams {
        SceneParams {
            distance_m,
            obstacle_kind: ObstacleKind::Box,
            weather: Weather::Clear,
            time_of_day: TimeOfDay::Day,
            lateral_offset: 0.0,
            noise_seed: 11,
        }
    }

    fn obstacle_rows(p: &SceneParams) -> usize {
        let mask = obstacle_mask(p);
        (0..IMAGE_HEIGHT)
            .filter(|y| (0..IMAGE_WIDTH).any(|x| mask[y * IMAGE_WIDTH + x]))
            .count()
    }

    #[test]
    fn pinhole_height_at_ten_meters() {
        assert_eq!(apparent_height_px(10.0), 8);
        assert_eq!(obstacle_rows(&params(10.0)), 8);
        assert_eq!(apparent_height_px(2.0), IMAGE_HEIGHT);
        assert_eq!(apparent_height_px(30.0), 3);
    }

    #[test]
    fn render_is_deterministic() {
        let mut p = params(7.5);
        p.weather = Weather::Rain;
        assert_eq!(render(&p).unwrap(), render(&p).unwrap());
        p.noise_seed = 12;
        let q = render(&p).unwrap();
        p.noise_seed = 11;
        assert_ne!(render(&p).unwrap(), q);
    }

    #[test]
    fn night_scales_clean_render() {
        let day = params(12.0);
        let night = SceneParams {
            time_of_day: TimeOfDay::Night,
            ..day
        };
        let a = render_clean(&day).unwrap();
        let b = render_clean(&night).unwrap();
        for (d, n) in a.pixels.iter().zip(&b.pixels) {
            assert!((0.2 * d - n).abs() < 1e-6, "{d} {n}");
        }
    }

    #[test]
    fn fog_only_touches_obstacle() {
        let clear = params(15.0);
        let fog = SceneParams {
            weather: Weather::Fog,
            ..clear
        };
        let mask = obstacle_mask(&clear);
        let a = render_clean(&clear).unwrap();
        let b = render_clean(&fog).unwrap();
        let expected = 0.15 + (0.5 - 0.15) * 0.5 * 0.7;
        for i in 0..a.pixels.len() {
            if mask[i] {
                assert!((b.pixels[i] as f64 - expected).abs() < 1e-6);
            } else {
                assert_eq!(a.pixels[i], b.pixels[i]);
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for weather in Weather::ALL {
            for time in TimeOfDay::ALL {
                let p = SceneParams {
                    weather: *weather,
                    time_of_day: *time,
                    ..params(3.0)
                };
                let img = render(&p).unwrap();
                assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn rejects_out_of_range_params() {
        assert!(matches!(render(&params(1.0)), Err(Error::InvalidParameter(_))));
        let mut p = params(10.0);
        p.lateral_offset = 0.31;
        assert!(matches!(render(&p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn dataset_split_and_argument_errors() {
        let ds = generate_dataset(10, 3, &FactorWeights::default()).unwrap();
        assert_eq!(ds.train().count(), 5);
        assert_eq!(ds.assess().count(), 5);
        assert!(generate_dataset(0, 3, &FactorWeights::default()).is_err());
        assert!(generate_dataset(7, 3, &FactorWeights::default()).is_err());
        let mut w = FactorWeights::default();
        w.weather = [0.0; 4];
        assert!(matches!(
            generate_dataset(4, 3, &w),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn two_samples_follow_mixed_seeds() {
        let w = FactorWeights::default();
        let ds = generate_dataset(2, 99, &w).unwrap();
        assert_eq!(ds.samples[0].params, w.draw(mix(99, 0)));
        assert_eq!(ds.samples[1].params, w.draw(mix(99, 1)));
    }

    #[test]
    fn degenerate_weights_pin_levels() {
        let mut w = FactorWeights::only_time(TimeOfDay::Night);
        w.weather = [0.0, 0.0, 0.0, 1.0];
        let ds = generate_dataset(40, 5, &w).unwrap();
        assert!(ds
            .samples
            .iter()
            .all(|s| s.params.time_of_day == TimeOfDay::Night && s.params.weather == Weather::Fog));
    }

    #[test]
    fn binary_round_trip() {
        let ds = generate_dataset(6, 17, &FactorWeights::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"CAMLDS1\0");
        assert_eq!(buf.len(), 16 + 6 * (4 + 3 + 4 + 8 + 1 + 4 * 32 * 24));
        let back = read_dataset(&buf[..], 17, FactorWeights::default()).unwrap();
        assert_eq!(back.split, ds.split);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.params.noise_seed, b.params.noise_seed);
            assert_eq!(a.true_distance_m, b.params.distance_m as f32 as f64);
        }
        assert!(read_dataset(&buf[..40], 17, FactorWeights::default()).is_err());
    }
}
