//! Procedurally rendered factored-shapes dataset.
//!
//! Each record is one of `n_s` shape classes drawn with five continuous
//! factors: centre `(cx, cy)` as fractions of the image side, `scale`,
//! `rotation` and `brightness`. Shapes are rasterized with an analytic
//! point-in-shape test on a 2x2 supersampled grid.
//!
//! File layout (little-endian):
//!
//! ```text
//! "CYCD" | u32 version = 1 | u32 count | u16 side | u16 n_s | u64 seed
//! count x ( u16 shape_class | 5 x f32 factors | side*side x f32 pixels )
//! ```

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"CYCD";
pub const DATASET_VERSION: u32 = 1;

pub const CX_RANGE: (f32, f32) = (0.25, 0.75);
pub const CY_RANGE: (f32, f32) = (0.25, 0.75);
pub const SCALE_RANGE: (f32, f32) = (0.15, 0.35);
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.5, 1.0);

/// Shape classes in label order. Datasets with `n_s` classes use the first
/// `n_s` shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn from_class(class: usize) -> Result<Self> {
        Self::ALL
            .get(class)
            .copied()
            .ok_or_else(|| Error::Index(format!("shape class {class}, only 4 shapes exist")))
    }

    /// Point-in-shape test in the shape's local frame.
    fn contains(self, x: f64, y: f64, scale: f64) -> bool {
        match self {
            Shape::Square => x.abs() <= scale && y.abs() <= scale,
            Shape::Circle => x * x + y * y <= scale * scale,
            Shape::Triangle => {
                // Equilateral with a vertex at +y; inradius is half the circumradius.
                let inradius = 0.5 * scale;
                (0..3).all(|k| {
                    let a = -0.5 * PI + k as f64 * TAU / 3.0;
                    x * a.cos() + y * a.sin() <= inradius
                })
            }
            Shape::Cross => {
                let arm = scale / 3.0;
                (x.abs() <= arm && y.abs() <= scale) || (x.abs() <= scale && y.abs() <= arm)
            }
        }
    }
}

/// Generative factors of one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factors {
    pub cx: f32,
    pub cy: f32,
    pub scale: f32,
    pub rotation: f32,
    pub brightness: f32,
}

impl Factors {
    pub fn validate(&self) -> Result<()> {
        let within = |v: f32, (lo, hi): (f32, f32)| v >= lo && v <= hi;
        let ok = within(self.cx, CX_RANGE)
            && within(self.cy, CY_RANGE)
            && within(self.scale, SCALE_RANGE)
            && within(self.brightness, BRIGHTNESS_RANGE)
            && self.rotation >= 0.0
            && f64::from(self.rotation) < TAU;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("factors out of range: {self:?}")))
        }
    }

    fn to_array(self) -> [f32; 5] {
        [self.cx, self.cy, self.scale, self.rotation, self.brightness]
    }

    fn from_array(a: [f32; 5]) -> Self {
        Self {
            cx: a[0],
            cy: a[1],
            scale: a[2],
            rotation: a[3],
            brightness: a[4],
        }
    }
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSample {
    /// Row-major `side x side` pixels in `[0, brightness]`.
    pub image: Vec<f32>,
    pub shape_class: usize,
    pub factors: Factors,
}

/// Rasterizes a shape; row index is `y`, column index is `x`.
pub fn render_shape(shape_class: usize, f: &Factors, side: usize) -> Result<Vec<f32>> {
    let shape = Shape::from_class(shape_class)?;
    f.validate()?;
    if side == 0 {
        return Err(Error::invalid("image side must be positive"));
    }
    let (cx, cy, scale) = (f64::from(f.cx), f64::from(f.cy), f64::from(f.scale));
    let rot = f64::from(f.rotation);
    let (s, c) = rot.sin_cos();
    let n = side as f64;
    let mut img = vec![0.0f32; side * side];
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0u32;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = (px as f64 + 0.25 + 0.5 * sx as f64) / n - cx;
                    let y = (py as f64 + 0.25 + 0.5 * sy as f64) / n - cy;
                    // rotate the sample point by -rotation into the shape frame
                    let lx = c * x + s * y;
                    let ly = -s * x + c * y;
                    if shape.contains(lx, ly, scale) {
                        hits += 1;
                    }
                }
            }
            img[py * side + px] = (f64::from(hits) / 4.0 * f64::from(f.brightness)) as f32;
        }
    }
    Ok(img)
}

fn uniform_in(rng: &mut RngStream, (lo, hi): (f32, f32)) -> f32 {
    let v = (f64::from(lo) + rng.uniform() * f64::from(hi - lo)) as f32;
    v.clamp(lo, hi)
}

/// Draws the factors of record `index` from its own substream.
pub fn sample_factors(seed: u64, index: u64) -> Factors {
    let mut rng = RngStream::new(seed, index);
    let cx = uniform_in(&mut rng, CX_RANGE);
    let cy = uniform_in(&mut rng, CY_RANGE);
    let scale = uniform_in(&mut rng, SCALE_RANGE);
    let mut rotation = (rng.uniform() * TAU) as f32;
    if f64::from(rotation) >= TAU {
        rotation = f32::from_bits(rotation.to_bits() - 1);
    }
    let brightness = uniform_in(&mut rng, BRIGHTNESS_RANGE);
    Factors {
        cx,
        cy,
        scale,
        rotation,
        brightness,
    }
}

/// A generated or loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub n_s: usize,
    pub seed: u64,
    pub samples: Vec<FactorSample>,
}

fn thread_cap() -> Option<usize> {
    std::env::var("CYCINV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Balanced dataset: record `i` has class `i mod n_s` and factors drawn from
/// the substream `(seed, i)`, so generation order never changes the bytes.
pub fn generate_dataset(n: usize, n_s: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n_s == 0 || n_s > Shape::ALL.len() {
        return Err(Error::invalid(format!("class count must be 1..=4, got {n_s}")));
    }
    if n == 0 || !n.is_multiple_of(n_s) {
        return Err(Error::invalid(format!(
            "record count {n} must be a positive multiple of {n_s}"
        )));
    }
    if side == 0 || side > u16::MAX as usize {
        return Err(Error::invalid(format!("invalid image side {side}")));
    }
    let make = |i: usize| -> Result<FactorSample> {
        let factors = sample_factors(seed, i as u64);
        let shape_class = i % n_s;
        Ok(FactorSample {
            image: render_shape(shape_class, &factors, side)?,
            shape_class,
            factors,
        })
    };
    let samples = match thread_cap() {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(|| (0..n).into_par_iter().map(make).collect::<Result<Vec<_>>>())?,
        None => (0..n).into_par_iter().map(make).collect::<Result<Vec<_>>>()?,
    };
    Ok(Dataset {
        side,
        n_s,
        seed,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        w.u32(u32::try_from(self.len()).map_err(|_| Error::format("too many records"))?)?;
        w.u16(self.side as u16)?;
        w.u16(self.n_s as u16)?;
        w.u64(self.seed)?;
        for s in &self.samples {
            w.u16(s.shape_class as u16)?;
            w.f32s(&s.factors.to_array())?;
            w.f32s(&s.image)?;
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let count = r.u32()? as usize;
        let side = r.u16()? as usize;
        let n_s = r.u16()? as usize;
        let seed = r.u64()?;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let shape_class = r.u16()? as usize;
            if shape_class >= n_s {
                return Err(Error::format(format!(
                    "record class {shape_class} with {n_s} classes"
                )));
            }
            let f = r.f32s(5)?;
            let factors = Factors::from_array(f.try_into().unwrap());
            let image = r.f32s(side * side)?;
            samples.push(FactorSample {
                image,
                shape_class,
                factors,
            });
        }
        r.finish()?;
        Ok(Self {
            side,
            n_s,
            seed,
            samples,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            side: self.side,
            n_s: self.n_s,
            seed: self.seed,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// `[n x side^2]` image matrix of the records `idx`.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f32]> = idx.iter().map(|&i| self.samples[i].image.as_slice()).collect();
        Tensor::stack_rows(&rows)
    }

    pub fn all_images(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.images(&idx)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.shape_class).collect()
    }

    /// Stratified split: each class is shuffled with the data stream of
    /// `seed` and its first `round(fraction * class_count)` records go to the
    /// training part. Both parts keep the original record order.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let mut rng = RngStream::for_purpose(seed, Purpose::Data);
        let mut in_train = vec![false; self.len()];
        for class in 0..self.n_s {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.samples[i].shape_class == class)
                .collect();
            rng.shuffle(&mut idx);
            let k = (train_fraction * idx.len() as f64).round() as usize;
            for &i in &idx[..k] {
                in_train[i] = true;
            }
        }
        let train: Vec<usize> = (0..self.len()).filter(|&i| in_train[i]).collect();
        let test: Vec<usize> = (0..self.len()).filter(|&i| !in_train[i]).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path)?;
    Dataset::read_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(scale: f32, brightness: f32) -> Factors {
        Factors {
            cx: 0.5,
            cy: 0.5,
            scale,
            rotation: 0.0,
            brightness,
        }
    }

    #[test]
    fn centered_square_interior_and_corner() {
        let img = render_shape(0, &centered(0.25, 1.0), 32).unwrap();
        assert_eq!(img[16 * 32 + 16], 1.0);
        assert_eq!(img[0], 0.0);
    }

    #[test]
    fn brightness_caps_pixels() {
        for class in 0..4 {
            let img = render_shape(class, &centered(0.3, 0.5), 32).unwrap();
            assert!(img.iter().all(|&v| v <= 0.5));
            assert!(img.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn square_area_matches_geometry() {
        let img = render_shape(0, &centered(0.25, 1.0), 32).unwrap();
        let frac = img.iter().filter(|&&v| v > 0.5).count() as f64 / img.len() as f64;
        assert!((frac - 0.25).abs() <= 0.03, "{frac}");
    }

    #[test]
    fn out_of_range_factors_rejected() {
        assert!(render_shape(0, &centered(0.5, 1.0), 32).is_err());
        assert!(render_shape(4, &centered(0.25, 1.0), 32).is_err());
        let mut f = centered(0.25, 1.0);
        f.cx = 0.9;
        assert!(render_shape(1, &f, 32).is_err());
    }

    #[test]
    fn balanced_classes() {
        let d = generate_dataset(8, 4, 8, 1).unwrap();
        for c in 0..4 {
            assert_eq!(d.labels().iter().filter(|&&l| l == c).count(), 2);
        }
        assert!(generate_dataset(9, 4, 8, 1).is_err());
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = generate_dataset(12, 4, 8, 5).unwrap().to_bytes().unwrap();
        let b = generate_dataset(12, 4, 8, 5).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(12, 4, 8, 6).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn factor_means_are_centered() {
        let n = 10_000;
        let mean = (0..n)
            .map(|i| f64::from(sample_factors(77, i).cx))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() <= 0.005, "{mean}");
    }

    #[test]
    fn stratified_split_counts() {
        let d = generate_dataset(400, 4, 4, 3).unwrap();
        let (train, test) = d.split(0.85, 9).unwrap();
        assert_eq!((train.len(), test.len()), (340, 60));
        for c in 0..4 {
            assert_eq!(train.labels().iter().filter(|&&l| l == c).count(), 85);
            assert_eq!(test.labels().iter().filter(|&&l| l == c).count(), 15);
        }
        assert!(d.split(1.0, 9).is_err());
        assert!(d.split(0.0, 9).is_err());
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let d = generate_dataset(8, 4, 6, 2).unwrap();
        let bytes = d.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        let mut bad = bytes.clone();
        bad[1] = b'!';
        assert!(Dataset::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Dataset::from_bytes(&bad).is_err());
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn every_image_has_a_bright_pixel() {
        let d = generate_dataset(400, 4, 32, 11).unwrap();
        for s in &d.samples {
            let thr = 0.25 * s.factors.brightness;
            assert!(s.image.iter().any(|&v| v > thr));
        }
    }

    #[test]
    fn circle_translation_shifts_by_one_pixel() {
        let side = 32;
        let base = centered(0.2, 1.0);
        let moved = Factors {
            cx: 0.5 + 1.0 / side as f32,
            ..base
        };
        let a = render_shape(1, &base, side).unwrap();
        let b = render_shape(1, &moved, side).unwrap();
        // cross-correlation over horizontal shifts peaks at +1
        let corr = |shift: i64| -> f64 {
            let mut s = 0.0;
            for y in 0..side {
                for x in 0..side {
                    let xs = x as i64 + shift;
                    if (0..side as i64).contains(&xs) {
                        s += f64::from(a[y * side + x]) * f64::from(b[y * side + xs as usize]);
                    }
                }
            }
            s
        };
        let best = (-3..=3).max_by(|&p, &q| corr(p).total_cmp(&corr(q))).unwrap();
        assert_eq!(best, 1);
    }
}
