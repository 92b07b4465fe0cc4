//! Synthetic shape-family segmentation data.
//!
//! Every class is one parametric shape family. A sample renders one shape at
//! a random position, rotation, scale and aspect onto a noisy background
//! with small clutter blobs, then normalises the image to zero mean and unit
//! variance. Masks are the exact rasterised shape.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Foreground fraction bounds enforced by rejection.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.60;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Ring,
    Cross,
    Triangle,
    Diamond,
    Star,
    Crescent,
    LShape,
    Frame,
    Heart,
    Hexagon,
    TShape,
    TwinBlobs,
    Bar,
    HalfDisc,
    HShape,
    Chevron,
    Flower,
    UShape,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 20] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Triangle,
        ShapeFamily::Diamond,
        ShapeFamily::Star,
        ShapeFamily::Crescent,
        ShapeFamily::LShape,
        ShapeFamily::Frame,
        ShapeFamily::Heart,
        ShapeFamily::Hexagon,
        ShapeFamily::TShape,
        ShapeFamily::TwinBlobs,
        ShapeFamily::Bar,
        ShapeFamily::HalfDisc,
        ShapeFamily::HShape,
        ShapeFamily::Chevron,
        ShapeFamily::Flower,
        ShapeFamily::UShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Star => "star",
            ShapeFamily::Crescent => "crescent",
            ShapeFamily::LShape => "l-shape",
            ShapeFamily::Frame => "frame",
            ShapeFamily::Heart => "heart",
            ShapeFamily::Hexagon => "hexagon",
            ShapeFamily::TShape => "t-shape",
            ShapeFamily::TwinBlobs => "twin-blobs",
            ShapeFamily::Bar => "bar",
            ShapeFamily::HalfDisc => "half-disc",
            ShapeFamily::HShape => "h-shape",
            ShapeFamily::Chevron => "chevron",
            ShapeFamily::Flower => "flower",
            ShapeFamily::UShape => "u-shape",
        }
    }

    /// Membership test in the shape's own frame, roughly the unit square.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r = u.hypot(v);
        let phi = v.atan2(u);
        let within = |a: f64, lo: f64, hi: f64| a >= lo && a <= hi;
        match self {
            ShapeFamily::Ellipse => r <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= 1.0 && v.abs() <= 0.6,
            ShapeFamily::Ring => within(r, 0.55, 1.0),
            ShapeFamily::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            ShapeFamily::Triangle => v <= 0.8 && v >= -1.0 + 1.8 * u.abs(),
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Star => r <= 0.55 + 0.45 * (5.0 * phi).cos(),
            ShapeFamily::Crescent => r <= 1.0 && (u - 0.45).hypot(v) > 0.75,
            ShapeFamily::LShape => {
                (within(u, -1.0, -0.35) && v.abs() <= 1.0) || (u.abs() <= 1.0 && within(v, 0.35, 1.0))
            }
            ShapeFamily::Frame => u.abs().max(v.abs()) <= 1.0 && u.abs().max(v.abs()) > 0.6,
            ShapeFamily::Heart => {
                let (x, y) = (1.2 * u, -1.2 * v + 0.25);
                (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0
            }
            ShapeFamily::Hexagon => {
                let s3 = 3f64.sqrt();
                v.abs() <= s3 / 2.0 && s3 * u.abs() + v.abs() <= s3
            }
            ShapeFamily::TShape => {
                (u.abs() <= 1.0 && within(v, -1.0, -0.5)) || (u.abs() <= 0.25 && v.abs() <= 1.0)
            }
            ShapeFamily::TwinBlobs => (u + 0.5).hypot(v) <= 0.48 || (u - 0.5).hypot(v) <= 0.48,
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.22,
            ShapeFamily::HalfDisc => r <= 1.0 && v <= 0.0,
            ShapeFamily::HShape => {
                (within(u.abs(), 0.6, 1.0) && v.abs() <= 1.0) || (u.abs() <= 1.0 && v.abs() <= 0.2)
            }
            ShapeFamily::Chevron => {
                let base = 0.9 * u.abs() - 0.5;
                u.abs() <= 1.0 && within(v, base, base + 0.5)
            }
            ShapeFamily::Flower => r <= 0.4 + 0.55 * (2.0 * phi).cos().abs(),
            ShapeFamily::UShape => {
                (within(u.abs(), 0.55, 1.0) && v.abs() <= 1.0) || (u.abs() <= 1.0 && within(v, 0.55, 1.0))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_classes: 10,
            samples_per_class: 12,
            height: 32,
            width: 32,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=ShapeFamily::ALL.len()).contains(&self.n_classes) {
            return Err(Error::Validation(format!(
                "n_classes {} outside 4..={}",
                self.n_classes,
                ShapeFamily::ALL.len()
            )));
        }
        if self.samples_per_class < 5 {
            return Err(Error::Validation(format!(
                "samples_per_class {} is below 5",
                self.samples_per_class
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Validation(format!(
                "image size {}×{} is below 8×8",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub class_id: usize,
    /// `[1×H×W]`, zero mean and unit variance.
    pub image: Tensor<f32>,
    /// `[H×W]` binary.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// Ordered by id.
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.samples.iter().map(|s| s.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Sample indices of `class`, in id order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].class_id == class)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut manifest = String::new();
        for s in &self.samples {
            let image = format!("images/{:05}.ctnt", s.id);
            let mask = format!("masks/{:05}.ctnt", s.id);
            write_tensor(&dir.join(&image), &s.image)?;
            write_tensor(&dir.join(&mask), &s.mask)?;
            manifest.push_str(&format!("{},{},{image},{mask}\n", s.id, s.class_id));
        }
        let path = dir.join(MANIFEST);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(manifest.as_bytes()))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{}:{}: malformed record {line:?}", path.display(), n + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let id = fields[0].parse().map_err(|_| bad())?;
            let class_id = fields[1].parse().map_err(|_| bad())?;
            let image: Tensor<f32> = read_tensor(&dir.join(fields[2]))?;
            let mask: Tensor<f32> = read_tensor(&dir.join(fields[3]))?;
            if image.dims().len() != 3 || mask.dims() != &image.dims()[1..] {
                return Err(Error::Format(format!(
                    "sample {id}: image {} and mask {} disagree",
                    image.shape(),
                    mask.shape()
                )));
            }
            if !mask.is_binary() {
                return Err(Error::Format(format!("sample {id}: mask is not binary")));
            }
            samples.push(Sample {
                id,
                class_id,
                image,
                mask,
            });
        }
        let first = samples
            .first()
            .ok_or_else(|| Error::Format(format!("{} lists no samples", path.display())))?;
        let (height, width) = (first.mask.dims()[0], first.mask.dims()[1]);
        if samples.iter().any(|s| s.mask.dims() != [height, width]) {
            return Err(Error::Format("samples have differing image sizes".into()));
        }
        samples.sort_by_key(|s| s.id);
        if samples.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Format("duplicate sample id in manifest".into()));
        }
        Ok(Dataset {
            height,
            width,
            samples,
        })
    }
}

/// Placement of one shape in pixel space.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cy: f64,
    cx: f64,
    angle: f64,
    sy: f64,
    sx: f64,
}

impl Pose {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let scale = side * rng.random_range(0.2..0.36);
        let aspect: f64 = rng.random_range(0.8..1.25);
        Pose {
            cy: h as f64 * rng.random_range(0.35..0.65),
            cx: w as f64 * rng.random_range(0.35..0.65),
            angle: rng.random_range(0.0..2.0 * PI),
            sy: scale / aspect.sqrt(),
            sx: scale * aspect.sqrt(),
        }
    }

    fn local(&self, y: usize, x: usize) -> (f64, f64) {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.angle.sin_cos();
        ((c * dx + s * dy) / self.sx, (-s * dx + c * dy) / self.sy)
    }
}

fn rasterize(family: ShapeFamily, pose: &Pose, h: usize, w: usize) -> Vec<f32> {
    let mut m = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = pose.local(y, x);
            if family.contains(u, v) {
                m[y * w + x] = 1.0;
            }
        }
    }
    m
}

fn render<R: Rng>(rng: &mut R, mask: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    let background: f64 = rng.random_range(0.0..0.3);
    let foreground: f64 = rng.random_range(0.65..1.0);
    let noise = Normal::new(0.0, 0.08).map_err(|e| Error::Config(e.to_string()))?;
    let mut img: Vec<f64> = mask
        .iter()
        .map(|&m| if m > 0.0 { foreground } else { background })
        .collect();
    for _ in 0..rng.random_range(2..5) {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let radius: f64 = rng.random_range(0.8..2.2);
        let level: f64 = rng.random_range(0.3..0.6);
        for y in 0..h {
            for x in 0..w {
                if (y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx) <= radius && mask[y * w + x] == 0.0 {
                    img[y * w + x] = level;
                }
            }
        }
    }
    for v in &mut img {
        *v += noise.sample(rng);
    }
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    Ok(img.iter().map(|v| ((v - mean) / std) as f32).collect())
}

/// Deterministic under `cfg.seed`. Class `c` uses shape family `c`; sample
/// ids run class-major.
pub fn generate_synthetic_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for (class_id, &family) in ShapeFamily::ALL[..cfg.n_classes].iter().enumerate() {
        for k in 0..cfg.samples_per_class {
            let mut attempts = 0;
            let mask = loop {
                let pose = Pose::random(&mut rng, h, w);
                let m = rasterize(family, &pose, h, w);
                let frac = m.iter().sum::<f32>() as f64 / (h * w) as f64;
                if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                    break m;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::Validation(format!(
                        "cannot place a {} with foreground fraction in [{MIN_FOREGROUND}, {MAX_FOREGROUND}] at {h}×{w}",
                        family.name()
                    )));
                }
            };
            let image = render(&mut rng, &mask, h, w)?;
            samples.push(Sample {
                id: class_id * cfg.samples_per_class + k,
                class_id,
                image: Tensor::new(&[1, h, w], image)?,
                mask: Tensor::new(&[h, w], mask)?,
            });
        }
    }
    Ok(Dataset {
        height: h,
        width: w,
        samples,
    })
}

/// Writes into a staging directory inside `out` and moves the finished
/// files into place, so a failure leaves nothing behind. `out` must not
/// exist or be an empty directory.
pub fn write_dataset_atomically(dataset: &Dataset, out: &Path) -> Result<()> {
    write_staged(dataset, out, None)
}

fn write_staged(dataset: &Dataset, out: &Path, fail_after: Option<usize>) -> Result<()> {
    let created = !out.exists();
    if created {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    } else if fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::Validation(format!(
            "{} already exists and is not empty",
            out.display()
        )));
    }
    let staging = out.join(".staging");
    let result = (|| {
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        match fail_after {
            Some(n) => Dataset {
                samples: dataset.samples[..n.min(dataset.samples.len())].to_vec(),
                ..dataset.clone()
            }
            .save(&staging)
            .and_then(|_| Err(Error::Validation("injected failure".into()))),
            None => dataset.save(&staging),
        }?;
        for entry in ["images", "masks", MANIFEST] {
            let (from, to) = (staging.join(entry), out.join(entry));
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        fs::remove_dir(&staging).map_err(|e| Error::io(&staging, e))
    })();
    if result.is_err() {
        if created {
            let _ = fs::remove_dir_all(out);
        } else {
            for entry in [".staging", "images", "masks", MANIFEST] {
                let p = out.join(entry);
                let _ = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            }
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            seed: 3,
            n_classes: 20,
            samples_per_class: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_synthetic_dataset(&small()).unwrap(), generate_synthetic_dataset(&small()).unwrap());
        let other = GenConfig { seed: 4, ..small() };
        assert_ne!(generate_synthetic_dataset(&small()).unwrap(), generate_synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn masks_respect_foreground_bounds_and_images_are_normalised() {
        let ds = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(ds.samples.len(), 100);
        for s in &ds.samples {
            assert!(s.mask.is_binary());
            let frac = s.mask.sum() as f64 / 1024.0;
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac), "sample {} frac {frac}", s.id);
            let mean = s.image.sum() as f64 / 1024.0;
            assert!(mean.abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        for cfg in [
            GenConfig { n_classes: 3, ..small() },
            GenConfig { n_classes: 21, ..small() },
            GenConfig { samples_per_class: 4, ..small() },
        ] {
            assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = generate_synthetic_dataset(&GenConfig { n_classes: 4, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        write_dataset_atomically(&ds, &out).unwrap();
        let manifest = fs::read_to_string(out.join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), 20);
        assert_eq!(manifest.lines().next().unwrap(), "0,0,images/00000.ctnt,masks/00000.ctnt");
        assert_eq!(Dataset::load(&out).unwrap(), ds);
        assert!(write_dataset_atomically(&ds, &out).is_err());
    }

    #[test]
    fn failure_midway_leaves_no_files() {
        let ds = generate_synthetic_dataset(&GenConfig { n_classes: 4, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fresh = dir.path().join("fresh");
        assert!(write_staged(&ds, &fresh, Some(7)).is_err());
        assert!(!fresh.exists());
        let existing = dir.path().join("existing");
        fs::create_dir(&existing).unwrap();
        assert!(write_staged(&ds, &existing, Some(7)).is_err());
        assert_eq!(fs::read_dir(&existing).unwrap().count(), 0);
        let blocked = dir.path().join("file");
        fs::write(&blocked, b"x").unwrap();
        assert!(write_dataset_atomically(&ds, &blocked.join("sub")).is_err());
    }
}
