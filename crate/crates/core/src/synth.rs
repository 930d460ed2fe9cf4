//! Procedural "geoscene" images with hierarchical labels, and the binary
//! dataset container.
//!
//! A scene is a stylised head: a skin ellipse with two identical eye
//! ellipses, a nose bar and two identical lip bars, under a crescent of hair.
//! Left and right eyes (and upper and lower lips) share one colour, so telling
//! them apart takes position within the head, which is the context the coarse
//! levels describe.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{expand_sample, LabelHierarchy, LabelMap, LabelMapSet};
use crate::tensor::{Element, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"PSDS";
pub const DATASET_VERSION: u32 = 1;
/// Bytes before the first record.
pub const DATASET_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;

/// Smallest area, in pixels, any fine part may cover.
pub const MIN_FINE_AREA: usize = 4;
/// Smallest area, in pixels, any coarse part may cover.
pub const MIN_COARSE_AREA: usize = 100;

// fine classes of the geoscene taxonomy
const BG: u16 = 0;
const SKIN: u16 = 1;
const LEFT_EYE: u16 = 2;
const RIGHT_EYE: u16 = 3;
const NOSE: u16 = 4;
const UPPER_LIP: u16 = 5;
const LOWER_LIP: u16 = 6;
const HAIR: u16 = 7;
const FINE_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoSceneSpec {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub count: usize,
    /// Maximum head-centre offset, as a fraction of the image size.
    pub position_jitter: f64,
    /// Head scale is drawn from `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_deg: f64,
    /// Per-sample offset added to each part's base colour.
    pub color_jitter: f64,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
}

impl Default for GeoSceneSpec {
    fn default() -> Self {
        GeoSceneSpec {
            height: 64,
            width: 64,
            seed: 42,
            count: 200,
            position_jitter: 0.06,
            scale_min: 0.85,
            scale_max: 1.1,
            rotation_deg: 15.0,
            color_jitter: 0.06,
            noise: 0.05,
        }
    }
}

/// Nominal part geometry in head units: the head ellipse has semi-axes
/// (`HEAD_A`, `HEAD_B`) × image size × scale.
const HEAD_A: f64 = 0.26;
const HEAD_B: f64 = 0.32;
const EYE: (f64, f64, f64, f64) = (0.40, -0.18, 0.17, 0.11); // |u| centre, v centre, semi-axes
const NOSE_BOX: (f64, f64, f64, f64) = (0.0, 0.14, 0.08, 0.15); // centre, half extents
const UPPER_LIP_BOX: (f64, f64, f64, f64) = (0.0, 0.47, 0.32, 0.055);
const LOWER_LIP_BOX: (f64, f64, f64, f64) = (0.0, 0.585, 0.32, 0.055);

impl GeoSceneSpec {
    /// Smallest nominal fine-part area (pixels) at the smallest scale.
    fn min_nominal_fine_area(&self) -> f64 {
        let ax = HEAD_A * self.width as f64 * self.scale_min;
        let by = HEAD_B * self.height as f64 * self.scale_min;
        let eye = std::f64::consts::PI * EYE.2 * ax * EYE.3 * by;
        let boxed = |b: (f64, f64, f64, f64)| 4.0 * b.2 * ax * b.3 * by;
        eye.min(boxed(NOSE_BOX))
            .min(boxed(UPPER_LIP_BOX))
            .min(boxed(LOWER_LIP_BOX))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("geoscene spec", msg));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.3) {
            return bad(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max <= 1.3",
                self.scale_min, self.scale_max
            ));
        }
        if !(0.0..=0.12).contains(&self.position_jitter) {
            return bad(format!(
                "position jitter {} outside [0, 0.12]",
                self.position_jitter
            ));
        }
        if !(0.0..=45.0).contains(&self.rotation_deg) {
            return bad(format!("rotation {} outside [0, 45] degrees", self.rotation_deg));
        }
        if self.noise < 0.0 || self.color_jitter < 0.0 {
            return bad("noise and colour jitter must be non-negative".into());
        }
        // rasterisation can lose up to roughly half of a thin part
        let area = self.min_nominal_fine_area();
        if area < 2.0 * MIN_FINE_AREA as f64 {
            return bad(format!(
                "smallest fine part would cover about {area:.1} px, below the {} px floor",
                MIN_FINE_AREA
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor<f32>,
    pub labels: LabelMapSet,
}

impl Sample {
    pub fn fine(&self) -> &LabelMap {
        self.labels.maps.last().expect("at least one level")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub hierarchy_hash: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images of `indices` stacked to N×3×H×W in precision `T`.
    pub fn image_batch<T: Element>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.height * self.width);
        for &i in indices {
            data.extend(self.samples[i].image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![indices.len(), 3, self.height, self.width], data)
    }

    /// Row-major N·H·W labels of hierarchy level `level` for `indices`.
    pub fn label_batch(&self, indices: &[usize], level: usize) -> Vec<u16> {
        indices
            .iter()
            .flat_map(|&i| self.samples[i].labels.maps[level].data.iter().copied())
            .collect()
    }

    /// The first `n` samples and the rest.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let tail = Dataset {
            samples: rest,
            ..self.clone()
        };
        (self, tail)
    }

    /// Re-derives coarse levels for a taxonomy with fewer levels.
    pub fn with_hierarchy(&self, h: &LabelHierarchy) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: s.image.clone(),
                    labels: expand_sample(s.fine(), h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            height: self.height,
            width: self.width,
            hierarchy_hash: h.hash(),
            samples,
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed of sample `index`; independent of generation order.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

struct Scene {
    cx: f64,
    cy: f64,
    ax: f64,
    by: f64,
    cos: f64,
    sin: f64,
}

impl Scene {
    /// Pixel centre in head units (u right, v down).
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let rx = self.cos * dx + self.sin * dy;
        let ry = -self.sin * dx + self.cos * dy;
        (rx / self.ax, ry / self.by)
    }

    fn label(&self, x: usize, y: usize) -> u16 {
        let (u, v) = self.local(x, y);
        let in_ellipse = |cu: f64, cv: f64, a: f64, b: f64| {
            ((u - cu) / a).powi(2) + ((v - cv) / b).powi(2) <= 1.0
        };
        let in_box = |b: (f64, f64, f64, f64)| (u - b.0).abs() <= b.2 && (v - b.1).abs() <= b.3;
        if in_ellipse(0.0, 0.0, 1.0, 1.0) {
            if in_ellipse(-EYE.0, EYE.1, EYE.2, EYE.3) {
                LEFT_EYE
            } else if in_ellipse(EYE.0, EYE.1, EYE.2, EYE.3) {
                RIGHT_EYE
            } else if in_box(NOSE_BOX) {
                NOSE
            } else if in_box(UPPER_LIP_BOX) {
                UPPER_LIP
            } else if in_box(LOWER_LIP_BOX) {
                LOWER_LIP
            } else {
                SKIN
            }
        } else if in_ellipse(0.0, -0.12, 1.2, 1.08) && v < 0.2 {
            HAIR
        } else {
            BG
        }
    }
}

const BACKGROUNDS: [[f64; 3]; 4] = [
    [0.35, 0.55, 0.75],
    [0.40, 0.65, 0.45],
    [0.60, 0.60, 0.65],
    [0.70, 0.70, 0.50],
];
const HAIRS: [[f64; 3]; 3] = [[0.30, 0.18, 0.10], [0.12, 0.10, 0.10], [0.55, 0.40, 0.20]];
const SKIN_RGB: [f64; 3] = [0.90, 0.72, 0.60];
const EYE_RGB: [f64; 3] = [0.15, 0.20, 0.35];
const NOSE_RGB: [f64; 3] = [0.78, 0.58, 0.48];
const LIP_RGB: [f64; 3] = [0.75, 0.25, 0.30];

fn render(spec: &GeoSceneSpec, index: usize) -> Result<(Tensor<f32>, LabelMap)> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let mut jitter = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    for _attempt in 0..16 {
        let scale = spec.scale_min + (spec.scale_max - spec.scale_min) * (jitter(0.5) + 0.5);
        let angle = jitter(spec.rotation_deg).to_radians();
        let scene = Scene {
            cx: w as f64 * (0.5 + jitter(spec.position_jitter)),
            cy: h as f64 * (0.56 + jitter(spec.position_jitter)),
            ax: HEAD_A * w as f64 * scale,
            by: HEAD_B * h as f64 * scale,
            cos: angle.cos(),
            sin: angle.sin(),
        };
        let labels: Vec<u16> = (0..h * w).map(|i| scene.label(i % w, i / w)).collect();
        let mut area = [0usize; FINE_CLASSES];
        labels.iter().for_each(|&l| area[l as usize] += 1);
        let face: usize = area[SKIN as usize..HAIR as usize].iter().sum();
        let fine_ok = area[1..].iter().all(|&a| a >= MIN_FINE_AREA);
        if !fine_ok || face < MIN_COARSE_AREA || area[HAIR as usize] < MIN_COARSE_AREA {
            continue;
        }

        let bg = BACKGROUNDS[(jitter(0.5) + 0.5).min(0.999).mul_add(4.0, 0.0) as usize];
        let hair = HAIRS[((jitter(0.5) + 0.5).min(0.999) * 3.0) as usize];
        let mut palette = [bg, SKIN_RGB, EYE_RGB, EYE_RGB, NOSE_RGB, LIP_RGB, LIP_RGB, hair];
        for i in [0usize, 1, 2, 4, 5, 7] {
            let offset = [
                jitter(spec.color_jitter),
                jitter(spec.color_jitter),
                jitter(spec.color_jitter),
            ];
            for (c, o) in offset.iter().enumerate() {
                palette[i][c] += o;
            }
            if i == 2 || i == 5 {
                // twin parts share their colour
                palette[i + 1] = palette[i];
            }
        }
        let mut data = vec![0f32; 3 * h * w];
        for (p, &l) in labels.iter().enumerate() {
            for c in 0..3 {
                let v = palette[l as usize][c] + jitter(spec.noise);
                data[c * h * w + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
        return Ok((Tensor::new(vec![3, h, w], data)?, LabelMap::new(h, w, labels)?));
    }
    Err(Error::invalid(
        "geoscene",
        format!("sample {index}: could not place parts above the minimum areas"),
    ))
}

/// Generates `spec.count` samples; a pure function of `(spec, h)`.
pub fn generate(spec: &GeoSceneSpec, h: &LabelHierarchy) -> Result<Dataset> {
    spec.validate()?;
    if h.num_classes(h.finest()) != FINE_CLASSES {
        return Err(Error::invalid(
            "geoscene",
            format!(
                "hierarchy must have {FINE_CLASSES} finest classes, has {}",
                h.num_classes(h.finest())
            ),
        ));
    }
    let samples = (0..spec.count)
        .map(|i| {
            let (image, fine) = render(spec, i)?;
            let labels = expand_sample(&fine, h)?;
            Ok(Sample { image, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: spec.height,
        width: spec.width,
        hierarchy_hash: h.hash(),
        samples,
    })
}

/// Fraction of samples in which each fine class appears.
pub fn class_presence(ds: &Dataset, classes: usize) -> Vec<f64> {
    let mut seen = vec![0usize; classes];
    for s in &ds.samples {
        let mut here = vec![false; classes];
        s.fine().data.iter().for_each(|&l| here[l as usize] = true);
        here.iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .for_each(|(c, _)| seen[c] += 1);
    }
    seen.iter()
        .map(|&n| n as f64 / ds.len().max(1) as f64)
        .collect()
}

/// Size in bytes of a dataset file holding `count` records of `h × w` pixels.
pub fn dataset_file_size(count: usize, h: usize, w: usize) -> usize {
    DATASET_HEADER_LEN + count * (3 * h * w * 4 + h * w * 2 + 4)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(ds.len() as u32).to_le_bytes())?;
        w.write_all(&(ds.height as u32).to_le_bytes())?;
        w.write_all(&(ds.width as u32).to_le_bytes())?;
        w.write_all(&ds.hierarchy_hash.to_le_bytes())?;
        let mut rec = Vec::with_capacity(ds.height * ds.width * 14);
        for s in &ds.samples {
            rec.clear();
            s.image
                .data()
                .iter()
                .for_each(|v| rec.extend_from_slice(&v.to_le_bytes()));
            s.fine()
                .data
                .iter()
                .for_each(|v| rec.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&rec)?;
            w.write_all(&crc32fast::hash(&rec).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

pub fn load_dataset(path: &Path, h: &LabelHierarchy) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = || -> Result<Dataset> {
        let mut head = [0u8; DATASET_HEADER_LEN];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated dataset header".into()))?;
        if &head[..4] != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let (count, height, width) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let hash = u64::from_le_bytes(head[20..28].try_into().expect("8 bytes"));
        if hash != h.hash() {
            return Err(Error::HashMismatch {
                left: hash,
                right: h.hash(),
            });
        }
        let hw = height * width;
        let mut rec = vec![0u8; hw * 14];
        let mut crc = [0u8; 4];
        let mut samples = Vec::with_capacity(count);
        for index in 0..count {
            r.read_exact(&mut rec)
                .and_then(|_| r.read_exact(&mut crc))
                .map_err(|_| Error::Format(format!("truncated at record {index}")))?;
            if crc32fast::hash(&rec) != u32::from_le_bytes(crc) {
                return Err(Error::Checksum { index });
            }
            let image: Vec<f32> = rec[..12 * hw]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let fine: Vec<u16> = rec[12 * hw..]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                .collect();
            let fine = LabelMap::new(height, width, fine)?;
            samples.push(Sample {
                image: Tensor::new(vec![3, height, width], image)?,
                labels: expand_sample(&fine, h)?,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Dataset {
            height,
            width,
            hierarchy_hash: hash,
            samples,
        })
    };
    read().map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// 8-bit grey PNG whose pixel values are class indices.
pub fn write_label_png(path: &Path, map: &LabelMap) -> Result<()> {
    let data: Vec<u8> = map.data.iter().map(|&v| v.min(255) as u8).collect();
    write_png(path, map.width, map.height, png::ColorType::Grayscale, &data)
}

pub fn write_image_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            rgb.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &rgb)
}

/// Reads an RGB(A) or grey 8-bit PNG into a 3×H×W tensor in [0, 1].
pub fn read_image_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut data = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let src = if channels >= 3 { c } else { 0 };
            data[c * h * w + p] = buf[p * channels + src] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `img/%06d.png` and `lbl/<level>/%06d.png` under `dir`.
pub fn export_png(ds: &Dataset, h: &LabelHierarchy, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for level in h.levels() {
        let d = dir.join("lbl").join(&level.name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, s) in ds.samples.iter().enumerate() {
        write_image_png(&img_dir.join(format!("{i:06}.png")), &s.image)?;
        for (level, map) in h.levels().iter().zip(&s.labels.maps) {
            write_label_png(
                &dir.join("lbl").join(&level.name).join(format!("{i:06}.png")),
                map,
            )?;
        }
    }
    Ok(())
}
