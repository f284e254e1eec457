//! Synthetic fine-grained datasets with planted class patches, plus PPM
//! folders described by CSV manifests.
//!
//! Every synthetic image is a smooth background drawn from one family shared
//! by all classes, a small striped patch carrying the class signature at a
//! jittered position, optional untextured distractor squares and pixel
//! noise. Images are quantized to 8-bit levels so a PPM round trip
//! reproduces them exactly.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::tensor::Tensor;

/// Class-specific appearance of the planted patch: two colors laid out as
/// stripes of the given orientation and period.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub colors: [[f64; 3]; 2],
    /// Stripe direction in radians.
    pub orientation: f64,
    /// Stripe period in pixels.
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub signatures: Vec<Signature>,
    /// Amplitude of the shared low-frequency background field.
    pub background_amplitude: f64,
    /// Strength of a class-dependent background tint (the weak global cue).
    pub global_cue: f64,
    /// Untextured squares in signature colors placed at random, blended with
    /// the same contrast range as the patch.
    pub distractors: usize,
    /// Patch contrast is drawn uniformly from `[min_contrast, 1]`.
    pub min_contrast: f64,
    /// Fraction of the free placement range used for the patch position;
    /// 0 pins the patch to the image center.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

/// Tint directions for the class-dependent background cue.
const TINTS: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.0, 0.5, 1.0],
];

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.15, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.45, 0.15, 0.70],
];

impl SynthSpec {
    /// Desk-scale default: 8 classes, 40 train and 20 test images per class,
    /// 64x64 images with 14x14 patches.
    pub fn desk(seed: u64) -> Self {
        Self::with_classes(8, seed)
    }

    /// Classes come in pairs sharing patch colors and differing only in
    /// stripe orientation, so telling them apart needs the patch texture.
    pub fn with_classes(classes: usize, seed: u64) -> Self {
        let signatures = (0..classes)
            .map(|c| {
                let pair = c / 2;
                let a = PALETTE[(2 * pair) % PALETTE.len()];
                let b = PALETTE[(2 * pair + 1 + pair / PALETTE.len()) % PALETTE.len()];
                Signature {
                    colors: [a, b],
                    orientation: if c % 2 == 0 { 0.0 } else { TAU / 4.0 },
                    period: 4.0 + (c / PALETTE.len()) as f64,
                }
            })
            .collect();
        SynthSpec {
            classes,
            per_class_train: 40,
            per_class_test: 20,
            image_size: 64,
            patch_size: 14,
            signatures,
            background_amplitude: 0.25,
            global_cue: 0.1,
            distractors: 2,
            min_contrast: 0.05,
            jitter: 1.0,
            noise: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
        }
        if self.patch_size == 0 || self.patch_size >= self.image_size {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must be positive and smaller than image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.signatures.len() != self.classes {
            return Err(Error::InvalidArgument(format!(
                "{} signatures for {} classes",
                self.signatures.len(),
                self.classes
            )));
        }
        for i in 0..self.classes {
            for j in 0..i {
                if self.signatures[i] == self.signatures[j] {
                    return Err(Error::InvalidArgument(format!(
                        "classes {j} and {i} share a signature"
                    )));
                }
            }
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.jitter) || !unit(self.min_contrast) || self.noise < 0.0 {
            return Err(Error::InvalidArgument(
                "jitter and min_contrast must lie in [0, 1], noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, S, S]` with values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub label: usize,
    /// The planted patch, when known.
    pub truth_box: Option<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(spec: &SynthSpec, label: usize, stream: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let s = spec.image_size;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");

    // shared background family: base gray plus two random low-frequency waves
    let base: f64 = 0.5 + spec.background_amplitude * rng.gen_range(-0.6..0.6);
    let waves: Vec<([f64; 3], f64, f64, f64)> = (0..2)
        .map(|_| {
            let color = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let angle = rng.gen_range(0.0..TAU);
            let freq = rng.gen_range(0.5..1.5) / s as f64;
            let phase = rng.gen_range(0.0..TAU);
            (color, angle, freq, phase)
        })
        .collect();
    let tint = TINTS[label % TINTS.len()];

    let free = (s - spec.patch_size) as f64;
    let lo = free * (1.0 - spec.jitter) / 2.0;
    let place = |rng: &mut ChaCha8Rng| -> usize {
        let v = if spec.jitter > 0.0 {
            rng.gen_range(lo..=lo + free * spec.jitter)
        } else {
            lo
        };
        v.round() as usize
    };
    let (px, py) = (place(&mut rng), place(&mut rng));
    let draw_contrast = |rng: &mut ChaCha8Rng| {
        if spec.min_contrast < 1.0 {
            rng.gen_range(spec.min_contrast..=1.0)
        } else {
            1.0
        }
    };
    let contrast = draw_contrast(&mut rng);

    let distractors: Vec<(usize, usize, [f64; 3], f64)> = (0..spec.distractors)
        .map(|_| {
            let sig = &spec.signatures[rng.gen_range(0..spec.classes)];
            let color = sig.colors[rng.gen_range(0..2)];
            (
                rng.gen_range(0..=s - spec.patch_size),
                rng.gen_range(0..=s - spec.patch_size),
                color,
                draw_contrast(&mut rng),
            )
        })
        .collect();

    let sig = &spec.signatures[label];
    let (sin_o, cos_o) = sig.orientation.sin_cos();
    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let mut px_val = [base; 3];
            for (color, angle, freq, phase) in &waves {
                let t = (TAU * freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) + phase).sin();
                for ch in 0..3 {
                    px_val[ch] += spec.background_amplitude * 0.5 * t * color[ch];
                }
            }
            for ch in 0..3 {
                px_val[ch] += spec.global_cue * tint[ch];
            }
            for &(dx, dy, color, c) in &distractors {
                if (dx..dx + spec.patch_size).contains(&x) && (dy..dy + spec.patch_size).contains(&y) {
                    for ch in 0..3 {
                        px_val[ch] = (1.0 - c) * px_val[ch] + c * color[ch];
                    }
                }
            }
            if (px..px + spec.patch_size).contains(&x) && (py..py + spec.patch_size).contains(&y) {
                let u = (x - px) as f64 * cos_o + (y - py) as f64 * sin_o;
                let stripe = ((u / sig.period).floor() as i64).rem_euclid(2) as usize;
                let color = sig.colors[stripe];
                for ch in 0..3 {
                    px_val[ch] = (1.0 - contrast) * px_val[ch] + contrast * color[ch];
                }
            }
            for ch in 0..3 {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data[(ch * s + y) * s + x] = quantize(px_val[ch] + n);
            }
        }
    }
    let p = spec.patch_size as f64;
    Sample {
        image: Tensor::new(vec![3, s, s], data).expect("image shape"),
        label,
        truth_box: Some(Rect::new(px as f64, py as f64, px as f64 + p, py as f64 + p)),
    }
}

/// Generates the train and test splits. Samples are ordered class-major and
/// each draws from its own random stream, so results do not depend on how
/// many threads render them.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = |count: usize, offset: u64| -> Vec<Sample> {
        (0..spec.classes * count)
            .into_par_iter()
            .map(|i| render(spec, i / count, offset + i as u64))
            .collect()
    };
    let train = split(spec.per_class_train, 0);
    let test = split(spec.per_class_test, 1 << 32);
    Ok(Dataset {
        classes: spec.classes,
        train,
        test,
    })
}

/// Decodes a binary (P6) PPM into `[3, H, W]` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |d: &str| Error::format("PPM", d.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|_| bad(&format!("invalid {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("dimensions and maxval must be positive (maxval <= 65535)"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < w * h * 3 * bps {
        return Err(bad("raster shorter than width * height * 3"));
    }
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for ch in 0..3 {
            let at = (i * 3 + ch) * bps;
            let v = if bps == 1 {
                raster[at] as f64
            } else {
                u16::from_be_bytes([raster[at], raster[at + 1]]) as f64
            };
            data[ch * w * h + i] = v / maxval as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encodes `[3, H, W]` values in `[0, 1]` as an 8-bit P6 PPM.
pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    image.expect_ndim("encode_ppm", 3)?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..w * h {
        for ch in 0..3 {
            out.push((image.data()[ch * w * h + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize of a `[C, H, W]` map to `[C, size, size]`.
pub fn resize_nearest(image: &Tensor<f64>, size: usize) -> Tensor<f64> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == size && w == size {
        return image.clone();
    }
    Tensor::from_fn(&[c, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        let sy = y * h / size;
        let sx = x * w / size;
        image.data()[(ch * h + sy) * w + sx]
    })
}

/// Reads a manifest CSV with header `path,label[,x0,y0,x1,y1]`. Paths are
/// relative to the manifest's directory. Images are resized to
/// `image_size` and labels checked against `classes`.
pub fn load_folder(manifest: impl AsRef<Path>, image_size: usize, classes: usize) -> Result<Vec<Sample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| csv_error(manifest, e))?;
    let headers = reader.headers().map_err(|e| csv_error(manifest, e))?.clone();
    let has_boxes = headers.len() >= 6;
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(manifest, e))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let path = base.join(field(0));
        let label: usize = field(1).parse().map_err(|_| {
            Error::format("manifest", format!("row {}: bad label `{}`", row + 1, field(1)))
        })?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let raw = decode_ppm(&bytes)?;
        let (h, w) = (raw.shape()[1] as f64, raw.shape()[2] as f64);
        let image = resize_nearest(&raw, image_size);
        let truth_box = if has_boxes {
            let coords: Vec<f64> = (2..6)
                .map(|i| field(i).parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("manifest", format!("row {}: bad box", row + 1)))?;
            let (sx, sy) = (image_size as f64 / w, image_size as f64 / h);
            Some(Rect::new(coords[0] * sx, coords[1] * sy, coords[2] * sx, coords[3] * sy))
        } else {
            None
        };
        samples.push(Sample { image, label, truth_box });
    }
    Ok(samples)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format("manifest", format!("{}: {e}", path.display()))
}

/// Writes one split as PPM files plus a manifest with truth boxes; returns
/// the manifest path.
pub fn save_split(samples: &[Sample], dir: impl AsRef<Path>, split: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join(format!("{split}.csv"));
    let mut out = String::from("path,label,x0,y0,x1,y1\n");
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{split}/{i:05}.ppm");
        let path = dir.join(&name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_ppm(&s.image)?).map_err(|e| Error::io(&path, e))?;
        let b = s.truth_box.unwrap_or(Rect::new(0.0, 0.0, 0.0, 0.0));
        out.push_str(&format!("{name},{},{},{},{},{}\n", s.label, b.x0, b.y0, b.x1, b.y1));
    }
    fs::write(&manifest, out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    save_split(&ds.train, &dir, "train")?;
    save_split(&ds.test, &dir, "test")?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>, image_size: usize, classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    Ok(Dataset {
        classes,
        train: load_folder(dir.join("train.csv"), image_size, classes)?,
        test: load_folder(dir.join("test.csv"), image_size, classes)?,
    })
}

/// Loads an externally extracted feature map stored as DFLT.
pub fn load_features(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    crate::dflt::load(path)
}
