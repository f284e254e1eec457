//! Accuracy and analyses of the learned patch detectors.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::init::energy_map;
use crate::netdef::{fuse_predictions, receptive_field, Model, ReceptiveFieldInfo};
use crate::tensor::{Element, Tensor};

/// Fused prediction for every sample, in sample order.
pub fn predict<T: Element>(model: &Model<T>, samples: &[Sample], fusion_weights: &[f64]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.image.cast::<T>())?;
            Ok(fuse_predictions(&out, fusion_weights)?.1)
        })
        .collect()
}

/// Fraction of samples whose fused argmax equals the label.
pub fn evaluate<T: Element>(model: &Model<T>, samples: &[Sample], fusion_weights: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let pred = predict(model, samples, fusion_weights)?;
    let correct = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Image box of tap site `(h, w)`: centered at `offset + stride * (h, w)`
/// with side `rf.size`, clipped to the image.
pub fn remap_patch(location: (usize, usize), rf: &ReceptiveFieldInfo, image_size: usize) -> Rect {
    let s = image_size as f64;
    Rect::square(rf.center(location.1), rf.center(location.0), rf.size as f64).clip(s, s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchHit {
    pub image_id: usize,
    pub location: (usize, usize),
    pub bbox: Rect,
    pub response: f64,
}

fn module_rf<T: Element>(model: &Model<T>, module: usize) -> Result<ReceptiveFieldInfo> {
    let d = model
        .spec
        .dfl
        .get(module)
        .ok_or_else(|| Error::InvalidArgument(format!("no DFL module {module}")))?;
    receptive_field(&model.spec.backbone, &d.tap)
}

fn check_filter<T: Element>(model: &Model<T>, module: usize, filter: usize) -> Result<()> {
    let filters = model.spec.dfl[module].filters();
    if filter >= filters {
        return Err(Error::InvalidArgument(format!(
            "filter {filter} out of range for a bank of {filters}"
        )));
    }
    Ok(())
}

/// Maximum response of every filter of `module` and where it occurs.
fn max_responses<T: Element>(model: &Model<T>, image: &Tensor<f64>, module: usize) -> Result<Vec<(f64, (usize, usize))>> {
    let trace = model.trace(&image.cast::<T>())?;
    let (values, argmax) = crate::kernels::global_max_pool(&trace.conv6[module])?;
    Ok(values.data().iter().map(|&v| v.to_f64()).zip(argmax).collect())
}

/// The `n` strongest max-responses of one filter over `samples`, one per
/// image, ranked by response (ties by image order).
pub fn top_patches<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    module: usize,
    filter: usize,
    n: usize,
) -> Result<Vec<PatchHit>> {
    let rf = module_rf(model, module)?;
    check_filter(model, module, filter)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let size = model.spec.input_size;
    let mut hits: Vec<PatchHit> = samples
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let (response, location) = max_responses(model, &s.image, module)?[filter];
            Ok(PatchHit {
                image_id: id,
                location,
                bbox: remap_patch(location, &rf, size),
                response,
            })
        })
        .collect::<Result<_>>()?;
    hits.sort_by(|a, b| b.response.total_cmp(&a.response));
    hits.truncate(n);
    Ok(hits)
}

/// Mean `pool6` vector of `module` over the samples of `class`.
pub fn class_profile<T: Element>(model: &Model<T>, samples: &[Sample], class: usize, module: usize) -> Result<Tensor<f64>> {
    let members: Vec<&Sample> = samples.iter().filter(|s| s.label == class).collect();
    if members.is_empty() {
        return Err(Error::EmptyDataset(format!("no samples of class {class}")));
    }
    let pooled: Vec<Tensor<f64>> = members
        .par_iter()
        .map(|s| Ok(model.forward(&s.image.cast::<T>())?.pool6[module].cast::<f64>()))
        .collect::<Result<_>>()?;
    let mut mean = Tensor::zeros(pooled[0].shape());
    for p in &pooled {
        mean.add_assign(p);
    }
    mean.scale_assign(1.0 / pooled.len() as f64);
    Ok(mean)
}

/// Mean of each class's group of `k` entries.
pub fn group_means(profile: &Tensor<f64>, k: usize) -> Vec<f64> {
    profile
        .data()
        .chunks(k)
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect()
}

/// Most class-selective filter of `class`: the one in its group with the
/// largest gap between its mean max-response on `class` samples and on all
/// other samples (just the class mean when no other samples are given).
pub fn best_filter<T: Element>(model: &Model<T>, samples: &[Sample], class: usize, module: usize) -> Result<usize> {
    if !samples.iter().any(|s| s.label == class) {
        return Err(Error::EmptyDataset(format!("no samples of class {class}")));
    }
    let k = model.spec.dfl[module].k;
    let per_image: Vec<Vec<(f64, (usize, usize))>> = samples
        .par_iter()
        .map(|s| max_responses(model, &s.image, module))
        .collect::<Result<_>>()?;
    let mean = |j: usize, inside: bool| {
        let v: Vec<f64> = per_image
            .iter()
            .zip(samples)
            .filter(|(_, s)| (s.label == class) == inside)
            .map(|(r, _)| r[j].0)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let score = |j: usize| mean(j, true) - mean(j, false);
    let range = class * k..(class + 1) * k;
    Ok(range
        .clone()
        .fold(range.start, |best, j| if score(j) > score(best) { j } else { best }))
}

/// Patch localization for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub class: usize,
    pub filter: usize,
    /// Top patches over the class's images; `image_id` indexes the full
    /// sample list passed to [`localize`].
    pub hits: Vec<PatchHit>,
    /// IoU of each hit with its image's truth box (0 without one).
    pub ious: Vec<f64>,
}

impl Localization {
    pub fn count_above(&self, iou: f64) -> usize {
        self.ious.iter().filter(|&&v| v > iou).count()
    }
}

/// Picks the best filter of `class` on `select`, then ranks its `n` top
/// patches over the images of `class` in `samples`.
pub fn localize<T: Element>(
    model: &Model<T>,
    select: &[Sample],
    samples: &[Sample],
    class: usize,
    module: usize,
    n: usize,
) -> Result<Localization> {
    let filter = best_filter(model, select, class, module)?;
    let ids: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
    let own: Vec<Sample> = ids.iter().map(|&i| samples[i].clone()).collect();
    let mut hits = top_patches(model, &own, module, filter, n)?;
    let ious = hits
        .iter()
        .map(|h| own[h.image_id].truth_box.map_or(0.0, |b| h.bbox.iou(&b)))
        .collect();
    for h in &mut hits {
        h.image_id = ids[h.image_id];
    }
    Ok(Localization {
        class,
        filter,
        hits,
        ious,
    })
}

/// Upsamples an `[H, W]` site map to `[S, S]`: each pixel takes the largest
/// value among the sites whose receptive field covers it (0 if none does).
pub fn max_cover_upsample(values: &Tensor<f64>, rf: &ReceptiveFieldInfo, image_size: usize) -> Result<Tensor<f64>> {
    values.expect_ndim("max_cover_upsample", 2)?;
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let mut out = vec![f64::NEG_INFINITY; image_size * image_size];
    for i in 0..h {
        for j in 0..w {
            let v = values.data()[i * w + j];
            let b = remap_patch((i, j), rf, image_size);
            let (y0, y1) = (b.y0.ceil() as usize, (b.y1.ceil() as usize).min(image_size));
            let (x0, x1) = (b.x0.ceil() as usize, (b.x1.ceil() as usize).min(image_size));
            for y in y0..y1 {
                for x in x0..x1 {
                    if b.contains_pixel(x, y) && v > out[y * image_size + x] {
                        out[y * image_size + x] = v;
                    }
                }
            }
        }
    }
    out.iter_mut().filter(|v| v.is_infinite()).for_each(|v| *v = 0.0);
    Tensor::new(vec![image_size, image_size], out)
}

/// Share of a heatmap's total mass that lies inside `bbox` (0 for an
/// all-zero map).
pub fn inside_fraction(heat: &Tensor<f64>, bbox: &Rect) -> f64 {
    let w = heat.shape()[1];
    let mut inside = 0.0;
    let mut total = 0.0;
    for (idx, &v) in heat.data().iter().enumerate() {
        total += v;
        if bbox.contains_pixel(idx % w, idx / w) {
            inside += v;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Tap energy at image resolution, by the max-covering-patch rule.
pub fn energy_heatmap<T: Element>(model: &Model<T>, image: &Tensor<f64>, tap: &str) -> Result<Tensor<f64>> {
    let rf = receptive_field(&model.spec.backbone, tap)?;
    let energy = energy_map(&model.tap_features(&image.cast::<T>(), tap)?)?.cast::<f64>();
    max_cover_upsample(&energy, &rf, model.spec.input_size)
}

#[derive(Clone, Debug)]
pub struct ImageEnergy {
    pub image_id: usize,
    pub label: usize,
    pub before: Tensor<f64>,
    pub after: Tensor<f64>,
    /// Inside-truth-box energy fraction before and after.
    pub fraction_before: f64,
    pub fraction_after: f64,
}

#[derive(Clone, Debug)]
pub struct EnergyShift {
    pub images: Vec<ImageEnergy>,
}

impl EnergyShift {
    /// Mean inside-box fraction `(before, after)` per class, `None` for
    /// classes with no boxed image.
    pub fn per_class(&self, classes: usize) -> Vec<Option<(f64, f64)>> {
        (0..classes)
            .map(|c| {
                let imgs: Vec<&ImageEnergy> = self.images.iter().filter(|i| i.label == c).collect();
                if imgs.is_empty() {
                    return None;
                }
                let n = imgs.len() as f64;
                Some((
                    imgs.iter().map(|i| i.fraction_before).sum::<f64>() / n,
                    imgs.iter().map(|i| i.fraction_after).sum::<f64>() / n,
                ))
            })
            .collect()
    }

    pub fn summary_csv(&self, classes: usize) -> String {
        let mut out = String::from("class,fraction_before,fraction_after,shift\n");
        for (c, v) in self.per_class(classes).into_iter().enumerate() {
            if let Some((b, a)) = v {
                let _ = writeln!(out, "{c},{b},{a},{}", a - b);
            }
        }
        out
    }
}

/// Tap energy heatmaps of the same images under two checkpoints, with the
/// share of energy inside each image's truth box. Samples without a truth
/// box are skipped.
pub fn energy_shift<T: Element>(
    before: &Model<T>,
    after: &Model<T>,
    samples: &[Sample],
    tap: &str,
) -> Result<EnergyShift> {
    let images = samples
        .par_iter()
        .enumerate()
        .filter_map(|(id, s)| s.truth_box.map(|b| (id, s, b)))
        .map(|(id, s, bbox)| {
            let hb = energy_heatmap(before, &s.image, tap)?;
            let ha = energy_heatmap(after, &s.image, tap)?;
            Ok(ImageEnergy {
                image_id: id,
                label: s.label,
                fraction_before: inside_fraction(&hb, &bbox),
                fraction_after: inside_fraction(&ha, &bbox),
                before: hb,
                after: ha,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EnergyShift { images })
}

/// Bilinear upsampling of an `[H, W]` site map to `[S, S]`. Pixel `(y, x)`
/// samples the map at site coordinates `((y + 0.5 - offset) / stride, ..)`,
/// clamped to the grid, so site `(i, j)` sits at its receptive-field center.
pub fn bilinear_upsample(values: &Tensor<f64>, rf: &ReceptiveFieldInfo, image_size: usize) -> Result<Tensor<f64>> {
    values.expect_ndim("bilinear_upsample", 2)?;
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let axis = |p: usize, len: usize| {
        let u = ((p as f64 + 0.5 - rf.offset) / rf.stride as f64).clamp(0.0, (len - 1) as f64);
        let lo = (u.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, u - lo as f64)
    };
    let data = values.data();
    Ok(Tensor::from_fn(&[image_size, image_size], |idx| {
        let (y0, y1, fy) = axis(idx / image_size, h);
        let (x0, x1, fx) = axis(idx % image_size, w);
        let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
        let bottom = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// One filter's `conv6` response map at image resolution.
pub fn filter_heatmap<T: Element>(model: &Model<T>, image: &Tensor<f64>, module: usize, filter: usize) -> Result<Tensor<f64>> {
    let rf = module_rf(model, module)?;
    check_filter(model, module, filter)?;
    let trace = model.trace(&image.cast::<T>())?;
    let conv6 = trace.conv6[module].cast::<f64>();
    let (h, w) = (conv6.shape()[1], conv6.shape()[2]);
    let map = Tensor::new(vec![h, w], conv6.data()[filter * h * w..(filter + 1) * h * w].to_vec())?;
    bilinear_upsample(&map, &rf, model.spec.input_size)
}

/// Grayscale P5 rendering of a 2-d map, min-max scaled to 0..=255.
pub fn encode_pgm(map: &Tensor<f64>) -> Result<Vec<u8>> {
    map.expect_ndim("encode_pgm", 2)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8));
    Ok(out)
}

/// Raw values of a 2-d map, one row per line.
pub fn map_csv(map: &Tensor<f64>) -> String {
    let w = map.shape()[map.ndim() - 1];
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.pgm` and `<stem>.csv` for a heatmap.
pub fn write_heatmap(map: &Tensor<f64>, dir: &Path, stem: &str) -> Result<()> {
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&pgm, encode_pgm(map)?).map_err(|e| Error::io(&pgm, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, map_csv(map)).map_err(|e| Error::io(&csv, e))
}
