//! Non-random initialization of the 1x1 filter bank.
//!
//! Patch candidates are the channel vectors of a tap feature map. For each
//! training image the most energetic sites survive non-maximum suppression;
//! per class, k-means over the surviving vectors yields `k` centers, which
//! are whitened against statistics pooled over all classes and normalized to
//! unit length.

mod kmeans;
mod nms;
mod whiten;

use std::fmt::Write as _;

use rayon::prelude::*;

pub use kmeans::{kmeans, kmeans_detailed, KMeansResult, MAX_ITERATIONS};
pub use nms::nms_select;
pub use whiten::{fit_whitening, whiten_normalize, WhitenStats};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::netdef::{receptive_field, FilterBank, Model, ReceptiveFieldInfo};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCandidate {
    pub image_id: usize,
    /// `(h, w)` site on the tap feature map.
    pub location: (usize, usize),
    /// l2 norm of `feature`.
    pub energy: f64,
    pub feature: Vec<f64>,
    /// Image-space receptive field of the site (unclipped).
    pub bbox: Rect,
}

/// Per-site l2 norm over channels: `[C, H, W] -> [H, W]`.
pub fn energy_map<T: Element>(feature: &Tensor<T>) -> Result<Tensor<T>> {
    feature.expect_ndim("energy_map", 3)?;
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let hw = h * w;
    let mut sq = vec![T::zero(); hw];
    for ch in 0..c {
        for (acc, &x) in sq.iter_mut().zip(&feature.data()[ch * hw..(ch + 1) * hw]) {
            *acc += x * x;
        }
    }
    Tensor::new(vec![h, w], sq.into_iter().map(|v| v.sqrt()).collect())
}

/// Every site of a feature map as a candidate, in row-major order.
pub fn site_candidates<T: Element>(
    feature: &Tensor<T>,
    rf: &ReceptiveFieldInfo,
    image_id: usize,
) -> Result<Vec<PatchCandidate>> {
    let energy = energy_map(feature)?;
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let hw = h * w;
    let data = feature.data();
    Ok((0..hw)
        .map(|site| {
            let (i, j) = (site / w, site % w);
            PatchCandidate {
                image_id,
                location: (i, j),
                energy: energy.data()[site].to_f64(),
                feature: (0..c).map(|ch| data[ch * hw + site].to_f64()).collect(),
                bbox: Rect::square(rf.center(j), rf.center(i), rf.size as f64),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    /// Filters per class.
    pub k: usize,
    /// Candidates kept per image after NMS.
    pub per_image_keep: usize,
    pub iou_threshold: f64,
    pub ridge_coeff: f64,
    pub seed: u64,
}

impl InitConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        InitConfig {
            k,
            per_image_keep: 5,
            iou_threshold: 0.1,
            ridge_coeff: 0.01,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InitReport<T> {
    pub bank: FilterBank<T>,
    /// NMS survivors in canonical `(image_id, rank)` order.
    pub candidates: Vec<PatchCandidate>,
    pub stats: WhitenStats,
    /// Raw (unwhitened) k-means centers, class-major.
    pub centers: Vec<Vec<f64>>,
}

pub fn initialize_filter_bank<T: Element>(
    samples: &[Sample],
    model: &Model<T>,
    tap: &str,
    classes: usize,
    cfg: &InitConfig,
) -> Result<FilterBank<T>> {
    Ok(initialize_filter_bank_detailed(samples, model, tap, classes, cfg)?.bank)
}

pub fn initialize_filter_bank_detailed<T: Element>(
    samples: &[Sample],
    model: &Model<T>,
    tap: &str,
    classes: usize,
    cfg: &InitConfig,
) -> Result<InitReport<T>> {
    if cfg.k == 0 || cfg.per_image_keep == 0 || !(0.0..=1.0).contains(&cfg.iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "init needs k >= 1, per_image_keep >= 1 and iou_threshold in [0, 1], got {cfg:?}"
        )));
    }
    for class in 0..classes {
        if !samples.iter().any(|s| s.label == class) {
            return Err(Error::EmptyDataset(format!("class {class} has no training images")));
        }
    }
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes,
        });
    }
    let rf = receptive_field(&model.spec.backbone, tap)?;

    let per_image: Vec<Vec<PatchCandidate>> = samples
        .par_iter()
        .enumerate()
        .map(|(id, s)| -> Result<Vec<PatchCandidate>> {
            let feature = model.tap_features(&s.image.cast::<T>(), tap)?;
            let all = site_candidates(&feature, &rf, id)?;
            Ok(nms_select(&all, cfg.iou_threshold, cfg.per_image_keep))
        })
        .collect::<Result<_>>()?;

    let mut centers = Vec::with_capacity(classes * cfg.k);
    for class in 0..classes {
        let vectors: Vec<Vec<f64>> = per_image
            .iter()
            .zip(samples)
            .filter(|(_, s)| s.label == class)
            .flat_map(|(c, _)| c.iter().map(|p| p.feature.clone()))
            .collect();
        centers.extend(kmeans(&vectors, cfg.k, cfg.seed.wrapping_add(class as u64))?);
    }

    let candidates: Vec<PatchCandidate> = per_image.into_iter().flatten().collect();
    let features: Vec<&[f64]> = candidates.iter().map(|c| c.feature.as_slice()).collect();
    let stats = fit_whitening(&features, cfg.ridge_coeff)?;
    let channels = stats.dim();
    let mut weight = Vec::with_capacity(centers.len() * channels);
    for center in &centers {
        weight.extend(whiten_normalize(center, &stats)?.into_iter().map(T::from_f64));
    }
    let bank = FilterBank::new(
        Tensor::new(vec![classes * cfg.k, channels, 1, 1], weight)?,
        cfg.k,
        classes,
    )?;
    Ok(InitReport {
        bank,
        candidates,
        stats,
        centers,
    })
}

/// CSV dump of candidates: `image_id,h,w,energy,x0,y0,x1,y1`.
pub fn candidates_csv(candidates: &[PatchCandidate]) -> String {
    let mut out = String::from("image_id,h,w,energy,x0,y0,x1,y1\n");
    for c in candidates {
        let b = c.bbox;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.image_id, c.location.0, c.location.1, c.energy, b.x0, b.y0, b.x1, b.y1
        );
    }
    out
}
