//! Receptive-field arithmetic.

use crate::error::Result;
use crate::netdef::spec::{BackboneSpec, LayerSpec};

/// Image-space footprint of one site of a feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveFieldInfo {
    /// Side of the square region of input pixels that can influence a site.
    pub size: usize,
    /// Input-pixel distance between adjacent sites.
    pub stride: usize,
    /// Center of site `(0, 0)` in continuous image coordinates, where pixel
    /// `i` spans `[i, i + 1)`.
    pub offset: f64,
}

impl ReceptiveFieldInfo {
    /// Index of the first input pixel covered by site `i` (may be negative
    /// when the field extends into padding).
    pub fn first_pixel(&self, site: usize) -> i64 {
        (self.offset - self.size as f64 / 2.0).round() as i64 + (self.stride * site) as i64
    }

    /// Continuous center of site `i` along one axis.
    pub fn center(&self, site: usize) -> f64 {
        self.offset + (self.stride * site) as f64
    }
}

/// Composes layers with `size += (kernel - 1) * jump`, `jump *= stride`,
/// tracking the left edge of site 0 as `left -= pad * jump`.
pub fn compose(layers: &[LayerSpec]) -> ReceptiveFieldInfo {
    let mut size = 1usize;
    let mut jump = 1usize;
    let mut left = 0i64;
    for layer in layers {
        left -= (layer.pad * jump) as i64;
        size += (layer.kernel - 1) * jump;
        jump *= layer.stride;
    }
    ReceptiveFieldInfo {
        size,
        stride: jump,
        offset: left as f64 + size as f64 / 2.0,
    }
}

pub fn receptive_field(spec: &BackboneSpec, tap: &str) -> Result<ReceptiveFieldInfo> {
    let tap = spec.tap(tap)?;
    Ok(compose(&spec.layers[..=tap.after]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::spec::ModelSpec;

    #[test]
    fn vgg16_conv4_3_is_92_stride_8() {
        let spec = ModelSpec::vgg16(200, 10, 448);
        let rf = receptive_field(&spec.backbone, "conv4_3").unwrap();
        assert_eq!((rf.size, rf.stride), (92, 8));
        let rf = receptive_field(&spec.backbone, "conv5_3").unwrap();
        assert_eq!((rf.size, rf.stride), (196, 16));
    }

    #[test]
    fn single_pointwise_conv() {
        let rf = compose(&[LayerSpec::conv(1, 1, 0, 4)]);
        assert_eq!((rf.size, rf.stride), (1, 1));
        assert_eq!(rf.offset, 0.5);
    }

    #[test]
    fn tinynet_tap() {
        let spec = ModelSpec::tinynet(8, 10);
        let rf = receptive_field(&spec.backbone, "block3").unwrap();
        assert_eq!((rf.size, rf.stride), (18, 4));
        assert_eq!(rf.offset, 2.0);
        assert_eq!(rf.first_pixel(0), -7);
    }

    #[test]
    fn unknown_tap() {
        let spec = ModelSpec::tinynet(8, 10);
        assert!(receptive_field(&spec.backbone, "conv9").is_err());
    }
}
