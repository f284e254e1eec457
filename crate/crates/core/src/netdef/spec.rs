//! Declarative model descriptions and their key=value config form.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::window_output;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Output channels; only meaningful for `Conv`.
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, pad: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            stride,
            pad,
            out_channels,
        }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Pool,
            kernel,
            stride,
            pad: 0,
            out_channels: 0,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            kernel: 1,
            stride: 1,
            pad: 0,
            out_channels: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {self}: kernel and stride must be positive"
            )));
        }
        match self.kind {
            LayerKind::Conv if self.out_channels == 0 => Err(Error::InvalidArgument(format!(
                "layer {self}: conv needs out_channels >= 1"
            ))),
            LayerKind::Pool if self.pad >= self.kernel => Err(Error::InvalidArgument(format!(
                "layer {self}: pool pad must be smaller than its window"
            ))),
            LayerKind::Relu if self.kernel != 1 || self.stride != 1 || self.pad != 0 => Err(
                Error::InvalidArgument("relu layers have kernel 1, stride 1, pad 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv => write!(
                f,
                "conv {} {} {} {}",
                self.kernel, self.stride, self.pad, self.out_channels
            ),
            LayerKind::Pool => write!(f, "pool {} {} {}", self.kernel, self.stride, self.pad),
            LayerKind::Relu => write!(f, "relu"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> std::result::Result<usize, String> {
            parts
                .get(i)
                .ok_or_else(|| format!("layer `{s}` is missing field {i}"))?
                .parse()
                .map_err(|_| format!("layer `{s}`: field {i} is not a non-negative integer"))
        };
        let layer = match parts.first().copied() {
            Some("conv") if parts.len() == 5 => LayerSpec::conv(num(1)?, num(2)?, num(3)?, num(4)?),
            Some("pool") if parts.len() == 4 => LayerSpec {
                pad: num(3)?,
                ..LayerSpec::pool(num(1)?, num(2)?)
            },
            Some("pool") if parts.len() == 3 => LayerSpec::pool(num(1)?, num(2)?),
            Some("relu") if parts.len() == 1 => LayerSpec::relu(),
            _ => {
                return Err(format!(
                    "layer `{s}`: expected `conv K S P OUT`, `pool K S [P]` or `relu`"
                ))
            }
        };
        Ok(layer)
    }
}

/// A named point in the backbone whose output feeds other heads. `after` is
/// the index of the last layer included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapPoint {
    pub name: String,
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<TapPoint>,
}

impl BackboneSpec {
    pub fn tap(&self, name: &str) -> Result<&TapPoint> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    /// `(channels, height, width)` after every layer for a square input.
    pub fn feature_shapes(&self, input_channels: usize, input_size: usize) -> Result<Vec<[usize; 3]>> {
        let mut shape = [input_channels, input_size, input_size];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.kind != LayerKind::Relu {
                let side = window_output(shape[1], layer.kernel, layer.stride, layer.pad).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "layer {i} ({layer}) does not fit a {}x{} feature map",
                        shape[1], shape[2]
                    ))
                })?;
                shape[1] = side;
                shape[2] = side;
            }
            if layer.kind == LayerKind::Conv {
                shape[0] = layer.out_channels;
            }
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self, input_channels: usize, input_size: usize) -> Result<()> {
        self.feature_shapes(input_channels, input_size)?;
        for tap in &self.taps {
            if tap.after >= self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "tap `{}` points after layer {} but the backbone has {} layers",
                    tap.name,
                    tap.after,
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DflModuleSpec {
    pub tap: String,
    /// Number of classes `M`.
    pub classes: usize,
    /// Filters per class `k`.
    pub k: usize,
    pub with_side_branch: bool,
}

impl DflModuleSpec {
    pub fn filters(&self) -> usize {
        self.k * self.classes
    }
}

/// Pooling applied to the 1x1 filter responses before the P-Stream head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Gmp,
    Gap,
}

impl FromStr for PoolMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gmp" => Ok(PoolMode::Gmp),
            "gap" => Ok(PoolMode::Gap),
            other => Err(format!("unknown pooling mode `{other}` (expected gmp or gap)")),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Gmp => "gmp",
            PoolMode::Gap => "gap",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub backbone: BackboneSpec,
    pub dfl: Vec<DflModuleSpec>,
    /// Hidden widths of the G-Stream FC stack; empty means a single FC.
    pub g_hidden: Vec<usize>,
    pub pool6: PoolMode,
    /// Test-time weights ordered `[g, p_1..p_n, side_1..side_n]`, where only
    /// modules with a side branch contribute a side weight.
    pub fusion: Vec<f64>,
}

impl ModelSpec {
    /// TinyNet: 3x64x64 input, four conv3 blocks of 16/32/64/64 channels
    /// with 2x2 pools after the first two, one DFL module after block 3.
    pub fn tinynet(classes: usize, k: usize) -> Self {
        let mut layers = Vec::new();
        for (block, width) in [16, 32, 64, 64].into_iter().enumerate() {
            layers.push(LayerSpec::conv(3, 1, 1, width));
            layers.push(LayerSpec::relu());
            if block < 2 {
                layers.push(LayerSpec::pool(2, 2));
            }
        }
        ModelSpec {
            input_channels: 3,
            input_size: 64,
            classes,
            backbone: BackboneSpec {
                layers,
                taps: vec![TapPoint {
                    name: "block3".into(),
                    after: 7,
                }],
            },
            dfl: vec![DflModuleSpec {
                tap: "block3".into(),
                classes,
                k,
                with_side_branch: true,
            }],
            g_hidden: Vec::new(),
            pool6: PoolMode::Gmp,
            fusion: vec![1.0, 1.0, 0.1],
        }
    }

    /// The 13 convolutions of VGG-16 with taps named after each convolution
    /// (post-ReLU). DFL modules are attached at `conv4_3`.
    pub fn vgg16(classes: usize, k: usize, input_size: usize) -> Self {
        let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for (b, &(convs, width)) in blocks.iter().enumerate() {
            for c in 0..convs {
                layers.push(LayerSpec::conv(3, 1, 1, width));
                layers.push(LayerSpec::relu());
                taps.push(TapPoint {
                    name: format!("conv{}_{}", b + 1, c + 1),
                    after: layers.len() - 1,
                });
            }
            if b < 4 {
                layers.push(LayerSpec::pool(2, 2));
            }
        }
        ModelSpec {
            input_channels: 3,
            input_size,
            classes,
            backbone: BackboneSpec { layers, taps },
            dfl: vec![DflModuleSpec {
                tap: "conv4_3".into(),
                classes,
                k,
                with_side_branch: true,
            }],
            g_hidden: Vec::new(),
            pool6: PoolMode::Gmp,
            fusion: vec![1.0, 1.0, 0.1],
        }
    }

    pub fn side_branches(&self) -> usize {
        self.dfl.iter().filter(|d| d.with_side_branch).count()
    }

    /// Number of logit streams taking part in fusion.
    pub fn stream_count(&self) -> usize {
        1 + self.dfl.len() + self.side_branches()
    }

    /// Default fusion weights: 1.0 for G and every P-Stream, 0.1 per side branch.
    pub fn default_fusion(&self) -> Vec<f64> {
        let mut w = vec![1.0; 1 + self.dfl.len()];
        w.extend(std::iter::repeat(0.1).take(self.side_branches()));
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("a model needs at least 2 classes".into()));
        }
        self.backbone.validate(self.input_channels, self.input_size)?;
        for d in &self.dfl {
            self.backbone.tap(&d.tap)?;
            if d.classes != self.classes || d.k == 0 {
                return Err(Error::InvalidArgument(format!(
                    "DFL module at `{}` needs M = {} and k >= 1 (got M = {}, k = {})",
                    d.tap, self.classes, d.classes, d.k
                )));
            }
        }
        if self.g_hidden.contains(&0) {
            return Err(Error::InvalidArgument("G-Stream hidden widths must be positive".into()));
        }
        validate_fusion(&self.fusion, self.stream_count())
    }

    pub fn tap_shape(&self, tap: &str) -> Result<[usize; 3]> {
        let t = self.backbone.tap(tap)?;
        Ok(self.backbone.feature_shapes(self.input_channels, self.input_size)?[t.after])
    }

    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "classes = {}", self.classes);
        for layer in &self.backbone.layers {
            let _ = writeln!(s, "layer = {layer}");
        }
        for tap in &self.backbone.taps {
            let _ = writeln!(s, "tap = {} {}", tap.name, tap.after);
        }
        for d in &self.dfl {
            let side = if d.with_side_branch { "side" } else { "noside" };
            let _ = writeln!(s, "dfl = {} {} {}", d.tap, d.k, side);
        }
        let _ = writeln!(s, "g_hidden = {}", join(&self.g_hidden));
        let _ = writeln!(s, "pool6 = {}", self.pool6);
        let _ = writeln!(s, "fusion = {}", join(&self.fusion));
        s
    }

    /// Parses the line-oriented `key = value` form. Blank lines and `#`
    /// comments are ignored; `layer`, `tap` and `dfl` may repeat.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut input_channels = 3;
        let mut input_size = None;
        let mut classes = None;
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut dfl_raw: Vec<(usize, String, usize, bool)> = Vec::new();
        let mut g_hidden = Vec::new();
        let mut pool6 = PoolMode::Gmp;
        let mut fusion = None;

        for (lineno, key, value) in config_entries(text)? {
            let err = |detail: String| Error::Config { line: lineno, detail };
            match key {
                "input_channels" => input_channels = parse_num(value).map_err(err)?,
                "input_size" => input_size = Some(parse_num(value).map_err(err)?),
                "classes" => classes = Some(parse_num(value).map_err(err)?),
                "layer" => layers.push(value.parse().map_err(err)?),
                "tap" => {
                    let mut parts = value.split_whitespace();
                    let (Some(name), Some(after), None) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(err(format!("tap `{value}`: expected `NAME LAYER_INDEX`")));
                    };
                    taps.push(TapPoint {
                        name: name.to_string(),
                        after: parse_num(after).map_err(err)?,
                    });
                }
                "dfl" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    let side = match parts.get(2).copied() {
                        None | Some("side") => true,
                        Some("noside") => false,
                        Some(other) => return Err(err(format!("dfl: unknown flag `{other}`"))),
                    };
                    if parts.len() < 2 || parts.len() > 3 {
                        return Err(err(format!("dfl `{value}`: expected `TAP K [side|noside]`")));
                    }
                    dfl_raw.push((lineno, parts[0].to_string(), parse_num(parts[1]).map_err(err)?, side));
                }
                "g_hidden" => g_hidden = parse_list(value).map_err(err)?,
                "pool6" => pool6 = value.parse().map_err(err)?,
                "fusion" => fusion = Some(parse_list(value).map_err(err)?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }

        let missing = |what: &str| Error::Config {
            line: 0,
            detail: format!("missing required key `{what}`"),
        };
        let classes = classes.ok_or_else(|| missing("classes"))?;
        let dfl: Vec<DflModuleSpec> = dfl_raw
            .into_iter()
            .map(|(_, tap, k, with_side_branch)| DflModuleSpec {
                tap,
                classes,
                k,
                with_side_branch,
            })
            .collect();
        let mut spec = ModelSpec {
            input_channels,
            input_size: input_size.ok_or_else(|| missing("input_size"))?,
            classes,
            backbone: BackboneSpec { layers, taps },
            dfl,
            g_hidden,
            pool6,
            fusion: Vec::new(),
        };
        spec.fusion = fusion.unwrap_or_else(|| spec.default_fusion());
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn validate_fusion(weights: &[f64], streams: usize) -> Result<()> {
    if weights.len() != streams {
        return Err(Error::InvalidArgument(format!(
            "{} fusion weights given for {streams} streams",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fusion weights must be non-negative with at least one positive, got {weights:?}"
        )));
    }
    Ok(())
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn config_entries(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            detail: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((i + 1, key.trim(), value.trim()));
    }
    Ok(out)
}

pub fn parse_num<N: FromStr>(s: &str) -> std::result::Result<N, String> {
    s.trim().parse().map_err(|_| format!("invalid number `{s}`"))
}

pub fn parse_list<N: FromStr>(s: &str) -> std::result::Result<Vec<N>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_num).collect()
}

pub fn join<N: fmt::Display>(items: &[N]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
