//! The two-stream network: backbone, DFL modules and G-Stream head.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::netdef::spec::{LayerKind, ModelSpec, PoolMode};
use crate::tensor::{Element, Tensor};

/// The `k*M` 1x1 patch-detector filters of one DFL module (`conv6`).
/// Filter `j` belongs to class `j / k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T = f64> {
    pub weight: Tensor<T>,
    pub k: usize,
    pub classes: usize,
}

impl<T: Element> FilterBank<T> {
    pub fn new(weight: Tensor<T>, k: usize, classes: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[0] != k * classes || s[2] != 1 || s[3] != 1 {
            return Err(Error::shape(
                "filter bank",
                format!("expected [{}, C, 1, 1] for k = {k}, M = {classes}, got {s:?}", k * classes),
            ));
        }
        Ok(FilterBank { weight, k, classes })
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn class_of_filter(&self, filter: usize) -> usize {
        filter / self.k
    }

    pub fn filters_of_class(&self, class: usize) -> Range<usize> {
        class * self.k..(class + 1) * self.k
    }

    /// Row `j` of the bank as a `C`-vector.
    pub fn filter(&self, j: usize) -> &[T] {
        let c = self.channels();
        &self.weight.data()[j * c..(j + 1) * c]
    }
}

/// Parameters of one DFL module: `conv6` plus the P-Stream classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DflHead<T = f64> {
    pub conv6: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f64> {
    pub spec: ModelSpec,
    /// Convolution weights, indexed by backbone layer (`None` for non-conv).
    pub backbone: Vec<Option<Tensor<T>>>,
    pub dfl: Vec<DflHead<T>>,
    /// G-Stream FC stack as `(weight, bias)` pairs.
    pub g_fc: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Per-sample outputs of every stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutputs<T = f64> {
    pub g_logits: Tensor<T>,
    pub p_logits: Vec<Tensor<T>>,
    pub side_logits: Vec<Tensor<T>>,
    pub pool6: Vec<Tensor<T>>,
    /// Location of each `conv6` filter's maximum response, per DFL module.
    pub conv6_argmax: Vec<Vec<(usize, usize)>>,
}

impl<T: Element> StreamOutputs<T> {
    /// Logit streams in fusion order `[g, p_1..p_n, side_1..side_n]`.
    pub fn streams(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.g_logits)
            .chain(&self.p_logits)
            .chain(&self.side_logits)
            .collect()
    }
}

/// Outputs plus the intermediate maps analyses need.
#[derive(Clone, Debug)]
pub struct Trace<T = f64> {
    pub outputs: StreamOutputs<T>,
    /// Feature map at each DFL module's tap point.
    pub taps: Vec<Tensor<T>>,
    /// Raw `conv6` response maps `[k*M, H, W]`.
    pub conv6: Vec<Tensor<T>>,
}

/// Tape handles produced by [`Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    /// Parameter leaves in [`Model::param_names`] order.
    pub params: Vec<Var>,
    pub image: Var,
    pub taps: Vec<Var>,
    pub conv6: Vec<Var>,
    pub pool6: Vec<Var>,
    pub g_logits: Var,
    pub p_logits: Vec<Var>,
    pub side_logits: Vec<Var>,
}

fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Builds a model from `spec`. Unspecified weights are drawn from
/// `U(-b, b)` with `b` scaled by fan-in: `sqrt(6 / fan_in)` for backbone
/// convolutions, `sqrt(3 / fan_in)` for `conv6` (unit expected row norm)
/// and `1 / sqrt(fan_in)` for FC layers. Biases start at zero.
pub fn build_model<T: Element>(
    spec: &ModelSpec,
    bank_init: &[Option<FilterBank<T>>],
    seed: u64,
) -> Result<Model<T>> {
    spec.validate()?;
    if !bank_init.is_empty() && bank_init.len() != spec.dfl.len() {
        return Err(Error::InvalidArgument(format!(
            "{} filter banks given for {} DFL modules",
            bank_init.len(),
            spec.dfl.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = spec.backbone.feature_shapes(spec.input_channels, spec.input_size)?;

    let mut backbone = Vec::with_capacity(spec.backbone.layers.len());
    let mut channels = spec.input_channels;
    for layer in &spec.backbone.layers {
        if layer.kind == LayerKind::Conv {
            let fan_in = channels * layer.kernel * layer.kernel;
            let shape = [layer.out_channels, channels, layer.kernel, layer.kernel];
            backbone.push(Some(uniform(&mut rng, &shape, (6.0 / fan_in as f64).sqrt())));
            channels = layer.out_channels;
        } else {
            backbone.push(None);
        }
    }

    let mut dfl = Vec::with_capacity(spec.dfl.len());
    for (j, module) in spec.dfl.iter().enumerate() {
        let tap_channels = spec.tap_shape(&module.tap)?[0];
        let filters = module.filters();
        let random_conv6 = uniform(&mut rng, &[filters, tap_channels, 1, 1], (3.0 / tap_channels as f64).sqrt());
        let conv6 = match bank_init.get(j).and_then(Option::as_ref) {
            Some(bank) => {
                if bank.weight.shape() != [filters, tap_channels, 1, 1] {
                    return Err(Error::shape(
                        "build_model",
                        format!(
                            "filter bank {:?} does not match (k*M, C_tap) = ({filters}, {tap_channels})",
                            bank.weight.shape()
                        ),
                    ));
                }
                bank.weight.clone()
            }
            None => random_conv6,
        };
        dfl.push(DflHead {
            conv6,
            fc_weight: uniform(&mut rng, &[spec.classes, filters], 1.0 / (filters as f64).sqrt()),
            fc_bias: Tensor::zeros(&[spec.classes]),
        });
    }

    let mut g_fc = Vec::new();
    let mut width = shapes.last().map_or(spec.input_channels, |s| s[0]);
    for &out in spec.g_hidden.iter().chain(std::iter::once(&spec.classes)) {
        g_fc.push((
            uniform(&mut rng, &[out, width], 1.0 / (width as f64).sqrt()),
            Tensor::zeros(&[out]),
        ));
        width = out;
    }

    Ok(Model {
        spec: spec.clone(),
        backbone,
        dfl,
        g_fc,
    })
}

impl<T: Element> Model<T> {
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, w) in self.backbone.iter().enumerate() {
            if w.is_some() {
                names.push(format!("backbone.{i}.weight"));
            }
        }
        for j in 0..self.dfl.len() {
            names.push(format!("dfl{j}.conv6"));
            names.push(format!("dfl{j}.fc.weight"));
            names.push(format!("dfl{j}.fc.bias"));
        }
        for l in 0..self.g_fc.len() {
            names.push(format!("g.fc{l}.weight"));
            names.push(format!("g.fc{l}.bias"));
        }
        names
    }

    /// All parameters in canonical order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.backbone.iter().flatten().collect();
        for h in &self.dfl {
            out.extend([&h.conv6, &h.fc_weight, &h.fc_bias]);
        }
        for (w, b) in &self.g_fc {
            out.extend([w, b]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.backbone.iter_mut().flatten().collect();
        for h in &mut self.dfl {
            out.extend([&mut h.conv6, &mut h.fc_weight, &mut h.fc_bias]);
        }
        for (w, b) in &mut self.g_fc {
            out.extend([w, b]);
        }
        out
    }

    /// Index of the last backbone layer feeding tap `name`.
    pub fn tap_layer(&self, name: &str) -> Result<usize> {
        Ok(self.spec.backbone.tap(name)?.after)
    }

    pub fn filter_bank(&self, module: usize) -> FilterBank<T> {
        let d = &self.spec.dfl[module];
        FilterBank {
            weight: self.dfl[module].conv6.clone(),
            k: d.k,
            classes: d.classes,
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = &self.spec;
        if image.shape() != [s.input_channels, s.input_size, s.input_size] {
            return Err(Error::shape(
                "forward",
                format!(
                    "image {:?} does not match input [{}, {}, {}]",
                    image.shape(),
                    s.input_channels,
                    s.input_size,
                    s.input_size
                ),
            ));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`. With `requires_grad`, every
    /// parameter leaf collects a gradient on backward.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, image: &Tensor<T>, requires_grad: bool) -> Result<TapeForward> {
        self.check_image(image)?;
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect();
        let image_var = tape.leaf(image.clone(), false);

        // backbone, remembering every layer output for the taps
        let mut cursor = 0;
        let mut x = image_var;
        let mut layer_out = Vec::with_capacity(self.spec.backbone.layers.len());
        for layer in &self.spec.backbone.layers {
            x = match layer.kind {
                LayerKind::Conv => {
                    let w = params[cursor];
                    cursor += 1;
                    tape.conv2d(x, w, layer.stride, layer.pad)?
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::Pool => tape.max_pool2d(x, layer.kernel, layer.stride, layer.pad)?,
            };
            layer_out.push(x);
        }
        let backbone_out = x;

        let mut fwd = TapeForward {
            params: Vec::new(),
            image: image_var,
            taps: Vec::new(),
            conv6: Vec::new(),
            pool6: Vec::new(),
            g_logits: backbone_out,
            p_logits: Vec::new(),
            side_logits: Vec::new(),
        };
        for module in &self.spec.dfl {
            let tap = layer_out[self.spec.backbone.tap(&module.tap)?.after];
            let (conv6_w, fc_w, fc_b) = (params[cursor], params[cursor + 1], params[cursor + 2]);
            cursor += 3;
            let conv6 = tape.conv2d(tap, conv6_w, 1, 0)?;
            let pool6 = match self.spec.pool6 {
                PoolMode::Gmp => tape.global_max_pool(conv6)?,
                PoolMode::Gap => tape.global_avg_pool(conv6)?,
            };
            fwd.p_logits.push(tape.fully_connected(pool6, fc_w, fc_b)?);
            if module.with_side_branch {
                fwd.side_logits.push(tape.cross_channel_avg_pool(pool6, module.k)?);
            }
            fwd.taps.push(tap);
            fwd.conv6.push(conv6);
            fwd.pool6.push(pool6);
        }

        let mut g = tape.global_avg_pool(backbone_out)?;
        for l in 0..self.g_fc.len() {
            if l > 0 {
                g = tape.relu(g);
            }
            g = tape.fully_connected(g, params[cursor], params[cursor + 1])?;
            cursor += 2;
        }
        fwd.g_logits = g;
        fwd.params = params;
        Ok(fwd)
    }

    pub(crate) fn outputs_from_tape(&self, tape: &Tape<T>, fwd: &TapeForward) -> StreamOutputs<T> {
        let conv6_argmax = fwd
            .conv6
            .iter()
            .zip(&fwd.pool6)
            .map(|(&c, &p)| match tape.gmp_argmax(p) {
                Some(arg) => arg.to_vec(),
                None => crate::kernels::global_max_pool(tape.value(c))
                    .expect("conv6 map is 3-d")
                    .1,
            })
            .collect();
        StreamOutputs {
            g_logits: tape.value(fwd.g_logits).clone(),
            p_logits: fwd.p_logits.iter().map(|&v| tape.value(v).clone()).collect(),
            side_logits: fwd.side_logits.iter().map(|&v| tape.value(v).clone()).collect(),
            pool6: fwd.pool6.iter().map(|&v| tape.value(v).clone()).collect(),
            conv6_argmax,
        }
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<StreamOutputs<T>> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, image, false)?;
        Ok(self.outputs_from_tape(&tape, &fwd))
    }

    pub fn trace(&self, image: &Tensor<T>) -> Result<Trace<T>> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, image, false)?;
        Ok(Trace {
            outputs: self.outputs_from_tape(&tape, &fwd),
            taps: fwd.taps.iter().map(|&v| tape.value(v).clone()).collect(),
            conv6: fwd.conv6.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Runs the backbone up to and including layer `after`.
    pub fn backbone_features(&self, image: &Tensor<T>, after: usize) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let mut x = image.clone();
        for (layer, weight) in self.spec.backbone.layers.iter().zip(&self.backbone).take(after + 1) {
            x = match layer.kind {
                LayerKind::Conv => crate::kernels::conv2d(&x, weight.as_ref().expect("conv weight"), layer.stride, layer.pad)?,
                LayerKind::Relu => crate::kernels::relu(&x),
                LayerKind::Pool => crate::kernels::max_pool2d(&x, layer.kernel, layer.stride, layer.pad)?.0,
            };
        }
        Ok(x)
    }

    pub fn tap_features(&self, image: &Tensor<T>, tap: &str) -> Result<Tensor<T>> {
        self.backbone_features(image, self.tap_layer(tap)?)
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            backbone: self.backbone.iter().map(|w| w.as_ref().map(Tensor::cast)).collect(),
            dfl: self
                .dfl
                .iter()
                .map(|h| DflHead {
                    conv6: h.conv6.cast(),
                    fc_weight: h.fc_weight.cast(),
                    fc_bias: h.fc_bias.cast(),
                })
                .collect(),
            g_fc: self.g_fc.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        }
    }
}
