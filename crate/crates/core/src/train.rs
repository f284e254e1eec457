//! Single-stage end-to-end training with weighted stream losses.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::init::{initialize_filter_bank, InitConfig};
use crate::kernels::softmax_cross_entropy;
use crate::netdef::{build_model, Model, ModelSpec, PoolMode, StreamOutputs, TapeForward};
use crate::tensor::{Element, Tensor};

/// Loss weights for the G-Stream, each P-Stream and each side branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub g: f64,
    pub p: f64,
    pub side: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            g: 1.0,
            p: 1.0,
            side: 0.1,
        }
    }
}

impl LossWeights {
    pub fn scaled(self, c: f64) -> Self {
        LossWeights {
            g: self.g * c,
            p: self.p * c,
            side: self.side * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by 0.1 from this fraction of the epochs on.
    pub lr_decay_at: f64,
    pub loss_weights: LossWeights,
    pub pooling_mode: PoolMode,
    pub use_filter_supervision: bool,
    pub use_nonrandom_init: bool,
    pub init_keep: usize,
    pub init_iou: f64,
    pub init_ridge: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_at: 2.0 / 3.0,
            loss_weights: LossWeights::default(),
            pooling_mode: PoolMode::Gmp,
            use_filter_supervision: true,
            use_nonrandom_init: true,
            init_keep: 5,
            init_iou: 0.1,
            init_ridge: 0.01,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.loss_weights;
        if [w.g, w.p, w.side].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be non-negative, got {w:?}")));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need lr > 0, batch_size >= 1, momentum in [0, 1), weight_decay >= 0 (got lr {}, batch {}, momentum {}, wd {})",
                self.lr, self.batch_size, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn init_config(&self, k: usize) -> InitConfig {
        InitConfig {
            k,
            per_image_keep: self.init_keep,
            iou_threshold: self.init_iou,
            ridge_coeff: self.init_ridge,
            seed: self.seed,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_from = (self.epochs as f64 * self.lr_decay_at).floor() as usize;
        if epoch >= decay_from && self.lr_decay_at < 1.0 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Weighted sum of cross-entropies over all streams; side terms are
/// omitted without filter supervision.
pub fn total_loss<T: Element>(
    outputs: &StreamOutputs<T>,
    label: usize,
    weights: LossWeights,
    use_filter_supervision: bool,
) -> Result<f64> {
    let ce = |z: &Tensor<T>| softmax_cross_entropy(z, label).map(|(l, _)| l.to_f64());
    let mut loss = weights.g * ce(&outputs.g_logits)?;
    for p in &outputs.p_logits {
        loss += weights.p * ce(p)?;
    }
    if use_filter_supervision {
        for s in &outputs.side_logits {
            loss += weights.side * ce(s)?;
        }
    }
    Ok(loss)
}

/// Unweighted per-stream cross-entropies, averaged over modules.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StreamLosses {
    pub g: f64,
    pub p: f64,
    pub side: f64,
    pub total: f64,
}

/// Records the weighted loss on `tape` and returns its handle with the
/// per-stream values.
pub fn loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    fwd: &TapeForward,
    label: usize,
    weights: LossWeights,
    use_filter_supervision: bool,
) -> Result<(Var, StreamLosses)> {
    let mut terms: Vec<(Var, f64)> = vec![(tape.softmax_cross_entropy(fwd.g_logits, label)?, weights.g)];
    let mut losses = StreamLosses::default();
    losses.g = tape.value(terms[0].0).data()[0].to_f64();
    for &p in &fwd.p_logits {
        let l = tape.softmax_cross_entropy(p, label)?;
        losses.p += tape.value(l).data()[0].to_f64() / fwd.p_logits.len() as f64;
        terms.push((l, weights.p));
    }
    for &s in &fwd.side_logits {
        let l = tape.softmax_cross_entropy(s, label)?;
        losses.side += tape.value(l).data()[0].to_f64() / fwd.side_logits.len() as f64;
        if use_filter_supervision {
            terms.push((l, weights.side));
        }
    }
    let mut total: Option<Var> = None;
    for (var, w) in terms {
        let scaled = tape.scale(var, T::from_f64(w));
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = total.expect("the G-Stream term is always present");
    losses.total = tape.value(total).data()[0].to_f64();
    Ok((total, losses))
}

/// Loss and parameter gradients for one sample, in parameter order.
pub fn sample_gradients<T: Element>(
    model: &Model<T>,
    sample: &Sample,
    weights: LossWeights,
    use_filter_supervision: bool,
) -> Result<(Vec<Tensor<T>>, StreamLosses)> {
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, &sample.image.cast::<T>(), true)?;
    let (loss, losses) = loss_on_tape(&mut tape, &fwd, sample.label, weights, use_filter_supervision)?;
    let mut grads = tape.backward(loss)?;
    let params = model.params();
    let out = fwd
        .params
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((out, losses))
}

/// Mean gradient over a batch. Per-sample work may run in parallel; the
/// reduction is always in sample order.
pub fn batch_gradients<T: Element>(
    model: &Model<T>,
    batch: &[&Sample],
    weights: LossWeights,
    use_filter_supervision: bool,
) -> Result<(Vec<Tensor<T>>, StreamLosses)> {
    let per_sample: Vec<(Vec<Tensor<T>>, StreamLosses)> = batch
        .par_iter()
        .map(|s| sample_gradients(model, s, weights, use_filter_supervision))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut sum, first) = iter.next().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let mut losses = first;
    for (grads, l) in iter {
        for (acc, g) in sum.iter_mut().zip(&grads) {
            acc.add_assign(g);
        }
        losses.g += l.g;
        losses.p += l.p;
        losses.side += l.side;
        losses.total += l.total;
    }
    let inv = T::from_f64(1.0 / n);
    sum.iter_mut().for_each(|g| g.scale_assign(inv));
    losses.g /= n;
    losses.p /= n;
    losses.side /= n;
    losses.total /= n;
    Ok((sum, losses))
}

/// SGD with classic momentum: `v = momentum * v + (g + wd * w)`,
/// `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(model: &Model<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) {
        let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for ((param, grad), vel) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// One SGD update without persistent momentum state.
pub fn sgd_step<T: Element>(model: &mut Model<T>, grads: &[Tensor<T>], velocity: &mut Vec<Tensor<T>>, lr: f64, momentum: f64, weight_decay: f64) {
    let mut opt = Sgd {
        momentum,
        weight_decay,
        velocity: std::mem::take(velocity),
    };
    if opt.velocity.is_empty() {
        opt.velocity = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    opt.step(model, grads, lr);
    *velocity = opt.velocity;
}

/// Named test-time stream selections, in report order.
pub const FUSION_SETTINGS: [&str; 4] = ["G-Stream Only", "P-Stream Only", "G + P", "G + P + Side"];

/// Fusion weights for one of [`FUSION_SETTINGS`]; every P-Stream and side
/// branch shares the weight of its kind.
pub fn fusion_weights(spec: &ModelSpec, setting: &str) -> Vec<f64> {
    let (g, p, side) = match setting {
        "G-Stream Only" => (1.0, 0.0, 0.0),
        "P-Stream Only" => (0.0, 1.0, 0.0),
        "G + P" => (1.0, 1.0, 0.0),
        _ => (1.0, 1.0, 0.1),
    };
    let mut w = vec![g];
    w.extend(std::iter::repeat(p).take(spec.dfl.len()));
    w.extend(std::iter::repeat(side).take(spec.side_branches()));
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: StreamLosses,
    /// Test accuracy per [`FUSION_SETTINGS`] entry.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss_total,loss_g,loss_p,loss_side");
        for s in FUSION_SETTINGS {
            let _ = write!(out, ",acc_{}", s.replace([' ', '+', '-'], "").to_lowercase());
        }
        out.push('\n');
        for r in &self.epochs {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.lr, r.losses.total, r.losses.g, r.losses.p, r.losses.side
            );
            for a in &r.accuracy {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains `model` in place. `eval` is scored after every epoch.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_set: &[Sample],
    eval: &[Sample],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    if config.use_filter_supervision && !config.use_nonrandom_init {
        warn!("filter supervision without non-random initialization can converge to degenerate solutions");
    }
    model.spec.pool6 = config.pooling_mode;
    let mut opt = Sgd::new(model, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = StreamLosses::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (grads, l) = batch_gradients(model, &batch, config.loss_weights, config.use_filter_supervision)?;
            opt.step(model, &grads, lr);
            let n = batch.len() as f64;
            sums.g += l.g * n;
            sums.p += l.p * n;
            sums.side += l.side * n;
            sums.total += l.total * n;
        }
        let n = train_set.len() as f64;
        let losses = StreamLosses {
            g: sums.g / n,
            p: sums.p / n,
            side: sums.side / n,
            total: sums.total / n,
        };
        let accuracy = if eval.is_empty() {
            Vec::new()
        } else {
            FUSION_SETTINGS
                .iter()
                .map(|s| evaluate(model, eval, &fusion_weights(&model.spec, s)))
                .collect::<Result<_>>()?
        };
        info!(
            "epoch {epoch}: lr {lr} loss {:.4} (g {:.4} p {:.4} side {:.4}) acc {:?}",
            losses.total, losses.g, losses.p, losses.side, accuracy
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            losses,
            accuracy,
        });
    }
    Ok(history)
}

/// Everything produced by one configured run.
#[derive(Clone, Debug)]
pub struct TrainedRun<T> {
    /// State after initialization, before any update.
    pub initial: Model<T>,
    pub model: Model<T>,
    pub history: History,
}

/// Builds the model (with the clustering-based `conv6` initialization when
/// enabled) and trains it on `dataset.train`, scoring `dataset.test`.
pub fn run<T: Element>(spec: &ModelSpec, dataset: &Dataset, config: &TrainConfig) -> Result<TrainedRun<T>> {
    let mut spec = spec.clone();
    spec.pool6 = config.pooling_mode;
    let random: Model<T> = build_model(&spec, &[], config.seed)?;
    let initial = if config.use_nonrandom_init {
        let banks = spec
            .dfl
            .iter()
            .map(|d| {
                initialize_filter_bank(&dataset.train, &random, &d.tap, spec.classes, &config.init_config(d.k)).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        build_model(&spec, &banks, config.seed)?
    } else {
        random
    };
    let mut model = initial.clone();
    let history = train(&mut model, &dataset.train, &dataset.test, config)?;
    Ok(TrainedRun {
        initial,
        model,
        history,
    })
}

/// One line of an ablation report.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub setting: String,
    pub pooling: PoolMode,
    pub init: bool,
    pub supervision: bool,
    pub fusion: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn accuracy(&self, table: &str, setting: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.table == table && r.setting == setting)
            .map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,setting,pooling,init,supervision,fusion,accuracy\n");
        for r in &self.rows {
            let fusion: Vec<String> = r.fusion.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.table,
                r.setting,
                r.pooling,
                r.init,
                r.supervision,
                fusion.join(" "),
                r.accuracy
            );
        }
        out
    }
}

pub const STREAMS_TABLE: &str = "streams";
pub const POOLING_TABLE: &str = "pooling";
pub const INIT_TABLE: &str = "init_supervision";

/// Label of an init/supervision toggle row.
pub fn toggle_label(init: bool, supervision: bool) -> String {
    format!(
        "{} / {}",
        if init { "init" } else { "-" },
        if supervision { "supervision" } else { "-" }
    )
}

/// Fusion used to score a trained configuration: the default weights, with
/// the side branch dropped when it was not supervised during training.
pub fn config_fusion(spec: &ModelSpec, config: &TrainConfig) -> Vec<f64> {
    let setting = if config.use_filter_supervision {
        "G + P + Side"
    } else {
        "G + P"
    };
    fusion_weights(spec, setting)
}

fn final_accuracy<T: Element>(run: &TrainedRun<T>, test: &[Sample], fusion: &[f64]) -> Result<f64> {
    evaluate(&run.model, test, fusion)
}

/// Trains the ablation grid from `base` (whose pooling and toggles are
/// overridden per cell) and scores every cell on `dataset.test`.
pub fn ablate<T: Element>(spec: &ModelSpec, dataset: &Dataset, base: &TrainConfig) -> Result<AblationReport> {
    Ok(ablate_with_full_run::<T>(spec, dataset, base)?.0)
}

/// [`ablate`], also returning the full (GMP, init, supervision) run.
pub fn ablate_with_full_run<T: Element>(
    spec: &ModelSpec,
    dataset: &Dataset,
    base: &TrainConfig,
) -> Result<(AblationReport, TrainedRun<T>)> {
    let cell = |pooling: PoolMode, init: bool, supervision: bool| TrainConfig {
        pooling_mode: pooling,
        use_nonrandom_init: init,
        use_filter_supervision: supervision,
        ..base.clone()
    };
    let mut report = AblationReport::default();

    let full_cfg = cell(PoolMode::Gmp, true, true);
    info!("ablation: full model");
    let full = run::<T>(spec, dataset, &full_cfg)?;
    for setting in FUSION_SETTINGS {
        let fusion = fusion_weights(&full.model.spec, setting);
        report.rows.push(AblationRow {
            table: STREAMS_TABLE,
            setting: setting.to_string(),
            pooling: PoolMode::Gmp,
            init: true,
            supervision: true,
            accuracy: final_accuracy(&full, &dataset.test, &fusion)?,
            fusion,
        });
    }
    let full_fusion = config_fusion(&full.model.spec, &full_cfg);
    let full_acc = final_accuracy(&full, &dataset.test, &full_fusion)?;

    for pooling in [PoolMode::Gmp, PoolMode::Gap] {
        let acc = if pooling == PoolMode::Gmp {
            full_acc
        } else {
            info!("ablation: GAP pooling");
            let gap = run::<T>(spec, dataset, &cell(PoolMode::Gap, true, true))?;
            final_accuracy(&gap, &dataset.test, &full_fusion)?
        };
        report.rows.push(AblationRow {
            table: POOLING_TABLE,
            setting: pooling.to_string().to_uppercase(),
            pooling,
            init: true,
            supervision: true,
            fusion: full_fusion.clone(),
            accuracy: acc,
        });
    }

    for (init, supervision) in [(false, false), (true, false), (true, true), (false, true)] {
        let cfg = cell(PoolMode::Gmp, init, supervision);
        let fusion = config_fusion(&full.model.spec, &cfg);
        let acc = if init && supervision {
            full_acc
        } else {
            info!("ablation: init {init}, supervision {supervision}");
            let r = run::<T>(spec, dataset, &cfg)?;
            final_accuracy(&r, &dataset.test, &fusion)?
        };
        report.rows.push(AblationRow {
            table: INIT_TABLE,
            setting: toggle_label(init, supervision),
            pooling: PoolMode::Gmp,
            init,
            supervision,
            fusion,
            accuracy: acc,
        });
    }
    Ok((report, full))
}
