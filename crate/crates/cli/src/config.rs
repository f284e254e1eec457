//! Run configuration: a flat `key = value` file whose every key is also a
//! command-line flag.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dfl_core::data::SynthSpec;
use dfl_core::netdef::spec::{config_entries, parse_list, parse_num};
use dfl_core::netdef::{ModelSpec, PoolMode};
use dfl_core::train::{LossWeights, TrainConfig};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Every configuration key with its help text, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data generation, initialization and shuffling"),
    ("dtype", "working precision: f32 or f64"),
    ("model", "`tinynet` or a path to a model spec file"),
    ("k", "filters per class in each DFL module"),
    ("data", "`synthetic` or a dataset directory written by gen-data"),
    ("classes", "number of classes"),
    ("image_size", "image side in pixels"),
    ("per_class_train", "synthetic training images per class"),
    ("per_class_test", "synthetic test images per class"),
    ("patch_size", "side of the planted patch"),
    ("background_amplitude", "strength of the shared background waves"),
    ("global_cue", "strength of the class-dependent background tint"),
    ("distractors", "untextured squares in signature colors per image"),
    ("min_contrast", "lower bound of the planted patch's blend factor"),
    ("jitter", "fraction of the free range the patch position may vary over"),
    ("noise", "standard deviation of per-pixel gaussian noise"),
    ("epochs", "training epochs"),
    ("batch_size", "samples per SGD step"),
    ("lr", "initial learning rate"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("lr_decay_at", "fraction of epochs after which lr is multiplied by 0.1"),
    ("loss_weights", "loss weights g,p,side"),
    ("pooling", "pool6 mode: gmp or gap"),
    ("init", "clustering-based conv6 initialization (true/false)"),
    ("supervision", "side-branch filter supervision (true/false)"),
    ("init_keep", "patch candidates kept per image"),
    ("init_iou", "NMS IoU threshold for patch candidates"),
    ("init_ridge", "whitening ridge as a fraction of mean variance"),
    ("fusion_weights", "test-time stream weights g,p,side"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<(String, String)>,
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthSpec::desk(t.seed);
        let w = t.loss_weights;
        let values: Vec<(&str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("dtype", "f32".into()),
            ("model", "tinynet".into()),
            ("k", "10".into()),
            ("data", "synthetic".into()),
            ("classes", s.classes.to_string()),
            ("image_size", s.image_size.to_string()),
            ("per_class_train", s.per_class_train.to_string()),
            ("per_class_test", s.per_class_test.to_string()),
            ("patch_size", s.patch_size.to_string()),
            ("background_amplitude", s.background_amplitude.to_string()),
            ("global_cue", s.global_cue.to_string()),
            ("distractors", s.distractors.to_string()),
            ("min_contrast", s.min_contrast.to_string()),
            ("jitter", s.jitter.to_string()),
            ("noise", s.noise.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lr_decay_at", t.lr_decay_at.to_string()),
            ("loss_weights", list(&[w.g, w.p, w.side])),
            ("pooling", t.pooling_mode.to_string()),
            ("init", t.use_nonrandom_init.to_string()),
            ("supervision", t.use_filter_supervision.to_string()),
            ("init_keep", t.init_keep.to_string()),
            ("init_iou", t.init_iou.to_string()),
            ("init_ridge", t.init_ridge.to_string()),
            ("fusion_weights", list(&[1.0, 1.0, 0.1])),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        RunConfig {
            values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> &str {
        &self
            .values
            .iter()
            .find(|(k, _)| k == key)
            .unwrap_or_else(|| panic!("unknown config key {key}"))
            .1
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| k == key)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
        slot.1 = value.trim().to_string();
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        for (line, key, value) in config_entries(&text)? {
            self.set(key, value)
                .map_err(|e| CliError::Usage(format!("{}:{line}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Canonical `key = value` text, one line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Short content hash of the canonical text plus `extra` (command name
    /// and command-specific inputs).
    pub fn hash(&self, extra: &str) -> String {
        let digest = Sha256::digest(format!("{}\n{extra}", self.to_text()).as_bytes());
        format!("{digest:x}")[..12].to_string()
    }

    fn parse<N: std::str::FromStr>(&self, key: &str) -> Result<N, CliError> {
        parse_num(self.get(key)).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(CliError::Usage(format!("config key `{key}`: expected true/false, got `{v}`"))),
        }
    }

    fn triple(&self, key: &str) -> Result<[f64; 3], CliError> {
        let v: Vec<f64> = parse_list(self.get(key)).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))?;
        <[f64; 3]>::try_from(v.as_slice())
            .map_err(|_| CliError::Usage(format!("config key `{key}` needs three comma-separated values")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn use_f64(&self) -> Result<bool, CliError> {
        match self.get("dtype") {
            "f32" => Ok(false),
            "f64" => Ok(true),
            v => Err(CliError::Usage(format!("config key `dtype`: expected f32 or f64, got `{v}`"))),
        }
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, CliError> {
        let mut s = SynthSpec::with_classes(self.parse("classes")?, self.seed()?);
        s.image_size = self.parse("image_size")?;
        s.per_class_train = self.parse("per_class_train")?;
        s.per_class_test = self.parse("per_class_test")?;
        s.patch_size = self.parse("patch_size")?;
        s.background_amplitude = self.parse("background_amplitude")?;
        s.global_cue = self.parse("global_cue")?;
        s.distractors = self.parse("distractors")?;
        s.min_contrast = self.parse("min_contrast")?;
        s.jitter = self.parse("jitter")?;
        s.noise = self.parse("noise")?;
        s.validate()?;
        Ok(s)
    }

    /// Dataset directory, or `None` for synthetic data.
    pub fn data_dir(&self) -> Option<PathBuf> {
        match self.get("data") {
            "synthetic" => None,
            dir => Some(PathBuf::from(dir)),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let classes: usize = self.parse("classes")?;
        let k: usize = self.parse("k")?;
        let mut spec = match self.get("model") {
            "tinynet" => ModelSpec::tinynet(classes, k),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(PathBuf::from(path), e))?;
                ModelSpec::from_config(&text)?
            }
        };
        spec.input_size = self.parse("image_size")?;
        spec.pool6 = self.pooling()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn pooling(&self) -> Result<PoolMode, CliError> {
        self.get("pooling").parse().map_err(|e: String| CliError::Usage(format!("config key `pooling`: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let [g, p, side] = self.triple("loss_weights")?;
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight_decay")?,
            lr_decay_at: self.parse("lr_decay_at")?,
            loss_weights: LossWeights { g, p, side },
            pooling_mode: self.pooling()?,
            use_filter_supervision: self.flag("supervision")?,
            use_nonrandom_init: self.flag("init")?,
            init_keep: self.parse("init_keep")?,
            init_iou: self.parse("init_iou")?,
            init_ridge: self.parse("init_ridge")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fusion weights expanded to every stream of `spec`: each P-Stream
    /// takes the `p` weight and each side branch the `side` weight.
    pub fn fusion(&self, spec: &ModelSpec) -> Result<Vec<f64>, CliError> {
        let [g, p, side] = self.triple("fusion_weights")?;
        let mut w = vec![g];
        w.extend(std::iter::repeat(p).take(spec.dfl.len()));
        w.extend(std::iter::repeat(side).take(spec.side_branches()));
        Ok(w)
    }
}
