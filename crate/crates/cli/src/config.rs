//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use care_core::model::{CareConfig, Variant};
use care_core::synth::TaskSpec;
use care_core::train::Hyperparams;

use crate::error::CliError;

/// Every accepted key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_dir", "dataset directory (written by synth-gen, read by train/eval-unseen/ablate)"),
    ("out_dir", "directory receiving reports and artifacts"),
    ("checkpoint", "checkpoint file for eval-unseen"),
    ("classes", "action classes M"),
    ("seen_domains", "seen domains K"),
    ("unseen_domains", "held-out domains"),
    ("samples_per_class", "clips per (domain, class)"),
    ("channels", "clip channels"),
    ("frames", "clip frames"),
    ("height", "clip height"),
    ("width", "clip width"),
    ("class_signal", "class signal amplitude"),
    ("domain_signature", "domain signature amplitude"),
    ("noise", "pixel noise standard deviation"),
    ("data_seed", "seed of the synthetic benchmark"),
    ("audit_probe", "instances per (domain, class) in the signal audit"),
    ("base_shape", "backbone output ch,t,h,w"),
    ("elab_shape", "elaborated feature ch,h,w"),
    ("attention_heads", "heads per elaborator attention block"),
    ("relevance_kernel", "odd kernel size of the relevance evaluator"),
    ("second_order_meta", "differentiate through the inner meta step"),
    ("variant", "full|no_specific|no_general|scalar_weights"),
    ("lr_backbone", "backbone learning rate"),
    ("lr_other", "learning rate of every other group"),
    ("epochs", "training epochs"),
    ("decay_epoch", "first epoch with decayed rates"),
    ("decay_factor", "rate multiplier after decay_epoch"),
    ("alpha", "inner meta step size"),
    ("beta", "outer meta step size"),
    ("lambda", "meta-test weight in the outer update"),
    ("batch_size", "samples per domain per iteration"),
    ("clip_norm", "base gradient norm cap, or none"),
    ("seed", "training seed (first seed for ablate and split)"),
    ("seeds", "training seeds per ablation variant"),
    ("task", "metrics task: actions|grounding|pose"),
    ("gt", "ground-truth annotation file"),
    ("pred", "prediction file"),
    ("counts", "per-class training counts CSV (class,count)"),
    ("head_threshold", "classes with more training clips are head"),
    ("tail_threshold", "classes with fewer training clips are tail"),
    ("recall_n", "top-n predictions considered by recall"),
    ("iou_thresholds", "comma-separated IoU thresholds"),
    ("pck_alpha", "PCK distance factor"),
    ("parse_mode", "strict|lenient annotation parsing"),
    ("input", "action annotation file to split"),
    ("split_ratio", "train fraction per class"),
    ("gradcheck_trials", "random inputs per primitive check"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricTask {
    Actions,
    Grounding,
    Pose,
}

impl MetricTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::Actions => "actions",
            Self::Grounding => "grounding",
            Self::Pose => "pose",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub task_spec: TaskSpec,
    pub audit_probe: usize,
    pub base_shape: [usize; 4],
    pub elab_shape: [usize; 3],
    pub attention_heads: usize,
    pub relevance_kernel: usize,
    pub second_order_meta: bool,
    pub variant: Variant,
    pub hyperparams: Hyperparams,
    pub seeds: usize,
    pub task: Option<MetricTask>,
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub head_threshold: u64,
    pub tail_threshold: u64,
    pub recall_n: usize,
    pub iou_thresholds: Vec<f64>,
    pub pck_alpha: f64,
    pub strict: bool,
    pub input: Option<PathBuf>,
    pub split_ratio: f64,
    pub gradcheck_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = CareConfig::desk();
        Self {
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            task_spec: TaskSpec::default(),
            audit_probe: 8,
            base_shape: model.base_shape,
            elab_shape: model.elab_shape,
            attention_heads: model.attention_heads,
            relevance_kernel: model.relevance_kernel,
            second_order_meta: model.second_order_meta,
            variant: Variant::Full,
            // Short desk schedule; see README for the reference schedule.
            hyperparams: Hyperparams {
                lr_backbone: 0.05,
                lr_other: 0.05,
                epochs: 8,
                decay_epoch: 6,
                decay_factor: 0.1,
                alpha: 0.05,
                beta: 0.05,
                lambda: 0.5,
                batch_size: 4,
                clip_norm: Some(5.0),
                seed: 0,
            },
            seeds: 5,
            task: None,
            gt: None,
            pred: None,
            counts: None,
            head_threshold: 500,
            tail_threshold: 100,
            recall_n: 1,
            iou_thresholds: vec![0.1, 0.3, 0.5, 0.7],
            pck_alpha: 0.05,
            strict: true,
            input: None,
            split_ratio: 0.8,
            gradcheck_trials: 10,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn array<const N: usize>(key: &str, v: &str) -> Result<[usize; N], CliError> {
    let items: Vec<usize> = list(key, v)?;
    items
        .try_into()
        .map_err(|items: Vec<usize>| CliError::Config(format!("{key}: expected {N} comma-separated values, got {}", items.len())))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let spec = &mut self.task_spec;
        let hp = &mut self.hyperparams;
        match key {
            "data_dir" => self.data_dir = path(v),
            "out_dir" => self.out_dir = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "classes" => spec.classes = num(key, v)?,
            "seen_domains" => spec.seen_domains = num(key, v)?,
            "unseen_domains" => spec.unseen_domains = num(key, v)?,
            "samples_per_class" => spec.samples_per_class = num(key, v)?,
            "channels" => spec.channels = num(key, v)?,
            "frames" => spec.frames = num(key, v)?,
            "height" => spec.height = num(key, v)?,
            "width" => spec.width = num(key, v)?,
            "class_signal" => spec.class_signal = num(key, v)?,
            "domain_signature" => spec.domain_signature = num(key, v)?,
            "noise" => spec.noise = num(key, v)?,
            "data_seed" => spec.seed = num(key, v)?,
            "audit_probe" => self.audit_probe = num(key, v)?,
            "base_shape" => self.base_shape = array(key, v)?,
            "elab_shape" => self.elab_shape = array(key, v)?,
            "attention_heads" => self.attention_heads = num(key, v)?,
            "relevance_kernel" => self.relevance_kernel = num(key, v)?,
            "second_order_meta" => self.second_order_meta = num(key, v)?,
            "variant" => self.variant = v.parse().map_err(|e: care_core::Error| CliError::Config(format!("variant: {e}")))?,
            "lr_backbone" => hp.lr_backbone = num(key, v)?,
            "lr_other" => hp.lr_other = num(key, v)?,
            "epochs" => hp.epochs = num(key, v)?,
            "decay_epoch" => hp.decay_epoch = num(key, v)?,
            "decay_factor" => hp.decay_factor = num(key, v)?,
            "alpha" => hp.alpha = num(key, v)?,
            "beta" => hp.beta = num(key, v)?,
            "lambda" => hp.lambda = num(key, v)?,
            "batch_size" => hp.batch_size = num(key, v)?,
            "clip_norm" => hp.clip_norm = if v == "none" { None } else { Some(num(key, v)?) },
            "seed" => hp.seed = num(key, v)?,
            "seeds" => self.seeds = num(key, v)?,
            "task" => {
                self.task = Some(match v {
                    "" => {
                        self.task = None;
                        return Ok(());
                    }
                    "actions" => MetricTask::Actions,
                    "grounding" => MetricTask::Grounding,
                    "pose" => MetricTask::Pose,
                    _ => return Err(CliError::Config(format!("task: expected actions|grounding|pose, got {v:?}"))),
                })
            }
            "gt" => self.gt = path(v),
            "pred" => self.pred = path(v),
            "counts" => self.counts = path(v),
            "head_threshold" => self.head_threshold = num(key, v)?,
            "tail_threshold" => self.tail_threshold = num(key, v)?,
            "recall_n" => self.recall_n = num(key, v)?,
            "iou_thresholds" => self.iou_thresholds = list(key, v)?,
            "pck_alpha" => self.pck_alpha = num(key, v)?,
            "parse_mode" => {
                self.strict = match v {
                    "strict" => true,
                    "lenient" => false,
                    _ => return Err(CliError::Config(format!("parse_mode: expected strict|lenient, got {v:?}"))),
                }
            }
            "input" => self.input = path(v),
            "split_ratio" => self.split_ratio = num(key, v)?,
            "gradcheck_trials" => self.gradcheck_trials = num(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// The fully resolved configuration, one entry per key in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let spec = &self.task_spec;
        let hp = &self.hyperparams;
        KEYS.iter()
            .map(|&(key, _)| {
                let v = match key {
                    "data_dir" => show_path(&self.data_dir),
                    "out_dir" => show_path(&self.out_dir),
                    "checkpoint" => show_path(&self.checkpoint),
                    "classes" => spec.classes.to_string(),
                    "seen_domains" => spec.seen_domains.to_string(),
                    "unseen_domains" => spec.unseen_domains.to_string(),
                    "samples_per_class" => spec.samples_per_class.to_string(),
                    "channels" => spec.channels.to_string(),
                    "frames" => spec.frames.to_string(),
                    "height" => spec.height.to_string(),
                    "width" => spec.width.to_string(),
                    "class_signal" => spec.class_signal.to_string(),
                    "domain_signature" => spec.domain_signature.to_string(),
                    "noise" => spec.noise.to_string(),
                    "data_seed" => spec.seed.to_string(),
                    "audit_probe" => self.audit_probe.to_string(),
                    "base_shape" => join(&self.base_shape),
                    "elab_shape" => join(&self.elab_shape),
                    "attention_heads" => self.attention_heads.to_string(),
                    "relevance_kernel" => self.relevance_kernel.to_string(),
                    "second_order_meta" => self.second_order_meta.to_string(),
                    "variant" => self.variant.name().to_string(),
                    "lr_backbone" => hp.lr_backbone.to_string(),
                    "lr_other" => hp.lr_other.to_string(),
                    "epochs" => hp.epochs.to_string(),
                    "decay_epoch" => hp.decay_epoch.to_string(),
                    "decay_factor" => hp.decay_factor.to_string(),
                    "alpha" => hp.alpha.to_string(),
                    "beta" => hp.beta.to_string(),
                    "lambda" => hp.lambda.to_string(),
                    "batch_size" => hp.batch_size.to_string(),
                    "clip_norm" => hp.clip_norm.map_or("none".into(), |c| c.to_string()),
                    "seed" => hp.seed.to_string(),
                    "seeds" => self.seeds.to_string(),
                    "task" => self.task.map(|t| t.name().to_string()).unwrap_or_default(),
                    "gt" => show_path(&self.gt),
                    "pred" => show_path(&self.pred),
                    "counts" => show_path(&self.counts),
                    "head_threshold" => self.head_threshold.to_string(),
                    "tail_threshold" => self.tail_threshold.to_string(),
                    "recall_n" => self.recall_n.to_string(),
                    "iou_thresholds" => join(&self.iou_thresholds),
                    "pck_alpha" => self.pck_alpha.to_string(),
                    "parse_mode" => if self.strict { "strict" } else { "lenient" }.to_string(),
                    "input" => show_path(&self.input),
                    "split_ratio" => self.split_ratio.to_string(),
                    "gradcheck_trials" => self.gradcheck_trials.to_string(),
                    _ => unreachable!("KEYS and entries() list the same keys"),
                };
                (key, v)
            })
            .collect()
    }

    /// Model configuration for a dataset described by `spec`.
    pub fn care_config(&self, spec: &TaskSpec, variant: Variant) -> CareConfig {
        CareConfig {
            domains: spec.seen_domains,
            classes: spec.classes,
            input_shape: spec.clip_shape(),
            base_shape: self.base_shape,
            elab_shape: self.elab_shape,
            attention_heads: self.attention_heads,
            weight_mode: variant.weight_mode(),
            second_order_meta: self.second_order_meta,
            relevance_kernel: self.relevance_kernel,
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| CliError::Config(format!("{key} is required (--{})", key.replace('_', "-"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_its_echo() {
        let defaults = RunConfig::default();
        let entries = defaults.entries();
        assert_eq!(entries.len(), KEYS.len());
        let mut again = RunConfig::default();
        for (k, v) in &entries {
            again.set(k, v).unwrap();
        }
        assert_eq!(again, defaults);
    }

    #[test]
    fn file_comments_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# header\nepochs = 3 # trailing\n\nbase_shape=8,2,4,4\n", Path::new("f")).unwrap();
        assert_eq!(c.hyperparams.epochs, 3);
        assert_eq!(c.base_shape, [8, 2, 4, 4]);
        let err = c.apply_text("epochs = 3\nepoch = 4\n", Path::new("f")).unwrap_err();
        assert!(err.to_string().contains("f:2") && err.to_string().contains("\"epoch\""), "{err}");
        assert!(c.set("elab_shape", "1,2").is_err());
        assert!(c.set("clip_norm", "none").is_ok() && c.hyperparams.clip_norm.is_none());
    }
}
