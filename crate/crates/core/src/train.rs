//! Alternating training: cross-entropy on seen domains for the base model,
//! MLDG meta-steps for the relevance evaluator.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ablated_forward, approximate_specific, classify, elaborate, evaluate_relevance, extract_base, variant_forward_seen,
    BaseFeature, BoundParams, CareConfig, CareParams, ElabFeature, Elaborator, FeatureKind, ParamGroup, Variant,
};
use crate::synth::{derive_rng, DomainDataset, Sample};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Inner meta-train step size.
    pub alpha: f64,
    /// Outer meta-update step size.
    pub beta: f64,
    /// Weight of the meta-test gradient in the outer update.
    pub lambda: f64,
    /// Samples per domain per iteration.
    pub batch_size: usize,
    /// Rescales the base-step gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr_backbone: 0.001,
            lr_other: 0.01,
            epochs: 40,
            decay_epoch: 30,
            decay_factor: 0.1,
            alpha: 0.01,
            beta: 0.01,
            lambda: 0.5,
            batch_size: 4,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            bad.push(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        for (k, v) in [("lr_backbone", self.lr_backbone), ("lr_other", self.lr_other), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{k} must be positive, got {v}"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            bad.push(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            bad.push(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.epochs > 0 && self.decay_epoch >= self.epochs {
            bad.push(format!("decay_epoch {} must be below epochs {}", self.decay_epoch, self.epochs));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                bad.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(bad.join("; ")))
        }
    }

    fn decay(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            1.0
        } else {
            self.decay_factor
        }
    }

    /// `alpha` and `beta` decay together with the base rates.
    pub fn meta_rates(&self, epoch: usize) -> MetaRates {
        let d = self.decay(epoch);
        MetaRates {
            alpha: self.alpha * d,
            beta: self.beta * d,
            lambda: self.lambda,
        }
    }
}

/// `(backbone rate, rate for everything else)` in effect at `epoch`.
pub fn lr_schedule(hp: &Hyperparams, epoch: usize) -> (f64, f64) {
    let d = hp.decay(epoch);
    (hp.lr_backbone * d, hp.lr_other * d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseRates {
    pub backbone: f64,
    pub other: f64,
    pub clip_norm: Option<f64>,
}

impl BaseRates {
    pub fn at(hp: &Hyperparams, epoch: usize) -> Self {
        let (backbone, other) = lr_schedule(hp, epoch);
        Self {
            backbone,
            other,
            clip_norm: hp.clip_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaRates {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

fn add_into(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => a.axpy(1.0, &g),
            None => *a = Some(g),
        }
    }
}

fn check_batch(batch: &[&Sample], domain: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input(format!("empty batch for domain {domain}")));
    }
    if let Some(s) = batch.iter().find(|s| s.domain != domain) {
        return Err(Error::Input(format!("sample {} of domain {} in the batch of domain {domain}", s.id, s.domain)));
    }
    Ok(())
}

/// One SGD step of the base model. `batches[k]` holds samples of seen domain
/// `k`; each domain's loss is its batch-mean cross-entropy and the step
/// follows their sum. The relevance evaluator is never touched.
pub fn step_base(params: &mut CareParams, batches: &[Vec<&Sample>], rates: BaseRates, variant: Variant) -> Result<Vec<f64>> {
    let k_count = params.config().domains;
    if batches.len() != k_count {
        return Err(Error::Input(format!("{} batches for {k_count} seen domains", batches.len())));
    }
    for (k, b) in batches.iter().enumerate() {
        check_batch(b, k)?;
    }
    let jobs: Vec<(usize, &Sample, usize)> = batches
        .iter()
        .enumerate()
        .flat_map(|(k, b)| b.iter().map(move |s| (k, *s, b.len())))
        .collect();
    let snapshot = &*params;
    let per_sample = jobs
        .par_iter()
        .map(|&(k, s, n)| -> Result<(usize, f64, Vec<Option<Tensor>>)> {
            let mut g = Graph::new();
            let bound = snapshot.bind(&mut g, ParamGroup::is_base);
            let x = g.constant(s.clip.clone());
            let logits = variant_forward_seen(&mut g, &bound, x, k, variant)?;
            let ce = g.cross_entropy_logits(logits, s.label)?;
            let loss = g.div_scalar(ce, n as f64);
            g.backward(loss)?;
            Ok((k, g.value(loss).item(), bound.grads(&g)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = vec![0.0; k_count];
    let mut acc = vec![None; params.tensors().len()];
    for (k, l, grads) in per_sample {
        losses[k] += l;
        add_into(&mut acc, grads);
    }
    if let Some(limit) = rates.clip_norm {
        let norm = acc
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > limit {
            let scale = limit / norm;
            for t in acc.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    params.sgd_step(&acc, |group| match group {
        ParamGroup::Backbone => Some(rates.backbone),
        ParamGroup::Relevance => None,
        _ => Some(rates.other),
    });
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaSplit {
    pub mtest: usize,
    pub mtrain: Vec<usize>,
}

/// Holds out one uniformly drawn domain as meta-test.
pub fn sample_meta_split(domains: usize, rng: &mut impl Rng) -> Result<MetaSplit> {
    if domains < 2 {
        return Err(Error::Usage(format!("a meta split needs at least 2 domains, got {domains}")));
    }
    let mtest = rng.random_range(0..domains);
    Ok(MetaSplit {
        mtest,
        mtrain: (0..domains).filter(|&k| k != mtest).collect(),
    })
}

/// Features of one sample computed by the frozen part of the network.
#[derive(Clone, Debug)]
pub struct FrozenFeatures {
    base: Tensor,
    general: Tensor,
    specific: Vec<Tensor>,
    label: usize,
}

impl FrozenFeatures {
    pub fn compute(params: &CareParams, sample: &Sample) -> Result<Self> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let x = g.constant(sample.clip.clone());
        let base = extract_base(&mut g, &bound, x)?;
        let general = elaborate(&mut g, &bound, Elaborator::General, base)?;
        let specific = (0..params.config().domains)
            .map(|k| {
                let f = elaborate(&mut g, &bound, Elaborator::Specific(k), base)?;
                Ok(g.value(f.var()).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base: g.value(base.var()).clone(),
            general: g.value(general.var()).clone(),
            specific,
            label: sample.label,
        })
    }
}

/// Unseen-path logits from precomputed frozen features; numerically identical
/// to [`ablated_forward`].
fn relevance_logits(g: &mut Graph, bound: &BoundParams, f: &FrozenFeatures, variant: Variant) -> Result<Var> {
    let cfg = bound.config();
    let base = g.constant(f.base.clone());
    let base = BaseFeature::from_var(g, cfg, base)?;
    let specific = f
        .specific
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let v = g.constant(t.clone());
            ElabFeature::from_var(g, cfg, v, FeatureKind::Specific(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let w = evaluate_relevance(g, bound, base, &specific)?;
    let approx = approximate_specific(g, cfg, w, &specific)?;
    let general = match variant {
        Variant::NoGeneral => ElabFeature::zero(g, cfg),
        _ => {
            let v = g.constant(f.general.clone());
            ElabFeature::from_var(g, cfg, v, FeatureKind::General)?
        }
    };
    classify(g, bound, general, approx)
}

fn check_meta_variant(params: &CareParams, variant: Variant) -> Result<()> {
    if !variant.uses_relevance() {
        return Err(Error::Usage(format!("variant {} has no relevance evaluator to meta-train", variant.name())));
    }
    if params.config().weight_mode != variant.weight_mode() {
        return Err(Error::Usage(format!(
            "variant {} needs {:?} weights, parameters are {:?}",
            variant.name(),
            variant.weight_mode(),
            params.config().weight_mode
        )));
    }
    Ok(())
}

/// Mean unseen-path cross-entropy over `items` and its gradient with respect
/// to the relevance slots (in [`CareParams::slots_of`] order).
pub fn relevance_loss_and_grad(
    params: &CareParams,
    items: &[FrozenFeatures],
    variant: Variant,
) -> Result<(f64, Vec<Tensor>)> {
    check_meta_variant(params, variant)?;
    if items.is_empty() {
        return Err(Error::Input("no samples for the relevance loss".into()));
    }
    let slots = params.slots_of(ParamGroup::Relevance);
    let n = items.len() as f64;
    let per_item = items
        .par_iter()
        .map(|f| -> Result<(f64, Vec<Option<Tensor>>)> {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, |grp| grp == ParamGroup::Relevance);
            let logits = relevance_logits(&mut g, &bound, f, variant)?;
            let ce = g.cross_entropy_logits(logits, f.label)?;
            let loss = g.div_scalar(ce, n);
            g.backward(loss)?;
            let grads = slots.iter().map(|&s| g.grad(bound.var(s)).cloned()).collect();
            Ok((g.value(loss).item(), grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut acc = vec![None; slots.len()];
    for (l, grads) in per_item {
        loss += l;
        add_into(&mut acc, grads);
    }
    let grads = acc
        .into_iter()
        .zip(&slots)
        .map(|(g, &s)| g.unwrap_or_else(|| Tensor::zeros(params.tensors()[s].shape().to_vec())))
        .collect();
    Ok((loss, grads))
}

/// Mean unseen-path cross-entropy over `items`, value only.
pub fn relevance_loss(params: &CareParams, items: &[FrozenFeatures], variant: Variant) -> Result<f64> {
    check_meta_variant(params, variant)?;
    let n = items.len() as f64;
    let losses = items
        .par_iter()
        .map(|f| -> Result<f64> {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, |_| false);
            let logits = relevance_logits(&mut g, &bound, f, variant)?;
            let ce = g.cross_entropy_logits(logits, f.label)?;
            Ok(g.value(ce).item() / n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.into_iter().sum())
}

/// Relevance parameters moved by `-rate * grads`.
pub fn shifted_relevance(params: &CareParams, grads: &[Tensor], rate: f64) -> CareParams {
    let mut out = params.clone();
    for (&s, g) in params.slots_of(ParamGroup::Relevance).iter().zip(grads) {
        for (p, gv) in out.tensor_mut(s).data_mut().iter_mut().zip(g.data()) {
            *p -= rate * gv;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub loss_mtrain: f64,
    pub loss_mtest: f64,
    /// Gradient of the meta-train loss at the current parameters.
    pub grad_mtrain: Vec<Tensor>,
    /// Gradient of the meta-test loss: at the adapted parameters (first-order)
    /// or through the inner step (second-order).
    pub grad_mtest: Vec<Tensor>,
    /// The blended gradient the outer step applied.
    pub applied: Vec<Tensor>,
}

fn blend(a: &[Tensor], b: &[Tensor], lambda: f64) -> Vec<Tensor> {
    a.iter()
        .zip(b)
        .map(|(ga, gb)| {
            let data = ga
                .data()
                .iter()
                .zip(gb.data())
                .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
                .collect();
            Tensor::new(ga.shape().to_vec(), data).expect("shapes agree")
        })
        .collect()
}

/// Second-order meta gradients on one graph: the inner step stays on the
/// graph so the meta-test loss is differentiated through it.
fn second_order_grads(
    params: &CareParams,
    mtrain: &[FrozenFeatures],
    mtest: &[FrozenFeatures],
    alpha: f64,
    variant: Variant,
) -> Result<(f64, f64, Vec<Tensor>, Vec<Tensor>)> {
    let slots = params.slots_of(ParamGroup::Relevance);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |grp| grp == ParamGroup::Relevance);
    let mean_loss = |g: &mut Graph, bound: &BoundParams, items: &[FrozenFeatures]| -> Result<Var> {
        let mut total: Option<Var> = None;
        for f in items {
            let logits = relevance_logits(g, bound, f, variant)?;
            let ce = g.cross_entropy_logits(logits, f.label)?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        let total = total.ok_or_else(|| Error::Input("empty meta batch".into()))?;
        Ok(g.div_scalar(total, items.len() as f64))
    };
    let l_train = mean_loss(&mut g, &bound, mtrain)?;
    let phi: Vec<Var> = slots.iter().map(|&s| bound.var(s)).collect();
    let inner = g.grad_of(l_train, &phi)?;
    let mut adapted = bound.clone();
    for ((&s, &p), &gr) in slots.iter().zip(&phi).zip(&inner) {
        let step = g.scale(gr, alpha);
        let moved = g.sub(p, step)?;
        adapted.replace(s, moved);
    }
    let l_test = mean_loss(&mut g, &adapted, mtest)?;
    let outer = g.grad_of(l_test, &phi)?;
    let grad_train = inner.iter().map(|&v| g.value(v).clone()).collect();
    let grad_test = outer.iter().map(|&v| g.value(v).clone()).collect();
    Ok((g.value(l_train).item(), g.value(l_test).item(), grad_train, grad_test))
}

/// One MLDG step of the relevance evaluator:
/// `phi' = phi - alpha * grad(l_mtrain)(phi)`, then
/// `phi <- phi - beta * ((1 - lambda) * grad(l_mtrain)(phi) + lambda * grad(l_mtest)(phi'))`.
///
/// Meta-train domains are scored through the unseen path, their own specific
/// elaborators taking part as frozen experts. Only relevance parameters may be
/// trainable.
pub fn meta_step_r(
    params: &mut CareParams,
    split: &MetaSplit,
    batches: &[Vec<&Sample>],
    rates: MetaRates,
    variant: Variant,
    trainable: impl Fn(ParamGroup) -> bool,
) -> Result<MetaOutcome> {
    let groups: Vec<ParamGroup> = params.layout().entries.iter().map(|e| e.group).collect();
    if let Some(g) = groups.iter().find(|&&g| g != ParamGroup::Relevance && trainable(g)) {
        return Err(Error::Usage(format!("meta step may only train the relevance evaluator, {g:?} is marked trainable")));
    }
    check_meta_variant(params, variant)?;
    let k_count = params.config().domains;
    if batches.len() != k_count || split.mtest >= k_count || split.mtrain.iter().any(|&k| k >= k_count || k == split.mtest) {
        return Err(Error::Input("meta split and batches do not match the seen domains".into()));
    }
    for &k in split.mtrain.iter().chain(std::iter::once(&split.mtest)) {
        check_batch(&batches[k], k)?;
    }
    let frozen = |ks: &[usize]| -> Result<Vec<FrozenFeatures>> {
        ks.iter()
            .flat_map(|&k| batches[k].iter())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|s| FrozenFeatures::compute(params, s))
            .collect()
    };
    let mtrain = frozen(&split.mtrain)?;
    let mtest = frozen(&[split.mtest])?;

    let (loss_mtrain, loss_mtest, grad_mtrain, grad_mtest) = if params.config().second_order_meta {
        second_order_grads(params, &mtrain, &mtest, rates.alpha, variant)?
    } else {
        let (l_tr, g_tr) = relevance_loss_and_grad(params, &mtrain, variant)?;
        let adapted = shifted_relevance(params, &g_tr, rates.alpha);
        let (l_te, g_te) = relevance_loss_and_grad(&adapted, &mtest, variant)?;
        (l_tr, l_te, g_tr, g_te)
    };
    let applied = blend(&grad_mtrain, &grad_mtest, rates.lambda);
    *params = shifted_relevance(params, &applied, rates.beta);
    Ok(MetaOutcome {
        loss_mtrain,
        loss_mtest,
        grad_mtrain,
        grad_mtest,
        applied,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over iterations of each seen domain's batch loss.
    pub base_loss: Vec<f64>,
    pub meta_train_loss: Option<f64>,
    pub meta_test_loss: Option<f64>,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Excluded from the serialized log so that logs are byte-reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn mean_base_loss(&self) -> f64 {
        self.base_loss.iter().sum::<f64>() / self.base_loss.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("log serialises");
        s.push('\n');
        s
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }
}

const CKPT_MAGIC: &[u8; 8] = b"CARECKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    hyperparams: Hyperparams,
    variant: Variant,
    epoch: usize,
}

/// Parameters plus the training state that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyperparams: Hyperparams,
    pub variant: Variant,
    /// Epochs completed.
    pub epoch: usize,
    pub params: CareParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            hyperparams: self.hyperparams.clone(),
            variant: self.variant,
            epoch: self.epoch,
        })
        .expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a CARE checkpoint"));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes.get(12..12 + n).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header).map_err(|e| bad(&e.to_string()))?;
        let params = CareParams::read_from(&bytes[12 + n..], origin)?;
        Ok(Self {
            hyperparams: header.hyperparams,
            variant: header.variant,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

const TAG_INIT: u64 = 11;
const TAG_ORDER: u64 = 12;
const TAG_SPLIT: u64 = 13;

fn check_dataset(config: &CareConfig, seen: &DomainDataset) -> Result<()> {
    let ids = seen.domain_ids();
    if ids != (0..config.domains).collect::<Vec<_>>() {
        return Err(Error::Input(format!(
            "training needs seen domains 0..{} in order, dataset has {ids:?}",
            config.domains
        )));
    }
    for d in &seen.domains {
        if d.samples.is_empty() {
            return Err(Error::Input(format!("seen domain {} has no samples", d.domain)));
        }
        if let Some(s) = d.samples.iter().find(|s| s.clip.shape() != config.input_shape || s.label >= config.classes) {
            return Err(Error::Input(format!(
                "sample {} has shape {:?} and label {}, model expects {:?} and < {}",
                s.id,
                s.clip.shape(),
                s.label,
                config.input_shape,
                config.classes
            )));
        }
    }
    Ok(())
}

/// Trains from a seeded initialisation. Each iteration takes one batch per
/// seen domain, makes a base step, then one meta step on a fresh split.
/// `on_checkpoint` receives the state after the decay epoch and at the end.
pub fn train(
    config: &CareConfig,
    hp: &Hyperparams,
    seen: &DomainDataset,
    variant: Variant,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(CareParams, TrainLog)> {
    hp.validate()?;
    config.validate()?;
    if config.weight_mode != variant.weight_mode() {
        return Err(Error::Usage(format!(
            "variant {} needs {:?} weights, config has {:?}",
            variant.name(),
            variant.weight_mode(),
            config.weight_mode
        )));
    }
    check_dataset(config, seen)?;
    let mut params = initial_params(config, hp)?;
    let mut split_rng = derive_rng(hp.seed, &[TAG_SPLIT]);
    let mut log = TrainLog::default();
    let max_n = seen.domains.iter().map(|d| d.samples.len()).max().unwrap_or(0);
    let iterations = max_n.div_ceil(hp.batch_size);

    for epoch in 0..hp.epochs {
        let started = Instant::now();
        let rates = BaseRates::at(hp, epoch);
        let meta = hp.meta_rates(epoch);
        let orders: Vec<Vec<&Sample>> = seen
            .domains
            .iter()
            .map(|d| {
                let mut order: Vec<&Sample> = d.samples.iter().collect();
                order.shuffle(&mut derive_rng(hp.seed, &[TAG_ORDER, epoch as u64, d.domain as u64]));
                order
            })
            .collect();
        let mut base_sum = vec![0.0; config.domains];
        let (mut mtrain_sum, mut mtest_sum, mut meta_steps) = (0.0, 0.0, 0usize);
        for it in 0..iterations {
            let batches: Vec<Vec<&Sample>> = orders
                .iter()
                .map(|o| (0..hp.batch_size).map(|j| o[(it * hp.batch_size + j) % o.len()]).collect())
                .collect();
            let losses = step_base(&mut params, &batches, rates, variant)?;
            for (s, l) in base_sum.iter_mut().zip(&losses) {
                *s += l;
            }
            if variant.uses_relevance() {
                let split = sample_meta_split(config.domains, &mut split_rng)?;
                let out = meta_step_r(&mut params, &split, &batches, meta, variant, |g| g == ParamGroup::Relevance)?;
                mtrain_sum += out.loss_mtrain;
                mtest_sum += out.loss_mtest;
                meta_steps += 1;
            }
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let record = EpochRecord {
            epoch,
            base_loss: base_sum.iter().map(|s| s / iterations as f64).collect(),
            meta_train_loss: mean(mtrain_sum, meta_steps),
            meta_test_loss: mean(mtest_sum, meta_steps),
            lr_backbone: rates.backbone,
            lr_other: rates.other,
            alpha: meta.alpha,
            beta: meta.beta,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let finite = record.base_loss.iter().all(|l| l.is_finite())
            && record.meta_train_loss.is_none_or(f64::is_finite)
            && record.meta_test_loss.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::Input(format!("training diverged in epoch {epoch}: {record:?}")));
        }
        log.epochs.push(record);
        if epoch + 1 == hp.decay_epoch || epoch + 1 == hp.epochs {
            on_checkpoint(&Checkpoint {
                hyperparams: hp.clone(),
                variant,
                epoch: epoch + 1,
                params: params.clone(),
            })?;
        }
    }
    if hp.epochs == 0 {
        on_checkpoint(&Checkpoint {
            hyperparams: hp.clone(),
            variant,
            epoch: 0,
            params: params.clone(),
        })?;
    }
    Ok((params, log))
}

/// Initial parameters [`train`] starts from.
pub fn initial_params(config: &CareConfig, hp: &Hyperparams) -> Result<CareParams> {
    CareParams::init(config, derive_rng(hp.seed, &[TAG_INIT]).random())
}

/// Logits of `variant`'s unseen-domain path for every sample, in order.
pub fn predict_unseen(params: &CareParams, samples: &[&Sample], variant: Variant) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, |_| false);
            let x = g.constant(s.clip.clone());
            let logits = ablated_forward(&mut g, &bound, x, variant)?;
            Ok(g.value(logits).clone())
        })
        .collect()
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}
