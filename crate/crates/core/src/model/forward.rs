//! Forward passes of the CARE network on a [`Graph`].

use serde::{Deserialize, Serialize};

use super::config::{CareConfig, WeightMode};
use super::params::{BoundParams, ConvSlots, ElaboratorSlots, LinearSlots};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ReduceOp, Tensor, Var};

/// Backbone output of shape `base_shape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaseFeature(Var);

impl BaseFeature {
    pub fn var(self) -> Var {
        self.0
    }

    pub fn from_var(graph: &Graph, cfg: &CareConfig, var: Var) -> Result<Self> {
        if graph.shape(var) != cfg.base_shape {
            return Err(Error::Dimension {
                op: "base_feature",
                lhs: graph.shape(var).to_vec(),
                rhs: cfg.base_shape.to_vec(),
            });
        }
        Ok(Self(var))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    General,
    Specific(usize),
    Approximated,
    Zero,
}

/// Elaborated feature of shape `elab_shape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElabFeature {
    var: Var,
    kind: FeatureKind,
}

impl ElabFeature {
    pub fn var(self) -> Var {
        self.var
    }

    pub fn kind(self) -> FeatureKind {
        self.kind
    }

    /// Wraps an externally computed value, checking its shape.
    pub fn from_var(graph: &Graph, cfg: &CareConfig, var: Var, kind: FeatureKind) -> Result<Self> {
        if graph.shape(var) != cfg.elab_shape {
            return Err(Error::Dimension {
                op: "elab_feature",
                lhs: graph.shape(var).to_vec(),
                rhs: cfg.elab_shape.to_vec(),
            });
        }
        Ok(Self { var, kind })
    }

    pub fn zero(graph: &mut Graph, cfg: &CareConfig) -> Self {
        Self {
            var: graph.constant(Tensor::zeros(cfg.elab_shape.to_vec())),
            kind: FeatureKind::Zero,
        }
    }
}

/// Which elaborator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elaborator {
    General,
    Specific(usize),
}

/// Per-domain relevance weights: `(K, h'', w'')` in spatial mode, `(K,)` in
/// scalar mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelevanceWeights {
    var: Var,
    mode: WeightMode,
}

impl RelevanceWeights {
    pub fn var(self) -> Var {
        self.var
    }

    pub fn mode(self) -> WeightMode {
        self.mode
    }

    /// Weights supplied from outside the evaluator (forced or raw values).
    /// Only the shape is checked; the `[0, 1]` range holds for weights from
    /// [`evaluate_relevance`].
    pub fn forced(graph: &Graph, cfg: &CareConfig, var: Var, mode: WeightMode) -> Result<Self> {
        let mut expect = vec![cfg.domains];
        if mode == WeightMode::Spatial {
            expect.extend_from_slice(&cfg.elab_shape[1..]);
        }
        if graph.shape(var) != expect.as_slice() {
            return Err(Error::Dimension {
                op: "relevance_weights",
                lhs: graph.shape(var).to_vec(),
                rhs: expect,
            });
        }
        Ok(Self { var, mode })
    }
}

/// Ablation variants. Training in a variant uses the same substitution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpecific,
    NoGeneral,
    ScalarWeights,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSpecific, Variant::NoGeneral, Variant::ScalarWeights];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpecific => "no_specific",
            Variant::NoGeneral => "no_general",
            Variant::ScalarWeights => "scalar_weights",
        }
    }

    /// Whether the relevance evaluator influences this variant's output.
    pub fn uses_relevance(self) -> bool {
        !matches!(self, Variant::NoSpecific)
    }

    /// Weight mode the variant's parameters must be built with.
    pub fn weight_mode(self) -> WeightMode {
        match self {
            Variant::ScalarWeights => WeightMode::Scalar,
            _ => WeightMode::Spatial,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown variant {s:?}")))
    }
}

fn conv_layer(g: &mut Graph, p: &BoundParams, x: Var, c: &ConvSlots, relu: bool) -> Result<Var> {
    let y = g.conv2d(x, p.var(c.kernel), c.stride, c.padding)?;
    let c_out = g.shape(y)[0];
    let bias = g.reshape(p.var(c.bias), &[c_out, 1, 1])?;
    let shape = g.shape(y).to_vec();
    let bias = g.expand_to(bias, &shape)?;
    let y = g.add(y, bias)?;
    Ok(if relu { g.relu(y) } else { y })
}

/// `[1, n] -> [n_out]`
fn linear(g: &mut Graph, p: &BoundParams, x: Var, l: &LinearSlots) -> Result<Var> {
    let y = g.matmul(x, p.var(l.weight))?;
    let n = g.shape(y)[1];
    let b = g.reshape(p.var(l.bias), &[1, n])?;
    let y = g.add(y, b)?;
    g.reshape(y, &[n])
}

/// Backbone: the first layer sees `t / t'` consecutive frames stacked into its
/// channels, so motion between those frames is visible to the features.
pub fn extract_base(g: &mut Graph, p: &BoundParams, x: Var) -> Result<BaseFeature> {
    let cfg = p.config();
    if g.shape(x) != cfg.input_shape {
        return Err(Error::Dimension {
            op: "extract_base",
            lhs: g.shape(x).to_vec(),
            rhs: cfg.input_shape.to_vec(),
        });
    }
    let [c, _, h, w] = cfg.input_shape;
    let [ch1, t1, h1, w1] = cfg.base_shape;
    let step = p.layout().plan.frames_per_step;
    let mut per_step = Vec::with_capacity(t1);
    for tau in 0..t1 {
        let frames = g.narrow(x, 1, tau * step, step)?;
        let mut y = g.reshape(frames, &[c * step, h, w])?;
        for layer in &p.layout().backbone {
            y = conv_layer(g, p, y, layer, true)?;
        }
        per_step.push(g.reshape(y, &[ch1, 1, h1, w1])?);
    }
    let base = g.concat(&per_step, 1)?;
    debug_assert_eq!(g.shape(base), cfg.base_shape);
    Ok(BaseFeature(base))
}

fn temporal_mean(g: &mut Graph, base: BaseFeature) -> Result<Var> {
    g.reduce(ReduceOp::Mean, base.0, &[1])
}

/// Multi-head self-attention with a residual connection over `[tokens, d]`.
/// Returns the new tokens and each head's attention matrix.
fn attention_block(
    g: &mut Graph,
    p: &BoundParams,
    x: Var,
    slots: &super::params::AttentionSlots,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let q = g.matmul(x, p.var(slots.query))?;
    let k = g.matmul(x, p.var(slots.key))?;
    let v = g.matmul(x, p.var(slots.value))?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let o = g.concat(&outs, 1)?;
    let o = g.matmul(o, p.var(slots.output))?;
    Ok((g.add(x, o)?, maps))
}

fn elaborator_slots(p: &BoundParams, which: Elaborator) -> Result<&ElaboratorSlots> {
    match which {
        Elaborator::General => Ok(&p.layout().general),
        Elaborator::Specific(k) => p.layout().specific.get(k).ok_or_else(|| {
            Error::Input(format!("specific elaborator {k} out of range for {} domains", p.config().domains))
        }),
    }
}

/// Like [`elaborate`], also returning every head's attention matrix.
pub fn elaborate_traced(
    g: &mut Graph,
    p: &BoundParams,
    which: Elaborator,
    base: BaseFeature,
) -> Result<(ElabFeature, Vec<Var>)> {
    let slots = elaborator_slots(p, which)?.clone();
    let cfg = p.config();
    let [ch1, _, h1, w1] = cfg.base_shape;
    let pooled = temporal_mean(g, base)?;
    let flat = g.reshape(pooled, &[ch1, h1 * w1])?;
    let mut tokens = g.transpose(flat)?;
    let mut maps = Vec::new();
    for block in &slots.blocks {
        let (t, m) = attention_block(g, p, tokens, block, cfg.attention_heads)?;
        tokens = t;
        maps.extend(m);
    }
    let back = g.transpose(tokens)?;
    let grid = g.reshape(back, &[ch1, h1, w1])?;
    let out = conv_layer(g, p, grid, &slots.projection, false)?;
    let kind = match which {
        Elaborator::General => FeatureKind::General,
        Elaborator::Specific(k) => FeatureKind::Specific(k),
    };
    Ok((ElabFeature::from_var(g, cfg, out, kind)?, maps))
}

/// Temporal mean pooling, two self-attention layers over spatial tokens, then
/// a strided projection to `elab_shape`.
pub fn elaborate(g: &mut Graph, p: &BoundParams, which: Elaborator, base: BaseFeature) -> Result<ElabFeature> {
    Ok(elaborate_traced(g, p, which, base)?.0)
}

/// Flattens and concatenates (general, specific) and applies one linear map.
pub fn classify(g: &mut Graph, p: &BoundParams, general: ElabFeature, specific: ElabFeature) -> Result<Var> {
    let cfg = p.config();
    for f in [general, specific] {
        if g.shape(f.var) != cfg.elab_shape {
            return Err(Error::Dimension {
                op: "classify",
                lhs: g.shape(f.var).to_vec(),
                rhs: cfg.elab_shape.to_vec(),
            });
        }
    }
    let a = g.flatten(general.var)?;
    let b = g.flatten(specific.var)?;
    let joined = g.concat(&[a, b], 0)?;
    let row = g.reshape(joined, &[1, 2 * cfg.elab_numel()])?;
    linear(g, p, row, &p.layout().classifier)
}

fn check_domain(p: &BoundParams, k: usize) -> Result<()> {
    if k >= p.config().domains {
        return Err(Error::Input(format!("domain {k} out of range for {} seen domains", p.config().domains)));
    }
    Ok(())
}

/// Seen-domain path: general and domain-`k` specific features of one base
/// feature, classified jointly.
pub fn forward_seen(g: &mut Graph, p: &BoundParams, x: Var, k: usize) -> Result<Var> {
    check_domain(p, k)?;
    let base = extract_base(g, p, x)?;
    let general = elaborate(g, p, Elaborator::General, base)?;
    let specific = elaborate(g, p, Elaborator::Specific(k), base)?;
    classify(g, p, general, specific)
}

/// Scores each seen domain's specific feature against the input's base
/// feature; sigmoid-squashed into `[0, 1]`.
pub fn evaluate_relevance(
    g: &mut Graph,
    p: &BoundParams,
    base: BaseFeature,
    specific: &[ElabFeature],
) -> Result<RelevanceWeights> {
    let cfg = p.config();
    if specific.len() != cfg.domains {
        return Err(Error::Input(format!(
            "relevance needs {} specific features, got {}",
            cfg.domains,
            specific.len()
        )));
    }
    let slots = p.layout().relevance.clone();
    let pooled = temporal_mean(g, base)?;
    let t1 = conv_layer(g, p, pooled, &slots.transform1, true)?;
    let t2 = conv_layer(g, p, t1, &slots.transform2, false)?;
    let transformed = g.flatten(t2)?;
    let [_, h2, w2] = cfg.elab_shape;
    let per_domain: Vec<usize> = match cfg.weight_mode {
        WeightMode::Spatial => vec![1, h2, w2],
        WeightMode::Scalar => vec![1],
    };
    let mut scores = Vec::with_capacity(cfg.domains);
    for (k, f) in specific.iter().enumerate() {
        let spec = g.flatten(f.var)?;
        let joined = g.concat(&[transformed, spec], 0)?;
        let n = g.shape(joined)[0];
        let row = g.reshape(joined, &[1, n])?;
        let raw = linear(g, p, row, &slots.heads[k])?;
        let squashed = g.sigmoid(raw);
        scores.push(g.reshape(squashed, &per_domain)?);
    }
    let w = g.concat(&scores, 0)?;
    RelevanceWeights::forced(g, cfg, w, cfg.weight_mode)
}

/// `sum_k w^k * f^k`, broadcasting each spatial map across channels.
pub fn weighted_sum(g: &mut Graph, weights: RelevanceWeights, specific: &[ElabFeature]) -> Result<Var> {
    let k_count = g.shape(weights.var)[0];
    if specific.len() != k_count {
        return Err(Error::Input(format!(
            "{} weight slices for {} specific features",
            k_count,
            specific.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (k, f) in specific.iter().enumerate() {
        let wk = g.select(weights.var, k)?;
        let term = g.mul(f.var, wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one domain"))
}

/// Collaborative approximation of a specific feature for an unseen domain:
/// `(1/K) sum_k w^k * f^k`.
pub fn approximate_specific(
    g: &mut Graph,
    cfg: &CareConfig,
    weights: RelevanceWeights,
    specific: &[ElabFeature],
) -> Result<ElabFeature> {
    if weights.mode != cfg.weight_mode {
        return Err(Error::Usage(format!(
            "weights are in {:?} mode but the model is configured for {:?}",
            weights.mode, cfg.weight_mode
        )));
    }
    let sum = weighted_sum(g, weights, specific)?;
    let out = g.div_scalar(sum, specific.len() as f64);
    ElabFeature::from_var(g, cfg, out, FeatureKind::Approximated)
}

/// All intermediate values of the unseen-domain path.
#[derive(Clone, Debug)]
pub struct UnseenTrace {
    pub base: BaseFeature,
    pub general: ElabFeature,
    pub specific: Vec<ElabFeature>,
    pub weights: RelevanceWeights,
    pub approximated: ElabFeature,
    pub logits: Var,
}

pub fn forward_unseen_traced(g: &mut Graph, p: &BoundParams, x: Var) -> Result<UnseenTrace> {
    let base = extract_base(g, p, x)?;
    let general = elaborate(g, p, Elaborator::General, base)?;
    let specific = (0..p.config().domains)
        .map(|k| elaborate(g, p, Elaborator::Specific(k), base))
        .collect::<Result<Vec<_>>>()?;
    let weights = evaluate_relevance(g, p, base, &specific)?;
    let approximated = approximate_specific(g, p.config(), weights, &specific)?;
    let logits = classify(g, p, general, approximated)?;
    Ok(UnseenTrace {
        base,
        general,
        specific,
        weights,
        approximated,
        logits,
    })
}

/// Unseen-domain path: general feature plus the relevance-weighted
/// approximation of a specific feature.
pub fn forward_unseen(g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
    Ok(forward_unseen_traced(g, p, x)?.logits)
}

/// Unseen-domain forward of an ablated variant.
pub fn ablated_forward(g: &mut Graph, p: &BoundParams, x: Var, variant: Variant) -> Result<Var> {
    let cfg = p.config();
    if cfg.weight_mode != variant.weight_mode() {
        return Err(Error::Usage(format!(
            "variant {} needs {:?} weights, parameters are {:?}",
            variant.name(),
            variant.weight_mode(),
            cfg.weight_mode
        )));
    }
    match variant {
        Variant::Full | Variant::ScalarWeights => forward_unseen(g, p, x),
        Variant::NoSpecific => {
            let base = extract_base(g, p, x)?;
            let general = elaborate(g, p, Elaborator::General, base)?;
            let zero = ElabFeature::zero(g, cfg);
            classify(g, p, general, zero)
        }
        Variant::NoGeneral => {
            let trace = forward_unseen_traced(g, p, x)?;
            let zero = ElabFeature::zero(g, cfg);
            classify(g, p, zero, trace.approximated)
        }
    }
}

/// Seen-domain forward of a variant, used for base training.
pub fn variant_forward_seen(g: &mut Graph, p: &BoundParams, x: Var, k: usize, variant: Variant) -> Result<Var> {
    check_domain(p, k)?;
    let cfg = p.config();
    match variant {
        Variant::Full | Variant::ScalarWeights => forward_seen(g, p, x, k),
        Variant::NoSpecific => {
            let base = extract_base(g, p, x)?;
            let general = elaborate(g, p, Elaborator::General, base)?;
            let zero = ElabFeature::zero(g, cfg);
            classify(g, p, general, zero)
        }
        Variant::NoGeneral => {
            let base = extract_base(g, p, x)?;
            let specific = elaborate(g, p, Elaborator::Specific(k), base)?;
            let zero = ElabFeature::zero(g, cfg);
            classify(g, p, zero, specific)
        }
    }
}
