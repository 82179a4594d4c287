use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CareConfig, ShapePlan};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Which sub-network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    General,
    Specific(usize),
    Classifier,
    Relevance,
}

impl ParamGroup {
    /// Everything base training updates.
    pub fn is_base(self) -> bool {
        !matches!(self, ParamGroup::Relevance)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSlots {
    pub kernel: usize,
    pub bias: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearSlots {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSlots {
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElaboratorSlots {
    pub blocks: Vec<AttentionSlots>,
    pub projection: ConvSlots,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevanceSlots {
    pub transform1: ConvSlots,
    pub transform2: ConvSlots,
    pub heads: Vec<LinearSlots>,
}

/// Self-attention layers stacked in every elaborator.
pub const ATTENTION_LAYERS: usize = 2;

/// Where every parameter tensor lives in the flat parameter list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub plan: ShapePlan,
    pub backbone: Vec<ConvSlots>,
    pub general: ElaboratorSlots,
    pub specific: Vec<ElaboratorSlots>,
    pub classifier: LinearSlots,
    pub relevance: RelevanceSlots,
}

struct Builder {
    entries: Vec<ParamEntry>,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, fan_in: usize) -> usize {
        self.entries.push(ParamEntry {
            name,
            group,
            shape,
            fan_in,
        });
        self.entries.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvSlots {
        let fan_in = c_in * k * k;
        ConvSlots {
            kernel: self.add(format!("{name}.kernel"), group, vec![c_out, c_in, k, k], fan_in),
            bias: self.add(format!("{name}.bias"), group, vec![c_out], fan_in),
            stride,
            padding,
        }
    }

    fn linear(&mut self, name: &str, group: ParamGroup, n_in: usize, n_out: usize) -> LinearSlots {
        LinearSlots {
            weight: self.add(format!("{name}.weight"), group, vec![n_in, n_out], n_in),
            bias: self.add(format!("{name}.bias"), group, vec![n_out], n_in),
        }
    }

    fn elaborator(&mut self, name: &str, group: ParamGroup, cfg: &CareConfig, plan: &ShapePlan) -> ElaboratorSlots {
        let d = cfg.base_shape[0];
        let blocks = (0..ATTENTION_LAYERS)
            .map(|b| {
                let mut mat = |which: &str| self.add(format!("{name}.attn{b}.{which}"), group, vec![d, d], d);
                AttentionSlots {
                    query: mat("query"),
                    key: mat("key"),
                    value: mat("value"),
                    output: mat("output"),
                }
            })
            .collect();
        let projection = self.conv(&format!("{name}.projection"), group, d, cfg.elab_shape[0], 3, plan.elab_stride, 1);
        ElaboratorSlots { blocks, projection }
    }
}

impl Layout {
    pub fn new(cfg: &CareConfig) -> Result<Self> {
        let plan = cfg.validate()?;
        let mut b = Builder { entries: Vec::new() };
        let [c, _, _, _] = cfg.input_shape;
        let ch1 = cfg.base_shape[0];
        let ch2 = cfg.elab_shape[0];

        let mut c_in = c * plan.frames_per_step;
        let backbone = plan
            .backbone_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let slots = b.conv(&format!("backbone.conv{i}"), ParamGroup::Backbone, c_in, ch1, 3, s, 1);
                c_in = ch1;
                slots
            })
            .collect();
        let general = b.elaborator("general", ParamGroup::General, cfg, &plan);
        let specific = (0..cfg.domains)
            .map(|k| b.elaborator(&format!("specific{k}"), ParamGroup::Specific(k), cfg, &plan))
            .collect();
        let d = cfg.elab_numel();
        let classifier = b.linear("classifier", ParamGroup::Classifier, 2 * d, cfg.classes);
        let rk = cfg.relevance_kernel;
        let transform1 = b.conv("relevance.transform1", ParamGroup::Relevance, ch1, ch2, rk, 1, rk / 2);
        let transform2 = b.conv("relevance.transform2", ParamGroup::Relevance, ch2, ch2, rk, plan.elab_stride, rk / 2);
        let heads = (0..cfg.domains)
            .map(|k| b.linear(&format!("relevance.head{k}"), ParamGroup::Relevance, 2 * d, cfg.scores_per_domain()))
            .collect();
        Ok(Self {
            entries: b.entries,
            plan,
            backbone,
            general,
            specific,
            classifier,
            relevance: RelevanceSlots {
                transform1,
                transform2,
                heads,
            },
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }
}

/// Every trainable tensor of a CARE network, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct CareParams {
    config: CareConfig,
    layout: Arc<Layout>,
    tensors: Vec<Tensor>,
}

impl CareParams {
    /// Uniform in `±1/sqrt(fan_in)` per layer, drawn in layout order.
    pub fn init(config: &CareConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .entries
            .iter()
            .map(|e| {
                let bound = 1.0 / (e.fan_in as f64).sqrt();
                Tensor::from_fn(e.shape.clone(), |_| rng.random_range(-bound..bound))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            tensors,
        })
    }

    pub fn zeros(config: &CareConfig) -> Result<Self> {
        let layout = Layout::new(config)?;
        let tensors = layout.entries.iter().map(|e| Tensor::zeros(e.shape.clone())).collect();
        Ok(Self {
            config: config.clone(),
            layout: Arc::new(layout),
            tensors,
        })
    }

    /// Rebuilds parameters from a flat buffer in layout order.
    pub fn from_flat(config: &CareConfig, values: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.layout.scalar_count() {
            return Err(Error::Compatibility(vec![format!(
                "parameter count {} does not match config ({})",
                values.len(),
                p.layout.scalar_count()
            )]));
        }
        let mut at = 0;
        for t in &mut p.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn config(&self) -> &CareConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn scalar_count(&self) -> usize {
        self.layout.scalar_count()
    }

    /// Slots belonging to `group`.
    pub fn slots_of(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.layout.entries[i].group == group).collect()
    }

    pub fn group_of(&self, slot: usize) -> ParamGroup {
        self.layout.entries[slot].group
    }

    /// Places every tensor on `graph`, as a gradient-tracking leaf when
    /// `trainable` accepts its group and as a constant otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .zip(&self.layout.entries)
            .map(|(t, e)| {
                if trainable(e.group) {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            vars,
        }
    }

    /// Wraps graph values already holding this layout's tensors, in slot order.
    pub fn attach(&self, graph: &Graph, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Input(format!("{} vars for {} parameter slots", vars.len(), self.tensors.len())));
        }
        for (v, e) in vars.iter().zip(&self.layout.entries) {
            if graph.shape(*v) != e.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "attach",
                    lhs: graph.shape(*v).to_vec(),
                    rhs: e.shape.clone(),
                });
            }
        }
        Ok(BoundParams {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            vars,
        })
    }

    /// Plain SGD on the slots for which `rate` returns a value.
    pub fn sgd_step(&mut self, grads: &[Option<Tensor>], rate: impl Fn(ParamGroup) -> Option<f64>) {
        for (slot, g) in grads.iter().enumerate() {
            let (Some(g), Some(lr)) = (g, rate(self.layout.entries[slot].group)) else { continue };
            let t = &mut self.tensors[slot];
            for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
    }
}

/// Parameters placed on a graph, addressed by layout slot.
#[derive(Clone, Debug)]
pub struct BoundParams {
    config: CareConfig,
    layout: Arc<Layout>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn config(&self) -> &CareConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points `slot` at a different graph value, e.g. an updated parameter
    /// computed on the same graph.
    pub fn replace(&mut self, slot: usize, var: Var) {
        self.vars[slot] = var;
    }

    /// Gradients accumulated on the graph for every slot (`None` where the
    /// loss did not reach a trainable leaf).
    pub fn grads(&self, graph: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| graph.grad(v).cloned()).collect()
    }
}
