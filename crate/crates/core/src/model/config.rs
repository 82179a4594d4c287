use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How relevance scores modulate each seen domain's specific feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One `[h'', w'']` map per domain, shared across channels.
    Spatial,
    /// One scalar per domain.
    Scalar,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "scalar" => Ok(Self::Scalar),
            other => Err(Error::Input(format!("unknown weight mode {other:?} (spatial|scalar)"))),
        }
    }
}

/// Shapes and switches of a CARE network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CareConfig {
    /// Seen domains `K`.
    pub domains: usize,
    /// Action classes `M`.
    pub classes: usize,
    /// `(channels, frames, height, width)` of an input clip.
    pub input_shape: [usize; 4],
    /// `(ch', t', h', w')` of the backbone output.
    pub base_shape: [usize; 4],
    /// `(ch'', h'', w'')` of every elaborated feature.
    pub elab_shape: [usize; 3],
    pub attention_heads: usize,
    pub weight_mode: WeightMode,
    pub second_order_meta: bool,
    /// Odd kernel size of the relevance evaluator's two transform layers.
    pub relevance_kernel: usize,
}

impl Default for CareConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Derived layer geometry; a pure function of the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    /// Consecutive frames stacked into the channels of the first backbone
    /// layer (`t / t'`).
    pub frames_per_step: usize,
    /// Strides of the 3x3 backbone layers, all padded by 1.
    pub backbone_strides: Vec<usize>,
    /// Stride that maps `(h', w')` to `(h'', w'')`.
    pub elab_stride: usize,
}

/// Output extent of a `k`x`k` convolution with padding `k/2` (odd `k`).
pub(crate) fn conv_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

impl CareConfig {
    /// Scaled-down defaults: 4 seen domains, 6 classes, `(3,8,32,32)` clips.
    pub fn desk() -> Self {
        Self {
            domains: 4,
            classes: 6,
            input_shape: [3, 8, 32, 32],
            base_shape: [16, 4, 8, 8],
            elab_shape: [4, 4, 4],
            attention_heads: 2,
            weight_mode: WeightMode::Spatial,
            second_order_meta: false,
            relevance_kernel: 3,
        }
    }

    /// Full-size shapes of the reference architecture (I3D-sized input).
    pub fn reference(domains: usize, classes: usize) -> Self {
        Self {
            domains,
            classes,
            input_shape: [3, 16, 180, 320],
            base_shape: [256, 8, 23, 40],
            elab_shape: [4, 12, 20],
            attention_heads: 2,
            weight_mode: WeightMode::Spatial,
            second_order_meta: false,
            relevance_kernel: 3,
        }
    }

    /// The smallest configuration used by the gradient-check suite.
    pub fn tiny() -> Self {
        Self {
            domains: 3,
            classes: 4,
            input_shape: [2, 4, 12, 12],
            base_shape: [4, 2, 6, 6],
            elab_shape: [2, 3, 3],
            attention_heads: 2,
            weight_mode: WeightMode::Spatial,
            second_order_meta: false,
            relevance_kernel: 3,
        }
    }

    pub fn elab_numel(&self) -> usize {
        self.elab_shape.iter().product()
    }

    /// Raw scores produced per domain by a relevance head.
    pub fn scores_per_domain(&self) -> usize {
        match self.weight_mode {
            WeightMode::Spatial => self.elab_shape[1] * self.elab_shape[2],
            WeightMode::Scalar => 1,
        }
    }

    pub fn validate(&self) -> Result<ShapePlan> {
        let mut problems = Vec::new();
        if self.domains < 2 {
            problems.push(format!("domains must be at least 2, got {}", self.domains));
        }
        if self.classes < 2 {
            problems.push(format!("classes must be at least 2, got {}", self.classes));
        }
        let all = self
            .input_shape
            .iter()
            .chain(&self.base_shape)
            .chain(&self.elab_shape)
            .chain(std::iter::once(&self.attention_heads));
        if all.clone().any(|&d| d == 0) {
            problems.push("every extent and the head count must be positive".into());
            return Err(Error::Input(problems.join("; ")));
        }
        let [_, t, h, w] = self.input_shape;
        let [ch1, t1, h1, w1] = self.base_shape;
        let [_, h2, w2] = self.elab_shape;
        if t % t1 != 0 {
            problems.push(format!("base frames {t1} must divide input frames {t}"));
        }
        if ch1 % self.attention_heads != 0 {
            problems.push(format!(
                "base channels {ch1} must be divisible by {} attention heads",
                self.attention_heads
            ));
        }
        if self.relevance_kernel.is_multiple_of(2) {
            problems.push(format!("relevance kernel must be odd, got {}", self.relevance_kernel));
        }
        // Each stride-2 layer maps an extent e to ceil(e/2).
        let mut backbone_strides = None;
        let (mut eh, mut ew) = (h, w);
        for layers in 0..=8 {
            if (eh, ew) == (h1, w1) {
                backbone_strides = Some(if layers == 0 { vec![1] } else { vec![2; layers] });
                break;
            }
            (eh, ew) = (conv_extent(eh, 2), conv_extent(ew, 2));
        }
        if backbone_strides.is_none() {
            problems.push(format!(
                "no stack of stride-2 layers maps {h}x{w} to base {h1}x{w1}"
            ));
        }
        let elab_stride = (1..=h1.max(w1)).find(|&s| conv_extent(h1, s) == h2 && conv_extent(w1, s) == w2);
        if elab_stride.is_none() {
            problems.push(format!("no single stride maps base {h1}x{w1} to elaborated {h2}x{w2}"));
        }
        if !problems.is_empty() {
            return Err(Error::Input(problems.join("; ")));
        }
        Ok(ShapePlan {
            frames_per_step: t / t1,
            backbone_strides: backbone_strides.unwrap(),
            elab_stride: elab_stride.unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_plans() {
        let desk = CareConfig::desk().validate().unwrap();
        assert_eq!(desk.frames_per_step, 2);
        assert_eq!(desk.backbone_strides, vec![2, 2]);
        assert_eq!(desk.elab_stride, 2);

        let reference = CareConfig::reference(4, 140).validate().unwrap();
        assert_eq!(reference.frames_per_step, 2);
        assert_eq!(reference.backbone_strides, vec![2, 2, 2]);
        assert_eq!(reference.elab_stride, 2);

        CareConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_single_domain_and_bad_shapes() {
        let mut c = CareConfig::desk();
        c.domains = 1;
        assert!(c.validate().is_err());
        let mut c = CareConfig::desk();
        c.base_shape = [16, 3, 8, 8];
        assert!(c.validate().is_err());
        let mut c = CareConfig::desk();
        c.elab_shape = [4, 5, 4];
        assert!(c.validate().is_err());
        let mut c = CareConfig::desk();
        c.attention_heads = 3;
        assert!(c.validate().is_err());
    }
}
