//! The fine-tuning objective: sparse cross-entropy plus at most one
//! regularizer. All losses work in `f64` on `(B, K, H, W)` logits and
//! `(B, C, h, w)` features and return analytic gradients.

mod ce;
mod festa;
mod podnet;
mod sdr;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ce::{disca_loss, sparse_ce};
pub use festa::{festa_loss, FestaOutput};
pub use podnet::podnet_loss;
pub use sdr::{compute_prototypes, sdr_loss, Prototypes, SdrOutput, SdrWeights};

/// A scalar loss and its gradient with respect to the input it was given.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    None,
    Disca,
    Podnet,
    Sdr,
    Festa,
}

impl Regularizer {
    pub const ALL: [Regularizer; 5] = [
        Regularizer::None,
        Regularizer::Disca,
        Regularizer::Podnet,
        Regularizer::Sdr,
        Regularizer::Festa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Disca => "disca",
            Regularizer::Podnet => "podnet",
            Regularizer::Sdr => "sdr",
            Regularizer::Festa => "festa",
        }
    }

    /// Whether the memory network's outputs are needed during fine-tuning.
    pub fn needs_memory(self) -> bool {
        matches!(
            self,
            Regularizer::Disca | Regularizer::Podnet | Regularizer::Sdr
        )
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown regularizer `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub regularizer: Regularizer,
    pub weight_disca: f64,
    pub weight_pod: f64,
    pub weight_sdr_match: f64,
    pub weight_sdr_rep: f64,
    pub weight_sdr_att: f64,
    pub weight_festa: f64,
    pub prototype_momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::None,
            weight_disca: 1.0,
            weight_pod: 1.0,
            weight_sdr_match: 1.0,
            weight_sdr_rep: 1.0,
            weight_sdr_att: 1.0,
            weight_festa: 1.0,
            prototype_momentum: 0.9,
        }
    }
}

impl LossConfig {
    pub fn with_regularizer(regularizer: Regularizer) -> Self {
        Self {
            regularizer,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("weight_disca", self.weight_disca),
            ("weight_pod", self.weight_pod),
            ("weight_sdr_match", self.weight_sdr_match),
            ("weight_sdr_rep", self.weight_sdr_rep),
            ("weight_sdr_att", self.weight_sdr_att),
            ("weight_festa", self.weight_festa),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be a nonnegative number, got {w}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.prototype_momentum) {
            return Err(Error::Config(format!(
                "prototype_momentum must lie in [0, 1], got {}",
                self.prototype_momentum
            )));
        }
        Ok(())
    }

    fn sdr_weights(&self) -> SdrWeights {
        SdrWeights {
            matching: self.weight_sdr_match,
            repulsive: self.weight_sdr_rep,
            attracting: self.weight_sdr_att,
        }
    }
}

/// Labels at feature resolution: a cell is labeled iff its `stride × stride`
/// block contains exactly one distinct annotated class.
pub fn downsample_labels(
    targets: ArrayView3<'_, u8>,
    stride: usize,
    ignore: u8,
) -> Result<Array3<u8>> {
    let (b, h, w) = targets.dim();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::InputContract(format!(
            "label map {h}x{w} is not divisible by stride {stride}"
        )));
    }
    Ok(Array3::from_shape_fn(
        (b, h / stride, w / stride),
        |(n, cy, cx)| {
            let mut found = ignore;
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let v = targets[[n, y, x]];
                    if v == ignore {
                        continue;
                    }
                    if found == ignore {
                        found = v;
                    } else if found != v {
                        return ignore;
                    }
                }
            }
            found
        },
    ))
}

/// Outputs of the frozen memory network on the same batch.
#[derive(Debug, Clone, Copy)]
pub struct MemoryOutputs<'a> {
    pub logits: ArrayView4<'a, f64>,
    pub features: ArrayView4<'a, f64>,
}

/// Everything the objective needs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub logits: ArrayView4<'a, f64>,
    pub features: ArrayView4<'a, f64>,
    /// Full-resolution sparse targets `(B, H, W)`.
    pub targets: ArrayView3<'a, u8>,
    pub ignore: u8,
    pub memory: Option<MemoryOutputs<'a>>,
    /// Memory classes excluding background.
    pub old_classes_of_interest: &'a [u8],
    /// All memory classes, background included.
    pub old_classes: &'a [u8],
}

/// Weighted loss terms in a fixed order; `total` is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub breakdown: LossBreakdown,
    pub dlogits: Array4<f64>,
    /// Gradient with respect to the features, for feature-level regularizers.
    pub dfeatures: Option<Array4<f64>>,
    /// Updated prototype state for the next step.
    pub prototypes: Prototypes,
}

fn require_memory<'a>(inputs: &LossInputs<'a>, reg: Regularizer) -> Result<MemoryOutputs<'a>> {
    inputs
        .memory
        .ok_or_else(|| Error::Precondition(format!("{reg} needs memory network outputs")))
}

/// Cross-entropy plus the configured regularizer.
pub fn total_loss(
    cfg: &LossConfig,
    inputs: LossInputs<'_>,
    prototypes: &Prototypes,
) -> Result<LossResult> {
    cfg.validate()?;
    let ce = sparse_ce(inputs.logits, inputs.targets, inputs.ignore)?;
    let mut terms = vec![("ce".to_owned(), ce.value)];
    let mut dlogits = ce.grad;
    let mut dfeatures = None;
    let mut next_prototypes = prototypes.clone();

    let feature_labels = || -> Result<Array3<u8>> {
        let (_, _, h, w) = inputs.logits.dim();
        let (_, _, fh, fw) = inputs.features.dim();
        if fh == 0 || h % fh != 0 || h / fh != w / fw.max(1) {
            return Err(Error::InputContract(format!(
                "feature map {fh}x{fw} is not an integer downscale of {h}x{w}"
            )));
        }
        downsample_labels(inputs.targets, h / fh, inputs.ignore)
    };

    match cfg.regularizer {
        Regularizer::None => {}
        Regularizer::Disca => {
            let memory = require_memory(&inputs, cfg.regularizer)?;
            let reg = disca_loss(inputs.logits, memory.logits, inputs.old_classes_of_interest)?;
            terms.push(("disca".to_owned(), cfg.weight_disca * reg.value));
            dlogits.scaled_add(cfg.weight_disca, &reg.grad);
        }
        Regularizer::Podnet => {
            let memory = require_memory(&inputs, cfg.regularizer)?;
            let reg = podnet_loss(inputs.features, memory.features)?;
            terms.push(("podnet".to_owned(), cfg.weight_pod * reg.value));
            dfeatures = Some(reg.grad * cfg.weight_pod);
        }
        Regularizer::Sdr => {
            let memory = require_memory(&inputs, cfg.regularizer)?;
            let labels = feature_labels()?;
            let old_labels = labels.mapv(|v| {
                if inputs.old_classes.contains(&v) {
                    v
                } else {
                    inputs.ignore
                }
            });
            let memory_prototypes = compute_prototypes(
                memory.features,
                old_labels.view(),
                inputs.ignore,
                &Prototypes::default(),
                0.0,
            )?;
            let out = sdr_loss(
                inputs.features,
                labels.view(),
                inputs.ignore,
                prototypes,
                &memory_prototypes,
                cfg.prototype_momentum,
                cfg.sdr_weights(),
            )?;
            terms.push(("sdr_match".to_owned(), cfg.weight_sdr_match * out.matching));
            terms.push(("sdr_rep".to_owned(), cfg.weight_sdr_rep * out.repulsive));
            terms.push(("sdr_att".to_owned(), cfg.weight_sdr_att * out.attracting));
            dfeatures = Some(out.grad);
            next_prototypes = out.prototypes;
        }
        Regularizer::Festa => {
            let labels = feature_labels()?;
            let out = festa_loss(inputs.features, labels.view(), inputs.ignore)?;
            terms.push(("festa_spatial".to_owned(), cfg.weight_festa * out.spatial));
            terms.push(("festa_feature".to_owned(), cfg.weight_festa * out.feature));
            dfeatures = Some(out.grad * cfg.weight_festa);
        }
    }

    let total = terms.iter().map(|(_, v)| v).sum();
    Ok(LossResult {
        breakdown: LossBreakdown { total, terms },
        dlogits,
        dfeatures,
        prototypes: next_prototypes,
    })
}
