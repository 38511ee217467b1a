use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{Stage, TargetKind, TrainConfig};
use super::metrics::{evaluate, Inference, Metrics};
use super::train::{train_stage, TrainData, TrainLog};
use crate::datagen::{generate_corpus, Corpus, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{CountModel, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Strong pretraining, then weak finetuning with strong samples mixed in.
    Full,
    /// Weak stage only, from scratch, no strong samples.
    NoPretrain,
    /// Strong stage only.
    NoWeak,
    /// Full pipeline with a density-map strong target.
    DensityTarget,
    /// Full pipeline with both classification loss weights at zero.
    NoAlignment,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPretrain,
        Variant::NoWeak,
        Variant::DensityTarget,
        Variant::NoAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "no-pretrain",
            Variant::NoWeak => "no-weak",
            Variant::DensityTarget => "density-target",
            Variant::NoAlignment => "no-alignment",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub strong: usize,
    pub weak: usize,
    pub val: usize,
    pub eval: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            strong: 2000,
            weak: 1000,
            val: 200,
            eval: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub model: ModelConfig,
    pub strong_data: SceneSpec,
    pub weak_data: SceneSpec,
    pub eval_data: SceneSpec,
    pub sizes: CorpusSizes,
    pub strong: TrainConfig,
    pub weak: TrainConfig,
    pub kappa: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            model: ModelConfig::default(),
            strong_data: SceneSpec::default(),
            weak_data: SceneSpec::default(),
            eval_data: SceneSpec::default(),
            sizes: CorpusSizes::default(),
            strong: TrainConfig::default(),
            weak: TrainConfig {
                stage: Stage::Weak,
                ..TrainConfig::default()
            },
            kappa: 0.0,
        }
    }
}

/// The corpora one ablation run trains and evaluates on.
pub struct AblationData {
    pub strong: Corpus,
    pub strong_val: Corpus,
    pub weak: Corpus,
    pub weak_val: Corpus,
    pub eval: Corpus,
}

impl AblationData {
    pub fn generate(cfg: &AblationConfig) -> Result<Self> {
        let s = &cfg.sizes;
        Ok(Self {
            strong: generate_corpus(&cfg.strong_data, Split::Train, s.strong)?,
            strong_val: generate_corpus(&cfg.strong_data, Split::Val, s.val)?,
            weak: generate_corpus(&cfg.weak_data, Split::Train, s.weak)?,
            weak_val: generate_corpus(&cfg.weak_data, Split::Val, s.val)?,
            eval: generate_corpus(&cfg.eval_data, Split::Test, s.eval)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Metrics,
    /// Loss weights of each stage that ran, for audit.
    pub strong_weights: Option<LossWeights>,
    pub weak_weights: Option<LossWeights>,
    pub target: TargetKind,
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub model: CountModel,
    pub row: AblationRow,
    pub logs: Vec<TrainLog>,
}

/// Stage configurations of one variant.
pub fn variant_configs(variant: Variant, strong: &TrainConfig, weak: &TrainConfig) -> (Option<TrainConfig>, Option<TrainConfig>) {
    let strong = TrainConfig {
        stage: Stage::Strong,
        ..strong.clone()
    };
    let weak = TrainConfig {
        stage: Stage::Weak,
        ..weak.clone()
    };
    let no_cls = |c: &TrainConfig| TrainConfig {
        weights: LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            ..c.weights
        },
        ..c.clone()
    };
    match variant {
        Variant::Full => (Some(strong), Some(weak)),
        Variant::NoPretrain => (
            None,
            Some(TrainConfig {
                weights: LossWeights {
                    gamma: 0.0,
                    ..weak.weights
                },
                ..weak
            }),
        ),
        Variant::NoWeak => (Some(strong), None),
        Variant::DensityTarget => (
            Some(TrainConfig {
                target: TargetKind::Density,
                ..strong
            }),
            Some(TrainConfig {
                target: TargetKind::Density,
                ..weak
            }),
        ),
        Variant::NoAlignment => (Some(no_cls(&strong)), Some(no_cls(&weak))),
    }
}

/// Trains one variant from the shared seed and evaluates it on the
/// evaluation corpus. `pretrained` short-circuits the strong stage when a
/// model trained with the same strong configuration already exists.
pub fn run_variant(
    variant: Variant,
    cfg: &AblationConfig,
    data: &AblationData,
    pretrained: Option<&CountModel>,
) -> Result<VariantOutcome> {
    let (strong_cfg, weak_cfg) = variant_configs(variant, &cfg.strong, &cfg.weak);
    let mut model = CountModel::new(cfg.model.clone())?;
    let mut logs = Vec::new();
    if let Some(sc) = &strong_cfg {
        match pretrained {
            Some(m) => model = m.clone(),
            None => {
                let (m, log) = train_stage(
                    model,
                    TrainData {
                        primary: &data.strong,
                        strong: None,
                        val: Some(&data.strong_val),
                    },
                    sc,
                )?;
                model = m;
                logs.push(log);
            }
        }
    }
    if let Some(wc) = &weak_cfg {
        let (m, log) = train_stage(
            model,
            TrainData {
                primary: &data.weak,
                strong: Some(&data.strong),
                val: Some(&data.weak_val),
            },
            wc,
        )?;
        model = m;
        logs.push(log);
    }
    let metrics = evaluate(
        &model,
        &data.eval,
        Inference {
            kappa: cfg.kappa,
            tiled: false,
        },
    )?;
    Ok(VariantOutcome {
        row: AblationRow {
            variant,
            metrics,
            strong_weights: strong_cfg.as_ref().map(|c| c.weights),
            weak_weights: weak_cfg.as_ref().map(|c| c.weights),
            target: strong_cfg.or(weak_cfg).map_or(TargetKind::Cardinality, |c| c.target),
        },
        model,
        logs,
    })
}

/// Trains and evaluates every requested variant. `full` and `no-weak` share
/// one strong stage, trained once.
pub fn run_ablation(cfg: &AblationConfig) -> Result<(Vec<VariantOutcome>, AblationData)> {
    let variants = cfg
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let data = AblationData::generate(cfg)?;
    let shares = |v: &Variant| matches!(v, Variant::Full | Variant::NoWeak);
    let shared = if variants.iter().any(shares) {
        let (strong_cfg, _) = variant_configs(Variant::Full, &cfg.strong, &cfg.weak);
        let (m, log) = train_stage(
            CountModel::new(cfg.model.clone())?,
            TrainData {
                primary: &data.strong,
                strong: None,
                val: Some(&data.strong_val),
            },
            &strong_cfg.expect("full pretrains"),
        )?;
        Some((m, log))
    } else {
        None
    };
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let pre = shared.as_ref().filter(|_| shares(&v));
        let mut outcome = run_variant(v, cfg, &data, pre.map(|(m, _)| m))?;
        if let Some((_, log)) = pre {
            outcome.logs.insert(0, log.clone());
        }
        out.push(outcome);
    }
    Ok((out, data))
}
