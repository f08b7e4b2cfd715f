//! End-to-end recipes shared by the command-line tool and the acceptance
//! suite: procedural data, both training stages, and the ablation sweep.

use crate::error::Result;
use crate::eval::{ablation_sweep, AblationRow, Variant};
use crate::model::{BaseModel, ModelConfig, TideModel, Toggles};
use crate::scenes::{generate_many, DepthRule, Grammar, Quadruple};
use crate::train::{finetune_session, pretrain_session, EncodedSample, Stage, TrainConfig};

/// Ablation variants in table order.
pub const VARIANTS: [(&str, Toggles); 4] = [
    ("ils_only", Toggles { ils: true, tan: false }),
    ("tan_only", Toggles { ils: false, tan: true }),
    ("both", Toggles::BOTH),
    ("neither", Toggles::NEITHER),
];

/// Quadruples for seeds `0..n` at `size` pixels.
pub fn procedural_dataset(n: u64, size: usize) -> Result<Vec<Quadruple>> {
    generate_many(&(0..n).collect::<Vec<_>>(), &Grammar::with_size(size))
}

pub fn pretrain(model_config: ModelConfig, config: TrainConfig, data: &[EncodedSample]) -> Result<BaseModel> {
    let mut s = pretrain_session(model_config, TrainConfig { stage: Stage::A, ..config })?;
    s.run(data, u64::MAX, None)?;
    Ok(s.model)
}

/// Stage-B model for `toggles`; TAN layers are only built when used.
pub fn finetune(
    base: &BaseModel,
    model_config: ModelConfig,
    config: TrainConfig,
    toggles: Toggles,
    data: &[EncodedSample],
) -> Result<TideModel> {
    let model_config = ModelConfig { tan: toggles.tan, ..model_config };
    let mut s = finetune_session(base, model_config, TrainConfig { toggles, ..config })?;
    s.run(data, u64::MAX, None)?;
    Ok(s.model)
}

/// Trains every variant from the same base with the same seed and budget,
/// then scores `captions` (seed `seed + k` for caption k) per variant.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &BaseModel,
    model_config: &ModelConfig,
    config: &TrainConfig,
    data: &[EncodedSample],
    captions: &[String],
    steps: usize,
    seed_value: u64,
    rule: &DepthRule,
) -> Result<Vec<AblationRow>> {
    let models: Vec<TideModel> = crate::par::map(&VARIANTS, |(name, toggles)| {
        log::info!("training variant {name}");
        finetune(base, model_config.clone(), config.clone(), *toggles, data)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let variants: Vec<Variant<'_>> = VARIANTS
        .iter()
        .zip(&models)
        .map(|((name, toggles), model)| Variant { name: name.to_string(), model, toggles: *toggles })
        .collect();
    ablation_sweep(&variants, &config.schedule()?, captions, steps, seed_value, rule)
}
