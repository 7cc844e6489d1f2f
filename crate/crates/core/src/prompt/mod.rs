//! Image-independent visual prompts over a frozen backbone.

mod params;
mod tune;

pub use params::{apply_pixel_prompt, apply_token_prompt, border_positions, Attached, PromptParams, PromptVariant};
pub use tune::{
    eval_disambiguation, eval_downstream, prompt_loss_and_grad, prompt_loss_var, tune_prompt, DisambiguationRow,
    PromptLoss, TuneConfig, TuneOutcome, TuneStep,
};
