//! Gaze-supervised chest X-ray tooling: fixation harmonization, fixation
//! heatmaps, gaze-attention and contrastive losses with analytic gradients,
//! human/model attention alignment metrics, an anatomical region atlas, and
//! region-grounded report prompting and evaluation.

pub mod condition;
pub mod error;
pub mod fixation;
pub mod losses;
pub mod metrics;
pub mod regions;
pub mod report;
pub mod saliency;
pub mod text_metrics;

pub use condition::Condition;
pub use error::{Error, Result};
pub use fixation::{
    harmonize, normalize_reflacx, pupil_area, FixationRecord, FixationSequence, ImageViewport,
    RawFixationRow, Source,
};
pub use losses::{
    focal_loss, gaze_loss, gaze_loss_multiscale, info_nce, total_loss, EmbeddingVector,
    LossBreakdown, LossConfig,
};
pub use metrics::{alignment_report, entropy_bits, jensen_shannon, nss, pearson, AlignmentReport};
pub use regions::{aggregate_bounds, match_keywords, render_mask, RegionActivation, RegionAtlas};
pub use report::{
    assemble_prompt, gate_conditions, generate, ConditionPrediction, GeneratedReport, PromptBundle,
    RetryPolicy, TemplateStyle,
};
pub use saliency::{render_heatmap, AttentionMap, DistributionView};
pub use text_metrics::{bleu, keyword_overlap, rouge_l, rouge_n};
