//! Two-stage inference, fusion, evaluation and the oracle analyses.

pub mod eval;
pub mod fuse;
pub mod map;
pub mod oracle;
pub mod segment;
pub mod synth;

pub use eval::{miou, ClassIou, EvalReport, IouAccumulator};
pub use fuse::{fuse, ProposalSet};
pub use map::{SegmentationMap, UNLABELED};
pub use oracle::{
    label_by_overlap, oracle_class_analysis, oracle_mask_analysis, EncoderClassifier, MaskClassifier, OracleSample,
};
pub use segment::{segment, ProposalPrediction, SegmentOptions, SegmentOutput, Skip, FORCED_LAMBDA};
pub use synth::{render_scene, synth_generate, write_dataset, Scene, SynthConfig};
