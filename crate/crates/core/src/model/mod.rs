//! Desk-scale multimodal decoder: configuration, segment layout, attention
//! capture, steering hook and the transformer itself.

mod attention;
mod config;
mod hook;
mod layout;
mod scene;
mod transformer;

pub use attention::{AttentionTensor, HeadRows, ROW_SUM_TOLERANCE};
pub use config::ModelConfig;
pub use hook::{SteerFn, SteeringHook};
pub use layout::{SegmentLayout, Span};
pub use scene::{Cell, Scene, VisualCell};
pub use transformer::{
    DecodeSession, LayerRows, Model, PartialPrefill, PrefillOutput, ResumeState, SeqToken, Sequence, StepOutput,
};
