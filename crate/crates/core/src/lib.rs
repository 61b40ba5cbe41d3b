//! Anchor-frame attention propagation for consistent video editing, with a
//! toy edit network, attention-based point tracking, equivariant
//! augmentation and consistency metrics.

pub mod anchor;
pub mod attention;
pub mod container;
pub mod equivariance;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod propagation;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tracking;

pub use anchor::{anchor_attention, build_anchor_cache, select_anchor_indices, AnchorCache};
pub use attention::{cross_frame_attention, self_attention, AttentionConfig, FrameFeatures, Qkv};
pub use error::{Error, Result};
pub use network::{NetworkConfig, ToyEditNetwork};
pub use parallel::run_parallel;
pub use propagation::{edit_video, EditedVideo, Mode};
pub use synth::{generate_clip, ClipSpec, SyntheticClip};
pub use tensor::Matrix;
pub use tracking::{evaluate_tracking, EvalConfig, TrackingTable};
