//! Preference-guided bridge diffusion for image-to-image translation.
//!
//! A source image `z0` and a pseudo-target `z1` are joined by a symmetric
//! diffusion bridge. A reward-conditioned score network learns to point from
//! bridge states toward the target; classifier-free guidance steers sampling
//! toward the preferred class, and tournament-selected winners feed an
//! incremental fine-tuning round.

// Negated comparisons reject NaN together with out-of-range values; the
// numeric kernels index several buffers per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bridge;
pub mod error;
pub mod feedback;
pub mod image;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod scorenet;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
pub use schedule::{Schedule, ScheduleConfig};
pub use scorenet::{Conditioning, LossKind, NetConfig, Reward, ScoreNetParams, TrainItem};
pub use sampler::{SampleRequest, SamplerConfig, ScoreModel};
pub use training::{LabeledPair, TrainConfig};
