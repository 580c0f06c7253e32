//! End-to-end CT slice classification pipeline.
//!
//! The crate covers the full path from volumetric scans to evaluation
//! reports: NIfTI ingestion ([`dataio`]), deterministic preprocessing with
//! CLAHE and two-lung ROI extraction ([`imaging`]), seeded balancing
//! augmentation ([`augment`]), a small reverse-mode autodiff engine
//! ([`tensor`]), a multi-branch pooling classifier ([`model`]), two-phase
//! transfer training ([`train`]), ROC/AUC evaluation ([`metrics`]), and a
//! synthetic lung-phantom generator ([`synth`]) so everything runs at desk
//! scale without clinical data. The [`cli`] module wires the stages into
//! config-driven subcommands.

pub mod augment;
pub mod cli;
pub mod dataio;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
