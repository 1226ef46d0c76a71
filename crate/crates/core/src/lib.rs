//! Incremental object detection with a frozen old model, a trainable
//! incremental model and an assistant residual model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: reverse-mode differentiable `f64` tensors and a
//!   finite-difference gradient checker.
//! - [`boxgeom`]: IoU, per-class NMS and box-delta coding.
//! - [`detector`]: a small two-stage detector (backbone, RPN, RoI head)
//!   with its training losses and checkpoint format.
//! - [`distill`]: attention-map, residual and joint classification
//!   distillation losses.
//! - [`pseudo_gt`]: pseudo ground-truth from the old model and the
//!   low/high confidence split.
//! - [`trainer`]: base training, the triple network and incremental training.
//! - [`synthdata`]: deterministic synthetic shape scenes.
//! - [`eval`]: VOC-style AP/mAP and the experiment harness.
//! - [`gradsuite`]: finite-difference checks of every op and loss.

pub mod boxgeom;
pub mod detector;
pub mod distill;
pub mod eval;
pub mod gradsuite;
pub mod pseudo_gt;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use boxgeom::{BBox, Detection};
pub use detector::{DetectorConfig, DetectorModel};
pub use tensor::{Graph, Tensor, Var};
