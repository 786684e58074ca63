//! Class-balancing augmentation: the twelve-transform random policy, the
//! oversampling plan that matches every class to the majority count, and
//! deterministic preprocessing into model input tensors.

mod balance;
mod policy;
mod preprocess;
mod transform;

pub use balance::{balance_plan, materialize, BalancePlan, PlannedCopy};
pub use policy::{rand_augment, AugmentPolicy};
pub use preprocess::preprocess;
pub use transform::{apply_transform, magnitude_map, TransformKind, MAGNITUDE_TABLE_VERSION};
