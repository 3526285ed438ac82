//! LAMB/Adam, learning-rate schedules and emulated mixed precision.

pub mod mixed;
pub mod optimizer;
pub mod precision;
pub mod schedule;

pub use mixed::{mixed_precision_step, StepOutcome};
pub use optimizer::{
    adam_step, lamb_step, BlockUpdate, Optimizer, OptimizerConfig, OptimizerKind, OptimizerState,
};
pub use precision::{round_half, PrecisionMode, PrecisionPolicy, HALF_MAX};
pub use schedule::{LrSchedule, ScheduleKind};
