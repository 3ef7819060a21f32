//! Layer implementations.

pub mod bn;
pub mod dsg;
pub mod output;
pub mod pool;

pub use bn::{bn_backward, bn_forward, update_running_stats, BnCache, BnParams};
pub use dsg::{DsgContext, DsgGrads, DsgKind, DsgLayer, SelectOptions, Stage};
pub use output::OutputLayer;
pub use pool::{Pool2d, PoolContext, PoolKind};
