//! Training algorithms: U-MAPPO and U-QMIX with the cross-group inverse loss.

pub mod buffer;
pub mod gae;
pub mod hyper;
pub mod losses;
pub mod mappo;
pub mod metrics;
pub mod qmix;
pub mod rollout;
pub mod schedule;
pub mod train;
