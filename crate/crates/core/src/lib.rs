//! Action lifecycle tracking, adaptive polling and routine scheduling for
//! smart-space devices.

pub mod dist;
pub mod pollplan;
pub mod lifecycle;
pub mod routine;
pub mod sched;
pub mod resched;
pub mod sim;
pub mod cli;
