//! Planning and robust execution for trains on grid rail networks.
//!
//! The crate models a grid railway (per-cell transition tables), generates
//! seeded benchmark instances, simulates episodes deterministically with
//! speed counters and random breakdowns, plans collision-free timed paths
//! with safe-interval search, improves them with large neighborhood search,
//! and executes plans robustly with an order-preserving stopping policy plus
//! scheduled partial replanning.

pub mod railmap;
pub mod executor;
pub mod format;
pub mod generate;
pub mod lns;
pub mod planner;
pub mod scenario;
pub mod simengine;
pub mod sipp;
