pub mod autodiff;
pub mod denseengine;
pub mod engine;
pub mod exprgraph;
pub mod harness;
pub mod planner;
pub mod relengine;
pub mod trainer;
