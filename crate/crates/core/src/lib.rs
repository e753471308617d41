pub mod command;
pub mod crdt;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod net;
pub mod scenario;
pub mod sensing;
