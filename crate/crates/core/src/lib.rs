//! TDMA slot allocation for Y-shaped, three-gateway multi-hop backbones.

pub mod allocator;
pub mod error;
pub mod paths;
pub mod plan;
pub mod relax;
pub mod report;
pub mod rounding;
pub mod sim;
pub mod timeline;
pub mod topology;
