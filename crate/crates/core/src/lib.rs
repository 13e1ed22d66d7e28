pub mod fourbar;
pub mod lattice;
pub mod nodes;
pub mod pose;
pub mod proto;
pub mod sim;
pub mod sync;
pub mod teleop;
pub mod types;
pub mod wrench;

pub use pose::Pose6D;
pub use types::{GripState, Timestamp, Wrench6D};
