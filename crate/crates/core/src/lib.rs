pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose_io;
pub mod synthetic;
pub mod train;
