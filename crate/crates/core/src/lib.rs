pub mod calibration;
pub mod error;
pub mod exec;
pub mod features;
pub mod imaging;
pub mod neuralnet;
pub mod segmentation;
pub mod manifest;
pub mod screening;
pub mod synthdata;
pub mod pipeline;
