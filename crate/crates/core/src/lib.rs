pub mod attribution;
pub mod calibration;
pub mod error;
pub mod graph;
pub mod intervention;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod record;
pub mod signal;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod validation;
