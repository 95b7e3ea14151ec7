pub mod dataset;
pub mod detect;
pub mod domain;
pub mod imaging;
pub mod store;
pub mod synth;
