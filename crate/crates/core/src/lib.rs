pub mod datamodel;
pub mod encoders;
pub mod enhancement;
pub mod evaluation;
pub mod objectives;
pub mod rng;
pub mod scoring;
pub mod synthetic;
pub mod training;
