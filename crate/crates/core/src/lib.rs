pub mod autodiff;
pub mod backbone;
pub mod config;
mod container;
pub mod datagen;
pub mod experiment;
pub mod metrics;
pub mod pll;
pub mod report;
pub mod scoring;
pub mod ssfe;
pub mod tensor;

pub use container::ContainerError;
