//! Windowed-transformer pipeline for grading joint-space narrowing severity
//! from radiograph-like images: a hierarchical shifted-window attention
//! encoder, one-vs-rest MLP grade heads, drift-correction fine-tuning between
//! acquisition sites, a synthetic two-site data generator, and evaluation
//! tooling (metrics, embeddings, distribution distance, saliency maps).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod rng;
pub mod swin;
pub mod tape;
pub mod tensor;
pub mod train;
