//! Transfer learning for sales forecasting of newly introduced products.

pub mod datagen;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod net;
pub mod seed;
pub mod similarity;
pub mod transfer;
