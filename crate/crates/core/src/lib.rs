//! Simulation of a cell-free massive MIMO downlink assisted by a simultaneously
//! transmitting and reflecting surface: correlated channel statistics, LMMSE
//! estimation of the cascaded channels, passive beamforming optimization,
//! closed-form achievable rates and Monte-Carlo checks of every closed form.

pub mod channel_sampler;
pub mod error;
pub mod estimation_stats;
pub mod linalg;
pub mod mc_engine;
pub mod net_config;
pub mod performance;
pub mod pgam;
pub mod spatial_correlation;
pub mod star_ris;
pub mod sweep;

pub use error::{Error, Result};
