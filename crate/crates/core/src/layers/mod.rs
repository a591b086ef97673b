//! Variational dense layers and multi-head networks.

mod network;
mod snapshot;

pub use network::{
    forward, sigma_from_rho, softplus_inverse, HeadMode, LayerNoise, LayerVars, NetworkNoise, NetworkVars,
    PosteriorFamily, VariationalLayer, VariationalNetwork,
};
pub use snapshot::{PosteriorSnapshot, SnapshotLayer};
