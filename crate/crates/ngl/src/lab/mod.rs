pub mod config;
pub mod experiment;
pub mod growth;
pub mod mtp;
pub mod profile;

pub use config::{ConfigError, ConfigMap};
pub use experiment::{
    default_config, run_experiment, CheckRecord, ExperimentError, ExperimentManifest,
};
pub use growth::{growth_estimates, sig12, GrowthEstimates, GrowthError, GrowthProfile};
pub use mtp::{
    cut_edge_transport, mtp_test, neighbor_transport, parent_transport, BallView, MtpParams,
    MtpReport, TransportSpec,
};
pub use profile::{
    ball_profile, bfs_between, bfs_distances, random_simple_path, splice_loops, BallProfile,
    Distances, GraphOracle,
};
