//! One TOML file configures every stage. Missing tables and fields fall
//! back to defaults, so a config file only needs the values it overrides.
//!
//! Schema (defaults shown):
//!
//! ```toml
//! [link]
//! mbps = 100.0              # modeled V2V link rate, megabits per second
//! bg_share_spacing = 0.8    # background decimation grid for transmission, m
//!
//! [sim.radar]
//! mount_yaw_offset = 0.0    # sensor yaw relative to the vehicle, rad
//! fov = 6.283185307179586   # radar field of view, rad
//! max_range = 80.0          # m
//! range_noise_sigma = 0.1   # m
//! velocity_noise_sigma = 0.1 # m/s
//! clutter_rate = 5.0        # expected false returns per sweep
//!
//! [sim.camera]
//! fov = 2.1                 # rad
//! focal_px = 600.0
//! width_px = 1280.0
//! height_px = 720.0
//! max_range = 80.0          # m
//! depth_noise_frac = 0.05   # sigma as a fraction of true depth
//! miss_rate = 0.0           # detection dropout probability
//! descriptor_noise_sigma = 0.1
//!
//! [sim.sampling]
//! vehicle_spacing = 0.5     # radar sample spacing on vehicle faces, m
//! background_spacing = 0.25 # radar sample spacing on background, m
//!
//! [sep]
//! tau_v = 0.5               # stationary-curve inlier threshold, m/s
//! delta_d = 2.0             # frustum depth half-band, m
//! eps_xy = 1.0              # spatial-Doppler filter position scale, m
//! eps_v = 1.0               # spatial-Doppler filter velocity scale, m/s
//! min_pts = 3               # density-filter core threshold
//! min_cluster_size = 3
//! ransac_iters = 64
//!
//! [align]
//! max_total_iters = 60      # phase-1 cap is half of this
//! d_max = 0.3               # phase-1 convergence threshold, m
//! nn_reject_radius = 3.0    # phase-2 correspondence gate, m
//! bg_eps = 1.0              # background filter DBSCAN epsilon, m
//! bg_min_pts = 4
//!
//! [net]
//! steps = 4                 # message-passing steps
//! eta = 0.5                 # embedding update blend factor
//! d_max = 80.0              # edge-feature distance normalizer, m
//! match_threshold = 0.5
//!
//! [train]
//! epochs = 30
//! learning_rate = 0.001
//! seed = 7
//! ```

use crate::align::AlignConfig;
use crate::net::{NetConfig, TrainConfig};
use crate::sep::SepConfig;
use crate::sim::SimConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    /// Modeled V2V link rate, megabits per second.
    pub mbps: f64,
    /// Grid spacing used to thin the shared background cloud, meters.
    pub bg_share_spacing: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            mbps: 100.0,
            bg_share_spacing: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub link: LinkConfig,
    pub sim: SimConfig,
    pub sep: SepConfig,
    pub align: AlignConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&src)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let toml = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, toml)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        let cfg = PipelineConfig::default();
        cfg.save(&path).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);

        // A sparse file overrides only what it names.
        std::fs::write(&path, "[align]\nd_max = 0.5\n[link]\nmbps = 10.0\n").unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded.align.d_max, 0.5);
        assert_eq!(loaded.link.mbps, 10.0);
        assert_eq!(loaded.sep, cfg.sep);
        assert_eq!(loaded.net, cfg.net);
    }

    #[test]
    fn rejects_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[align]\nd_max = \"not a number\"\n").unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(ConfigError::Parse(_))
        ));
    }
}
