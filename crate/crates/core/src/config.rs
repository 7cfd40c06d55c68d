//! Run configuration with defaults pinned to the reference pipeline
//! constants: dilation sigma 2, stage-2 lambda 10, learning rate 1e-4,
//! batch size 150, 8 orientations, 20 key-points on 56x56 maps.

use crate::evaluation::{Protocol, DEFAULT_TRIALS};
use crate::fusion::FusionConfig;
use crate::heatmaps::DEFAULT_SIGMA;
use crate::losses::DEFAULT_STAGE2_LAMBDA;
use crate::retrieval::RerankParams;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RerankSettings {
    pub enabled: bool,
    pub params: RerankParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub rerank: RerankSettings,
    pub sigma: f64,
    pub stage2_lambda: f64,
    pub fusion: FusionConfig,
    pub seed: u64,
    pub trials: u32,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            protocol: Protocol::Veri,
            rerank: RerankSettings::default(),
            sigma: DEFAULT_SIGMA,
            stage2_lambda: DEFAULT_STAGE2_LAMBDA,
            fusion: FusionConfig::default(),
            seed: 0,
            trials: DEFAULT_TRIALS,
            output: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmaps::{DEFAULT_MAP_SIZE, NUM_KEYPOINT_CHANNELS};
    use crate::orientation::NUM_ORIENTATIONS;

    #[test]
    fn defaults_match_pipeline_constants() {
        let config = RunConfig::default();
        assert_eq!(config.sigma, 2.0);
        assert_eq!(config.stage2_lambda, 10.0);
        assert_eq!(config.fusion.learning_rate, 1e-4);
        assert_eq!(config.fusion.batch_size, 150);
        assert_eq!(config.fusion.global_dim, 2048);
        assert_eq!(config.trials, 10);
        assert!(!config.rerank.enabled);
        assert_eq!(config.rerank.params.k1, 20);
        assert_eq!(config.rerank.params.k2, 6);
        assert_eq!(config.rerank.params.lambda, 0.3);
        assert_eq!(NUM_ORIENTATIONS, 8);
        assert_eq!(NUM_KEYPOINT_CHANNELS, 20);
        assert_eq!(DEFAULT_MAP_SIZE, 56);
    }
}
