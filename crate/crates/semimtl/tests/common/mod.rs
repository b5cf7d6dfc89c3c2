#![allow(dead_code)]

use semimtl::nets::GeneratorConfig;
use semimtl::trainer::{TrainConfig, TrainerMode};
use tensorcore::Tensor;

/// Narrow networks on 8-sample datasets; a few iterations take milliseconds.
pub fn tiny(mode: TrainerMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(mode, seed);
    for d in &mut cfg.datasets {
        d.size = 8;
        d.test_size = 4;
    }
    cfg.iterations = 4;
    cfg.batch_size = 2;
    cfg.generator = GeneratorConfig { encoder_channels: vec![4, 4, 4], decoder_channels: 4, ..Default::default() };
    cfg.discriminator.channels = vec![2, 2, 2, 2];
    cfg
}

pub fn bits(ts: &[Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}
