#![allow(dead_code)]

use predloc::engine::Model;
use predloc::io::FrameRecord;
use predloc::param::Parameters;
use predloc::{BoundingBox, FeatureMap, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 2x2 grid, d = 4, two layers.
pub fn small_config(hidden: usize) -> RunConfig {
    RunConfig {
        layers: 2,
        hidden_dim: hidden,
        attention_dim: 3,
        top_k: 2,
        boxes_per_frame: 3,
        ..RunConfig::default()
    }
}

pub fn random_frames(w: usize, h: usize, d: usize, count: usize, seed: u64) -> Vec<FrameRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let data = (0..w * h * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut frame = FrameRecord::new(t, FeatureMap::new(w, h, d, data).unwrap());
            for _ in 0..4 {
                frame.proposals.push(BoundingBox {
                    cx: rng.random_range(0.05..0.95),
                    cy: rng.random_range(0.05..0.95),
                    w: rng.random_range(0.1..0.6),
                    h: rng.random_range(0.1..0.6),
                    score: Some(rng.random_range(0.0..1.0)),
                });
            }
            frame
        })
        .collect()
}

pub fn set_tensor(model: &mut Model, name: &str, values: &[f64]) {
    for (n, p) in model.params_mut() {
        if n == name {
            p.value.data_mut().copy_from_slice(values);
            return;
        }
    }
    panic!("no tensor {name}");
}

pub fn tensor(model: &Model, name: &str) -> Vec<f64> {
    model
        .params()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p.value.data().to_vec())
        .unwrap_or_else(|| panic!("no tensor {name}"))
}

pub fn grad(model: &Model, name: &str) -> Vec<f64> {
    model
        .params()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p.grad.data().to_vec())
        .unwrap_or_else(|| panic!("no tensor {name}"))
}

pub fn names(model: &Model) -> Vec<String> {
    model.params().into_iter().map(|(n, _)| n).collect()
}
