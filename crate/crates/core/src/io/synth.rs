//! Desk-scale synthetic scenes.
//!
//! Every background cell rotates its channel pairs at a fixed angular rate
//! around a per-cell base vector, so its trajectory is deterministic and its
//! frame-to-frame feature change has the same magnitude in every cell. The
//! actor occupies one cell, hops to a random 4-neighbour with probability
//! `move_prob` per frame, and carries an autoregressive random feature
//! perturbation that no model can anticipate. Each frame lists a proposal at
//! the actor cell plus distractor proposals in other cells; the ground-truth
//! box is the actor cell's extent.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FrameRecord, VideoSequence};
use crate::localizer::BoundingBox;
use crate::numerics::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub video_id: String,
    pub label: Option<i32>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    pub actor: bool,
    pub distractors: usize,
    pub move_prob: f64,
    /// Radius of the background rotation.
    pub background_amplitude: f64,
    /// Angular step of the background rotation per frame.
    pub background_rate: f64,
    /// Standard deviation of the actor's per-frame innovation.
    pub actor_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            video_id: "synth".into(),
            label: None,
            width: 8,
            height: 8,
            channels: 16,
            frames: 200,
            actor: true,
            distractors: 5,
            move_prob: 0.05,
            background_amplitude: 0.05,
            background_rate: 0.3,
            actor_noise: 1.0,
        }
    }
}

fn cell_box(i: usize, j: usize, w: usize, h: usize) -> BoundingBox {
    BoundingBox {
        cx: (i as f64 + 0.5) / w as f64,
        cy: (j as f64 + 0.5) / h as f64,
        w: 1.0 / w as f64,
        h: 1.0 / h as f64,
        score: None,
    }
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a sequence; identical `(spec, seed)` pairs give identical output.
/// Values are rounded to `f32` so the sequence survives a container round trip
/// unchanged.
///
/// # Panics
/// If the grid is smaller than 2x2 or `channels` is zero.
pub fn synth_sequence(spec: &SynthSpec, seed: u64) -> VideoSequence {
    let (w, h, d) = (spec.width, spec.height, spec.channels);
    assert!(w >= 2 && h >= 2 && d >= 1, "synthetic grid must be at least 2x2 with d >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = w * h;
    let pairs = d / 2;

    let base: Vec<f64> = (0..cells * d).map(|_| rng.random_range(0.0..1.0)).collect();
    let phase: Vec<f64> = (0..cells * pairs.max(1))
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let noise = Normal::new(0.0, spec.actor_noise.max(0.0)).expect("finite std dev");

    let mut actor_cell = rng.random_range(0..cells);
    let mut actor_state = vec![0.0; d];
    let mut frames = Vec::with_capacity(spec.frames);

    for t in 0..spec.frames {
        if spec.actor && t > 0 && rng.random_bool(spec.move_prob.clamp(0.0, 1.0)) {
            let (i, j) = (actor_cell % w, actor_cell / w);
            let mut options = Vec::with_capacity(4);
            if i > 0 {
                options.push(actor_cell - 1);
            }
            if i + 1 < w {
                options.push(actor_cell + 1);
            }
            if j > 0 {
                options.push(actor_cell - w);
            }
            if j + 1 < h {
                options.push(actor_cell + w);
            }
            actor_cell = *options.choose(&mut rng).expect("grid has neighbours");
        }
        if spec.actor {
            for v in actor_state.iter_mut() {
                *v = 0.7 * *v + noise.sample(&mut rng);
            }
        }

        let angle = spec.background_rate * t as f64;
        let mut data = base.clone();
        for n in 0..cells {
            let cell = &mut data[n * d..(n + 1) * d];
            for p in 0..pairs {
                let a = angle + phase[n * pairs + p];
                cell[2 * p] += spec.background_amplitude * a.cos();
                cell[2 * p + 1] += spec.background_amplitude * a.sin();
            }
            if spec.actor && n == actor_cell {
                for (c, a) in cell.iter_mut().zip(&actor_state) {
                    *c += a;
                }
            }
        }
        let data = data.into_iter().map(to_f32).collect();
        let features = FeatureMap::new(w, h, d, data).expect("generator emits finite features");

        let mut proposals = Vec::new();
        let mut gt_boxes = Vec::new();
        let (ai, aj) = (actor_cell % w, actor_cell / w);
        if spec.actor {
            let gt = cell_box(ai, aj, w, h);
            let jitter = |rng: &mut ChaCha8Rng, c: f64, size: f64| {
                (c + rng.random_range(-0.1..0.1) * size).clamp(0.0, 1.0)
            };
            proposals.push(BoundingBox {
                cx: jitter(&mut rng, gt.cx, gt.w),
                cy: jitter(&mut rng, gt.cy, gt.h),
                w: gt.w * rng.random_range(0.9..1.15),
                h: gt.h * rng.random_range(0.9..1.15),
                score: Some(rng.random_range(0.3..1.0)),
            });
            gt_boxes.push(gt);
        }
        for _ in 0..spec.distractors {
            let mut n = rng.random_range(0..cells);
            while spec.actor && n == actor_cell {
                n = rng.random_range(0..cells);
            }
            let (i, j) = (n % w, n / w);
            let cb = cell_box(i, j, w, h);
            let cx = (i as f64 + rng.random_range(0.05..0.95)) / w as f64;
            let cy = (j as f64 + rng.random_range(0.05..0.95)) / h as f64;
            proposals.push(BoundingBox {
                cx,
                cy,
                w: cb.w * rng.random_range(0.5..2.0),
                h: cb.h * rng.random_range(0.5..2.0),
                score: Some(rng.random_range(0.01..1.0)),
            });
        }
        for b in proposals.iter_mut().chain(gt_boxes.iter_mut()) {
            *b = BoundingBox {
                cx: to_f32(b.cx),
                cy: to_f32(b.cy),
                w: to_f32(b.w),
                h: to_f32(b.h),
                score: b.score.map(to_f32),
            };
        }
        frames.push(FrameRecord {
            index: t,
            features,
            proposals,
            gt_boxes,
        });
    }

    VideoSequence {
        video_id: spec.video_id.clone(),
        label: spec.label,
        dims: (w, h, d),
        frames,
    }
}
