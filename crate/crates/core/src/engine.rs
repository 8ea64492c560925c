//! Losses, actor predictors and the per-frame continual training step.
//!
//! Each step consumes the frame at `t` together with the observation at
//! `t + 1`:
//!
//! 1. attend over `f_S(t)` using the event representation from `t - 1`;
//! 2. predict the actor's feature and box from `GAP(alpha (.) f^_S(t))`, where
//!    `f^_S(t)` is the map the stack predicted one step earlier;
//! 3. run the stack on the event-centric map to predict `f^_S(t + 1)`;
//! 4. score the prediction against `f_S(t + 1)` (the event loss map);
//! 5. contextualize with the error map and pool the actor-centered feature;
//! 6. localize on the error map; the top box is the observed actor box;
//! 7. compare the actor predictions with the observed feature and box;
//! 8. backpropagate, adapt the learning rate, take one SGD step.
//!
//! States carried in from earlier frames are constants for the gradient. The
//! observed actor feature depends on the error map and is differentiated
//! through; the observed box is piecewise constant in the parameters and
//! contributes no gradient.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    actor_feature, actor_feature_backward, contextualize, contextualize_backward, ActorFeatureCache, AttendCache,
    AttentionParams, ContextCache, ContextualizedFrame,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::FrameRecord;
use crate::localizer::{localize, BoundingBox, LocalizationResult};
use crate::lstm::{LstmCache, LstmCell, LstmState, PredictionStack, StackCache, EventState};
use crate::numerics::{l2_norm_channels, FeatureMap, SpatialMap};
use crate::param::{prefixed, prefixed_mut, Linear, Param, Parameters};

/// Per-cell and pooled event loss:
/// `map[n] = |f_next - f_now|_n * |f_next - f_pred|_n`, `scalar = mean(map)`.
pub fn event_loss(f_next: &FeatureMap, f_now: &FeatureMap, f_pred: &FeatureMap) -> Result<(SpatialMap, f64)> {
    let motion = l2_norm_channels(f_next, f_now)?;
    let error = l2_norm_channels(f_next, f_pred)?;
    let values: Vec<f64> = motion.values().iter().zip(error.values()).map(|(a, b)| a * b).collect();
    let map = SpatialMap::new(f_next.width(), f_next.height(), values)
        .map_err(|_| Error::NonFinite("event loss map".into()))?;
    let scalar = map.mean();
    Ok((map, scalar))
}

/// The three actor terms: feature distance, squared center distance and the
/// square-root size discrepancy.
pub fn object_loss(
    f_o: &[f64],
    f_o_pred: &[f64],
    observed: &BoundingBox,
    predicted: &BoundingBox,
) -> Result<ObjectTerms> {
    if f_o.len() != f_o_pred.len() {
        return Err(Error::shape("object_loss features", f_o.len(), f_o_pred.len()));
    }
    for b in [observed, predicted] {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::InvalidArgument(format!("box dimensions must be positive: {b:?}")));
        }
    }
    let feature = f_o
        .iter()
        .zip(f_o_pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let center = (observed.cx - predicted.cx).powi(2) + (observed.cy - predicted.cy).powi(2);
    let geometry =
        (observed.w.sqrt() - predicted.w.sqrt()).powi(2) + (observed.h.sqrt() - predicted.h.sqrt()).powi(2);
    Ok(ObjectTerms {
        feature,
        center,
        geometry,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectTerms {
    pub feature: f64,
    pub center: f64,
    pub geometry: f64,
}

impl ObjectTerms {
    pub fn sum(&self) -> f64 {
        self.feature + self.center + self.geometry
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub event_map: Vec<f64>,
    pub event_scalar: f64,
    pub object_feature: f64,
    pub object_center: f64,
    pub object_geometry: f64,
    pub total: f64,
}

pub fn total_loss(
    event_map: &SpatialMap,
    event_scalar: f64,
    terms: ObjectTerms,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got {lambda1}, {lambda2}"
        )));
    }
    let total = lambda1 * event_scalar + lambda2 * terms.sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(LossBreakdown {
        event_map: event_map.values().to_vec(),
        event_scalar,
        object_feature: terms.feature,
        object_center: terms.center,
        object_geometry: terms.geometry,
        total,
    })
}

/// Surprise-driven learning rate: rises by `delta_minus` when the loss goes
/// up, decays by `delta_plus` otherwise, always clamped to `[lr_min, lr_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLr {
    pub lr: f64,
    pub delta_minus: f64,
    pub delta_plus: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub prev_loss: Option<f64>,
}

impl AdaptiveLr {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            lr: c.lr0,
            delta_minus: c.delta_minus,
            delta_plus: c.delta_plus,
            lr_min: c.lr_min,
            lr_max: c.lr_max,
            prev_loss: None,
        }
    }

    pub fn adapt(&mut self, loss: f64) {
        if let Some(prev) = self.prev_loss {
            if loss > prev {
                self.lr *= 1.0 + self.delta_minus;
            } else {
                self.lr *= 1.0 - self.delta_plus;
            }
        }
        self.lr = self.lr.clamp(self.lr_min, self.lr_max);
        self.prev_loss = Some(loss);
    }
}

/// The two actor predictors: one anticipates the actor-centered feature, the
/// other the change in the actor box through a linear offset head.
#[derive(Debug, Clone)]
pub struct ActorNets {
    pub feature: LstmCell,
    pub geometry: LstmCell,
    pub offset_head: Linear,
}

impl ActorNets {
    pub fn init<R: rand::Rng>(feature_dim: usize, rng: &mut R) -> Self {
        Self {
            feature: LstmCell::init(feature_dim, feature_dim, rng),
            geometry: LstmCell::init(feature_dim, feature_dim, rng),
            offset_head: Linear::init(feature_dim, 4, rng),
        }
    }

    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            feature: LstmCell::zeros(feature_dim, feature_dim),
            geometry: LstmCell::zeros(feature_dim, feature_dim),
            offset_head: Linear::zeros(feature_dim, 4),
        }
    }
}

impl Parameters for ActorNets {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("feature", self.feature.params());
        out.extend(prefixed("geometry", self.geometry.params()));
        out.extend(prefixed("offset_head", self.offset_head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed_mut("feature", self.feature.params_mut());
        out.extend(prefixed_mut("geometry", self.geometry.params_mut()));
        out.extend(prefixed_mut("offset_head", self.offset_head.params_mut()));
        out
    }
}

/// Every learnable parameter of the engine.
#[derive(Debug, Clone)]
pub struct Model {
    pub attention: AttentionParams,
    pub stack: PredictionStack,
    pub actor: ActorNets,
}

impl Model {
    /// Seeded random initialization for feature maps with `feature_dim`
    /// channels.
    pub fn init(feature_dim: usize, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stack = PredictionStack::init(feature_dim, config.hidden_dim, config.layers, &mut rng)?;
        let attention = AttentionParams::init(feature_dim, config.hidden_dim, config.attention_dim, &mut rng);
        let actor = ActorNets::init(feature_dim, &mut rng);
        Ok(Self {
            attention,
            stack,
            actor,
        })
    }

    pub fn zeros(feature_dim: usize, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            attention: AttentionParams::zeros(feature_dim, config.hidden_dim, config.attention_dim),
            stack: PredictionStack::zeros(feature_dim, config.hidden_dim, config.layers)?,
            actor: ActorNets::zeros(feature_dim),
        })
    }

    pub fn from_parts(attention: AttentionParams, stack: PredictionStack, actor: ActorNets) -> Result<Self> {
        let d = stack.feature_dim();
        if attention.feature_dim() != d || attention.hidden_dim() != stack.hidden_dim() {
            return Err(Error::shape(
                "attention vs stack",
                (d, stack.hidden_dim()),
                (attention.feature_dim(), attention.hidden_dim()),
            ));
        }
        if actor.feature.input_dim() != d
            || actor.feature.hidden_dim() != d
            || actor.geometry.input_dim() != d
            || actor.offset_head.in_dim() != actor.geometry.hidden_dim()
            || actor.offset_head.out_dim() != 4
        {
            return Err(Error::InvalidArgument("actor predictor dims do not match the feature width".into()));
        }
        Ok(Self {
            attention,
            stack,
            actor,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.feature_dim()
    }

    /// Clears SGD gradient buffers.
    pub fn zero_grads(&mut self) {
        self.zero_grad();
    }

    /// Predicts the actor's feature and box for the current frame.
    pub fn predict_actor(
        &self,
        actor: &ActorState,
        alpha: &SpatialMap,
        predicted_map: &FeatureMap,
        min_box_size: f64,
    ) -> Result<(ActorPrediction, ActorCache)> {
        if alpha.dims() != (predicted_map.width(), predicted_map.height()) {
            return Err(Error::shape(
                "predict_actor",
                (predicted_map.width(), predicted_map.height()),
                alpha.dims(),
            ));
        }
        let d = self.feature_dim();
        if predicted_map.channels() != d {
            return Err(Error::shape("predict_actor channels", d, predicted_map.channels()));
        }
        let g = predicted_map.cells() as f64;
        let mut pooled = vec![0.0; d];
        for (n, a) in alpha.values().iter().enumerate() {
            for (p, v) in pooled.iter_mut().zip(predicted_map.cell(n)) {
                *p += a * v / g;
            }
        }
        let (feature, feature_state, feature_cache) = self.actor.feature.forward(&pooled, &actor.feature_state)?;
        let (geo_h, geometry_state, geometry_cache) = self.actor.geometry.forward(&pooled, &actor.geometry_state)?;
        let offset = self.actor.offset_head.forward(&geo_h);
        let prev = actor.last_box;
        let raw = [prev.cx + offset[0], prev.cy + offset[1], prev.w + offset[2], prev.h + offset[3]];
        let bounds = [(0.0, 1.0), (0.0, 1.0), (min_box_size, 1.0), (min_box_size, 1.0)];
        let mut clamped = [0.0; 4];
        let mut pass = [false; 4];
        for c in 0..4 {
            clamped[c] = raw[c].clamp(bounds[c].0, bounds[c].1);
            pass[c] = raw[c] > bounds[c].0 && raw[c] < bounds[c].1;
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("predicted box offset".into()));
        }
        let bbox = BoundingBox {
            cx: clamped[0],
            cy: clamped[1],
            w: clamped[2],
            h: clamped[3],
            score: None,
        };
        Ok((
            ActorPrediction {
                feature,
                offset: [offset[0], offset[1], offset[2], offset[3]],
                bbox,
                feature_state,
                geometry_state,
            },
            ActorCache {
                alpha: alpha.clone(),
                predicted_map: predicted_map.clone(),
                feature_cache,
                geometry_cache,
                geometry_hidden: geo_h,
                pass,
            },
        ))
    }

    /// Backward pass of [`predict_actor`](Self::predict_actor); returns the
    /// cotangent on the attention map.
    pub fn predict_actor_backward(
        &mut self,
        cache: &ActorCache,
        grad_feature: &[f64],
        grad_box: [f64; 4],
    ) -> Result<SpatialMap> {
        let d = self.feature_dim();
        if grad_feature.len() != d {
            return Err(Error::StaleCache("actor feature cotangent dims"));
        }
        let mut grad_offset = [0.0; 4];
        for c in 0..4 {
            if cache.pass[c] {
                grad_offset[c] = grad_box[c];
            }
        }
        let grad_geo_h = self.actor.offset_head.backward(&cache.geometry_hidden, &grad_offset);
        let zero = LstmState::zeros(d);
        let from_geometry = self.actor.geometry.backward(&cache.geometry_cache, &grad_geo_h, &LstmState::zeros(self.actor.geometry.hidden_dim()))?;
        let from_feature = self.actor.feature.backward(&cache.feature_cache, grad_feature, &zero)?;
        let g = cache.predicted_map.cells() as f64;
        let grad_pooled: Vec<f64> = from_geometry.x.iter().zip(&from_feature.x).map(|(a, b)| a + b).collect();
        let values = (0..cache.predicted_map.cells())
            .map(|n| crate::numerics::dot(&grad_pooled, cache.predicted_map.cell(n)) / g)
            .collect();
        Ok(SpatialMap::from_raw(cache.alpha.width(), cache.alpha.height(), values))
    }
}

impl Parameters for Model {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("attention", self.attention.params());
        out.extend(prefixed("stack", self.stack.params()));
        out.extend(prefixed("actor", self.actor.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed_mut("attention", self.attention.params_mut());
        out.extend(prefixed_mut("stack", self.stack.params_mut()));
        out.extend(prefixed_mut("actor", self.actor.params_mut()));
        out
    }
}

/// Runtime state of the actor predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorState {
    pub feature_state: LstmState,
    pub geometry_state: LstmState,
    /// The observed actor box of the previous frame.
    pub last_box: BoundingBox,
    pub predicted_box: Option<BoundingBox>,
    pub predicted_feature: Option<Vec<f64>>,
}

impl ActorState {
    pub fn fresh(feature_dim: usize, geometry_dim: usize) -> Self {
        Self {
            feature_state: LstmState::zeros(feature_dim),
            geometry_state: LstmState::zeros(geometry_dim),
            last_box: BoundingBox::full_frame(),
            predicted_box: None,
            predicted_feature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorPrediction {
    pub feature: Vec<f64>,
    pub offset: [f64; 4],
    pub bbox: BoundingBox,
    pub feature_state: LstmState,
    pub geometry_state: LstmState,
}

#[derive(Debug, Clone)]
pub struct ActorCache {
    alpha: SpatialMap,
    predicted_map: FeatureMap,
    feature_cache: LstmCache,
    geometry_cache: LstmCache,
    geometry_hidden: Vec<f64>,
    /// Box components that were not clamped and so pass gradient.
    pass: [bool; 4],
}

/// Everything a video stream carries from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub event: EventState,
    pub actor: ActorState,
    /// The stack's prediction for the frame about to be processed.
    pub predicted_map: FeatureMap,
}

impl StreamState {
    /// Cold start: zero recurrent states, zero prediction, full-frame box.
    pub fn fresh(model: &Model, width: usize, height: usize) -> Self {
        let d = model.feature_dim();
        Self {
            event: model.stack.fresh_state(),
            actor: ActorState::fresh(d, model.actor.geometry.hidden_dim()),
            predicted_map: FeatureMap::zeros(width, height, d),
        }
    }
}

/// Result of the forward half of a step, with the caches needed to finish it.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub frame_index: usize,
    pub loss: LossBreakdown,
    pub localization: LocalizationResult,
    pub context: ContextualizedFrame,
    pub prediction: ActorPrediction,
    pub next_state: StreamState,
    caches: StepCaches,
}

#[derive(Debug, Clone)]
struct StepCaches {
    attend: AttendCache,
    stack: StackCache,
    actor: ActorCache,
    context: ContextCache,
    pool: ActorFeatureCache,
    next_features: FeatureMap,
    predicted_next: FeatureMap,
    motion: SpatialMap,
    observed_box: BoundingBox,
}

fn ensure_map_finite(name: &str, m: &FeatureMap) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Runs steps 1-7 for the frame `current` given the next observation.
pub fn forward_step(
    model: &Model,
    state: &StreamState,
    current: &FrameRecord,
    next_features: &FeatureMap,
    config: &RunConfig,
) -> Result<StepForward> {
    let f_s = &current.features;
    f_s.check_same(next_features, "consecutive frames")?;
    f_s.check_same(&state.predicted_map, "frame vs carried prediction")?;
    if f_s.channels() != model.feature_dim() {
        return Err(Error::shape("frame channels", model.feature_dim(), f_s.channels()));
    }
    ensure_map_finite("current features", f_s)?;
    ensure_map_finite("next features", next_features)?;

    let (alpha, event_map, attend_cache) = model.attention.attend(f_s, state.event.event_repr())?;
    let (prediction, actor_cache) =
        model.predict_actor(&state.actor, &alpha, &state.predicted_map, config.min_box_size)?;
    let (predicted_next, next_event, stack_cache) = model.stack.forward(&event_map, &state.event)?;
    let (error_map, event_scalar) = event_loss(next_features, f_s, &predicted_next)?;
    let motion = l2_norm_channels(next_features, f_s)?;

    let (posterior, context_cache) = contextualize(f_s, &error_map)?;
    let (f_o, pool_cache) = actor_feature(f_s, &posterior)?;
    if !f_o.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("actor feature".into()));
    }

    let localization = localize(&error_map, &current.proposals, config.top_k, config.boxes_per_frame, current.index)?;
    let observed_box = *localization.top().expect("localize always emits a box");

    let mut terms = object_loss(&f_o, &prediction.feature, &observed_box, &prediction.bbox)?;
    if !config.feature_loss {
        terms.feature = 0.0;
    }
    if !config.geometry_loss {
        terms.center = 0.0;
        terms.geometry = 0.0;
    }
    let loss = total_loss(&error_map, event_scalar, terms, config.lambda1, config.lambda2)?;

    let next_state = StreamState {
        event: next_event,
        actor: ActorState {
            feature_state: prediction.feature_state.clone(),
            geometry_state: prediction.geometry_state.clone(),
            last_box: observed_box,
            predicted_box: Some(prediction.bbox),
            predicted_feature: Some(prediction.feature.clone()),
        },
        predicted_map: predicted_next.clone(),
    };
    Ok(StepForward {
        frame_index: current.index,
        loss,
        localization,
        context: ContextualizedFrame {
            alpha,
            event_map,
            posterior_map: posterior,
            actor_feature: f_o,
        },
        prediction,
        next_state,
        caches: StepCaches {
            attend: attend_cache,
            stack: stack_cache,
            actor: actor_cache,
            context: context_cache,
            pool: pool_cache,
            next_features: next_features.clone(),
            predicted_next,
            motion,
            observed_box,
        },
    })
}

/// Accumulates `dL_total/d(params)` for a completed forward step.
pub fn backward_step(model: &mut Model, fwd: &StepForward, config: &RunConfig) -> Result<()> {
    let c = &fwd.caches;
    let (w, h, d) = c.predicted_next.dims();
    let cells = (w * h) as f64;

    let pred = &fwd.prediction;
    let f_o = &fwd.context.actor_feature;

    // Feature term: d/d f^_O and d/d f_O of |f_O - f^_O|.
    let mut grad_feature = vec![0.0; d];
    let mut grad_observed = vec![0.0; d];
    if config.lambda2 > 0.0 && config.feature_loss && fwd.loss.object_feature > 0.0 {
        let scale = config.lambda2 / fwd.loss.object_feature;
        for k in 0..d {
            grad_feature[k] = scale * (pred.feature[k] - f_o[k]);
            grad_observed[k] = -grad_feature[k];
        }
    }
    // The observed feature reaches the error map through the posterior map.
    let (_, grad_posterior) = actor_feature_backward(&c.pool, &grad_observed)?;
    let (grad_error_map, _) = contextualize_backward(&c.context, &grad_posterior)?;

    // Error map cell n is motion_n * |f_next - f^_next|_n; the event scalar
    // adds lambda1 / G to every cell's cotangent.
    let mut grad_pred = FeatureMap::zeros(w, h, d);
    for n in 0..w * h {
        let g = config.lambda1 / cells + grad_error_map.values()[n];
        let target = c.next_features.cell(n);
        let pred = c.predicted_next.cell(n);
        let norm = target.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if g == 0.0 || norm == 0.0 {
            continue;
        }
        let scale = g * c.motion.values()[n] / norm;
        for (out, (t, p)) in grad_pred.cell_mut(n).iter_mut().zip(target.iter().zip(pred)) {
            *out = scale * (p - t);
        }
    }

    let mut grad_box = [0.0; 4];
    if config.lambda2 > 0.0 && config.geometry_loss {
        let (obs, b) = (&c.observed_box, &pred.bbox);
        grad_box[0] = config.lambda2 * 2.0 * (b.cx - obs.cx);
        grad_box[1] = config.lambda2 * 2.0 * (b.cy - obs.cy);
        grad_box[2] = config.lambda2 * (b.w.sqrt() - obs.w.sqrt()) / b.w.sqrt();
        grad_box[3] = config.lambda2 * (b.h.sqrt() - obs.h.sqrt()) / b.h.sqrt();
    }

    let grad_alpha = model.predict_actor_backward(&c.actor, &grad_feature, grad_box)?;
    let grad_event_map = model.stack.backward(&c.stack, &grad_pred)?;
    model.attention.attend_backward(&c.attend, &grad_alpha, &grad_event_map)?;
    Ok(())
}

/// Loss of one step without touching parameters or state.
pub fn step_loss(
    model: &Model,
    state: &StreamState,
    current: &FrameRecord,
    next_features: &FeatureMap,
    config: &RunConfig,
) -> Result<LossBreakdown> {
    Ok(forward_step(model, state, current, next_features, config)?.loss)
}

/// What one processed frame produced.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub frame_index: usize,
    pub loss: LossBreakdown,
    pub localization: LocalizationResult,
    pub actor_feature: Vec<f64>,
    pub predicted_box: BoundingBox,
    pub lr: f64,
    pub updated: bool,
    pub elapsed_ms: f64,
}

/// Owns the model and the learning-rate state of a single training stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    config: RunConfig,
    lr: AdaptiveLr,
    updates: usize,
}

impl Trainer {
    pub fn new(model: Model, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let lr = AdaptiveLr::from_config(&config);
        Ok(Self {
            model,
            config,
            lr,
            updates: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn lr(&self) -> &AdaptiveLr {
        &self.lr
    }

    /// Number of parameter updates applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    /// One forward/backward/update cycle. Returns the report and the state to
    /// carry into the next frame. Parameters are untouched on error.
    pub fn train_step(
        &mut self,
        state: &StreamState,
        current: &FrameRecord,
        next_features: &FeatureMap,
    ) -> Result<(StepReport, StreamState)> {
        let start = Instant::now();
        // Clearing touches the parameter stamps, so it must precede the forward pass.
        self.model.zero_grads();
        let fwd = forward_step(&self.model, state, current, next_features, &self.config)?;
        let result = backward_step(&mut self.model, &fwd, &self.config).and_then(|_| self.model.check_grads_finite());
        if let Err(e) = result {
            self.model.zero_grads();
            return Err(e);
        }
        self.lr.adapt(fwd.loss.total);
        let lr = self.lr.lr;
        for (_, p) in self.model.params_mut() {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        self.model.zero_grads();
        self.updates += 1;
        let StepForward {
            frame_index,
            loss,
            localization,
            context,
            prediction,
            next_state,
            ..
        } = fwd;
        Ok((
            StepReport {
                frame_index,
                loss,
                localization,
                actor_feature: context.actor_feature,
                predicted_box: prediction.bbox,
                lr,
                updated: true,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            },
            next_state,
        ))
    }
}

/// Frozen-parameter step: same outputs as training, no update.
pub fn infer_step(
    model: &Model,
    state: &StreamState,
    current: &FrameRecord,
    next_features: &FeatureMap,
    config: &RunConfig,
) -> Result<(StepReport, StreamState)> {
    let start = Instant::now();
    let fwd = forward_step(model, state, current, next_features, config)?;
    Ok((
        StepReport {
            frame_index: fwd.frame_index,
            loss: fwd.loss,
            localization: fwd.localization,
            actor_feature: fwd.context.actor_feature,
            predicted_box: fwd.prediction.bbox,
            lr: 0.0,
            updated: false,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        fwd.next_state,
    ))
}

/// Drives one video through the engine frame by frame. A frame is processed
/// once its successor arrives, so a video of `T` frames yields `T - 1` steps.
/// There is no rewind: every frame is seen exactly once.
#[derive(Debug)]
pub struct VideoStream {
    state: StreamState,
    pending: Option<FrameRecord>,
    dims: (usize, usize, usize),
}

impl VideoStream {
    pub fn new(model: &Model, dims: (usize, usize, usize), config: &RunConfig) -> Result<Self> {
        let (w, h, d) = dims;
        if d != model.feature_dim() {
            return Err(Error::shape("video vs model channels", model.feature_dim(), d));
        }
        config.validate_for_grid(w, h)?;
        Ok(Self {
            state: StreamState::fresh(model, w, h),
            pending: None,
            dims,
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    fn accept(&mut self, frame: FrameRecord) -> Result<Option<FrameRecord>> {
        if frame.features.dims() != self.dims {
            return Err(Error::shape("stream frame dims", self.dims, frame.features.dims()));
        }
        Ok(self.pending.replace(frame))
    }

    /// Feeds a frame and trains on the previous one.
    pub fn push_train(&mut self, trainer: &mut Trainer, frame: FrameRecord) -> Result<Option<StepReport>> {
        let next = frame.features.clone();
        let Some(current) = self.accept(frame)? else {
            return Ok(None);
        };
        let (report, state) = trainer.train_step(&self.state, &current, &next)?;
        self.state = state;
        Ok(Some(report))
    }

    /// Feeds a frame and runs frozen inference on the previous one.
    pub fn push_frozen(&mut self, model: &Model, config: &RunConfig, frame: FrameRecord) -> Result<Option<StepReport>> {
        let next = frame.features.clone();
        let Some(current) = self.accept(frame)? else {
            return Ok(None);
        };
        let (report, state) = infer_step(model, &self.state, &current, &next, config)?;
        self.state = state;
        Ok(Some(report))
    }
}
