//! Spatial attention, contextualization and the actor-centered feature.
//!
//! * `attend` scores every cell with an additive (Bahdanau-style) function of
//!   the cell's feature and the previous event representation, softmaxes the
//!   scores over the whole grid and scales each cell by its weight.
//! * `contextualize` rescales the observed map by the softmaxed
//!   prediction-error map.
//! * `actor_feature` scores each cell by the channel dot product of the raw and
//!   contextualized features, softmaxes those scores spatially and
//!   average-pools the reweighted contextualized map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, matvec_acc, matvec_t_acc, outer_acc, softmax, softmax_backward, FeatureMap, SpatialMap};
use crate::param::{Param, Parameters, Stamp};

/// Parameters of the additive attention `v . tanh(P_f x + P_h h)`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    feature_dim: usize,
    hidden_dim: usize,
    attn_dim: usize,
    pub feature_proj: Param,
    pub hidden_proj: Param,
    pub score: Param,
    stamp: Stamp,
}

impl AttentionParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, attn_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim,
            attn_dim,
            feature_proj: Param::zeros(vec![attn_dim, feature_dim]),
            hidden_proj: Param::zeros(vec![attn_dim, hidden_dim]),
            score: Param::zeros(vec![attn_dim]),
            stamp: Stamp::fresh(),
        }
    }

    pub fn init<R: Rng>(feature_dim: usize, hidden_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        Self {
            feature_dim,
            hidden_dim,
            attn_dim,
            feature_proj: Param::uniform(vec![attn_dim, feature_dim], 1.0 / (feature_dim as f64).sqrt(), rng),
            hidden_proj: Param::uniform(vec![attn_dim, hidden_dim], 1.0 / (hidden_dim as f64).sqrt(), rng),
            score: Param::uniform(vec![attn_dim], 1.0 / (attn_dim as f64).sqrt(), rng),
            stamp: Stamp::fresh(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_dim
    }

    /// Returns the attention map and the event-centric map `alpha (.) f_S`.
    pub fn attend(&self, f_s: &FeatureMap, h_prev: &[f64]) -> Result<(SpatialMap, FeatureMap, AttendCache)> {
        if f_s.channels() != self.feature_dim {
            return Err(Error::shape("attend features", self.feature_dim, f_s.channels()));
        }
        if h_prev.len() != self.hidden_dim {
            return Err(Error::shape("attend hidden", self.hidden_dim, h_prev.len()));
        }
        let a = self.attn_dim;
        let mut hidden_term = vec![0.0; a];
        matvec_acc(self.hidden_proj.value.data(), a, self.hidden_dim, h_prev, &mut hidden_term);

        let mut activations = Vec::with_capacity(f_s.cells());
        let mut scores = Vec::with_capacity(f_s.cells());
        for n in 0..f_s.cells() {
            let mut u = hidden_term.clone();
            matvec_acc(self.feature_proj.value.data(), a, self.feature_dim, f_s.cell(n), &mut u);
            u.iter_mut().for_each(|v| *v = v.tanh());
            scores.push(dot(self.score.value.data(), &u));
            activations.push(u);
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("attention scores".into()));
        }
        let alpha = SpatialMap::from_raw(f_s.width(), f_s.height(), softmax(&scores));
        let event_map = f_s.scale_cells(&alpha)?;
        let cache = AttendCache {
            stamp: self.stamp,
            f_s: f_s.clone(),
            h_prev: h_prev.to_vec(),
            activations,
            alpha: alpha.clone(),
        };
        Ok((alpha, event_map, cache))
    }

    /// Backward pass of [`attend`](Self::attend). Cotangents may arrive on both
    /// the attention map and the event-centric map; parameter gradients
    /// accumulate.
    pub fn attend_backward(
        &mut self,
        cache: &AttendCache,
        grad_alpha: &SpatialMap,
        grad_event_map: &FeatureMap,
    ) -> Result<AttendGrads> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache("attention cache does not match parameters"));
        }
        let f_s = &cache.f_s;
        if grad_alpha.dims() != cache.alpha.dims() || !grad_event_map.same_dims(f_s) {
            return Err(Error::StaleCache("attention cotangent dims do not match cache"));
        }
        let (a, d, dh) = (self.attn_dim, self.feature_dim, self.hidden_dim);
        let alpha = cache.alpha.values();

        let total_alpha: Vec<f64> = (0..f_s.cells())
            .map(|n| grad_alpha.values()[n] + dot(grad_event_map.cell(n), f_s.cell(n)))
            .collect();
        let grad_scores = softmax_backward(alpha, &total_alpha);

        let mut grad_f = FeatureMap::zeros(f_s.width(), f_s.height(), d);
        let mut grad_u_sum = vec![0.0; a];
        for n in 0..f_s.cells() {
            let t = &cache.activations[n];
            let gs = grad_scores[n];
            for (g, tv) in self.score.grad.data_mut().iter_mut().zip(t) {
                *g += gs * tv;
            }
            let du: Vec<f64> = self
                .score
                .value
                .data()
                .iter()
                .zip(t)
                .map(|(v, tv)| gs * v * (1.0 - tv * tv))
                .collect();
            outer_acc(self.feature_proj.grad.data_mut(), &du, f_s.cell(n));
            let gf = grad_f.cell_mut(n);
            matvec_t_acc(self.feature_proj.value.data(), a, d, &du, gf);
            for (o, (g, al)) in gf.iter_mut().zip(grad_event_map.cell(n).iter().zip(std::iter::repeat(alpha[n]))) {
                *o += g * al;
            }
            for (s, v) in grad_u_sum.iter_mut().zip(&du) {
                *s += v;
            }
        }
        outer_acc(self.hidden_proj.grad.data_mut(), &grad_u_sum, &cache.h_prev);
        let mut grad_h = vec![0.0; dh];
        matvec_t_acc(self.hidden_proj.value.data(), a, dh, &grad_u_sum, &mut grad_h);
        Ok(AttendGrads {
            features: grad_f,
            hidden: grad_h,
        })
    }
}

impl Parameters for AttentionParams {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![
            ("feature_proj".into(), &self.feature_proj),
            ("hidden_proj".into(), &self.hidden_proj),
            ("score".into(), &self.score),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.stamp.bump();
        vec![
            ("feature_proj".into(), &mut self.feature_proj),
            ("hidden_proj".into(), &mut self.hidden_proj),
            ("score".into(), &mut self.score),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttendCache {
    stamp: Stamp,
    f_s: FeatureMap,
    h_prev: Vec<f64>,
    activations: Vec<Vec<f64>>,
    alpha: SpatialMap,
}

#[derive(Debug, Clone)]
pub struct AttendGrads {
    pub features: FeatureMap,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ContextCache {
    f_s: FeatureMap,
    weights: SpatialMap,
}

impl ContextCache {
    /// The softmaxed error map used as per-cell scale.
    pub fn weights(&self) -> &SpatialMap {
        &self.weights
    }
}

/// `softmax(l_event) (.) f_S`, the softmax taken over the whole grid.
pub fn contextualize(f_s: &FeatureMap, l_event: &SpatialMap) -> Result<(FeatureMap, ContextCache)> {
    if l_event.dims() != (f_s.width(), f_s.height()) {
        return Err(Error::shape("contextualize", (f_s.width(), f_s.height()), l_event.dims()));
    }
    let weights = crate::numerics::softmax_spatial(l_event)?;
    let posterior = f_s.scale_cells(&weights)?;
    Ok((
        posterior,
        ContextCache {
            f_s: f_s.clone(),
            weights,
        },
    ))
}

/// Returns `(dL/d l_event, dL/d f_S)`.
pub fn contextualize_backward(cache: &ContextCache, grad_posterior: &FeatureMap) -> Result<(SpatialMap, FeatureMap)> {
    let f_s = &cache.f_s;
    if !grad_posterior.same_dims(f_s) {
        return Err(Error::StaleCache("contextualize cotangent dims do not match cache"));
    }
    let w = cache.weights.values();
    let grad_w: Vec<f64> = (0..f_s.cells())
        .map(|n| dot(grad_posterior.cell(n), f_s.cell(n)))
        .collect();
    let grad_l = SpatialMap::from_raw(f_s.width(), f_s.height(), softmax_backward(w, &grad_w));
    let grad_f = grad_posterior.scale_cells(&cache.weights)?;
    Ok((grad_l, grad_f))
}

#[derive(Debug, Clone)]
pub struct ActorFeatureCache {
    f_s: FeatureMap,
    posterior: FeatureMap,
    weights: Vec<f64>,
}

/// `GAP(softmax(<f_S, F_S>) (.) F_S)` where `<.,.>` is the per-cell channel
/// dot product.
pub fn actor_feature(f_s: &FeatureMap, posterior: &FeatureMap) -> Result<(Vec<f64>, ActorFeatureCache)> {
    f_s.check_same(posterior, "actor_feature")?;
    let scores: Vec<f64> = (0..f_s.cells())
        .map(|n| dot(f_s.cell(n), posterior.cell(n)))
        .collect();
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("actor feature scores".into()));
    }
    let weights = softmax(&scores);
    let g = f_s.cells() as f64;
    let mut out = vec![0.0; f_s.channels()];
    for (n, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(posterior.cell(n)) {
            *o += w * v / g;
        }
    }
    Ok((
        out,
        ActorFeatureCache {
            f_s: f_s.clone(),
            posterior: posterior.clone(),
            weights,
        },
    ))
}

/// Returns `(dL/d f_S, dL/d F_S)`.
pub fn actor_feature_backward(cache: &ActorFeatureCache, grad_out: &[f64]) -> Result<(FeatureMap, FeatureMap)> {
    let (f_s, post) = (&cache.f_s, &cache.posterior);
    if grad_out.len() != f_s.channels() {
        return Err(Error::StaleCache("actor feature cotangent dims do not match cache"));
    }
    let g = f_s.cells() as f64;
    let grad_w: Vec<f64> = (0..f_s.cells()).map(|n| dot(grad_out, post.cell(n)) / g).collect();
    let grad_scores = softmax_backward(&cache.weights, &grad_w);
    let mut grad_f = FeatureMap::zeros(f_s.width(), f_s.height(), f_s.channels());
    let mut grad_post = grad_f.clone();
    for n in 0..f_s.cells() {
        let (w, gs) = (cache.weights[n], grad_scores[n]);
        for (k, out) in grad_post.cell_mut(n).iter_mut().enumerate() {
            *out = w * grad_out[k] / g + gs * f_s.cell(n)[k];
        }
        for (out, p) in grad_f.cell_mut(n).iter_mut().zip(post.cell(n)) {
            *out = gs * p;
        }
    }
    Ok((grad_f, grad_post))
}

/// All per-frame products of the attention and contextualization stage.
#[derive(Debug, Clone)]
pub struct ContextualizedFrame {
    pub alpha: SpatialMap,
    pub event_map: FeatureMap,
    pub posterior_map: FeatureMap,
    pub actor_feature: Vec<f64>,
}
