//! Vanilla LSTM cell and the hierarchical prediction stack.
//!
//! The stack reads a feature map one grid cell at a time in raster order.
//! Layer 0 consumes the cell's feature vector, every higher layer consumes the
//! hidden output of the layer below, and the top layer's output (projected to
//! feature space when its width differs) is the predicted feature vector for
//! the same cell at the next frame. Each layer owns its recurrent state; the
//! state left after the last cell is carried into the next frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, FeatureMap};
use crate::param::{prefixed, prefixed_mut, Linear, Param, Parameters, Stamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

/// Recurrent state of one LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    stamp: Stamp,
    /// `[x; h_prev]`
    z: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates laid out as `[i, f, o, g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Gradients returned by [`LstmCell::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
}

/// A vanilla LSTM cell (sigmoid gates, tanh candidate and output squashing).
///
/// The four gate matrices are stacked into one `4*d_h x (d_in + d_h)` weight
/// in the order input, forget, output, candidate.
#[derive(Debug, Clone)]
pub struct LstmCell {
    input_dim: usize,
    hidden_dim: usize,
    weight: Param,
    bias: Param,
    stamp: Stamp,
}

impl LstmCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            weight: Param::zeros(vec![4 * hidden_dim, input_dim + hidden_dim]),
            bias: Param::zeros(vec![4 * hidden_dim]),
            stamp: Stamp::fresh(),
        }
    }

    /// Uniform init in `[-1/sqrt(d_h), 1/sqrt(d_h)]` for weights and biases.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            input_dim,
            hidden_dim,
            weight: Param::uniform(vec![4 * hidden_dim, input_dim + hidden_dim], k, rng),
            bias: Param::uniform(vec![4 * hidden_dim], k, rng),
            stamp: Stamp::fresh(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> &Param {
        &self.bias
    }

    /// Bias slice of one gate.
    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        self.stamp.bump();
        let h = self.hidden_dim;
        let g = gate as usize;
        &mut self.bias.value.data_mut()[g * h..(g + 1) * h]
    }

    pub fn forward(&self, x: &[f64], state: &LstmState) -> Result<(Vec<f64>, LstmState, LstmCache)> {
        let (d_in, d_h) = (self.input_dim, self.hidden_dim);
        if x.len() != d_in {
            return Err(Error::shape("lstm input", d_in, x.len()));
        }
        if state.h.len() != d_h || state.c.len() != d_h {
            return Err(Error::shape("lstm state", d_h, (state.h.len(), state.c.len())));
        }
        let mut z = Vec::with_capacity(d_in + d_h);
        z.extend_from_slice(x);
        z.extend_from_slice(&state.h);

        let mut gates = self.bias.value.data().to_vec();
        matvec_acc(self.weight.value.data(), 4 * d_h, d_in + d_h, &z, &mut gates);
        for (n, a) in gates.iter_mut().enumerate() {
            *a = if n < 3 * d_h { sigmoid(*a) } else { a.tanh() };
        }

        let mut c = vec![0.0; d_h];
        let mut h = vec![0.0; d_h];
        let mut tanh_c = vec![0.0; d_h];
        for u in 0..d_h {
            let (i, f, o, g) = (gates[u], gates[d_h + u], gates[2 * d_h + u], gates[3 * d_h + u]);
            c[u] = f * state.c[u] + i * g;
            tanh_c[u] = c[u].tanh();
            h[u] = o * tanh_c[u];
        }
        if !c.iter().chain(&h).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("lstm activations".into()));
        }
        let cache = LstmCache {
            stamp: self.stamp,
            z,
            c_prev: state.c.clone(),
            gates,
            tanh_c,
        };
        Ok((h.clone(), LstmState { h, c }, cache))
    }

    /// Backpropagates through one step. `grad_y` is the cotangent of the
    /// output and `grad_state` that of the returned state; the hidden part of
    /// both is summed since `y` and `state.h` are the same vector. Weight
    /// gradients accumulate into the buffers.
    pub fn backward(
        &mut self,
        cache: &LstmCache,
        grad_y: &[f64],
        grad_state: &LstmState,
    ) -> Result<LstmGrads> {
        let (d_in, d_h) = (self.input_dim, self.hidden_dim);
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache("lstm cache does not match cell weights"));
        }
        if cache.z.len() != d_in + d_h
            || grad_y.len() != d_h
            || grad_state.h.len() != d_h
            || grad_state.c.len() != d_h
        {
            return Err(Error::StaleCache("lstm cotangent dims do not match cell"));
        }
        let g = &cache.gates;
        let mut da = vec![0.0; 4 * d_h];
        let mut dc_prev = vec![0.0; d_h];
        for u in 0..d_h {
            let (i, f, o, cand) = (g[u], g[d_h + u], g[2 * d_h + u], g[3 * d_h + u]);
            let tc = cache.tanh_c[u];
            let dh = grad_y[u] + grad_state.h[u];
            let d_o = dh * tc;
            let dc = grad_state.c[u] + dh * o * (1.0 - tc * tc);
            let d_i = dc * cand;
            let d_g = dc * i;
            let d_f = dc * cache.c_prev[u];
            dc_prev[u] = dc * f;
            da[u] = d_i * i * (1.0 - i);
            da[d_h + u] = d_f * f * (1.0 - f);
            da[2 * d_h + u] = d_o * o * (1.0 - o);
            da[3 * d_h + u] = d_g * (1.0 - cand * cand);
        }
        outer_acc(self.weight.grad.data_mut(), &da, &cache.z);
        for (b, d) in self.bias.grad.data_mut().iter_mut().zip(&da) {
            *b += d;
        }
        let mut dz = vec![0.0; d_in + d_h];
        matvec_t_acc(self.weight.value.data(), 4 * d_h, d_in + d_h, &da, &mut dz);
        let h_prev = dz.split_off(d_in);
        Ok(LstmGrads {
            x: dz,
            h_prev,
            c_prev: dc_prev,
        })
    }
}

impl Parameters for LstmCell {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.stamp.bump();
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Per-layer recurrent states of the prediction stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EventState {
    layers: Vec<LstmState>,
}

impl EventState {
    pub fn zeros(depth: usize, hidden: usize) -> Self {
        Self {
            layers: vec![LstmState::zeros(hidden); depth],
        }
    }

    pub fn from_layers(layers: Vec<LstmState>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("event state needs at least one layer".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LstmState] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// The event representation: the top layer's hidden state.
    pub fn event_repr(&self) -> &[f64] {
        &self.layers[self.layers.len() - 1].h
    }
}

/// Forward caches of one frame through the stack.
#[derive(Debug, Clone)]
pub struct StackCache {
    dims: (usize, usize, usize),
    /// `cells[n][l]`
    cells: Vec<Vec<LstmCache>>,
    top_hidden: Vec<Vec<f64>>,
}

/// The hierarchical LSTM prediction stack.
#[derive(Debug, Clone)]
pub struct PredictionStack {
    layers: Vec<LstmCell>,
    projection: Option<Linear>,
    feature_dim: usize,
}

impl PredictionStack {
    pub fn init<R: Rng>(feature_dim: usize, hidden_dim: usize, depth: usize, rng: &mut R) -> Result<Self> {
        Self::check_config(feature_dim, hidden_dim, depth)?;
        let layers = (0..depth)
            .map(|l| LstmCell::init(if l == 0 { feature_dim } else { hidden_dim }, hidden_dim, rng))
            .collect();
        let projection = (hidden_dim != feature_dim).then(|| Linear::init(hidden_dim, feature_dim, rng));
        Ok(Self {
            layers,
            projection,
            feature_dim,
        })
    }

    pub fn zeros(feature_dim: usize, hidden_dim: usize, depth: usize) -> Result<Self> {
        Self::check_config(feature_dim, hidden_dim, depth)?;
        let layers = (0..depth)
            .map(|l| LstmCell::zeros(if l == 0 { feature_dim } else { hidden_dim }, hidden_dim))
            .collect();
        let projection = (hidden_dim != feature_dim).then(|| Linear::zeros(hidden_dim, feature_dim));
        Ok(Self {
            layers,
            projection,
            feature_dim,
        })
    }

    /// Assembles a stack from explicit layers. The top layer must end in
    /// feature space, either directly or through `projection`.
    pub fn from_parts(layers: Vec<LstmCell>, projection: Option<Linear>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack needs at least one layer".into()))?;
        let feature_dim = first.input_dim();
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].hidden_dim() {
                return Err(Error::shape(
                    "stack layer input",
                    pair[0].hidden_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        let top = layers[layers.len() - 1].hidden_dim();
        match &projection {
            Some(p) if p.in_dim() != top || p.out_dim() != feature_dim => {
                return Err(Error::shape(
                    "stack projection",
                    (top, feature_dim),
                    (p.in_dim(), p.out_dim()),
                ))
            }
            None if top != feature_dim => {
                return Err(Error::shape("stack top hidden", feature_dim, top));
            }
            _ => {}
        }
        Ok(Self {
            layers,
            projection,
            feature_dim,
        })
    }

    fn check_config(feature_dim: usize, hidden_dim: usize, depth: usize) -> Result<()> {
        if feature_dim == 0 || hidden_dim == 0 || depth == 0 {
            return Err(Error::InvalidArgument(format!(
                "stack dims must be positive (d={feature_dim}, d_h={hidden_dim}, depth={depth})"
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layers(&self) -> &[LstmCell] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LstmCell] {
        &mut self.layers
    }

    pub fn projection(&self) -> Option<&Linear> {
        self.projection.as_ref()
    }

    pub fn fresh_state(&self) -> EventState {
        EventState {
            layers: self.layers.iter().map(|c| LstmState::zeros(c.hidden_dim())).collect(),
        }
    }

    /// Predicts the next frame's feature map from the event-centric map.
    pub fn forward(
        &self,
        event_map: &FeatureMap,
        state: &EventState,
    ) -> Result<(FeatureMap, EventState, StackCache)> {
        if event_map.channels() != self.feature_dim {
            return Err(Error::shape("stack input channels", self.feature_dim, event_map.channels()));
        }
        if state.depth() != self.depth() {
            return Err(Error::shape("event state depth", self.depth(), state.depth()));
        }
        let cells = event_map.cells();
        let mut states = state.layers.clone();
        let mut out = Vec::with_capacity(cells * self.feature_dim);
        let mut caches = Vec::with_capacity(cells);
        let mut top_hidden = Vec::with_capacity(cells);
        for n in 0..cells {
            let mut x = event_map.cell(n).to_vec();
            let mut cell_caches = Vec::with_capacity(self.depth());
            for (layer, s) in self.layers.iter().zip(states.iter_mut()) {
                let (y, next, cache) = layer.forward(&x, s)?;
                *s = next;
                cell_caches.push(cache);
                x = y;
            }
            match &self.projection {
                Some(p) => out.extend(p.forward(&x)),
                None => out.extend_from_slice(&x),
            }
            if self.projection.is_some() {
                top_hidden.push(x);
            }
            caches.push(cell_caches);
        }
        let pred = FeatureMap::new(event_map.width(), event_map.height(), self.feature_dim, out)
            .map_err(|_| Error::NonFinite("stack prediction".into()))?;
        Ok((
            pred,
            EventState { layers: states },
            StackCache {
                dims: event_map.dims(),
                cells: caches,
                top_hidden,
            },
        ))
    }

    /// Backpropagates a cotangent on the predicted map through every cell of
    /// the frame. Gradients into the incoming state are dropped (the horizon
    /// ends at the frame boundary). Returns `dL/d(event map)`.
    pub fn backward(&mut self, cache: &StackCache, grad_pred: &FeatureMap) -> Result<FeatureMap> {
        if grad_pred.dims() != cache.dims || grad_pred.channels() != self.feature_dim {
            return Err(Error::StaleCache("stack cotangent dims do not match cache"));
        }
        if cache.cells.first().is_some_and(|c| c.len() != self.depth()) {
            return Err(Error::StaleCache("stack cache depth does not match stack"));
        }
        let (w, h, d) = cache.dims;
        let mut grad_in = vec![0.0; w * h * d];
        let mut carry: Vec<LstmState> = self
            .layers
            .iter()
            .map(|c| LstmState::zeros(c.hidden_dim()))
            .collect();
        for n in (0..cache.cells.len()).rev() {
            let dy = grad_pred.cell(n);
            let mut from_above = match &mut self.projection {
                Some(p) => p.backward(&cache.top_hidden[n], dy),
                None => dy.to_vec(),
            };
            for l in (0..self.depth()).rev() {
                let grads = self.layers[l].backward(&cache.cells[n][l], &from_above, &carry[l])?;
                carry[l] = LstmState {
                    h: grads.h_prev,
                    c: grads.c_prev,
                };
                from_above = grads.x;
            }
            grad_in[n * d..(n + 1) * d].copy_from_slice(&from_above);
        }
        Ok(FeatureMap::from_raw(w, h, d, grad_in))
    }
}

impl Parameters for PredictionStack {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (l, cell) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("layer{l}"), cell.params()));
        }
        if let Some(p) = &self.projection {
            out.extend(prefixed("projection", p.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (l, cell) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("layer{l}"), cell.params_mut()));
        }
        if let Some(p) = &mut self.projection {
            out.extend(prefixed_mut("projection", p.params_mut()));
        }
        out
    }
}
