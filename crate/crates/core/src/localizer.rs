//! Attention-grid localization over class-agnostic box proposals.
//!
//! The prediction-error map is ranked cell by cell; proposals whose centers
//! fall inside the top-ranked cells are emitted grid by grid until the
//! per-frame budget is filled.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_spatial, SpatialMap};

/// Axis-aligned box in normalized `(cx, cy, w, h)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub score: Option<f64>,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            w,
            h,
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// The whole frame.
    pub fn full_frame() -> Self {
        Self {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
            score: None,
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.h > 0.0
            && self.score.is_none_or(f64::is_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid bounding box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Grid cell `(i, j)` containing the center. Cells are half-open except
    /// the last row and column, which also take centers at exactly 1.0.
    pub fn cell(&self, grid: (usize, usize)) -> (usize, usize) {
        let axis = |c: f64, n: usize| ((c * n as f64).floor() as usize).min(n - 1);
        (axis(self.cx, grid.0), axis(self.cy, grid.1))
    }
}

pub fn grid_membership(bbox: &BoundingBox, cell: (usize, usize), grid: (usize, usize)) -> bool {
    bbox.cell(grid) == cell
}

/// One attended cell and its softmax weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttendedGrid {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Ranks cells by error (descending, raster order on ties) and returns the
/// first `k` with their softmax weights.
pub fn top_k_grids(error_map: &SpatialMap, k: usize) -> Result<Vec<AttendedGrid>> {
    if k == 0 || k > error_map.cells() {
        return Err(Error::InvalidArgument(format!(
            "K must be in 1..={}, got {k}",
            error_map.cells()
        )));
    }
    let weights = softmax_spatial(error_map)?;
    let values = error_map.values();
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Softmax is monotone, so ranking by raw error gives the weight order
    // without the ties created by underflow.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let w = error_map.width();
    Ok(order
        .into_iter()
        .take(k)
        .map(|n| AttendedGrid {
            i: n % w,
            j: n / w,
            weight: weights.values()[n],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub frame_index: usize,
    pub selected: Vec<BoundingBox>,
    pub attended: Vec<AttendedGrid>,
    /// Set when no proposal center fell in an attended cell.
    pub fallback: bool,
}

impl LocalizationResult {
    pub fn top(&self) -> Option<&BoundingBox> {
        self.selected.first()
    }
}

/// Order of proposals inside one grid cell: objectness, then area, then
/// center raster position, then input order.
fn within_grid_order(a: &(usize, &BoundingBox), b: &(usize, &BoundingBox)) -> Ordering {
    let score = |x: &BoundingBox| x.score.unwrap_or(0.0);
    score(b.1)
        .total_cmp(&score(a.1))
        .then(b.1.area().total_cmp(&a.1.area()))
        .then(a.1.cy.total_cmp(&b.1.cy))
        .then(a.1.cx.total_cmp(&b.1.cx))
        .then(a.0.cmp(&b.0))
}

pub fn localize(
    error_map: &SpatialMap,
    proposals: &[BoundingBox],
    k: usize,
    n: usize,
    frame_index: usize,
) -> Result<LocalizationResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let attended = top_k_grids(error_map, k)?;
    let grid = error_map.dims();
    let cells: Vec<(usize, usize)> = proposals.iter().map(|p| p.cell(grid)).collect();

    let mut selected = Vec::with_capacity(n);
    'grids: for g in &attended {
        let mut members: Vec<(usize, &BoundingBox)> = proposals
            .iter()
            .enumerate()
            .filter(|(idx, _)| cells[*idx] == (g.i, g.j))
            .collect();
        members.sort_by(within_grid_order);
        for (_, b) in members {
            if selected.len() == n {
                break 'grids;
            }
            selected.push(*b);
        }
    }

    let fallback = selected.is_empty();
    if fallback {
        selected.push(fallback_box(&attended[0], proposals, grid));
    }
    Ok(LocalizationResult {
        frame_index,
        selected,
        attended,
        fallback,
    })
}

/// The proposal nearest to the top cell's center (grid coordinates), or the
/// cell itself when there are no proposals at all.
fn fallback_box(top: &AttendedGrid, proposals: &[BoundingBox], grid: (usize, usize)) -> BoundingBox {
    let (gw, gh) = (grid.0 as f64, grid.1 as f64);
    let (tx, ty) = (top.i as f64 + 0.5, top.j as f64 + 0.5);
    let dist = |b: &BoundingBox| {
        let dx = b.cx * gw - tx;
        let dy = b.cy * gh - ty;
        dx * dx + dy * dy
    };
    proposals
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)).then(a.0.cmp(&b.0)))
        .map(|(_, b)| *b)
        .unwrap_or(BoundingBox {
            cx: tx / gw,
            cy: ty / gh,
            w: 1.0 / gw,
            h: 1.0 / gh,
            score: None,
        })
}

/// One JSON line of localization output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub video_id: String,
    pub frame: usize,
    /// `[cx, cy, w, h, score, fallback]`
    pub boxes: Vec<(f64, f64, f64, f64, Option<f64>, bool)>,
    /// `[i, j, weight]`
    pub grids: Vec<(usize, usize, f64)>,
}

impl LocalizationRecord {
    pub fn new(video_id: &str, result: &LocalizationResult) -> Self {
        Self {
            video_id: video_id.to_string(),
            frame: result.frame_index,
            boxes: result
                .selected
                .iter()
                .map(|b| (b.cx, b.cy, b.w, b.h, b.score, result.fallback))
                .collect(),
            grids: result.attended.iter().map(|g| (g.i, g.j, g.weight)).collect(),
        }
    }

    /// The first (highest-ranked) box, if any.
    pub fn top_box(&self) -> Option<BoundingBox> {
        self.boxes.first().map(|&(cx, cy, w, h, score, _)| BoundingBox { cx, cy, w, h, score })
    }
}
