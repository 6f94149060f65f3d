//! Scale-aligned 2-D rotary positions.
//!
//! Every token of a `h_k × w_k` map is placed on the common `H × W` frame of
//! the final scale before rotation, so aligned positions on different scales
//! (and the condition prefix, which shares the final geometry) receive the same
//! rotation. The first half of each head's channels rotates with the row
//! position, the second half with the column position; pairs are adjacent
//! channels with frequency ladder `Θ^(-2m/(C/2))`.

use varsr_numerics::{Real, RotaryTable};

use crate::error::{config, shape, Result, VarsrError};
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    theta: f64,
    frame: (usize, usize),
}

impl RopeConfig {
    pub const DEFAULT_THETA: f64 = 10_000.0;

    pub fn new(head_dim: usize, theta: f64, frame: (usize, usize)) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return config(format!("rotary head dim {head_dim} must be a positive multiple of 4"));
        }
        if !(theta > 1.0 && theta.is_finite()) {
            return config(format!("rotary base {theta} must be finite and > 1"));
        }
        if frame.0 == 0 || frame.1 == 0 {
            return config("rotary frame dims must be positive");
        }
        Ok(Self {
            head_dim,
            theta,
            frame,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn frame(&self) -> (usize, usize) {
        self.frame
    }

    /// Rotation pairs per head (`C/2`), half for rows and half for columns.
    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// Angular frequency of pair `m` within one axis half.
    pub fn frequency(&self, m: usize) -> f64 {
        let half = (self.head_dim / 2) as f64;
        self.theta.powf(-2.0 * m as f64 / half)
    }

    /// All `C/2` rotation angles for one token: row pairs then column pairs.
    pub fn angles(&self, g: TokenGeometry) -> Vec<f64> {
        let per_axis = self.head_dim / 4;
        let row = effective_position(g.i, g.h, self.frame.0);
        let col = effective_position(g.j, g.w, self.frame.1);
        let mut out = Vec::with_capacity(2 * per_axis);
        out.extend((0..per_axis).map(|m| row * self.frequency(m)));
        out.extend((0..per_axis).map(|m| col * self.frequency(m)));
        out
    }

    /// Rotary table (one row of angles per token) for the attention graph op.
    pub fn table<T: Real>(&self, tokens: &[TokenGeometry]) -> RotaryTable<T> {
        let angles: Vec<f64> = tokens.iter().flat_map(|&g| self.angles(g)).collect();
        RotaryTable::from_angles(self.pairs(), &angles)
    }
}

/// Position of index `i` of an axis with `extent` cells on a `frame`-cell axis.
///
/// 0-based and without a half-cell offset; this is the only place that
/// convention lives.
pub fn effective_position(i: usize, extent: usize, frame: usize) -> f64 {
    i as f64 * frame as f64 / extent as f64
}

/// Grid coordinate `(i, j)` of a token on its own `h × w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub i: usize,
    pub j: usize,
    pub h: usize,
    pub w: usize,
}

/// Rotates one head vector of length `C` at token `(i, j)` of a `h × w` map.
pub fn sa_rope_apply(x: &[f64], g: TokenGeometry, cfg: &RopeConfig) -> Result<Vec<f64>> {
    if x.len() != cfg.head_dim {
        return shape(format!("rotary input of {} for head dim {}", x.len(), cfg.head_dim));
    }
    if g.i >= g.h || g.j >= g.w {
        return Err(VarsrError::Index {
            context: "sa_rope_apply",
            index: if g.i >= g.h { g.i } else { g.j },
            bound: if g.i >= g.h { g.h } else { g.w },
        });
    }
    let mut out = x.to_vec();
    for (p, a) in cfg.angles(g).into_iter().enumerate() {
        let (s, c) = a.sin_cos();
        let (u, v) = (x[2 * p], x[2 * p + 1]);
        out[2 * p] = u * c - v * s;
        out[2 * p + 1] = u * s + v * c;
    }
    Ok(out)
}

/// Geometry of every token of the sequence `[prefix | scale 1 | … | scale K]`,
/// each map row-major. The prefix, when present, must have final-scale dims
/// and takes that geometry.
pub fn attach_positions(
    prefix: Option<(usize, usize)>,
    schedule: &Schedule,
) -> Result<Vec<TokenGeometry>> {
    let frame = schedule.final_dims();
    let mut maps = Vec::with_capacity(schedule.len() + 1);
    if let Some(p) = prefix {
        if p != frame {
            return shape(format!("prefix map {p:?} differs from final scale {frame:?}"));
        }
        maps.push(p);
    }
    maps.extend_from_slice(schedule.scales());
    let mut out = Vec::new();
    for (h, w) in maps {
        for i in 0..h {
            for j in 0..w {
                out.push(TokenGeometry { i, j, h, w });
            }
        }
    }
    Ok(out)
}
