use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Per-scale token-map dims `(h_k, w_k)`, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct Schedule {
    scales: Vec<(usize, usize)>,
}

impl Schedule {
    /// Rejects empty schedules, zero dims and schedules that are not strictly
    /// increasing (no axis may shrink and every step must grow one axis).
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return config("schedule must have at least one scale");
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return config(format!("schedule {scales:?} has a zero dim"));
        }
        for pair in scales.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 < h0 || w1 < w0 || (h1 == h0 && w1 == w0) {
                return config(format!("schedule {scales:?} is not strictly increasing"));
            }
        }
        Ok(Self { scales })
    }

    /// Square schedule from side lengths, e.g. `[1, 2, 4, 8, 16]`.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn dims(&self, k: usize) -> (usize, usize) {
        self.scales[k]
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn final_dims(&self) -> (usize, usize) {
        *self.scales.last().expect("schedule is non-empty")
    }

    pub fn tokens(&self, k: usize) -> usize {
        self.scales[k].0 * self.scales[k].1
    }

    pub fn token_counts(&self) -> Vec<usize> {
        (0..self.len()).map(|k| self.tokens(k)).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.token_counts().iter().sum()
    }

    /// Start offset of every scale in the concatenated token sequence.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.token_counts()
            .into_iter()
            .map(|n| {
                let o = acc;
                acc += n;
                o
            })
            .collect()
    }
}

impl TryFrom<Vec<(usize, usize)>> for Schedule {
    type Error = crate::error::VarsrError;

    fn try_from(v: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Schedule> for Vec<(usize, usize)> {
    fn from(s: Schedule) -> Self {
        s.scales
    }
}
