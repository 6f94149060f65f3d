//! Block-causal attention pattern over `[prefix | scale 1 | … | scale K]`.

use varsr_numerics::{AttnLayout, AttnSegment, QueryRun};

use crate::schedule::Schedule;

/// Dense attend-allowed matrix; row = query, column = key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    size: usize,
    allowed: Vec<bool>,
}

impl BlockMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.allowed
            .chunks(self.size)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }

    pub fn pair_count(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }
}

/// Key-prefix length visible to each query row: prefix rows see the prefix,
/// scale-k rows see the prefix and every scale up to and including k.
pub fn visible_keys(schedule: &Schedule, prefix_len: usize) -> Vec<usize> {
    let mut out = vec![prefix_len; prefix_len];
    let mut seen = prefix_len;
    for n in schedule.token_counts() {
        seen += n;
        out.extend(std::iter::repeat_n(seen, n));
    }
    out
}

pub fn build_block_mask(schedule: &Schedule, prefix_len: usize) -> BlockMask {
    let vis = visible_keys(schedule, prefix_len);
    let size = vis.len();
    let mut allowed = vec![false; size * size];
    for (q, &limit) in vis.iter().enumerate() {
        allowed[q * size..q * size + limit].fill(true);
    }
    BlockMask { size, allowed }
}

/// Closed-form allowed-pair count `p² + Σ_k n_k·(p + Σ_{k'≤k} n_k')`.
pub fn allowed_pairs(schedule: &Schedule, prefix_len: usize) -> usize {
    let mut total = prefix_len * prefix_len;
    let mut cum = 0;
    for n in schedule.token_counts() {
        cum += n;
        total += n * (prefix_len + cum);
    }
    total
}

/// Query runs of one sequence sharing the same visible key prefix.
pub fn sequence_runs(schedule: &Schedule, prefix_len: usize) -> Vec<QueryRun> {
    let mut runs = Vec::new();
    if prefix_len > 0 {
        runs.push(QueryRun {
            q_offset: 0,
            len: prefix_len,
            key_len: prefix_len,
        });
    }
    let mut seen = prefix_len;
    for n in schedule.token_counts() {
        runs.push(QueryRun {
            q_offset: seen,
            len: n,
            key_len: seen + n,
        });
        seen += n;
    }
    runs
}

/// Layout for `batch` full sequences stacked row-wise.
pub fn batch_layout(schedule: &Schedule, prefix_len: usize, batch: usize) -> AttnLayout {
    let len = prefix_len + schedule.total_tokens();
    let runs = sequence_runs(schedule, prefix_len);
    AttnLayout {
        segments: (0..batch)
            .map(|b| AttnSegment {
                q_start: b * len,
                k_start: b * len,
                runs: runs.clone(),
            })
            .collect(),
    }
}
