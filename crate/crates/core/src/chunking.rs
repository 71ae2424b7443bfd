//! Fixed-context inference: overlapping padded windows of `K + 2P` frames,
//! each decoded independently, with only the central `K` frames kept.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionStats, ModelView};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// Frames the chunk sees.
    pub cover: Range<usize>,
    /// Frames the chunk contributes to the output.
    pub keep: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub t: usize,
    pub k: usize,
    pub p: usize,
    pub chunks: Vec<Chunk>,
}

pub fn plan_chunks(t: usize, k: usize, p: usize) -> Result<ChunkPlan> {
    if t == 0 {
        return Err(Error::invalid("sequence length must be ≥ 1"));
    }
    if k == 0 {
        return Err(Error::invalid("chunk keep size K must be ≥ 1"));
    }
    let chunks = (0..t.div_ceil(k))
        .map(|i| {
            let ks = i * k;
            let ke = ((i + 1) * k).min(t);
            Chunk {
                cover: ks.saturating_sub(p)..(ke + p).min(t),
                keep: ks..ke,
            }
        })
        .collect();
    Ok(ChunkPlan { t, k, p, chunks })
}

impl ChunkPlan {
    /// Checks every structural invariant of the plan.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, c) in self.chunks.iter().enumerate() {
            let bad = |what: &str| Err(Error::invalid(format!("chunk {i}: {what}")));
            if c.keep.start != next || c.keep.end <= c.keep.start {
                return bad("keep regions do not tile the sequence");
            }
            next = c.keep.end;
            if c.cover.end > self.t || c.cover.start > c.keep.start || c.keep.end > c.cover.end {
                return bad("keep not inside cover or cover outside sequence");
            }
            if c.keep.len() > self.k || c.cover.len() > self.k + 2 * self.p {
                return bad("region larger than K / K + 2P");
            }
            let left = c.keep.start - c.cover.start;
            let right = c.cover.end - c.keep.end;
            if left != self.p.min(c.keep.start) || right != self.p.min(self.t - c.keep.end) {
                return bad("padding differs from P away from the sequence ends");
            }
        }
        if next != self.t {
            return Err(Error::invalid("keep regions do not reach the end of the sequence"));
        }
        Ok(())
    }

    /// Self-attention score evaluations per layer per head over all chunks.
    pub fn chunked_ops(&self) -> u64 {
        self.chunks.iter().map(|c| triangle(c.cover.len())).sum()
    }
}

fn triangle(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

/// `(full, chunked)` causal self-attention score counts per layer per head.
pub fn attention_ops(t: usize, k: usize, p: usize) -> Result<(u64, u64)> {
    Ok((triangle(t), plan_chunks(t, k, p)?.chunked_ops()))
}

/// Evaluation order of the chunks. Every schedule yields identical output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Sequential,
    Parallel,
    /// Explicit permutation of chunk indices.
    Order(Vec<usize>),
}

/// Decodes frame-aligned audio `T × d_audio` chunk by chunk and assembles
/// the keep regions into a `T × 3V` output.
pub fn chunked_infer(
    view: &ModelView,
    frames: &Tensor,
    style: &[f64],
    plan: &ChunkPlan,
    schedule: &Schedule,
) -> Result<(Tensor, AttentionStats)> {
    plan.validate()?;
    if frames.rows() != plan.t {
        return Err(Error::invalid(format!(
            "plan covers {} frames but the input has {}",
            plan.t,
            frames.rows()
        )));
    }
    let run = |i: usize| -> Result<(usize, Tensor, AttentionStats)> {
        let c = &plan.chunks[i];
        let slice = frames.slice_rows(c.cover.start, c.cover.end);
        let (y, stats) = view.infer_frames(&slice, style)?;
        let off = c.keep.start - c.cover.start;
        Ok((i, y.slice_rows(off, off + c.keep.len()), stats))
    };
    let n = plan.chunks.len();
    let results: Vec<(usize, Tensor, AttentionStats)> = match schedule {
        Schedule::Sequential => (0..n).map(run).collect::<Result<_>>()?,
        Schedule::Parallel => (0..n).into_par_iter().map(run).collect::<Result<_>>()?,
        Schedule::Order(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::invalid("chunk order must be a permutation of all chunks"));
            }
            order.iter().map(|&i| run(i)).collect::<Result<_>>()?
        }
    };
    let mut out = Tensor::zeros(plan.t, view.config.out_dim());
    let mut stats = AttentionStats::new(view.config.n_layers, view.config.n_heads);
    for (i, y, s) in results {
        let keep = &plan.chunks[i].keep;
        for (r, t) in keep.clone().enumerate() {
            out.row_mut(t).copy_from_slice(y.row(r));
        }
        stats.accumulate(&s);
    }
    Ok((out, stats))
}
