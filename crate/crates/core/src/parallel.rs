//! Segment-parallel anchored editing.
//!
//! Anchors are produced by one batch pass; the remaining frames are split
//! into contiguous runs handed to scoped worker threads. Workers share the
//! cache read-only and each frame's computation is self-contained, so the
//! gathered output does not depend on the worker count.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::attention::FrameFeatures;
use crate::error::{Error, Result};
use crate::network::ToyEditNetwork;
use crate::propagation::{edit_frame, prepare_anchors, provenance, EditedVideo, Mode};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Frame indices in ascending order; consecutive among non-anchor frames.
    pub frames: Vec<usize>,
}

impl Segment {
    /// Half-open span of clip positions covered, anchors included.
    pub fn span(&self) -> std::ops::Range<usize> {
        match (self.frames.first(), self.frames.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub n_frames: usize,
    pub n_workers: usize,
    pub segments: Vec<Segment>,
}

/// Splits the non-anchor frames into `n_workers` contiguous runs whose sizes
/// differ by at most one; the first `m % W` runs take the extra frame.
pub fn partition_segments(n_frames: usize, n_workers: usize, anchor_indices: &[usize]) -> Result<SegmentPlan> {
    if n_workers == 0 {
        return Err(Error::Parameter("need at least one worker".into()));
    }
    let work: Vec<usize> = (0..n_frames).filter(|i| !anchor_indices.contains(i)).collect();
    let (base, extra) = (work.len() / n_workers, work.len() % n_workers);
    let mut segments = Vec::with_capacity(n_workers);
    let mut at = 0;
    for w in 0..n_workers {
        let len = base + usize::from(w < extra);
        segments.push(Segment {
            frames: work[at..at + len].to_vec(),
        });
        at += len;
    }
    Ok(SegmentPlan {
        n_frames,
        n_workers,
        segments,
    })
}

/// Anchored editing with the non-anchor frames spread over `n_workers`
/// threads.
pub fn run_parallel(
    clip: &[FrameFeatures],
    network: &ToyEditNetwork,
    num_anchors: usize,
    n_workers: usize,
) -> Result<EditedVideo> {
    if clip.is_empty() {
        return Err(Error::Parameter("clip has no frames".into()));
    }
    if n_workers == 0 {
        return Err(Error::Parameter("need at least one worker".into()));
    }
    let (cache, anchors, anchor_out) = prepare_anchors(clip, network, num_anchors)?;
    let plan = partition_segments(clip.len(), n_workers, &anchors)?;

    let mut slots: Vec<Option<FrameFeatures>> = vec![None; clip.len()];
    for (&i, out) in anchors.iter().zip(anchor_out) {
        slots[i] = Some(relabel(out, clip[i].frame_index));
    }

    let cache = &cache;
    let results: Vec<Result<Vec<(usize, FrameFeatures)>>> = thread::scope(|s| {
        let handles: Vec<_> = plan
            .segments
            .iter()
            .map(|seg| {
                s.spawn(move || {
                    seg.frames
                        .iter()
                        .map(|&i| edit_frame(&clip[i], network, Some(cache)).map(|f| (i, f)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Parameter("worker panicked".into())))
            })
            .collect()
    });

    for (segment, (seg, res)) in plan.segments.iter().zip(results).enumerate() {
        let done = res.map_err(|e| Error::Job {
            segment,
            frames: seg.span(),
            source: Box::new(e),
        })?;
        for (i, f) in done {
            slots[i] = Some(f);
        }
    }

    let frames = slots
        .into_iter()
        .map(|f| f.expect("every frame is an anchor or in a segment"))
        .collect();
    Ok(EditedVideo {
        frames,
        mode: Mode::Anchored,
        provenance: provenance(network, anchors),
    })
}

fn relabel(mut f: FrameFeatures, index: usize) -> FrameFeatures {
    f.frame_index = index;
    f
}
