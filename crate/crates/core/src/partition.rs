//! Frame-sequence partition: cut at low transition similarity, then force
//! extra cuts until a minimum segment count is reached.

use serde::{Deserialize, Serialize};

use crate::similarity::{frame_embeddings, transition_similarities};
use crate::tensor::VideoFeatures;

/// Inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start_frame..=self.end_frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutReason {
    /// `t_i < S_τ`.
    Threshold,
    /// Added to reach the minimum segment count.
    Forced,
}

/// A cut between frame `after_frame` and `after_frame + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub after_frame: usize,
    pub similarity: f64,
    pub reason: CutReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub segments: Vec<Segment>,
    pub boundaries: Vec<Boundary>,
}

impl Partition {
    pub fn single(frames: usize) -> Self {
        Self {
            segments: vec![Segment {
                start_frame: 0,
                end_frame: frames - 1,
            }],
            boundaries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Partitions `t.len() + 1` frames. `min_segments` of 0 behaves as 1.
pub fn dyseg_partition(t: &[f64], segment_threshold: f64, min_segments: usize) -> Partition {
    let frames = t.len() + 1;
    let floor = min_segments.max(1).min(frames);
    let mut reason: Vec<Option<CutReason>> = t
        .iter()
        .map(|&v| (v < segment_threshold).then_some(CutReason::Threshold))
        .collect();

    let have = 1 + reason.iter().flatten().count();
    if have < floor {
        let mut open: Vec<usize> = (0..t.len()).filter(|&i| reason[i].is_none()).collect();
        open.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b)));
        for &i in &open[..floor - have] {
            reason[i] = Some(CutReason::Forced);
        }
    }

    let boundaries: Vec<Boundary> = reason
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            r.map(|reason| Boundary {
                after_frame: i,
                similarity: t[i],
                reason,
            })
        })
        .collect();
    let mut segments = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for b in &boundaries {
        segments.push(Segment {
            start_frame: start,
            end_frame: b.after_frame,
        });
        start = b.after_frame + 1;
    }
    segments.push(Segment {
        start_frame: start,
        end_frame: frames - 1,
    });
    Partition {
        segments,
        boundaries,
    }
}

/// Transition similarities of `features` followed by [`dyseg_partition`].
/// Returns the similarities too; they are empty for a single frame.
pub fn partition_video(
    features: &VideoFeatures,
    segment_threshold: f64,
    min_segments: usize,
) -> (Vec<f64>, Partition) {
    if features.frames() == 1 {
        return (Vec::new(), Partition::single(1));
    }
    let t = transition_similarities(&frame_embeddings(features))
        .expect("at least two frames");
    let p = dyseg_partition(&t, segment_threshold, min_segments);
    (t, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranges(p: &Partition) -> Vec<(usize, usize)> {
        p.segments.iter().map(|s| (s.start_frame, s.end_frame)).collect()
    }

    #[test]
    fn threshold_cuts() {
        let p = dyseg_partition(&[0.95, 0.85, 0.95, 0.80, 0.95], 0.9, 2);
        assert_eq!(ranges(&p), vec![(0, 1), (2, 3), (4, 5)]);
        assert!(p.boundaries.iter().all(|b| b.reason == CutReason::Threshold));
    }

    #[test]
    fn forced_cuts_take_earliest_ties() {
        let p = dyseg_partition(&[1.0; 9], 0.9, 8);
        assert_eq!(p.len(), 8);
        let after: Vec<usize> = p.boundaries.iter().map(|b| b.after_frame).collect();
        assert_eq!(after, (0..7).collect::<Vec<_>>());
        assert!(p.boundaries.iter().all(|b| b.reason == CutReason::Forced));
    }

    #[test]
    fn forced_cuts_prefer_lowest_similarity() {
        let p = dyseg_partition(&[0.99, 0.95, 0.97, 0.96], 0.9, 3);
        let after: Vec<usize> = p.boundaries.iter().map(|b| b.after_frame).collect();
        assert_eq!(after, vec![1, 3]);
    }

    #[test]
    fn single_frame() {
        let p = dyseg_partition(&[], 0.9, 8);
        assert_eq!(ranges(&p), vec![(0, 0)]);
    }

    #[test]
    fn short_clips_cap_at_frame_count() {
        let p = dyseg_partition(&[1.0, 1.0], 0.9, 8);
        assert_eq!(ranges(&p), vec![(0, 0), (1, 1), (2, 2)]);
    }

    proptest! {
        #[test]
        fn covers_frames_with_bounded_count(
            t in proptest::collection::vec(-1.0f64..1.0, 0..40),
            s in 0.01f64..1.0,
            m in 1usize..12,
        ) {
            let frames = t.len() + 1;
            let p = dyseg_partition(&t, s, m);
            prop_assert!(p.len() >= m.min(frames) && p.len() <= frames);
            prop_assert_eq!(p.segments[0].start_frame, 0);
            prop_assert_eq!(p.segments.last().unwrap().end_frame, frames - 1);
            for w in p.segments.windows(2) {
                prop_assert_eq!(w[0].end_frame + 1, w[1].start_frame);
            }
            for seg in &p.segments {
                prop_assert!(seg.start_frame <= seg.end_frame);
            }
            for b in &p.boundaries {
                match b.reason {
                    CutReason::Threshold => prop_assert!(t[b.after_frame] < s),
                    CutReason::Forced => prop_assert!(t[b.after_frame] >= s),
                }
            }
        }

        #[test]
        fn lower_threshold_never_adds_threshold_cuts(
            t in proptest::collection::vec(-1.0f64..1.0, 0..40),
            s in 0.01f64..1.0,
            lower in 0.0f64..1.0,
        ) {
            let count = |p: &Partition| {
                p.boundaries.iter().filter(|b| b.reason == CutReason::Threshold).count()
            };
            let hi = dyseg_partition(&t, s, 1);
            let lo = dyseg_partition(&t, s * lower, 1);
            prop_assert!(count(&lo) <= count(&hi));
        }
    }
}
