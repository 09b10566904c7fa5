//! Tree-based spatiotemporal token merging.
//!
//! Every token of a frame links to its most similar token among the previous
//! frame's candidates when the cosine similarity reaches the threshold. Links
//! form trees rooted in earlier frames; each tree is mean-pooled into one
//! output token.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{cosine_with_sq_norms, sq_norm};
use crate::tensor::{TokenRef, VideoFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TstmConstraints {
    /// Longest allowed root-to-leaf path, in nodes; `None` is unlimited.
    pub max_depth: Option<usize>,
    /// Largest `|pos_child − pos_parent|` allowed for a link; `None` is unlimited.
    pub neighborhood: Option<usize>,
}

impl TstmConstraints {
    pub const UNLIMITED: Self = Self {
        max_depth: None,
        neighborhood: None,
    };
}

/// Which previous-frame tokens a child may link to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Candidates {
    Neighborhood(Option<usize>),
    SamePosition,
}

/// Tokens of consecutive frames starting at `start_frame`; `positions[i]`
/// lists the spatial indices available in frame `start_frame + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRun {
    pub start_frame: usize,
    pub positions: Vec<Vec<usize>>,
}

impl FrameRun {
    /// Every token of frames `start..=end`.
    pub fn full(features: &VideoFeatures, start: usize, end: usize) -> Self {
        let n = features.tokens_per_frame();
        Self {
            start_frame: start,
            positions: (start..=end).map(|_| (0..n).collect()).collect(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub child: TokenRef,
    pub parent: TokenRef,
    pub similarity: f64,
}

/// Parent map over the nodes of one frame run.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeForest {
    start_frame: usize,
    frames: usize,
    /// Sorted by `TokenRef`.
    nodes: Vec<TokenRef>,
    /// `(parent node index, similarity)` per node.
    parent: Vec<Option<(usize, f64)>>,
}

impl MergeForest {
    pub fn nodes(&self) -> &[TokenRef] {
        &self.nodes
    }

    pub fn start_frame(&self) -> usize {
        self.start_frame
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn parent_of(&self, node: usize) -> Option<usize> {
        self.parent[node].map(|p| p.0)
    }

    pub fn links(&self) -> impl Iterator<Item = Link> + '_ {
        self.parent.iter().enumerate().filter_map(|(i, p)| {
            p.map(|(j, similarity)| Link {
                child: self.nodes[i],
                parent: self.nodes[j],
                similarity,
            })
        })
    }

    pub fn link_count(&self) -> usize {
        self.parent.iter().flatten().count()
    }

    pub fn root_count(&self) -> usize {
        self.nodes.len() - self.link_count()
    }

    /// Node indices of each tree, sorted; trees ordered by their root.
    pub fn trees(&self) -> Vec<Vec<usize>> {
        let mut root_of = vec![usize::MAX; self.nodes.len()];
        let mut slot_of_root = vec![usize::MAX; self.nodes.len()];
        let mut trees: Vec<Vec<usize>> = Vec::new();
        // parents always precede children in TokenRef order
        for i in 0..self.nodes.len() {
            let root = match self.parent[i] {
                Some((p, _)) => root_of[p],
                None => i,
            };
            root_of[i] = root;
            if root == i {
                slot_of_root[i] = trees.len();
                trees.push(Vec::new());
            }
            trees[slot_of_root[root]].push(i);
        }
        trees
    }

    /// Number of nodes on the longest root-to-leaf path of any tree.
    pub fn max_path_len(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        for i in 0..self.nodes.len() {
            depth[i] = self.parent[i].map_or(1, |(p, _)| depth[p] + 1);
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Links whose child lies in each frame of the run.
    pub fn links_per_frame(&self) -> Vec<usize> {
        let mut out = vec![0; self.frames];
        for l in self.links() {
            out[l.child.frame - self.start_frame] += 1;
        }
        out
    }

    /// Mean link similarity per frame of the run; `None` where a frame has no links.
    pub fn mean_similarity_per_frame(&self) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; self.frames];
        let mut count = vec![0usize; self.frames];
        for l in self.links() {
            let f = l.child.frame - self.start_frame;
            sum[f] += l.similarity;
            count[f] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }
}

fn validate_run(features: &VideoFeatures, run: &FrameRun) -> Result<()> {
    if run.positions.is_empty() {
        return Err(Error::Shape("merging needs at least one frame".into()));
    }
    if run.start_frame + run.positions.len() > features.frames() {
        return Err(Error::Shape(format!(
            "frames {}..{} exceed the {} available",
            run.start_frame,
            run.start_frame + run.positions.len(),
            features.frames()
        )));
    }
    for (i, pos) in run.positions.iter().enumerate() {
        if pos.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape(format!(
                "positions of frame {} must be strictly increasing",
                run.start_frame + i
            )));
        }
        if pos.last().is_some_and(|&p| p >= features.tokens_per_frame()) {
            return Err(Error::Shape(format!(
                "position out of range in frame {}",
                run.start_frame + i
            )));
        }
    }
    Ok(())
}

fn link_frames(
    features: &VideoFeatures,
    run: &FrameRun,
    threshold: f64,
    candidates: Candidates,
) -> Result<MergeForest> {
    validate_run(features, run)?;
    let mut nodes = Vec::with_capacity(run.token_count());
    let mut first_node = Vec::with_capacity(run.positions.len());
    for (i, pos) in run.positions.iter().enumerate() {
        first_node.push(nodes.len());
        nodes.extend(pos.iter().map(|&p| TokenRef::new(run.start_frame + i, p)));
    }
    let norms: Vec<f64> = nodes.iter().map(|&t| sq_norm(features.token(t))).collect();

    let mut parent = vec![None; nodes.len()];
    for i in 1..run.positions.len() {
        let (prev, cur) = (&run.positions[i - 1], &run.positions[i]);
        let (prev_base, cur_base) = (first_node[i - 1], first_node[i]);
        let links: Vec<Option<(usize, f64)>> = (0..cur.len())
            .into_par_iter()
            .map(|c| {
                let child = nodes[cur_base + c];
                let cv = features.token(child);
                let cn = norms[cur_base + c];
                let range = match candidates {
                    Candidates::SamePosition => {
                        let k = prev.partition_point(|&p| p < child.pos);
                        k..(k + usize::from(prev.get(k) == Some(&child.pos)))
                    }
                    Candidates::Neighborhood(None) => 0..prev.len(),
                    Candidates::Neighborhood(Some(k)) => {
                        let lo = prev.partition_point(|&p| p + k < child.pos);
                        let hi = prev.partition_point(|&p| p <= child.pos + k);
                        lo..hi
                    }
                };
                let mut best: Option<(usize, f64)> = None;
                for j in range {
                    let pi = prev_base + j;
                    let sim = cosine_with_sq_norms(cv, cn, features.token(nodes[pi]), norms[pi]);
                    if best.map_or(true, |(_, b)| sim > b) {
                        best = Some((pi, sim));
                    }
                }
                best.filter(|&(_, s)| s >= threshold)
            })
            .collect();
        parent[cur_base..cur_base + cur.len()].copy_from_slice(&links);
    }

    Ok(MergeForest {
        start_frame: run.start_frame,
        frames: run.positions.len(),
        nodes,
        parent,
    })
}

/// Cuts links, last frame first, so that no tree holds a path longer than
/// `max_depth` nodes. A node is cut from its parent once the chain hanging
/// below it, itself included, reaches `max_depth` nodes.
fn prune_depth(forest: &mut MergeForest, max_depth: usize) {
    let mut height = vec![1usize; forest.nodes.len()];
    for i in (0..forest.nodes.len()).rev() {
        if let Some((p, _)) = forest.parent[i] {
            if height[i] >= max_depth {
                forest.parent[i] = None;
            } else {
                height[p] = height[p].max(height[i] + 1);
            }
        }
    }
}

/// Links each token to its most similar candidate in the previous frame of
/// the run, then applies the depth constraint.
pub fn build_forest(
    features: &VideoFeatures,
    run: &FrameRun,
    threshold: f64,
    constraints: TstmConstraints,
) -> Result<MergeForest> {
    if constraints.max_depth == Some(0) || constraints.neighborhood == Some(0) {
        return Err(Error::config(
            "max_depth",
            "depth and neighborhood limits must be at least 1",
        ));
    }
    let mut forest = link_frames(
        features,
        run,
        threshold,
        Candidates::Neighborhood(constraints.neighborhood),
    )?;
    if let Some(d) = constraints.max_depth {
        prune_depth(&mut forest, d);
    }
    Ok(forest)
}

/// Temporal merging restricted to the same spatial index in the previous frame.
pub fn ttm_baseline(features: &VideoFeatures, run: &FrameRun, threshold: f64) -> Result<MergeForest> {
    link_frames(features, run, threshold, Candidates::SamePosition)
}

/// Mean-pooled trees with their members.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub dim: usize,
    pub tokens: Vec<f32>,
    pub provenance: Vec<Vec<TokenRef>>,
}

impl Aggregated {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// `f64` mean of the given tokens, rounded to `f32`.
pub fn mean_of(features: &VideoFeatures, members: &[TokenRef]) -> Vec<f32> {
    let mut acc = vec![0.0f64; features.dim()];
    for &m in members {
        for (a, &v) in acc.iter_mut().zip(features.token(m)) {
            *a += v as f64;
        }
    }
    let n = members.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

pub fn aggregate_forest(forest: &MergeForest, features: &VideoFeatures) -> Aggregated {
    let provenance: Vec<Vec<TokenRef>> = forest
        .trees()
        .into_iter()
        .map(|t| t.into_iter().map(|i| forest.nodes[i]).collect())
        .collect();
    let tokens = provenance
        .par_iter()
        .flat_map_iter(|members| mean_of(features, members))
        .collect();
    Aggregated {
        dim: features.dim(),
        tokens,
        provenance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::cosine_matrix;
    use proptest::prelude::*;

    fn swapped() -> VideoFeatures {
        // frame 0: a, b; frame 1: d, c
        VideoFeatures::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.1, 0.9, 0.9, 0.1]).unwrap()
    }

    #[test]
    fn order_swapped_tokens_link_across_positions() {
        let f = swapped();
        let run = FrameRun::full(&f, 0, 1);
        let forest = build_forest(&f, &run, 0.8, TstmConstraints::UNLIMITED).unwrap();
        let links: Vec<Link> = forest.links().collect();
        assert_eq!(links.len(), 2);
        assert_eq!((links[0].child, links[0].parent), (TokenRef::new(1, 0), TokenRef::new(0, 1)));
        assert_eq!((links[1].child, links[1].parent), (TokenRef::new(1, 1), TokenRef::new(0, 0)));
        for l in &links {
            assert!((l.similarity - 0.9939).abs() < 1e-4);
        }
        assert_eq!(forest.root_count(), 2);

        let ttm = ttm_baseline(&f, &run, 0.8).unwrap();
        assert_eq!(ttm.link_count(), 0);
        assert_eq!(ttm.root_count(), 4);
    }

    #[test]
    fn identical_frames_form_columns() {
        let frame = [0.2f32, 1.0, -1.0, 0.5, 0.7, 0.7];
        let f = VideoFeatures::new(4, 3, 2, frame.repeat(4)).unwrap();
        let run = FrameRun::full(&f, 0, 3);
        let forest = build_forest(&f, &run, 0.8, TstmConstraints::UNLIMITED).unwrap();
        let trees = forest.trees();
        assert_eq!(trees.len(), 3);
        assert!(trees.iter().all(|t| t.len() == 4));
        assert_eq!(forest, ttm_baseline(&f, &run, 0.8).unwrap());

        let agg = aggregate_forest(&forest, &f);
        assert_eq!(agg.tokens, frame.to_vec());
        assert_eq!(agg.provenance[1], (0..4).map(|fr| TokenRef::new(fr, 1)).collect::<Vec<_>>());
    }

    #[test]
    fn orthogonal_tokens_never_link() {
        let f = VideoFeatures::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0]).unwrap();
        let forest = build_forest(&f, &FrameRun::full(&f, 0, 1), 1.0, TstmConstraints::UNLIMITED).unwrap();
        assert_eq!(forest.link_count(), 0);
        assert_eq!(aggregate_forest(&forest, &f).len(), 4);
    }

    #[test]
    fn aggregation_means() {
        let f = VideoFeatures::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let forest = build_forest(&f, &FrameRun::full(&f, 0, 1), 0.0001, TstmConstraints::UNLIMITED).unwrap();
        assert_eq!(forest.link_count(), 0, "cosine 0 stays below any positive threshold");
        let f = VideoFeatures::new(2, 1, 2, vec![1.0, 0.0, 1.0, 0.2]).unwrap();
        let forest = build_forest(&f, &FrameRun::full(&f, 0, 1), 0.9, TstmConstraints::UNLIMITED).unwrap();
        assert_eq!(aggregate_forest(&forest, &f).tokens, vec![1.0, 0.1]);
    }

    #[test]
    fn single_frame_and_empty_runs() {
        let f = swapped();
        let one = ttm_baseline(&f, &FrameRun::full(&f, 1, 1), 0.5).unwrap();
        assert_eq!(one.link_count(), 0);
        let empty = FrameRun { start_frame: 0, positions: vec![] };
        assert!(build_forest(&f, &empty, 0.8, TstmConstraints::UNLIMITED).is_err());
    }

    #[test]
    fn depth_one_disables_merging() {
        let f = VideoFeatures::new(3, 2, 2, [1.0f32, 0.0, 0.0, 1.0].repeat(3)).unwrap();
        let run = FrameRun::full(&f, 0, 2);
        let c = TstmConstraints { max_depth: Some(1), neighborhood: None };
        assert_eq!(build_forest(&f, &run, 0.8, c).unwrap().link_count(), 0);
        let c = TstmConstraints { max_depth: Some(2), neighborhood: None };
        let forest = build_forest(&f, &run, 0.8, c).unwrap();
        // chains of three split after the root: {0}, {1, 2} per column
        assert_eq!(forest.max_path_len(), 2);
        assert_eq!(forest.link_count(), 2);
    }

    #[test]
    fn neighborhood_restricts_candidates() {
        // frame 1 token 0 matches frame 0 token 3 exactly, three positions away
        let mut data = vec![0.0f32; 16];
        let frame0 = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.6, 0.8];
        let frame1 = [0.6, 0.8, 0.0, -1.0, 0.0, -1.0, 0.0, -1.0];
        data[..8].copy_from_slice(&frame0);
        data[8..].copy_from_slice(&frame1);
        let f = VideoFeatures::new(2, 4, 2, data).unwrap();
        let run = FrameRun::full(&f, 0, 1);
        let wide = build_forest(&f, &run, 0.5, TstmConstraints::UNLIMITED).unwrap();
        let l: Vec<Link> = wide.links().collect();
        assert_eq!(l[0].parent, TokenRef::new(0, 3));
        let narrow = build_forest(&f, &run, 0.5, TstmConstraints { max_depth: None, neighborhood: Some(2) }).unwrap();
        let l: Vec<Link> = narrow.links().collect();
        assert_eq!(l[0].child, TokenRef::new(1, 0));
        assert_eq!(l[0].parent, TokenRef::new(0, 1));
    }

    #[test]
    fn remainder_positions_keep_their_spatial_index() {
        let f = swapped();
        let run = FrameRun { start_frame: 0, positions: vec![vec![1], vec![0, 1]] };
        let forest = build_forest(&f, &run, 0.8, TstmConstraints::UNLIMITED).unwrap();
        let l: Vec<Link> = forest.links().collect();
        assert_eq!(l.len(), 1);
        assert_eq!((l[0].child, l[0].parent), (TokenRef::new(1, 0), TokenRef::new(0, 1)));
        let ttm = ttm_baseline(&f, &run, 0.8).unwrap();
        assert_eq!(ttm.link_count(), 0);
        let bad = FrameRun { start_frame: 0, positions: vec![vec![1, 0]] };
        assert!(build_forest(&f, &bad, 0.8, TstmConstraints::UNLIMITED).is_err());
    }

    /// Unconstrained linking written directly from the definition.
    fn naive_links(f: &VideoFeatures, threshold: f64) -> Vec<(TokenRef, TokenRef, f64)> {
        let (n, d) = (f.tokens_per_frame(), f.dim());
        let mut out = Vec::new();
        for fr in 1..f.frames() {
            let sim = cosine_matrix(f.frame(fr), f.frame(fr - 1), d).unwrap();
            for c in 0..n {
                let mut best = 0;
                for p in 1..n {
                    if sim.get(c, p) > sim.get(c, best) {
                        best = p;
                    }
                }
                if sim.get(c, best) >= threshold {
                    out.push((TokenRef::new(fr, c), TokenRef::new(fr - 1, best), sim.get(c, best)));
                }
            }
        }
        out
    }

    fn video() -> impl Strategy<Value = VideoFeatures> {
        (1usize..6, 1usize..8, 1usize..4).prop_flat_map(|(fr, n, d)| {
            proptest::collection::vec(-1.0f32..1.0, fr * n * d)
                .prop_map(move |v| VideoFeatures::new(fr, n, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_the_definition(f in video(), t in 0.05f64..1.0) {
            let run = FrameRun::full(&f, 0, f.frames() - 1);
            let forest = build_forest(&f, &run, t, TstmConstraints::UNLIMITED).unwrap();
            let got: Vec<(TokenRef, TokenRef, f64)> =
                forest.links().map(|l| (l.child, l.parent, l.similarity)).collect();
            prop_assert_eq!(got, naive_links(&f, t));
        }

        #[test]
        fn dominates_same_position_merging(f in video(), t in 0.05f64..1.0) {
            let run = FrameRun::full(&f, 0, f.frames() - 1);
            let tstm = build_forest(&f, &run, t, TstmConstraints::UNLIMITED).unwrap();
            let ttm = ttm_baseline(&f, &run, t).unwrap();
            prop_assert!(tstm.link_count() >= ttm.link_count());
            let tstm_links: Vec<Link> = tstm.links().collect();
            for l in ttm.links() {
                let better = tstm_links.iter().find(|m| m.child == l.child);
                prop_assert!(better.is_some_and(|m| m.similarity >= l.similarity));
            }
        }

        #[test]
        fn raising_the_threshold_only_removes_links(f in video(), lo in 0.05f64..1.0, gap in 0.0f64..0.5) {
            let run = FrameRun::full(&f, 0, f.frames() - 1);
            let a = build_forest(&f, &run, lo, TstmConstraints::UNLIMITED).unwrap();
            let b = build_forest(&f, &run, (lo + gap).min(1.0), TstmConstraints::UNLIMITED).unwrap();
            let la: Vec<Link> = a.links().collect();
            for l in b.links() {
                prop_assert!(la.contains(&l));
            }
        }

        #[test]
        fn constraints_hold(f in video(), t in 0.05f64..1.0, depth in 1usize..5, k in 1usize..4) {
            let run = FrameRun::full(&f, 0, f.frames() - 1);
            let c = TstmConstraints { max_depth: Some(depth), neighborhood: Some(k) };
            let forest = build_forest(&f, &run, t, c).unwrap();
            prop_assert!(forest.max_path_len() <= depth);
            for l in forest.links() {
                prop_assert!(l.child.pos.abs_diff(l.parent.pos) <= k);
                prop_assert_eq!(l.child.frame, l.parent.frame + 1);
                prop_assert!(l.similarity >= t);
            }
            let sizes: usize = forest.trees().iter().map(Vec::len).sum();
            prop_assert_eq!(sizes, run.token_count());
            prop_assert_eq!(forest.trees().len(), forest.root_count());
        }

        #[test]
        fn loose_limits_equal_unlimited(f in video(), t in 0.05f64..1.0) {
            let run = FrameRun::full(&f, 0, f.frames() - 1);
            let free = build_forest(&f, &run, t, TstmConstraints::UNLIMITED).unwrap();
            let loose = TstmConstraints {
                max_depth: Some(f.frames()),
                neighborhood: Some(f.tokens_per_frame()),
            };
            prop_assert_eq!(free, build_forest(&f, &run, t, loose).unwrap());
        }

        #[test]
        fn aggregates_are_tree_means(f in video(), t in 0.05f64..1.0) {
            let run = FrameRun::full(&f, 0, f.frames() - 1);
            let forest = build_forest(&f, &run, t, TstmConstraints::UNLIMITED).unwrap();
            let agg = aggregate_forest(&forest, &f);
            prop_assert_eq!(agg.len(), forest.root_count());
            for (o, members) in agg.provenance.iter().enumerate() {
                for c in 0..f.dim() {
                    let mean = members.iter().map(|&m| f.token(m)[c] as f64).sum::<f64>()
                        / members.len() as f64;
                    prop_assert!((agg.tokens[o * f.dim() + c] as f64 - mean).abs() <= 1e-5);
                }
            }
        }
    }
}
