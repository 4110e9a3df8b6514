//! Plane trees and the random tree models: unconditioned Galton–Watson
//! trees, trees conditioned on their size, and Kesten's tree truncated at a
//! finite spine height.
//!
//! A [`Tree`] is stored in preorder: node `0` is the root, every subtree is
//! the contiguous id range `v .. v + size(v)`, and a parent always has a
//! smaller id than its children. The preorder out-degree sequence (the
//! Łukasiewicz word) determines the tree and doubles as its canonical shape.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::distributions::{self, DistError, DistSpec, LawHandle};
use crate::rng::RngStream;

const NO_PARENT: u32 = u32::MAX;
/// Attempts allowed to the rejection sampler for size-conditioned trees.
pub const REJECTION_BUDGET: u64 = 10_000_000;
/// Largest size accepted by [`enumerate_trees`].
pub const ENUMERATION_LIMIT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("offspring law is not critical (mean {mean})")]
    NotCritical { mean: f64 },
    #[error("offspring law is δ₁; the tree would be an infinite line")]
    Delta1Offspring,
    #[error("no tree with {0} vertices has positive probability")]
    Inadmissible(usize),
    #[error("rejection sampler gave up after {attempts} attempts for n = {n}")]
    RejectionBudgetExceeded { n: usize, attempts: u64 },
    #[error("node {node} out of range for a tree of {len} nodes")]
    BadNode { node: usize, len: usize },
    #[error("enumeration limited to n <= {ENUMERATION_LIMIT}, got {0}")]
    TooLarge(usize),
    #[error("invalid tree: {0}")]
    InvalidShape(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// The sampler stopped because the tree grew past its vertex cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverflowMark {
    /// Vertices generated before giving up (cap + 1).
    pub partial_count: usize,
}

/// Outcome of a capped sampler.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampled<T> {
    Complete(T),
    Overflow(OverflowMark),
}

impl<T> Sampled<T> {
    pub fn complete(self) -> Option<T> {
        match self {
            Sampled::Complete(t) => Some(t),
            Sampled::Overflow(_) => None,
        }
    }

    pub fn is_overflow(&self) -> bool {
        matches!(self, Sampled::Overflow(_))
    }
}

/// A finite rooted plane tree in preorder arena form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tree {
    degrees: Vec<u32>,
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl Tree {
    /// Builds a tree from its preorder out-degree sequence. The sequence must
    /// be a Łukasiewicz excursion: `Σ (dᵢ - 1)` first reaches `-1` at the end.
    pub fn from_degrees(degrees: Vec<u32>) -> Result<Tree, TreeError> {
        if degrees.is_empty() {
            return Err(TreeError::InvalidShape("empty degree sequence".into()));
        }
        if degrees.len() >= NO_PARENT as usize {
            return Err(TreeError::InvalidShape("too many nodes".into()));
        }
        let mut need: i64 = 1;
        for (i, &d) in degrees.iter().enumerate() {
            need += d as i64 - 1;
            if need == 0 && i + 1 != degrees.len() {
                return Err(TreeError::InvalidShape(format!(
                    "degree sequence closes at position {i} of {}",
                    degrees.len()
                )));
            }
        }
        if need != 0 {
            return Err(TreeError::InvalidShape(format!(
                "degree sequence leaves {need} open slots"
            )));
        }
        Ok(Self::from_excursion(degrees))
    }

    /// Same as [`Tree::from_degrees`] for sequences already known to be valid.
    pub(crate) fn from_excursion(degrees: Vec<u32>) -> Tree {
        let n = degrees.len();
        let mut parent = vec![NO_PARENT; n];
        // (node, children still to attach)
        let mut open: Vec<(u32, u32)> = Vec::new();
        for (i, &d) in degrees.iter().enumerate() {
            if let Some(top) = open.last_mut() {
                parent[i] = top.0;
                top.1 -= 1;
                if top.1 == 0 {
                    open.pop();
                }
            }
            if d > 0 {
                open.push((i as u32, d));
            }
        }
        let mut size = vec![1u32; n];
        for v in (1..n).rev() {
            let p = parent[v] as usize;
            size[p] += size[v];
        }
        Tree {
            degrees,
            parent,
            size,
        }
    }

    /// Builds a tree from explicit ordered child lists (any node numbering)
    /// and returns it together with the map `old id -> preorder id`.
    pub fn from_children(
        root: usize,
        children: &[Vec<usize>],
    ) -> Result<(Tree, Vec<usize>), TreeError> {
        let n = children.len();
        if root >= n {
            return Err(TreeError::BadNode { node: root, len: n });
        }
        let mut mapping = vec![usize::MAX; n];
        let mut degrees = Vec::with_capacity(n);
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if mapping[v] != usize::MAX {
                return Err(TreeError::InvalidShape(format!("node {v} reached twice")));
            }
            mapping[v] = degrees.len();
            degrees.push(children[v].len() as u32);
            for &c in children[v].iter().rev() {
                if c >= n {
                    return Err(TreeError::BadNode { node: c, len: n });
                }
                stack.push(c);
            }
        }
        if degrees.len() != n {
            return Err(TreeError::InvalidShape(
                "child lists do not form a single tree".into(),
            ));
        }
        Ok((Self::from_excursion(degrees), mapping))
    }

    pub fn singleton() -> Tree {
        Self::from_excursion(vec![0])
    }

    /// A path of `n >= 1` vertices hanging from the root.
    pub fn path(n: usize) -> Tree {
        assert!(n >= 1);
        let mut d = vec![1u32; n];
        d[n - 1] = 0;
        Self::from_excursion(d)
    }

    /// A root with `n - 1` leaf children.
    pub fn star(n: usize) -> Tree {
        assert!(n >= 1);
        let mut d = vec![0u32; n];
        d[0] = (n - 1) as u32;
        Self::from_excursion(d)
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        match self.parent[v] {
            NO_PARENT => None,
            p => Some(p as usize),
        }
    }

    /// Raw parent array; the root's entry is `u32::MAX`.
    pub fn parents(&self) -> &[u32] {
        &self.parent
    }

    pub fn degree(&self, v: usize) -> usize {
        self.degrees[v] as usize
    }

    /// Preorder out-degree sequence; also the canonical shape code.
    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn subtree_size(&self, v: usize) -> usize {
        self.size[v] as usize
    }

    /// Children of `v` in planar order.
    pub fn children(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let mut next = v + 1;
        (0..self.degrees[v]).map(move |_| {
            let c = next;
            next += self.size[c] as usize;
            c
        })
    }

    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.len()];
        for v in 1..self.len() {
            depth[v] = depth[self.parent[v] as usize] + 1;
        }
        depth
    }

    pub fn depth(&self, mut v: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent(v) {
            v = p;
            d += 1;
        }
        d
    }

    pub fn height(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }

    fn check_node(&self, v: usize) -> Result<(), TreeError> {
        if v < self.len() {
            Ok(())
        } else {
            Err(TreeError::BadNode {
                node: v,
                len: self.len(),
            })
        }
    }

    /// Debug dump: one line `id parent child-count` per node in preorder,
    /// root first with parent `-`.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.len() * 8);
        for v in 0..self.len() {
            match self.parent(v) {
                Some(p) => out.push_str(&format!("{v} {p} {}\n", self.degrees[v])),
                None => out.push_str(&format!("{v} - {}\n", self.degrees[v])),
            }
        }
        out
    }
}

/// A tree with a distinguished vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointedTree {
    pub tree: Tree,
    pub point: usize,
}

/// Kesten's tree cut at spine height `H`, with its spine marked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpineTree {
    pub tree: Tree,
    /// `spine[i]` is the id of `S_i`; `spine[0]` is the root.
    pub spine: Vec<usize>,
    pub height: usize,
}

/// All trees of a given size together with their probabilities.
#[derive(Clone, Debug)]
pub struct EnumeratedEnsemble {
    pub n: usize,
    pub trees: Vec<(Tree, f64)>,
}

impl EnumeratedEnsemble {
    /// `P(|T| = n)`.
    pub fn total_mass(&self) -> f64 {
        self.trees.iter().map(|(_, p)| p).sum()
    }

    /// Law of `T` conditioned on `|T| = n`, keyed by shape code.
    pub fn conditional(&self) -> BTreeMap<Vec<u32>, f64> {
        let total = self.total_mass();
        self.trees
            .iter()
            .map(|(t, p)| (t.degrees().to_vec(), p / total))
            .collect()
    }
}

/// Rejects offspring laws the samplers cannot handle.
pub fn require_offspring(offspring: &LawHandle) -> Result<(), TreeError> {
    let report = distributions::check_offspring(offspring);
    if report.is_delta1 {
        return Err(TreeError::Delta1Offspring);
    }
    if !report.is_critical {
        return Err(TreeError::NotCritical { mean: report.mean });
    }
    Ok(())
}

/// Appends the preorder degree sequence of one unconditioned GW tree to
/// `out`. Returns `false` if `out` would exceed `cap` entries.
#[inline]
pub(crate) fn gw_degrees_into(
    offspring: &LawHandle,
    rng: &mut RngStream,
    cap: usize,
    out: &mut Vec<u32>,
) -> bool {
    let mut need: i64 = 1;
    while need > 0 {
        if out.len() >= cap {
            return false;
        }
        let d = offspring.sample(rng);
        out.push(d as u32);
        need += d as i64 - 1;
    }
    true
}

/// Like [`gw_degrees_into`] but cut at relative depth `max_depth`: vertices
/// at that depth become leaves and their offspring are not drawn.
pub(crate) fn gw_degrees_depth_limited(
    offspring: &LawHandle,
    rng: &mut RngStream,
    cap: usize,
    max_depth: usize,
    out: &mut Vec<u32>,
) -> bool {
    // Children still to emit, one entry per open ancestor.
    let mut open: Vec<u32> = Vec::new();
    loop {
        if out.len() >= cap {
            return false;
        }
        let d = if open.len() >= max_depth {
            0
        } else {
            offspring.sample(rng) as u32
        };
        out.push(d);
        if d > 0 {
            open.push(d);
        }
        loop {
            match open.last_mut() {
                None => return true,
                Some(0) => {
                    open.pop();
                }
                Some(r) => {
                    *r -= 1;
                    break;
                }
            }
        }
    }
}

/// Samples an unconditioned critical GW tree, giving up past `cap` vertices.
pub fn sample_gw(
    offspring: &LawHandle,
    rng: &mut RngStream,
    cap: usize,
) -> Result<Sampled<Tree>, TreeError> {
    require_offspring(offspring)?;
    let mut degrees = Vec::new();
    if gw_degrees_into(offspring, rng, cap, &mut degrees) {
        Ok(Sampled::Complete(Tree::from_excursion(degrees)))
    } else {
        Ok(Sampled::Overflow(OverflowMark {
            partial_count: degrees.len() + 1,
        }))
    }
}

/// Start index of the unique rotation of `degrees` (with `Σ(dᵢ-1) = -1`)
/// that is a Łukasiewicz excursion: one past the first minimum of the walk.
pub fn cycle_lemma_start(degrees: &[u32]) -> usize {
    let mut walk: i64 = 0;
    let mut min = i64::MAX;
    let mut argmin = 0;
    for (i, &d) in degrees.iter().enumerate() {
        walk += d as i64 - 1;
        if walk < min {
            min = walk;
            argmin = i;
        }
    }
    (argmin + 1) % degrees.len()
}

/// How the i.i.d. degree sequence with prescribed sum is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionedMethod {
    /// Exact closed-form conditional law when the family has one (Poisson:
    /// multinomial; geometric: uniform composition; binomial: uniform subset
    /// of trials), rejection otherwise.
    Auto,
    /// Rejection on the sum for every family.
    Rejection,
}

/// Whether some degree sequence of length `n` from the support sums to `n-1`.
pub fn is_admissible(offspring: &LawHandle, n: usize) -> bool {
    if n == 0 {
        return false;
    }
    if offspring.pmf(0) <= 0.0 {
        return false;
    }
    if n == 1 || offspring.pmf(1) > 0.0 {
        return true;
    }
    let target = n - 1;
    let support: Vec<usize> = (2..=target)
        .filter(|&k| offspring.pmf(k as u64) > 0.0)
        .collect();
    // Fewest positive parts summing to s; zeros fill the remaining slots.
    let mut fewest = vec![usize::MAX; target + 1];
    fewest[0] = 0;
    for s in 1..=target {
        for &k in &support {
            if k > s {
                break;
            }
            if fewest[s - k] != usize::MAX {
                fewest[s] = fewest[s].min(fewest[s - k] + 1);
            }
        }
    }
    fewest[target] <= n
}

/// Draws `n` i.i.d. offspring counts conditioned on summing to `n - 1`.
fn conditioned_degrees(
    offspring: &LawHandle,
    n: usize,
    rng: &mut RngStream,
    method: ConditionedMethod,
) -> Result<Vec<u32>, TreeError> {
    let target = (n - 1) as u64;
    let family = if method == ConditionedMethod::Auto {
        offspring.spec()
    } else {
        None
    };
    match family {
        Some(DistSpec::Poisson { .. }) => {
            let mut d = vec![0u32; n];
            for _ in 0..target {
                d[rng.below(n as u64) as usize] += 1;
            }
            Ok(d)
        }
        Some(DistSpec::Geometric { .. }) => {
            // Stars and bars: n-1 bars among 2n-2 slots, uniformly.
            let slots = 2 * target;
            let mut bars_left = target;
            let mut d = vec![0u32; n];
            let mut part = 0usize;
            for i in 0..slots {
                if rng.below(slots - i) < bars_left {
                    bars_left -= 1;
                    part += 1;
                } else {
                    d[part] += 1;
                }
            }
            Ok(d)
        }
        Some(&DistSpec::Binomial { trials, .. }) => {
            let trials = trials as u64;
            let total = trials * n as u64;
            let mut picks_left = target;
            let mut d = vec![0u32; n];
            for i in 0..total {
                if picks_left == 0 {
                    break;
                }
                if rng.below(total - i) < picks_left {
                    picks_left -= 1;
                    d[(i / trials) as usize] += 1;
                }
            }
            Ok(d)
        }
        _ => {
            // Draw n-1 values, force the last one, accept with prob ν(last)/max ν.
            let max_p = offspring.pmf_table().iter().cloned().fold(0.0, f64::max);
            let mut d = vec![0u32; n];
            for _ in 0..REJECTION_BUDGET {
                let mut sum = 0u64;
                let mut ok = true;
                for slot in d.iter_mut().take(n - 1) {
                    let x = offspring.sample(rng);
                    sum += x;
                    if sum > target {
                        ok = false;
                        break;
                    }
                    *slot = x as u32;
                }
                if !ok {
                    continue;
                }
                let last = target - sum;
                let accept = offspring.pmf(last) / max_p;
                if accept > 0.0 && rng.uniform() < accept {
                    d[n - 1] = last as u32;
                    return Ok(d);
                }
            }
            Err(TreeError::RejectionBudgetExceeded {
                n,
                attempts: REJECTION_BUDGET,
            })
        }
    }
}

/// Exact sample of `T` conditioned on `|T| = n`, via the cycle lemma.
pub fn sample_gw_conditioned(
    offspring: &LawHandle,
    n: usize,
    rng: &mut RngStream,
) -> Result<Tree, TreeError> {
    sample_gw_conditioned_with(offspring, n, rng, ConditionedMethod::Auto)
}

pub fn sample_gw_conditioned_with(
    offspring: &LawHandle,
    n: usize,
    rng: &mut RngStream,
    method: ConditionedMethod,
) -> Result<Tree, TreeError> {
    require_offspring(offspring)?;
    if !is_admissible(offspring, n) {
        return Err(TreeError::Inadmissible(n));
    }
    let mut d = conditioned_degrees(offspring, n, rng, method)?;
    let start = cycle_lemma_start(&d);
    d.rotate_left(start);
    Ok(Tree::from_excursion(d))
}

/// How the trees grafted on the spine are cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truncation {
    /// Grafted trees are complete GW trees, on every `S_0..=S_H`.
    Spine,
    /// Keep only vertices at height `<= H`: the ball of radius `H` in `T_∞`.
    Ball,
}

/// Reusable sampler for truncated Kesten trees (caches the size-biased law).
#[derive(Clone, Debug)]
pub struct KestenSampler {
    offspring: LawHandle,
    size_biased: LawHandle,
}

impl KestenSampler {
    pub fn new(offspring: &LawHandle) -> Result<Self, TreeError> {
        require_offspring(offspring)?;
        Ok(KestenSampler {
            offspring: offspring.clone(),
            size_biased: distributions::size_biased(offspring)?,
        })
    }

    pub fn size_biased(&self) -> &LawHandle {
        &self.size_biased
    }

    /// Samples the spine `S_0..=S_H` with `Y-1` grafted trees per spine
    /// vertex, `Y` size-biased, the spine child placed uniformly among the
    /// `Y` children.
    pub fn sample(
        &self,
        height: usize,
        rng: &mut RngStream,
        cap: usize,
        truncation: Truncation,
    ) -> Sampled<SpineTree> {
        let mut degrees = Vec::new();
        let mut spine = Vec::with_capacity(height + 1);
        if self.sample_degrees(height, rng, cap, truncation, &mut degrees, &mut spine) {
            Sampled::Complete(SpineTree {
                tree: Tree::from_excursion(degrees),
                spine,
                height,
            })
        } else {
            Sampled::Overflow(OverflowMark {
                partial_count: degrees.len() + 1,
            })
        }
    }

    /// Preorder degree sequence and spine ids of one sample; `false` on
    /// overflow. Buffers are cleared first.
    pub(crate) fn sample_degrees(
        &self,
        height: usize,
        rng: &mut RngStream,
        cap: usize,
        truncation: Truncation,
        degrees: &mut Vec<u32>,
        spine: &mut Vec<usize>,
    ) -> bool {
        degrees.clear();
        spine.clear();
        // Grafted trees to the right of the spine child, emitted after the
        // whole spine subtree in preorder.
        let mut after = Vec::with_capacity(height + 1);
        for i in 0..=height {
            let y = self.size_biased.sample(rng) as u32;
            let spine_child = i < height;
            let grafts = match truncation {
                Truncation::Ball if i == height => 0,
                _ => y - 1,
            };
            let (before, later) = if spine_child {
                let pos = rng.below(y as u64) as u32;
                (pos, y - 1 - pos)
            } else {
                (grafts, 0)
            };
            spine.push(degrees.len());
            degrees.push(grafts + spine_child as u32);
            for _ in 0..before {
                if !self.graft(height, i, rng, cap, truncation, degrees) {
                    return false;
                }
            }
            after.push(later);
        }
        for i in (0..=height).rev() {
            for _ in 0..after[i] {
                if !self.graft(height, i, rng, cap, truncation, degrees) {
                    return false;
                }
            }
        }
        true
    }

    fn graft(
        &self,
        height: usize,
        level: usize,
        rng: &mut RngStream,
        cap: usize,
        truncation: Truncation,
        out: &mut Vec<u32>,
    ) -> bool {
        match truncation {
            Truncation::Spine => gw_degrees_into(&self.offspring, rng, cap, out),
            Truncation::Ball => {
                gw_degrees_depth_limited(&self.offspring, rng, cap, height - level - 1, out)
            }
        }
    }
}

/// Kesten's tree truncated at spine height `height`, grafted trees complete.
pub fn sample_kesten_truncated(
    offspring: &LawHandle,
    height: usize,
    rng: &mut RngStream,
    cap: usize,
) -> Result<Sampled<SpineTree>, TreeError> {
    Ok(KestenSampler::new(offspring)?.sample(height, rng, cap, Truncation::Spine))
}

/// `Top(t, v)`: the subtree of descendants of `v`, rooted at `v`.
pub fn top(tree: &Tree, v: usize) -> Result<Tree, TreeError> {
    tree.check_node(v)?;
    let end = v + tree.subtree_size(v);
    Ok(Tree::from_excursion(tree.degrees[v..end].to_vec()))
}

/// `Pruned(t, v)`: `t` with `Top(t, v) \ {v}` removed, pointed at `v`.
pub fn pruned(tree: &Tree, v: usize) -> Result<PointedTree, TreeError> {
    tree.check_node(v)?;
    let end = v + tree.subtree_size(v);
    let mut degrees = Vec::with_capacity(tree.len() - (end - v) + 1);
    degrees.extend_from_slice(&tree.degrees[..=v]);
    degrees[v] = 0;
    degrees.extend_from_slice(&tree.degrees[end..]);
    Ok(PointedTree {
        tree: Tree::from_excursion(degrees),
        point: v,
    })
}

/// Empirical law of the fringe subtrees `Top(t, x)` restricted to shapes of
/// at most `max_size` vertices; the rest of the mass is in `other`.
#[derive(Clone, Debug, PartialEq)]
pub struct FringeHistogram {
    pub shapes: BTreeMap<Vec<u32>, f64>,
    pub other: f64,
}

pub fn fringe_histogram(tree: &Tree, max_size: usize) -> FringeHistogram {
    let mut counts: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    let mut other = 0u64;
    for v in 0..tree.len() {
        let s = tree.subtree_size(v);
        if s <= max_size {
            *counts.entry(tree.degrees[v..v + s].to_vec()).or_default() += 1;
        } else {
            other += 1;
        }
    }
    let n = tree.len() as f64;
    FringeHistogram {
        shapes: counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        other: other as f64 / n,
    }
}

/// All plane trees with `n` vertices whose degrees have positive mass, with
/// their GW probabilities `Π ν(c_x)`.
pub fn enumerate_trees(offspring: &LawHandle, n: usize) -> Result<EnumeratedEnsemble, TreeError> {
    if n > ENUMERATION_LIMIT {
        return Err(TreeError::TooLarge(n));
    }
    let mut trees = Vec::new();
    if n == 0 {
        return Ok(EnumeratedEnsemble { n, trees });
    }
    fn extend(
        law: &LawHandle,
        n: usize,
        need: usize,
        prefix: &mut Vec<u32>,
        prob: f64,
        out: &mut Vec<(Tree, f64)>,
    ) {
        let remaining = n - prefix.len();
        if remaining == 0 {
            if need == 0 {
                out.push((Tree::from_excursion(prefix.clone()), prob));
            }
            return;
        }
        if need == 0 || need > remaining {
            return;
        }
        // Each later vertex closes at most one slot, so d <= remaining - need.
        for d in 0..=(remaining - need) {
            let p = law.pmf(d as u64);
            if p <= 0.0 {
                continue;
            }
            prefix.push(d as u32);
            extend(law, n, need + d - 1, prefix, prob * p, out);
            prefix.pop();
        }
    }
    extend(offspring, n, 1, &mut Vec::with_capacity(n), 1.0, &mut trees);
    Ok(EnumeratedEnsemble { n, trees })
}
