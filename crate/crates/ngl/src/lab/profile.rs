//! Ball profiles over any graph that can answer neighbor queries.
//!
//! The overlay constructions can refuse to expand a vertex whose
//! surroundings are a truncation artifact. Measurements therefore never
//! fail outright: a breadth-first search records the radius from which
//! its counts stopped being exact and keeps going, and downstream
//! checks decide what contamination means for them.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt::Display;
use std::hash::Hash;

use rand::seq::SliceRandom;

use crate::rng::StreamKey;

/// Neighbor oracle. Err means the vertex exists but its neighborhood
/// cannot be trusted (with a human-readable reason); such vertices are
/// counted where reached and never expanded.
pub trait GraphOracle {
    type V: Clone + Eq + Ord + Hash + Display;
    fn neighbors(&self, v: &Self::V) -> Result<Vec<Self::V>, String>;
}

/// Cumulative ball sizes around a root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallProfile {
    /// sizes[r] counts vertices within distance r; length radius + 1.
    pub sizes: Vec<u128>,
    /// First radius whose count may undercount, if any: a vertex at the
    /// previous radius would not expand, or the node budget ran out.
    pub contaminated_from: Option<u32>,
    /// First refusal reason encountered, for reporting.
    pub note: Option<String>,
}

impl BallProfile {
    pub fn is_exact_to(&self, r: u32) -> bool {
        self.contaminated_from.map_or(true, |c| r < c)
    }
}

/// Breadth-first ball census to the given radius, visiting at most
/// `node_cap` vertices.
pub fn ball_profile<G: GraphOracle>(
    g: &G,
    root: &G::V,
    radius: u32,
    node_cap: usize,
) -> BallProfile {
    let mut dist: HashMap<G::V, u32> = HashMap::new();
    dist.insert(root.clone(), 0);
    let mut frontier = vec![root.clone()];
    let mut per_radius = vec![1u128];
    let mut contaminated_from = None;
    let mut note = None;
    let taint = |from: u32, cf: &mut Option<u32>| {
        if cf.map_or(true, |c| from < c) {
            *cf = Some(from);
        }
    };

    for r in 0..radius {
        let mut next = Vec::new();
        for v in &frontier {
            match g.neighbors(v) {
                Ok(ns) => {
                    for w in ns {
                        if dist.len() >= node_cap {
                            taint(r + 1, &mut contaminated_from);
                            if note.is_none() {
                                note = Some(format!("node budget {node_cap} exhausted"));
                            }
                            break;
                        }
                        if let Entry::Vacant(e) = dist.entry(w.clone()) {
                            e.insert(r + 1);
                            next.push(w);
                        }
                    }
                }
                Err(why) => {
                    taint(r + 1, &mut contaminated_from);
                    if note.is_none() {
                        note = Some(format!("{v}: {why}"));
                    }
                }
            }
        }
        per_radius.push(next.len() as u128);
        frontier = next;
    }

    let mut sizes = Vec::with_capacity(per_radius.len());
    let mut acc = 0u128;
    for c in per_radius {
        acc += c;
        sizes.push(acc);
    }
    BallProfile { sizes, contaminated_from, note }
}

/// Distance map from a root, optionally stopping at a target or a
/// radius. Parents allow path reconstruction.
#[derive(Debug, Clone)]
pub struct Distances<V: Eq + Hash> {
    pub dist: HashMap<V, u32>,
    pub parent: HashMap<V, V>,
    /// Some expansion was refused or the budget ran out, so missing
    /// entries do not prove unreachability and present distances are
    /// only upper-bounded by the true ones... they remain exact for
    /// vertices closer than the first refusal.
    pub contaminated_from: Option<u32>,
    pub note: Option<String>,
}

impl<V: Eq + Hash + Clone> Distances<V> {
    /// Path from the root to `v`, when reached.
    pub fn path_to(&self, v: &V) -> Option<Vec<V>> {
        if !self.dist.contains_key(v) {
            return None;
        }
        let mut path = vec![v.clone()];
        let mut cur = v.clone();
        while let Some(p) = self.parent.get(&cur) {
            path.push(p.clone());
            cur = p.clone();
        }
        path.reverse();
        Some(path)
    }
}

pub fn bfs_distances<G: GraphOracle>(
    g: &G,
    root: &G::V,
    target: Option<&G::V>,
    radius_cap: Option<u32>,
    node_cap: usize,
) -> Distances<G::V> {
    let mut out = Distances {
        dist: HashMap::new(),
        parent: HashMap::new(),
        contaminated_from: None,
        note: None,
    };
    out.dist.insert(root.clone(), 0);
    if target == Some(root) {
        return out;
    }
    let mut frontier = vec![root.clone()];
    let mut r = 0;
    while !frontier.is_empty() && radius_cap.map_or(true, |cap| r < cap) {
        let mut next = Vec::new();
        for v in &frontier {
            match g.neighbors(v) {
                Ok(ns) => {
                    for w in ns {
                        if out.dist.len() >= node_cap {
                            if out.contaminated_from.is_none() {
                                out.contaminated_from = Some(r + 1);
                                out.note = Some(format!("node budget {node_cap} exhausted"));
                            }
                            break;
                        }
                        if !out.dist.contains_key(&w) {
                            out.dist.insert(w.clone(), r + 1);
                            out.parent.insert(w.clone(), v.clone());
                            if target == Some(&w) {
                                return out;
                            }
                            next.push(w);
                        }
                    }
                }
                Err(why) => {
                    if out.contaminated_from.is_none() {
                        out.contaminated_from = Some(r + 1);
                        out.note = Some(format!("{v}: {why}"));
                    }
                }
            }
        }
        frontier = next;
        r += 1;
    }
    out
}

/// A path from `u` to `v` by alternating-frontier search from both
/// ends, expanding the smaller side first. Returns None when the ends
/// are disconnected or the exploration exceeds `node_cap`. The result
/// is a genuine simple path; it is shortest or within one splice of it,
/// which is all the path-consistency checks need.
pub fn bfs_between<G: GraphOracle>(
    g: &G,
    u: &G::V,
    v: &G::V,
    node_cap: usize,
) -> Option<Vec<G::V>> {
    if u == v {
        return Some(vec![u.clone()]);
    }
    let mut from_u: HashMap<G::V, G::V> = [(u.clone(), u.clone())].into();
    let mut from_v: HashMap<G::V, G::V> = [(v.clone(), v.clone())].into();
    let mut fu = vec![u.clone()];
    let mut fv = vec![v.clone()];
    let mut visited = 2usize;
    let meet = 'search: loop {
        if fu.is_empty() || fv.is_empty() {
            return None;
        }
        let expand_u = fu.len() <= fv.len();
        let (frontier, mine, theirs) = if expand_u {
            (&mut fu, &mut from_u, &from_v)
        } else {
            (&mut fv, &mut from_v, &from_u)
        };
        let mut next = Vec::new();
        for x in frontier.iter() {
            let Ok(ns) = g.neighbors(x) else { continue };
            for n in ns {
                if mine.contains_key(&n) {
                    continue;
                }
                visited += 1;
                if visited > node_cap {
                    return None;
                }
                mine.insert(n.clone(), x.clone());
                if theirs.contains_key(&n) {
                    break 'search n;
                }
                next.push(n);
            }
        }
        *frontier = next;
    };
    let mut path = Vec::new();
    let mut x = meet.clone();
    while x != *u {
        let p = from_u[&x].clone();
        path.push(x);
        x = p;
    }
    path.push(u.clone());
    path.reverse();
    let mut x = from_v[&meet].clone();
    loop {
        path.push(x.clone());
        if x == *v {
            break;
        }
        x = from_v[&x].clone();
    }
    Some(splice_loops(path))
}

/// Cut every loop out of a walk, leaving a simple path over the same
/// edges. The two half-paths of a bidirectional search can share a
/// vertex besides the meeting point, and concatenated detour legs can
/// recross each other; both callers repair with this.
pub fn splice_loops<V: Clone + Eq + Hash>(path: Vec<V>) -> Vec<V> {
    let mut seen: HashMap<V, usize> = HashMap::new();
    let mut out: Vec<V> = Vec::with_capacity(path.len());
    for v in path {
        if let Some(&at) = seen.get(&v) {
            for dropped in out.drain(at..) {
                seen.remove(&dropped);
            }
        }
        seen.insert(v.clone(), out.len());
        out.push(v);
    }
    out
}

/// Randomized bounded depth-first search for a simple path from `u` to
/// `v`. A returned path is always genuine; `None` proves nothing, since
/// the search is length-capped, node-budgeted, and never expands a
/// refusing vertex.
pub fn random_simple_path<G: GraphOracle>(
    g: &G,
    u: &G::V,
    v: &G::V,
    max_len: u32,
    node_budget: usize,
    key: &StreamKey,
) -> Option<Vec<G::V>> {
    let mut rng = key.rng();
    let mut path = vec![u.clone()];
    let mut on_path: HashSet<G::V> = [u.clone()].into();
    let mut choices: Vec<Vec<G::V>> = Vec::new();
    let mut visited = 0usize;
    {
        let mut first = g.neighbors(u).ok()?;
        first.shuffle(&mut rng);
        choices.push(first);
    }
    while let Some(frontier) = choices.last_mut() {
        if visited >= node_budget {
            return None;
        }
        let Some(next) = frontier.pop() else {
            let dead = path.pop().expect("path nonempty");
            on_path.remove(&dead);
            choices.pop();
            continue;
        };
        if on_path.contains(&next) {
            continue;
        }
        visited += 1;
        if next == *v {
            path.push(next);
            return Some(path);
        }
        if path.len() as u32 >= max_len {
            continue;
        }
        let Ok(mut ns) = g.neighbors(&next) else {
            continue;
        };
        ns.shuffle(&mut rng);
        path.push(next.clone());
        on_path.insert(next);
        choices.push(ns);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cycle of n vertices with one vertex refusing to expand.
    struct Ring {
        n: u32,
        broken: Option<u32>,
    }

    impl GraphOracle for Ring {
        type V = u32;
        fn neighbors(&self, v: &u32) -> Result<Vec<u32>, String> {
            if self.broken == Some(*v) {
                return Err("broken".into());
            }
            Ok(vec![(v + self.n - 1) % self.n, (v + 1) % self.n])
        }
    }

    #[test]
    fn ring_profile_is_exact() {
        let g = Ring { n: 12, broken: None };
        let p = ball_profile(&g, &0, 8, 1 << 20);
        assert_eq!(p.sizes, vec![1, 3, 5, 7, 9, 11, 12, 12, 12]);
        assert_eq!(p.contaminated_from, None);
    }

    #[test]
    fn refusal_marks_contamination_radius() {
        let g = Ring { n: 12, broken: Some(2) };
        let p = ball_profile(&g, &0, 4, 1 << 20);
        // Vertex 2 sits at distance 2 and refuses: counts through
        // radius 2 stay exact, radius 3 onward may undercount.
        assert_eq!(p.contaminated_from, Some(3));
        assert!(p.is_exact_to(2));
        assert!(!p.is_exact_to(3));
        assert_eq!(p.sizes[..3], [1, 3, 5]);
        assert_eq!(p.sizes[3], 6, "only the far side advances");
        assert!(p.note.unwrap().contains("broken"));
    }

    #[test]
    fn node_budget_taints_instead_of_failing() {
        let g = Ring { n: 100, broken: None };
        let p = ball_profile(&g, &0, 10, 7);
        assert!(p.contaminated_from.is_some());
        assert!(p.note.unwrap().contains("budget"));
    }

    #[test]
    fn distances_and_paths() {
        let g = Ring { n: 10, broken: None };
        let d = bfs_distances(&g, &0, Some(&4), None, 1 << 20);
        assert_eq!(d.dist[&4], 4);
        assert_eq!(d.path_to(&4).unwrap(), vec![0, 1, 2, 3, 4]);
        let d = bfs_distances(&g, &0, None, Some(2), 1 << 20);
        assert_eq!(d.dist.len(), 5);
        assert!(d.path_to(&9).is_some());
        assert!(d.path_to(&5).is_none());
    }

    #[test]
    fn two_ended_search_matches_single_ended_lengths() {
        let g = Ring { n: 17, broken: None };
        for target in 1..17u32 {
            let one = bfs_distances(&g, &0, Some(&target), None, 1 << 20);
            let two = bfs_between(&g, &0, &target, 1 << 20).unwrap();
            assert_eq!(two.len() as u32 - 1, one.dist[&target], "target {target}");
            assert_eq!(two.first(), Some(&0));
            assert_eq!(two.last(), Some(&target));
            let distinct: HashSet<u32> = two.iter().copied().collect();
            assert_eq!(distinct.len(), two.len(), "path revisits a vertex");
        }
        assert_eq!(bfs_between(&g, &3, &3, 1 << 20).unwrap(), vec![3]);
    }

    #[test]
    fn two_ended_search_respects_the_node_cap() {
        let g = Ring { n: 1000, broken: None };
        assert!(bfs_between(&g, &0, &500, 20).is_none());
        assert!(bfs_between(&g, &0, &500, 1 << 20).is_some());
    }

    #[test]
    fn loop_splicing_leaves_a_simple_walk() {
        let spliced = splice_loops(vec![0, 1, 2, 3, 1, 4]);
        assert_eq!(spliced, vec![0, 1, 4]);
        let spliced = splice_loops(vec![7, 8, 7, 9, 9]);
        assert_eq!(spliced, vec![7, 9]);
        assert_eq!(splice_loops(vec![5]), vec![5]);
    }
}
