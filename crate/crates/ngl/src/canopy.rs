//! Finite truncations of the canopy tree.
//!
//! The canopy tree is the rooted-at-infinity binary tree: vertices come
//! in generations, a generation-k vertex (k >= 1) has two children of
//! generation k-1 and one parent of generation k+1, and generation 0
//! vertices are leaves. A depth-N truncation keeps one generation-N
//! vertex, the apex, together with all 2^(N+1)-1 vertices below it.
//!
//! Addresses record the descent path from the apex, so the apex is the
//! empty path and a leaf is a path of N bits. The textual form is
//! `g:<generation>/<bits>` with the step just below the apex written
//! first and 0 meaning the left child.

use num::{BigInt, BigRational};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Largest supported truncation depth. Descent paths are stored in a
/// `u64` and vertex counts in a `u128`, which this bound keeps honest.
pub const MAX_DEPTH: u32 = 60;

/// One vertex of a truncation, addressed by generation plus the descent
/// path from the apex.
///
/// Invariants: `path_len <= MAX_DEPTH` and only the low `path_len` bits
/// of `path` may be set. Bit `i` of `path` is the `i`-th step below the
/// apex (0 = left). Within one truncation `generation + path_len` equals
/// the depth.
///
/// The derived order sorts by generation first and by path value within
/// a generation, matching [`Truncation::ordinal_of`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexAddr {
    generation: u32,
    path_len: u32,
    path: u64,
}

fn low_mask(len: u32) -> u64 {
    debug_assert!(len <= 64);
    if len == 64 { u64::MAX } else { (1u64 << len) - 1 }
}

impl VertexAddr {
    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn path_len(&self) -> u32 {
        self.path_len
    }

    /// Descent path packed as bits, step i below the apex in bit i.
    pub fn path_bits(&self) -> u64 {
        self.path
    }

    /// The i-th descent step, as left (false) or right (true).
    pub fn step(&self, i: u32) -> bool {
        debug_assert!(i < self.path_len);
        self.path >> i & 1 == 1
    }

    /// Whether `self` lies on the path from `other` up to the apex.
    /// Every vertex is an ancestor of itself. Only meaningful for two
    /// addresses from the same truncation.
    pub fn is_ancestor_of(&self, other: &VertexAddr) -> bool {
        self.path_len <= other.path_len && other.path & low_mask(self.path_len) == self.path
    }
}

impl fmt::Display for VertexAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g:{}/", self.generation)?;
        for i in 0..self.path_len {
            f.write_str(if self.step(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for VertexAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Why a textual address failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AddrParseError {
    #[error("expected g:<generation>/<bits>")]
    Syntax,
    #[error("generation is not a number")]
    Generation,
    #[error("path may contain only 0 and 1")]
    BadBit,
    #[error("generation plus path length exceeds {MAX_DEPTH}")]
    TooDeep,
}

impl FromStr for VertexAddr {
    type Err = AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s.strip_prefix("g:").ok_or(AddrParseError::Syntax)?;
        let (gen_str, bits) = rest.split_once('/').ok_or(AddrParseError::Syntax)?;
        let generation: u32 = gen_str.parse().map_err(|_| AddrParseError::Generation)?;
        let path_len = bits.len() as u32;
        if bits.len() > MAX_DEPTH as usize || generation > MAX_DEPTH || generation + path_len > MAX_DEPTH {
            return Err(AddrParseError::TooDeep);
        }
        let mut path = 0u64;
        for (i, c) in bits.bytes().enumerate() {
            match c {
                b'0' => {}
                b'1' => path |= 1 << i,
                _ => return Err(AddrParseError::BadBit),
            }
        }
        Ok(VertexAddr { generation, path_len, path })
    }
}

/// Number of vertices in the full binary subtree hanging below a
/// generation-g vertex, the vertex included: 2^(g+1) - 1. Truncations
/// always contain whole subtrees, so this needs no depth argument.
pub fn subtree_size(v: VertexAddr) -> u128 {
    (1u128 << (v.generation + 1)) - 1
}

/// A depth-N truncation of the canopy tree. Copyable; all structure is
/// derived from the depth.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Truncation {
    depth: u32,
}

impl Truncation {
    /// Panics if `depth` exceeds [`MAX_DEPTH`].
    pub fn new(depth: u32) -> Self {
        assert!(depth <= MAX_DEPTH, "depth {depth} exceeds the cap {MAX_DEPTH}");
        Truncation { depth }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// 2^(depth+1) - 1.
    pub fn vertex_count(&self) -> u128 {
        (1u128 << (self.depth + 1)) - 1
    }

    pub fn apex(&self) -> VertexAddr {
        VertexAddr { generation: self.depth, path_len: 0, path: 0 }
    }

    /// Address the vertex of the given generation reached by `path`
    /// (low `depth - generation` bits). Panics on out-of-range input.
    pub fn vertex(&self, generation: u32, path: u64) -> VertexAddr {
        assert!(generation <= self.depth);
        let path_len = self.depth - generation;
        assert!(path & !low_mask(path_len) == 0, "path has bits beyond its length");
        VertexAddr { generation, path_len, path }
    }

    pub fn contains(&self, v: &VertexAddr) -> bool {
        v.generation <= self.depth
            && v.generation + v.path_len == self.depth
            && v.path & !low_mask(v.path_len) == 0
    }

    /// None exactly at the apex.
    pub fn parent(&self, v: &VertexAddr) -> Option<VertexAddr> {
        if v.path_len == 0 {
            return None;
        }
        let path_len = v.path_len - 1;
        Some(VertexAddr {
            generation: v.generation + 1,
            path_len,
            path: v.path & low_mask(path_len),
        })
    }

    /// Left and right child, or None at the leaves.
    pub fn children(&self, v: &VertexAddr) -> Option<[VertexAddr; 2]> {
        if v.generation == 0 {
            return None;
        }
        let generation = v.generation - 1;
        let path_len = v.path_len + 1;
        let left = VertexAddr { generation, path_len, path: v.path };
        let right = VertexAddr { generation, path_len, path: v.path | 1 << v.path_len };
        Some([left, right])
    }

    /// Tree neighbors: parent then children, smaller-path child first.
    pub fn neighbors(&self, v: &VertexAddr) -> Vec<VertexAddr> {
        let mut out = Vec::with_capacity(3);
        out.extend(self.parent(v));
        if let Some(cs) = self.children(v) {
            out.extend(cs);
        }
        out
    }

    /// The ancestor of `v` at the given generation, if `generation` is
    /// between `v`'s and the depth.
    pub fn ancestor_at(&self, v: &VertexAddr, generation: u32) -> Option<VertexAddr> {
        if generation < v.generation || generation > self.depth {
            return None;
        }
        let path_len = self.depth - generation;
        Some(VertexAddr { generation, path_len, path: v.path & low_mask(path_len) })
    }

    /// `v` and all its ancestors, ending at the apex.
    pub fn upward_path(&self, v: &VertexAddr) -> Vec<VertexAddr> {
        let mut out = Vec::with_capacity((self.depth - v.generation + 1) as usize);
        let mut cur = *v;
        out.push(cur);
        while let Some(p) = self.parent(&cur) {
            out.push(p);
            cur = p;
        }
        out
    }

    /// Deepest common ancestor of two vertices.
    pub fn lca(&self, u: &VertexAddr, v: &VertexAddr) -> VertexAddr {
        let common = u64::min(
            u64::min(u.path_len as u64, v.path_len as u64),
            (u.path ^ v.path).trailing_zeros() as u64,
        ) as u32;
        VertexAddr {
            generation: self.depth - common,
            path_len: common,
            path: u.path & low_mask(common),
        }
    }

    /// Graph distance within the tree.
    pub fn tree_distance(&self, u: &VertexAddr, v: &VertexAddr) -> u32 {
        let w = self.lca(u, v);
        (w.generation - u.generation) + (w.generation - v.generation)
    }

    /// Position of `v` in the generation-ascending enumeration: all of
    /// generation 0 in path order, then generation 1, and so on.
    pub fn ordinal_of(&self, v: &VertexAddr) -> u128 {
        debug_assert!(self.contains(v));
        self.block_start(v.generation) + v.path as u128
    }

    /// Inverse of [`Truncation::ordinal_of`]. Panics if `ordinal` is
    /// not below [`Truncation::vertex_count`].
    pub fn vertex_at(&self, ordinal: u128) -> VertexAddr {
        assert!(ordinal < self.vertex_count(), "ordinal out of range");
        let mut generation = 0;
        while self.block_start(generation + 1) <= ordinal {
            generation += 1;
        }
        let path = (ordinal - self.block_start(generation)) as u64;
        VertexAddr { generation, path_len: self.depth - generation, path }
    }

    // First ordinal of generation g: 2^(N+1) - 2^(N-g+1), the sum of
    // the 2^(N-k) block sizes for k < g.
    fn block_start(&self, g: u32) -> u128 {
        if g > self.depth {
            return self.vertex_count();
        }
        (1u128 << (self.depth + 1)) - (1u128 << (self.depth - g + 1))
    }
}

impl crate::lab::GraphOracle for Truncation {
    type V = VertexAddr;
    fn neighbors(&self, v: &VertexAddr) -> Result<Vec<VertexAddr>, String> {
        if !self.contains(v) {
            return Err(format!("{v} is not a vertex of this truncation"));
        }
        Ok(Truncation::neighbors(self, v))
    }
}

/// The uniform distribution over the vertices of a truncation, viewed
/// through the generation of the sampled vertex: a generation-k vertex
/// comes up with probability 2^(N-k) / (2^(N+1) - 1).
#[derive(Clone, Copy, Debug)]
pub struct RootLaw {
    t: Truncation,
}

impl RootLaw {
    pub fn new(t: Truncation) -> Self {
        RootLaw { t }
    }

    /// Exact probability that the sampled vertex has generation k.
    pub fn probability(&self, k: u32) -> BigRational {
        if k > self.t.depth {
            return BigRational::from(BigInt::from(0));
        }
        BigRational::new(
            BigInt::from(1u128 << (self.t.depth - k)),
            BigInt::from(self.t.vertex_count()),
        )
    }

    /// One uniform vertex, via a uniform ordinal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> VertexAddr {
        self.t.vertex_at(rng.gen_range(0..self.t.vertex_count()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use std::collections::HashSet;

    fn all_vertices(t: &Truncation) -> Vec<VertexAddr> {
        (0..t.vertex_count()).map(|i| t.vertex_at(i)).collect()
    }

    #[test]
    fn depth_two_enumerates_seven_vertices() {
        let t = Truncation::new(2);
        assert_eq!(t.vertex_count(), 7);
        let vs = all_vertices(&t);
        let gens: Vec<u32> = vs.iter().map(|v| v.generation()).collect();
        assert_eq!(gens, [0, 0, 0, 0, 1, 1, 2]);
        let set: HashSet<_> = vs.iter().copied().collect();
        assert_eq!(set.len(), 7);
        for (i, v) in vs.iter().enumerate() {
            assert!(t.contains(v));
            assert_eq!(t.ordinal_of(v), i as u128);
        }
    }

    #[test]
    fn ordinals_agree_with_derived_order() {
        let t = Truncation::new(5);
        let vs = all_vertices(&t);
        let mut sorted = vs.clone();
        sorted.sort();
        assert_eq!(vs, sorted);
    }

    #[test]
    fn parent_and_children_are_inverse() {
        let t = Truncation::new(6);
        for v in all_vertices(&t) {
            if let Some(p) = t.parent(&v) {
                assert!(t.contains(&p));
                assert!(t.children(&p).unwrap().contains(&v));
            } else {
                assert_eq!(v, t.apex());
            }
            if let Some([l, r]) = t.children(&v) {
                assert_eq!(t.parent(&l), Some(v));
                assert_eq!(t.parent(&r), Some(v));
                assert_ne!(l, r);
            } else {
                assert_eq!(v.generation(), 0);
            }
        }
    }

    #[test]
    fn display_round_trips() {
        let t = Truncation::new(6);
        for v in all_vertices(&t) {
            let s = v.to_string();
            assert_eq!(s.parse::<VertexAddr>().unwrap(), v);
        }
        assert_eq!(Truncation::new(3).apex().to_string(), "g:3/");
        let leaf: VertexAddr = "g:0/010".parse().unwrap();
        assert_eq!(leaf.generation(), 0);
        assert_eq!(leaf.path_len(), 3);
        assert!(!leaf.step(0));
        assert!(leaf.step(1));
        assert!(!leaf.step(2));
    }

    #[test]
    fn parse_rejects_malformed_addresses() {
        assert_eq!("g:3".parse::<VertexAddr>(), Err(AddrParseError::Syntax));
        assert_eq!("3/01".parse::<VertexAddr>(), Err(AddrParseError::Syntax));
        assert_eq!("g:x/01".parse::<VertexAddr>(), Err(AddrParseError::Generation));
        assert_eq!("g:1/02".parse::<VertexAddr>(), Err(AddrParseError::BadBit));
        assert_eq!(format!("g:0/{}", "0".repeat(61)).parse::<VertexAddr>(), Err(AddrParseError::TooDeep));
        assert_eq!("g:60/1".parse::<VertexAddr>(), Err(AddrParseError::TooDeep));
    }

    #[test]
    fn root_law_depth_two_is_four_two_one_sevenths() {
        let law = RootLaw::new(Truncation::new(2));
        let frac = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        assert_eq!(law.probability(0), frac(4, 7));
        assert_eq!(law.probability(1), frac(2, 7));
        assert_eq!(law.probability(2), frac(1, 7));
        assert_eq!(law.probability(3), frac(0, 1));
        let total: BigRational = (0..=2).map(|k| law.probability(k)).sum();
        assert_eq!(total, frac(1, 1));
    }

    #[test]
    fn sampling_tracks_the_law() {
        let t = Truncation::new(2);
        let law = RootLaw::new(t);
        let mut rng = StreamKey::root(11).child("law-test").rng();
        let n = 20_000;
        let mut counts = [0u32; 3];
        for _ in 0..n {
            let v = law.sample(&mut rng);
            assert!(t.contains(&v));
            counts[v.generation() as usize] += 1;
        }
        // Expected fractions 4/7, 2/7, 1/7; allow 2 percentage points,
        // several sigma at this sample size under a fixed seed.
        let f = |c: u32| c as f64 / n as f64;
        assert!((f(counts[0]) - 4.0 / 7.0).abs() < 0.02);
        assert!((f(counts[1]) - 2.0 / 7.0).abs() < 0.02);
        assert!((f(counts[2]) - 1.0 / 7.0).abs() < 0.02);
    }

    #[test]
    fn subtree_sizes() {
        let t = Truncation::new(4);
        assert_eq!(subtree_size(t.apex()), 31);
        assert_eq!(subtree_size(t.vertex(0, 5)), 1);
        assert_eq!(subtree_size(t.vertex(2, 1)), 7);
        let deep = Truncation::new(MAX_DEPTH);
        assert_eq!(subtree_size(deep.apex()), (1u128 << 61) - 1);
        assert_eq!(deep.vertex_count(), (1u128 << 61) - 1);
    }

    #[test]
    #[should_panic(expected = "exceeds the cap")]
    fn depth_cap_is_enforced() {
        Truncation::new(MAX_DEPTH + 1);
    }

    #[test]
    fn ancestors_and_distances() {
        let t = Truncation::new(4);
        let v = t.vertex(0, 0b1011);
        assert_eq!(t.ancestor_at(&v, 2), Some(t.vertex(2, 0b11)));
        assert_eq!(t.ancestor_at(&v, 4), Some(t.apex()));
        assert_eq!(t.ancestor_at(&v, 5), None);
        assert!(t.vertex(2, 0b11).is_ancestor_of(&v));
        assert!(v.is_ancestor_of(&v));
        assert!(!t.vertex(2, 0b01).is_ancestor_of(&v));

        let up = t.upward_path(&v);
        assert_eq!(up.len(), 5);
        assert_eq!(up[0], v);
        assert_eq!(up[4], t.apex());

        // Siblings are at distance 2, a leaf is depth away from the
        // apex, and cousins meet at their shared grandparent.
        let [l, r] = t.children(&t.vertex(1, 0b101)).unwrap();
        assert_eq!(t.tree_distance(&l, &r), 2);
        assert_eq!(t.tree_distance(&v, &t.apex()), 4);
        assert_eq!(t.tree_distance(&v, &v), 0);
        assert_eq!(t.tree_distance(&t.vertex(0, 0b0000), &t.vertex(0, 0b0100)), 4);
        assert_eq!(t.lca(&t.vertex(0, 0b0000), &t.vertex(0, 0b0100)), t.vertex(2, 0b00));
        assert_eq!(t.tree_distance(&t.vertex(0, 0b0000), &t.vertex(0, 0b0010)), 6);
    }

    #[test]
    fn ball_of_radius_two_around_a_leaf_has_four_vertices() {
        let t = Truncation::new(5);
        let start = t.vertex(0, 0b10110);
        let mut frontier = vec![start];
        let mut seen: HashSet<VertexAddr> = frontier.iter().copied().collect();
        for _ in 0..2 {
            let mut next = Vec::new();
            for v in frontier {
                for w in t.neighbors(&v) {
                    if seen.insert(w) {
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        // Leaf, parent, sibling, grandparent.
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn ordinal_round_trip_at_depth_sixty() {
        let t = Truncation::new(MAX_DEPTH);
        for ord in [0u128, 1, (1 << 60) - 1, 1 << 60, t.vertex_count() - 2, t.vertex_count() - 1] {
            let v = t.vertex_at(ord);
            assert!(t.contains(&v));
            assert_eq!(t.ordinal_of(&v), ord);
        }
        assert_eq!(t.vertex_at(t.vertex_count() - 1), t.apex());
    }
}
