//! Cut sets that slice a truncation into clusters.
//!
//! A cut set marks some tree edges as severed; the clusters are the
//! connected components left over. Two kinds are supported. A level cut
//! severs every edge whose lower endpoint sits at a listed generation.
//! A selected cut severs only the edges above chosen representatives:
//! at each listed generation the vertices are grouped into classes by
//! their ancestor a fixed number of generations up, and one seeded
//! representative per class carries the cut.
//!
//! The module also validates the index sequences driving the cuts. The
//! demanding growth condition on consecutive levels is decided with
//! exact integer arithmetic, never floats.

use crate::canopy::{Truncation, VertexAddr};
use crate::rng::StreamKey;
use num::{BigRational, BigUint, One};
use rand::Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("level sequence must be nonempty and strictly increasing")]
    LevelsNotIncreasing,
    #[error("degree must be at least 3")]
    DegreeTooSmall,
    #[error("cluster exceeds the enumeration limit of {limit} vertices")]
    ClusterTooLarge { limit: usize },
    #[error("epsilon must lie strictly between 0 and 1")]
    EpsilonRange,
    #[error("class length {len} must exceed 1/epsilon = {inv_eps}")]
    ClassLenTooShort { len: u64, inv_eps: String },
    #[error("start index {start_after} must lie in -1..{max} (inclusive)")]
    StartIndex { start_after: i64, max: i64 },
    #[error("cut level {level} needs a lower endpoint below depth {depth}")]
    LevelBeyondDepth { level: u64, depth: u32 },
}

/// floor(2^e * log2(m)) computed exactly for m >= 2, e <= 64.
///
/// The integer part of log2(m) is split off; the fractional bits are
/// produced one per squaring of m / 2^floor(log2 m) in fixed-point
/// interval arithmetic, doubling the working precision whenever a bit
/// cannot be decided. For m not a power of two the value 2^e * log2(m)
/// is irrational, so every bit resolves at some finite precision.
pub fn floor_exp2_log2(e: u32, m: u64) -> u128 {
    assert!(m >= 2, "log2 argument must be at least 2");
    assert!(e <= 64, "exponent cap");
    let k = 63 - m.leading_zeros();
    let int_part = (k as u128) << e;
    if m == 1u64 << k {
        return int_part;
    }
    let mut prec = e as u64 + 64;
    loop {
        if let Some(frac) = frac_log2_bits(e, m, k, prec) {
            return int_part + frac;
        }
        prec *= 2;
    }
}

// First e bits of the fractional part of log2(m), as an integer, or
// None if p bits of working precision cannot decide some bit. Keeps an
// interval [lo, hi] around x * 2^p for the running value x in [1, 4);
// lo only ever rounds down and hi only ever rounds up, so the true
// value stays bracketed.
fn frac_log2_bits(e: u32, m: u64, k: u32, p: u64) -> Option<u128> {
    let two = BigUint::one() << (p + 1);
    let mut lo = BigUint::from(m) << (p - k as u64);
    let mut hi = lo.clone();
    let mut out = 0u128;
    for _ in 0..e {
        lo = (&lo * &lo) >> p;
        hi = ((&hi * &hi) >> p) + 1u32;
        out <<= 1;
        if lo >= two {
            out |= 1;
            lo >>= 1;
            hi = (hi + 1u32) >> 1;
        } else if hi < two {
            // keep the bit at 0
        } else {
            return None;
        }
    }
    Some(out)
}

/// One consecutive pair of an index sequence and whether its gap beats
/// the growth threshold 2^(2^(lower+2)) * log2(degree-1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapCheck {
    pub lower: u64,
    pub upper: u64,
    pub gap: u64,
    pub strict_ok: bool,
}

/// Validation outcome for an index sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceReport {
    /// First level is at least the degree.
    pub start_ok: bool,
    pub gaps: Vec<GapCheck>,
    /// `start_ok` and every gap beats the doubly exponential threshold.
    /// Sequences with this property keep working at every depth.
    pub strict: bool,
    /// Every gap is at least 2, which is all the cut constructions
    /// themselves require.
    pub spaced: bool,
}

/// A strictly increasing sequence of cut levels, together with the
/// degree parameter its validity is judged against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSequence {
    levels: Vec<u64>,
    degree: u32,
}

impl IndexSequence {
    pub fn new(levels: Vec<u64>, degree: u32) -> Result<Self, PartitionError> {
        if degree < 3 {
            return Err(PartitionError::DegreeTooSmall);
        }
        if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PartitionError::LevelsNotIncreasing);
        }
        Ok(IndexSequence { levels, degree })
    }

    pub fn levels(&self) -> &[u64] {
        &self.levels
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// Decide, exactly, which validity tier the sequence reaches.
    ///
    /// A gap above lower level l must reach 2^E * log2(d-1) with
    /// E = 2^(l+2). Three exact routes: for l >= 4 the threshold
    /// exceeds any u64 gap outright; for d-1 a power of two the
    /// threshold is the integer s * 2^E (equality allowed); otherwise
    /// the threshold is irrational and the gap must reach
    /// floor(2^E * log2(d-1)) + 1.
    pub fn validate(&self) -> SequenceReport {
        let d = self.degree;
        let start_ok = self.levels[0] >= d as u64;
        let gaps: Vec<GapCheck> = self
            .levels
            .windows(2)
            .map(|w| {
                let (lower, upper) = (w[0], w[1]);
                let gap = upper - lower;
                let strict_ok = if lower >= 4 {
                    false
                } else {
                    let e = 1u32 << (lower + 2);
                    let m = (d - 1) as u64;
                    if m.is_power_of_two() {
                        let s = m.trailing_zeros() as u128;
                        gap as u128 >= s << e
                    } else {
                        gap as u128 > floor_exp2_log2(e, m)
                    }
                };
                GapCheck { lower, upper, gap, strict_ok }
            })
            .collect();
        let strict = start_ok && gaps.iter().all(|g| g.strict_ok);
        let spaced = gaps.iter().all(|g| g.gap >= 2);
        SequenceReport { start_ok, gaps, strict, spaced }
    }
}

/// A selected cut: at each active level, one representative per class
/// carries the cut edge above it. Classes at level l group vertices by
/// their ancestor `class_len` generations up, clipped at the apex, so
/// levels within `class_len` of the depth hold a single class.
#[derive(Debug, Clone)]
pub struct SelectedCut {
    levels: BTreeSet<u64>,
    class_len: u64,
    key: StreamKey,
    depth: u32,
}

impl SelectedCut {
    pub fn new(
        levels: impl IntoIterator<Item = u64>,
        class_len: u64,
        key: StreamKey,
        t: &Truncation,
    ) -> Result<Self, PartitionError> {
        assert!(class_len >= 1);
        let levels: BTreeSet<u64> = levels.into_iter().collect();
        for &l in &levels {
            if l >= t.depth() as u64 {
                return Err(PartitionError::LevelBeyondDepth { level: l, depth: t.depth() });
            }
        }
        Ok(SelectedCut { levels, class_len, key, depth: t.depth() })
    }

    pub fn levels(&self) -> &BTreeSet<u64> {
        &self.levels
    }

    pub fn class_len(&self) -> u64 {
        self.class_len
    }

    /// Effective class length at a level: the nominal length, clipped
    /// so the class ancestor exists.
    pub fn class_len_at(&self, level: u64) -> u32 {
        debug_assert!(level < self.depth as u64);
        self.class_len.min(self.depth as u64 - level) as u32
    }

    /// The ancestor that names the class of a level vertex.
    pub fn class_ancestor(&self, v: &VertexAddr, t: &Truncation) -> VertexAddr {
        let anc_gen = v.generation() + self.class_len_at(v.generation() as u64);
        t.ancestor_at(v, anc_gen).expect("class ancestor is clipped to the apex")
    }

    /// The one vertex of the class below `ancestor` that carries a cut,
    /// drawn from the stream named by (level, ancestor).
    pub fn representative_in(&self, level: u64, ancestor: &VertexAddr, t: &Truncation) -> VertexAddr {
        let clen = self.class_len_at(level);
        debug_assert_eq!(ancestor.generation(), level as u32 + clen);
        let mut rng = self.key.child("rep").child_u64(level).child_addr(ancestor).rng();
        let suffix = rng.gen_range(0..1u64 << clen);
        t.vertex(level as u32, ancestor.path_bits() | suffix << ancestor.path_len())
    }

    pub fn is_representative(&self, v: &VertexAddr, t: &Truncation) -> bool {
        let level = v.generation() as u64;
        if !self.levels.contains(&level) {
            return false;
        }
        let a = self.class_ancestor(v, t);
        self.representative_in(level, &a, t) == *v
    }

    /// All representatives of one level, in class-ancestor order. The
    /// level must be active. O(1) memory; the number of items is
    /// 2^(depth - level - class_len_at(level)).
    pub fn reps_at_level<'a>(
        &'a self,
        level: u64,
        t: &Truncation,
    ) -> impl Iterator<Item = VertexAddr> + 'a {
        assert!(self.levels.contains(&level));
        let anc_gen = level as u32 + self.class_len_at(level);
        let count = 1u64 << (t.depth() - anc_gen);
        let t = *t;
        (0..count).map(move |path| {
            let a = t.vertex(anc_gen, path);
            self.representative_in(level, &a, &t)
        })
    }

    /// A copy with every level inside `lo..=hi` dropped. Surviving
    /// levels keep their representatives, so the result's cut edges are
    /// a subset of the original's.
    pub fn without_levels(&self, lo: u64, hi: u64) -> SelectedCut {
        let mut out = self.clone();
        out.levels.retain(|l| !(lo..=hi).contains(l));
        out
    }
}

/// Either a level cut or a selected cut.
#[derive(Debug, Clone)]
pub enum CutSet {
    Levels(BTreeSet<u64>),
    Selected(SelectedCut),
}

impl CutSet {
    pub fn levels(levels: impl IntoIterator<Item = u64>) -> CutSet {
        CutSet::Levels(levels.into_iter().collect())
    }

    /// Whether the edge from `v` to its parent is severed. False at the
    /// apex, which has no edge above.
    pub fn cuts_above(&self, v: &VertexAddr, t: &Truncation) -> bool {
        if v.path_len() == 0 {
            return false;
        }
        match self {
            CutSet::Levels(levels) => levels.contains(&(v.generation() as u64)),
            CutSet::Selected(sel) => sel.is_representative(v, t),
        }
    }

    pub fn active_levels(&self) -> &BTreeSet<u64> {
        match self {
            CutSet::Levels(levels) => levels,
            CutSet::Selected(sel) => &sel.levels,
        }
    }
}

/// One connected component of a cut truncation, fully enumerated.
#[derive(Debug, Clone)]
pub struct Cluster {
    /// The unique highest member; every member descends from it.
    pub top: VertexAddr,
    /// Sorted.
    pub members: Vec<VertexAddr>,
    /// Members other than the top with a severed child edge: the upper
    /// endpoints of the cuts that bound the cluster from below. Sorted.
    pub boundary: Vec<VertexAddr>,
    /// The top is the apex, so the cluster is the stump left by
    /// truncation rather than a component bounded by cuts from above.
    pub open: bool,
}

/// Walk up to the component's top, then enumerate it downward, stopping
/// at severed edges. Fails once the member count would pass the limit.
pub fn cluster_of(
    v: &VertexAddr,
    cuts: &CutSet,
    t: &Truncation,
    max_members: usize,
) -> Result<Cluster, PartitionError> {
    let top = top_of(v, cuts, t);
    let mut members = Vec::new();
    let mut boundary = Vec::new();
    let mut stack = vec![top];
    while let Some(u) = stack.pop() {
        if members.len() == max_members {
            return Err(PartitionError::ClusterTooLarge { limit: max_members });
        }
        members.push(u);
        let mut severed_child = false;
        if let Some(children) = t.children(&u) {
            for c in children {
                if cuts.cuts_above(&c, t) {
                    severed_child = true;
                } else {
                    stack.push(c);
                }
            }
        }
        if severed_child && u != top {
            boundary.push(u);
        }
    }
    members.sort();
    boundary.sort();
    Ok(Cluster { top, members, boundary, open: top == t.apex() })
}

fn top_of(v: &VertexAddr, cuts: &CutSet, t: &Truncation) -> VertexAddr {
    let mut top = *v;
    while !cuts.cuts_above(&top, t) {
        match t.parent(&top) {
            Some(p) => top = p,
            None => break,
        }
    }
    top
}

/// Size and cut statistics of a selected-cut component, without
/// enumerating it when a per-generation recurrence applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSummary {
    pub top: VertexAddr,
    pub open: bool,
    /// Member count.
    pub size: u128,
    /// Upper endpoints of severed child edges, i.e. the size of the
    /// cluster's lower boundary.
    pub out_count: u128,
}

/// Summarize the component of `v` under a selected cut.
///
/// When every active level's class ancestor lies at or before the next
/// active level above it, the per-generation member counts satisfy
/// N(l) = 2 N(l+1) - R(l), where R(l) is N(l + class length) for full
/// classes and 0 or 1 for a class clipped by the top, decided by a
/// direct representative check. Otherwise the component is enumerated,
/// subject to `max_members`.
pub fn selected_cluster_summary(
    v: &VertexAddr,
    cuts: &SelectedCut,
    t: &Truncation,
    max_members: usize,
) -> Result<ClusterSummary, PartitionError> {
    let wrapped = CutSet::Selected(cuts.clone());
    let top = top_of(v, &wrapped, t);
    let g = top.generation();

    let dp_applies = cuts.levels.iter().filter(|&&l| l < g as u64).all(|&l| {
        let reach = l + cuts.class_len_at(l) as u64;
        reach > g as u64 || cuts.levels.range(l + 1..reach).next().is_none()
    });
    if !dp_applies {
        let cluster = cluster_of(v, &wrapped, t, max_members)?;
        return Ok(ClusterSummary {
            top: cluster.top,
            open: cluster.open,
            size: cluster.members.len() as u128,
            out_count: cluster.boundary.len() as u128,
        });
    }

    let mut counts = vec![0u128; g as usize + 1];
    counts[g as usize] = 1;
    let mut out_count = 0u128;
    for l in (0..g).rev() {
        let mut n = 2 * counts[l as usize + 1];
        if cuts.levels.contains(&(l as u64)) {
            let clen = cuts.class_len_at(l as u64);
            let removed = if l + clen <= g {
                counts[(l + clen) as usize]
            } else {
                // One class reaches over the top; its representative is
                // severed exactly when it hangs below the top with no
                // severed edge in between.
                let a = t.ancestor_at(&top, l + clen).expect("class ancestor is clipped");
                let rep = cuts.representative_in(l as u64, &a, t);
                u128::from(top.is_ancestor_of(&rep) && rep != top && {
                    let mut u = t.parent(&rep).expect("rep is below the top");
                    let mut attached = true;
                    while u != top {
                        if wrapped.cuts_above(&u, t) {
                            attached = false;
                            break;
                        }
                        u = t.parent(&u).expect("walk ends at the top");
                    }
                    attached
                })
            };
            n -= removed;
            out_count += removed;
        }
        counts[l as usize] = n;
    }
    Ok(ClusterSummary {
        top,
        open: top == t.apex(),
        size: counts.iter().sum(),
        out_count,
    })
}

/// No member touches two severed edges. Cut edges then form a matching
/// on the cluster's closure, which the rewiring step relies on.
pub fn matching_ok(cluster: &Cluster, cuts: &CutSet, t: &Truncation) -> bool {
    cluster.members.iter().all(|m| {
        let mut incident = u32::from(cuts.cuts_above(m, t));
        if let Some(children) = t.children(m) {
            incident += children.iter().filter(|c| cuts.cuts_above(c, t)).count() as u32;
        }
        incident <= 1
    })
}

/// The lower boundary takes up at most an eps/2 fraction of the
/// cluster, compared exactly.
pub fn out_fraction_ok(cluster: &Cluster, eps: &BigRational) -> bool {
    let two_out = BigRational::from_integer((2 * cluster.boundary.len()).into());
    let size = BigRational::from_integer(cluster.members.len().into());
    two_out <= eps * size
}

/// Build a selected cut on the levels after position `start_after` of
/// the sequence, after checking the class-length versus epsilon
/// precondition. Structural conditions that a finite depth cannot meet
/// are reported as warnings instead of errors.
pub fn select_j(
    seq: &IndexSequence,
    start_after: i64,
    class_len: u64,
    eps: &BigRational,
    key: &StreamKey,
    t: &Truncation,
) -> Result<(SelectedCut, Vec<String>), PartitionError> {
    let zero = BigRational::from_integer(0.into());
    let one = BigRational::from_integer(1.into());
    if *eps <= zero || *eps >= one {
        return Err(PartitionError::EpsilonRange);
    }
    if BigRational::from_integer(class_len.into()) * eps <= one {
        return Err(PartitionError::ClassLenTooShort {
            len: class_len,
            inv_eps: eps.recip().to_string(),
        });
    }
    let n = seq.levels().len() as i64;
    if !(-1..n - 1).contains(&start_after) {
        return Err(PartitionError::StartIndex { start_after, max: n - 2 });
    }

    let mut warnings = Vec::new();
    match start_after {
        -1 => warnings.push("no level precedes the cut; the entry gap is unchecked".into()),
        k => {
            let gap = seq.levels()[k as usize + 1] - seq.levels()[k as usize];
            if gap <= class_len {
                warnings.push(format!(
                    "entry gap {gap} does not exceed the class length {class_len}"
                ));
            }
        }
    }
    let chosen = &seq.levels()[(start_after + 1) as usize..];
    if chosen.windows(2).any(|w| w[1] - w[0] < 2) {
        warnings.push("levels closer than 2 apart; cut edges may share endpoints".into());
    }
    if let Some(&top_level) = chosen.last() {
        if top_level + class_len > t.depth() as u64 {
            warnings.push(format!(
                "levels within {class_len} of the depth hold a single clipped class"
            ));
        }
    }
    let cut = SelectedCut::new(chosen.iter().copied(), class_len, *key, t)?;
    Ok((cut, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::BigInt;

    fn frac(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn exact_log_fractions_match_independent_values() {
        // Fixed points computed two independent ways beforehand: via
        // high-precision decimal evaluation and via bit lengths of
        // m^(2^e).
        let expect = [
            (4, 3, 25u128),
            (4, 10, 53),
            (8, 3, 405),
            (8, 5, 594),
            (8, 7, 718),
            (16, 3, 103872),
            (16, 6, 169408),
            (16, 10, 217705),
            (32, 3, 6807362105),
            (32, 5, 9972605231),
            (32, 6, 11102329401),
            (32, 7, 12057497578),
            (32, 10, 14267572527),
        ];
        for (e, m, want) in expect {
            assert_eq!(floor_exp2_log2(e, m), want, "e={e} m={m}");
        }
    }

    #[test]
    fn exact_log_agrees_with_big_integer_bit_lengths() {
        for e in [2u32, 3, 4, 8, 16] {
            for m in [3u64, 5, 6, 7, 9, 11, 12, 100, 1000, u32::MAX as u64] {
                let pow = BigUint::from(m).pow(1 << e);
                assert_eq!(floor_exp2_log2(e, m), (pow.bits() - 1) as u128, "e={e} m={m}");
            }
        }
    }

    #[test]
    fn exact_log_power_of_two_is_exact() {
        assert_eq!(floor_exp2_log2(10, 8), 3 << 10);
        assert_eq!(floor_exp2_log2(64, 2), 1 << 64);
    }

    #[test]
    fn gap_threshold_equality_for_degree_three() {
        // Degree 3 makes the threshold the exact integer 2^(2^(l+2)),
        // so a gap meeting it exactly passes and one short fails.
        let pass = IndexSequence::new(vec![3, 3 + (1u64 << 32)], 3).unwrap();
        let report = pass.validate();
        assert!(report.start_ok && report.strict && report.spaced);
        assert!(report.gaps[0].strict_ok);

        let fail = IndexSequence::new(vec![3, 3 + (1u64 << 32) - 1], 3).unwrap();
        let report = fail.validate();
        assert!(!report.gaps[0].strict_ok);
        assert!(!report.strict);
        assert!(report.spaced);
    }

    #[test]
    fn gap_threshold_power_of_two_degree() {
        // degree 5: threshold at lower level 1 is 2 * 2^8 = 512.
        let seq = IndexSequence::new(vec![1, 513], 5).unwrap();
        assert!(seq.validate().gaps[0].strict_ok);
        let seq = IndexSequence::new(vec![1, 512], 5).unwrap();
        assert!(!seq.validate().gaps[0].strict_ok);
    }

    #[test]
    fn gap_threshold_irrational_degree() {
        // degree 4: threshold at lower level 0 is 16 * log2(3), a hair
        // above 25, so 26 is the least passing gap.
        let seq = IndexSequence::new(vec![0, 26], 4).unwrap();
        assert!(seq.validate().gaps[0].strict_ok);
        let seq = IndexSequence::new(vec![0, 25], 4).unwrap();
        assert!(!seq.validate().gaps[0].strict_ok);
    }

    #[test]
    fn gap_threshold_unreachable_above_level_three() {
        let seq = IndexSequence::new(vec![4, u64::MAX], 3).unwrap();
        let report = seq.validate();
        assert!(!report.gaps[0].strict_ok);
        assert!(report.spaced);
    }

    #[test]
    fn sequence_constructor_rejects_bad_input() {
        assert_eq!(IndexSequence::new(vec![], 3), Err(PartitionError::LevelsNotIncreasing));
        assert_eq!(IndexSequence::new(vec![3, 3], 3), Err(PartitionError::LevelsNotIncreasing));
        assert_eq!(IndexSequence::new(vec![5, 2], 3), Err(PartitionError::LevelsNotIncreasing));
        assert_eq!(IndexSequence::new(vec![3, 5], 2), Err(PartitionError::DegreeTooSmall));
    }

    #[test]
    fn level_cut_clusters_tile_the_truncation() {
        let t = Truncation::new(15);
        let cuts = CutSet::levels([3u64, 8, 14]);

        let bottom = cluster_of(&t.vertex(0, 7), &cuts, &t, 1 << 20).unwrap();
        assert_eq!(bottom.top.generation(), 3);
        assert_eq!(bottom.members.len(), 15);
        assert_eq!(bottom.members.iter().filter(|m| m.generation() == 0).count(), 8);
        assert!(bottom.boundary.is_empty());
        assert!(!bottom.open);

        let band = cluster_of(&t.vertex(5, 9), &cuts, &t, 1 << 20).unwrap();
        assert_eq!(band.top.generation(), 8);
        assert_eq!(band.members.len(), 31);
        assert_eq!(band.boundary.len(), 16);
        assert!(band.boundary.iter().all(|b| b.generation() == 4));
        assert!(!band.open);

        let upper = cluster_of(&t.vertex(10, 0), &cuts, &t, 1 << 20).unwrap();
        assert_eq!(upper.top.generation(), 14);
        assert_eq!(upper.members.len(), 63);
        assert_eq!(upper.boundary.len(), 32);

        let stump = cluster_of(&t.apex(), &cuts, &t, 1 << 20).unwrap();
        assert!(stump.open);
        assert_eq!(stump.members, vec![t.apex()]);
        assert!(stump.boundary.is_empty());

        // Every vertex lands in a cluster whose size matches its band,
        // and the sizes add up to the whole truncation.
        let sizes = [15u128, 31, 63, 1];
        let total: u128 = (0..t.vertex_count())
            .map(|i| {
                let c = cluster_of(&t.vertex_at(i), &cuts, &t, 1 << 20).unwrap();
                assert!(sizes.contains(&(c.members.len() as u128)));
                1
            })
            .sum();
        assert_eq!(total, t.vertex_count());
    }

    #[test]
    fn cluster_enumeration_respects_the_limit() {
        let t = Truncation::new(15);
        let cuts = CutSet::levels([3u64]);
        let err = cluster_of(&t.vertex(5, 0), &cuts, &t, 100).unwrap_err();
        assert_eq!(err, PartitionError::ClusterTooLarge { limit: 100 });
    }

    #[test]
    fn class_length_one_picks_one_sibling_per_pair() {
        let t = Truncation::new(6);
        let key = StreamKey::root(3).child("cut");
        let cut = SelectedCut::new([2u64], 1, key, &t).unwrap();
        let reps: Vec<VertexAddr> = cut.reps_at_level(2, &t).collect();
        assert_eq!(reps.len(), 8);
        let mut parents = BTreeSet::new();
        for r in &reps {
            assert_eq!(r.generation(), 2);
            assert!(cut.is_representative(r, &t));
            assert!(parents.insert(t.parent(r).unwrap()));
            let sibling = t
                .children(&t.parent(r).unwrap())
                .unwrap()
                .into_iter()
                .find(|c| c != r)
                .unwrap();
            assert!(!cut.is_representative(&sibling, &t));
        }
        assert_eq!(parents.len(), 8);
    }

    #[test]
    fn representatives_vary_with_the_seed() {
        let t = Truncation::new(10);
        let a = SelectedCut::new([4u64], 3, StreamKey::root(1), &t).unwrap();
        let b = SelectedCut::new([4u64], 3, StreamKey::root(2), &t).unwrap();
        let ra: Vec<_> = a.reps_at_level(4, &t).collect();
        let rb: Vec<_> = b.reps_at_level(4, &t).collect();
        assert_eq!(ra.len(), 8);
        assert_ne!(ra, rb);
        let ra2: Vec<_> = a.reps_at_level(4, &t).collect();
        assert_eq!(ra, ra2);
    }

    #[test]
    fn clipped_classes_give_one_representative_per_level() {
        // Levels within the class length of the depth collapse to a
        // single class keyed by the apex.
        let t = Truncation::new(15);
        let key = StreamKey::root(7);
        let cut = SelectedCut::new([8u64, 14], 25, key, &t).unwrap();
        assert_eq!(cut.class_len_at(8), 7);
        assert_eq!(cut.class_len_at(14), 1);
        assert_eq!(cut.reps_at_level(8, &t).count(), 1);
        assert_eq!(cut.reps_at_level(14, &t).count(), 1);
    }

    #[test]
    fn summary_matches_enumeration_everywhere() {
        // Depth 10 with classes exactly as long as the gaps, the regime
        // the recurrence is built for, plus a clipped top level.
        let t = Truncation::new(10);
        let key = StreamKey::root(5).child("sel");
        let cut = SelectedCut::new([2u64, 4, 6, 8], 2, key, &t).unwrap();
        let wrapped = CutSet::Selected(cut.clone());
        for i in 0..t.vertex_count() {
            let v = t.vertex_at(i);
            let summary = selected_cluster_summary(&v, &cut, &t, 1 << 20).unwrap();
            let cluster = cluster_of(&v, &wrapped, &t, 1 << 20).unwrap();
            assert_eq!(summary.top, cluster.top, "top at {v}");
            assert_eq!(summary.size, cluster.members.len() as u128, "size at {v}");
            assert_eq!(summary.out_count, cluster.boundary.len() as u128, "out at {v}");
            assert_eq!(summary.open, cluster.open);
        }
    }

    #[test]
    fn summary_falls_back_when_classes_overreach() {
        // Class length 3 spans the gap between levels 2 and 4, so the
        // recurrence is invalid and enumeration takes over; answers
        // must still match.
        let t = Truncation::new(9);
        let key = StreamKey::root(9);
        let cut = SelectedCut::new([2u64, 4], 3, key, &t).unwrap();
        let wrapped = CutSet::Selected(cut.clone());
        for i in 0..t.vertex_count() {
            let v = t.vertex_at(i);
            let summary = selected_cluster_summary(&v, &cut, &t, 1 << 20).unwrap();
            let cluster = cluster_of(&v, &wrapped, &t, 1 << 20).unwrap();
            assert_eq!(summary.size, cluster.members.len() as u128);
            assert_eq!(summary.out_count, cluster.boundary.len() as u128);
        }
    }

    #[test]
    fn selected_clusters_partition_and_match_conditions() {
        let t = Truncation::new(12);
        let key = StreamKey::root(21);
        let cut = SelectedCut::new([3u64, 6, 9], 3, key, &t).unwrap();
        let wrapped = CutSet::Selected(cut.clone());
        let mut seen = 0u128;
        let mut tops = BTreeSet::new();
        for i in 0..t.vertex_count() {
            let v = t.vertex_at(i);
            let c = cluster_of(&v, &wrapped, &t, 1 << 20).unwrap();
            assert!(matching_ok(&c, &wrapped, &t));
            if tops.insert(c.top) {
                seen += c.members.len() as u128;
            }
        }
        assert_eq!(seen, t.vertex_count());
    }

    #[test]
    fn select_j_guards_and_warnings() {
        let t = Truncation::new(15);
        let key = StreamKey::root(0);
        let seq = IndexSequence::new(vec![3, 8, 14], 3).unwrap();

        assert_eq!(
            select_j(&seq, 0, 25, &frac(3, 2), &key, &t).unwrap_err(),
            PartitionError::EpsilonRange
        );
        assert!(matches!(
            select_j(&seq, 0, 24, &frac(1, 24), &key, &t).unwrap_err(),
            PartitionError::ClassLenTooShort { len: 24, .. }
        ));
        assert!(matches!(
            select_j(&seq, 2, 25, &frac(1, 24), &key, &t).unwrap_err(),
            PartitionError::StartIndex { start_after: 2, .. }
        ));

        let (cut, warnings) = select_j(&seq, 0, 25, &frac(1, 24), &key, &t).unwrap();
        assert_eq!(cut.levels().iter().copied().collect::<Vec<_>>(), vec![8, 14]);
        // Entry gap 5 <= 25 and both classes clipped: two warnings.
        assert_eq!(warnings.len(), 2);

        let (cut, warnings) = select_j(&seq, -1, 4, &frac(1, 3), &key, &t).unwrap();
        assert_eq!(cut.levels().len(), 3);
        assert!(warnings.iter().any(|w| w.contains("entry gap is unchecked")));
    }

    #[test]
    fn select_j_rejects_levels_at_or_beyond_depth() {
        let t = Truncation::new(10);
        let seq = IndexSequence::new(vec![3, 10], 3).unwrap();
        assert!(matches!(
            select_j(&seq, -1, 4, &frac(1, 3), &StreamKey::root(0), &t).unwrap_err(),
            PartitionError::LevelBeyondDepth { level: 10, depth: 10 }
        ));
    }

    #[test]
    fn without_levels_preserves_surviving_representatives() {
        let t = Truncation::new(12);
        let cut = SelectedCut::new([3u64, 6, 9], 2, StreamKey::root(4), &t).unwrap();
        let thinned = cut.without_levels(4, 8);
        assert_eq!(thinned.levels().iter().copied().collect::<Vec<_>>(), vec![3, 9]);
        let orig: Vec<_> = cut.reps_at_level(3, &t).collect();
        let kept: Vec<_> = thinned.reps_at_level(3, &t).collect();
        assert_eq!(orig, kept);
    }

    #[test]
    fn out_fraction_comparison_is_exact() {
        let t = Truncation::new(15);
        let cuts = CutSet::levels([3u64, 8]);
        // Band cluster: 16 boundary vertices out of 31 members. The
        // fraction 16/31 sits just above 1/2, so eps = 32/31 passes
        // and eps = 1 fails on the exact comparison.
        let band = cluster_of(&t.vertex(5, 3), &cuts, &t, 1 << 20).unwrap();
        assert_eq!(band.members.len(), 31);
        assert_eq!(band.boundary.len(), 16);
        assert!(out_fraction_ok(&band, &frac(32, 31)));
        assert!(!out_fraction_ok(&band, &frac(1, 1)));
    }

    #[test]
    fn apex_never_has_a_cut_above() {
        let t = Truncation::new(6);
        let cuts = CutSet::levels([6u64]);
        assert!(!cuts.cuts_above(&t.apex(), &t));
    }
}
