//! Cluster-replacement graphs over a cut truncation.
//!
//! Starting from a truncation and a cut set, every cluster gets its
//! interior rewired while the severed tree edges are kept as the only
//! connections between clusters. A fair coin per cluster, keyed by its
//! top, decides the rewiring:
//!
//! * path clusters become a single path, cut-incident vertices first
//!   and the top last, so entering from below forces a walk across the
//!   whole cluster;
//! * expander-like clusters become a random graph of largest reachable
//!   girth, so balls inside them grow at full branching speed.
//!
//! Two variants differ in bookkeeping. The basic variant rewires level
//! cuts as is and tolerates degrees up to d+2. The marked variant runs
//! over selected cuts and keeps every degree at most d: tops are
//! generated one short, and a marked set (the cut-incident vertices
//! plus an extra seeded reserve) each give back one pruned edge.
//!
//! Everything is materialized lazily and deterministically: the
//! randomness of a cluster depends only on the overlay key and the
//! cluster top, never on query order. Queries inside the cluster that
//! swallowed the apex fail instead of inventing structure; breadth
//! first measurements treat that as contamination, not as an error.

use crate::canopy::{Truncation, VertexAddr};
use crate::girth::{self, default_girth_target, GirthConfig, GirthError};
use crate::lab::GraphOracle;
use crate::partition::{cluster_of, Cluster, CutSet, PartitionError};
use crate::rng::StreamKey;
use num::{BigRational, ToPrimitive};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OverlayError {
    #[error("cluster topped at {top} swallowed the apex or the guard; its interior is a truncation artifact")]
    OpenCluster { top: VertexAddr },
    #[error("{v} is outside the truncation")]
    OutsideTruncation { v: VertexAddr },
    #[error("no admissible witness target above {origin}")]
    NoWitnessTarget { origin: VertexAddr },
    #[error("measurement failed: {0}")]
    Measurement(String),
    #[error("invalid overlay request: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Girth(#[from] GirthError),
}

/// Degree discipline of the overlay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Level cuts, plain replacements, degrees up to d+2.
    Basic,
    /// Selected cuts, capped tops, marked pruning, degrees at most d.
    Marked,
}

/// Which way a cluster's coin fell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterType {
    Path,
    Exp,
}

#[derive(Debug, Clone)]
pub struct OverlayConfig {
    pub d: u32,
    pub variant: Variant,
    /// Reserve fraction for the marked variant: each expander cluster
    /// marks an extra ceil(eps/2 * size) vertices beyond the
    /// cut-incident ones. Ignored by the basic variant.
    pub eps: BigRational,
    /// Upper bound on requested girth inside expander clusters.
    pub girth_cap: u32,
    /// Largest cluster the overlay is willing to enumerate.
    pub max_cluster: usize,
    /// Clusters whose top reaches this generation are treated like the
    /// apex stump. Defaults to two above the last cut level.
    pub guard: Option<u32>,
}

impl OverlayConfig {
    pub fn basic(d: u32) -> Self {
        OverlayConfig {
            d,
            variant: Variant::Basic,
            eps: BigRational::from_integer(0.into()),
            girth_cap: 10,
            max_cluster: 1 << 21,
            guard: None,
        }
    }

    pub fn marked(d: u32, eps: BigRational) -> Self {
        OverlayConfig { eps, variant: Variant::Marked, ..OverlayConfig::basic(d) }
    }
}

/// How one cluster was rewired.
#[derive(Debug, Clone)]
pub enum ClusterKindInfo {
    /// The interior is a path; `fallback` records an expander coin that
    /// could not be honored because the cluster is too small.
    Path { fallback: bool },
    Exp {
        /// Extra marked member indices (sorted), disjoint from the
        /// cut-incident set and the top.
        ext: Vec<u32>,
        /// Girth of the interior after pruning; None would mean acyclic.
        girth: Option<u32>,
        /// Girth target actually used, after any auto-lowering.
        girth_target: u32,
        /// Edges removed by marked pruning, as interior index pairs.
        pruned: Vec<(u32, u32)>,
        /// Interior index running one short for stub parity, if any.
        exceptional: Option<u32>,
    },
}

/// A materialized cluster: its members, interior adjacency and the cut
/// edges it touches. Self-contained for neighbor queries.
#[derive(Debug)]
pub struct ClusterGraph {
    pub top: VertexAddr,
    /// Sorted; interior indices refer to positions here.
    pub members: Vec<VertexAddr>,
    /// Indices of members with a severed child edge (sorted). These are
    /// the cut-incident vertices other than the top.
    pub out: Vec<u32>,
    pub kind: ClusterKindInfo,
    adjacency: Vec<Vec<u32>>,
    cut_children: Vec<Vec<VertexAddr>>,
    top_parent: Option<VertexAddr>,
}

impl ClusterGraph {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn index_of(&self, v: &VertexAddr) -> Option<u32> {
        self.members.binary_search(v).ok().map(|i| i as u32)
    }

    pub fn interior_neighbors(&self, idx: u32) -> &[u32] {
        &self.adjacency[idx as usize]
    }

    /// Extra marked members, as addresses.
    pub fn ext_addrs(&self) -> Vec<VertexAddr> {
        match &self.kind {
            ClusterKindInfo::Path { .. } => Vec::new(),
            ClusterKindInfo::Exp { ext, .. } => {
                ext.iter().map(|&i| self.members[i as usize]).collect()
            }
        }
    }

    pub fn is_ext(&self, v: &VertexAddr) -> bool {
        match (&self.kind, self.index_of(v)) {
            (ClusterKindInfo::Exp { ext, .. }, Some(i)) => ext.binary_search(&i).is_ok(),
            _ => false,
        }
    }

    pub fn cluster_type(&self) -> ClusterType {
        match self.kind {
            ClusterKindInfo::Path { .. } => ClusterType::Path,
            ClusterKindInfo::Exp { .. } => ClusterType::Exp,
        }
    }

    /// Full overlay neighborhood of a member: interior edges, severed
    /// child edges, and the top's own cut edge. Sorted.
    pub fn neighbors_of(&self, v: &VertexAddr) -> Option<Vec<VertexAddr>> {
        let idx = self.index_of(v)?;
        let mut out: Vec<VertexAddr> = self.adjacency[idx as usize]
            .iter()
            .map(|&i| self.members[i as usize])
            .collect();
        out.extend(self.cut_children[idx as usize].iter().copied());
        if *v == self.top {
            out.extend(self.top_parent);
        }
        out.sort();
        Some(out)
    }
}

/// The overlay graph itself. Cheap to query repeatedly; clusters are
/// built once and cached under every member.
#[derive(Debug)]
pub struct OverlayGraph {
    cfg: OverlayConfig,
    t: Truncation,
    cuts: CutSet,
    key: StreamKey,
    guard: u32,
    cache: RwLock<HashMap<VertexAddr, Arc<ClusterGraph>>>,
    warnings: Mutex<Vec<String>>,
}

impl OverlayGraph {
    pub fn new(
        cfg: OverlayConfig,
        t: Truncation,
        cuts: CutSet,
        key: StreamKey,
    ) -> Result<Self, OverlayError> {
        if cfg.d < 3 {
            return Err(OverlayError::Config(format!("degree {} is below 3", cfg.d)));
        }
        let mut warnings = Vec::new();
        if cfg.variant == Variant::Marked {
            if !matches!(cuts, CutSet::Selected(_)) {
                return Err(OverlayError::Config(
                    "the marked variant runs over selected cuts".into(),
                ));
            }
            let zero = BigRational::from_integer(0.into());
            let one = BigRational::from_integer(1.into());
            if cfg.eps <= zero || cfg.eps >= one {
                return Err(OverlayError::Config("eps must lie strictly in (0, 1)".into()));
            }
            // Reserve fractions at or above 1/(d (d-1)^2) give the
            // degree accounting no room at the first cut scale.
            let knee = BigRational::new(1.into(), (cfg.d as i64 * (cfg.d as i64 - 1).pow(2)).into());
            if cfg.eps >= knee {
                warnings.push(format!("eps {} is not below 1/(d(d-1)^2) = {}", cfg.eps, knee));
            }
        }
        let guard = cfg.guard.unwrap_or_else(|| {
            cuts.active_levels()
                .iter()
                .next_back()
                .map_or(t.depth() + 1, |&l| (l as u32).saturating_add(2))
        });
        Ok(OverlayGraph {
            cfg,
            t,
            cuts,
            key,
            guard,
            cache: RwLock::new(HashMap::new()),
            warnings: Mutex::new(warnings),
        })
    }

    pub fn truncation(&self) -> &Truncation {
        &self.t
    }

    pub fn cuts(&self) -> &CutSet {
        &self.cuts
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    /// Accumulated notes: girth targets lowered, coin overrides, and
    /// similar. Sorted and deduplicated.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = self.warnings.lock().expect("warning lock").clone();
        w.sort();
        w.dedup();
        w
    }

    fn warn(&self, msg: String) {
        self.warnings.lock().expect("warning lock").push(msg);
    }

    /// The coin deciding a cluster's rewiring, as a pure function of
    /// the overlay key and the top.
    pub fn cluster_type(&self, top: &VertexAddr) -> ClusterType {
        let mut rng = self.key.child("cluster").child_addr(top).child("type").rng();
        if rng.gen_range(0..2) == 0 {
            ClusterType::Path
        } else {
            ClusterType::Exp
        }
    }

    fn top_of(&self, v: &VertexAddr) -> VertexAddr {
        let mut top = *v;
        while !self.cuts.cuts_above(&top, &self.t) {
            match self.t.parent(&top) {
                Some(p) => top = p,
                None => break,
            }
        }
        top
    }

    /// Whether the cluster topped here counts as a truncation artifact.
    pub fn is_open_top(&self, top: &VertexAddr) -> bool {
        *top == self.t.apex() || top.generation() >= self.guard
    }

    /// The component of `v`, materializing it on first touch.
    pub fn cluster_graph(&self, v: &VertexAddr) -> Result<Arc<ClusterGraph>, OverlayError> {
        if !self.t.contains(v) {
            return Err(OverlayError::OutsideTruncation { v: *v });
        }
        if let Some(hit) = self.cache.read().expect("cache lock").get(v) {
            return Ok(Arc::clone(hit));
        }
        let top = self.top_of(v);
        if self.is_open_top(&top) {
            return Err(OverlayError::OpenCluster { top });
        }
        let built = Arc::new(self.build_cluster(v)?);
        let mut cache = self.cache.write().expect("cache lock");
        // Another thread may have built it meanwhile; both builds are
        // identical by keyed construction, so either copy may win.
        if let Some(hit) = cache.get(v) {
            return Ok(Arc::clone(hit));
        }
        for m in &built.members {
            cache.insert(*m, Arc::clone(&built));
        }
        Ok(built)
    }

    fn build_cluster(&self, v: &VertexAddr) -> Result<ClusterGraph, OverlayError> {
        let cluster = cluster_of(v, &self.cuts, &self.t, self.cfg.max_cluster)?;
        let Cluster { top, members, boundary, .. } = cluster;
        let n = members.len();
        let idx = |a: &VertexAddr| members.binary_search(a).expect("member") as u32;
        let out: Vec<u32> = boundary.iter().map(idx).collect();

        let cut_children: Vec<Vec<VertexAddr>> = members
            .iter()
            .map(|m| match self.t.children(m) {
                None => Vec::new(),
                Some(cs) => {
                    cs.into_iter().filter(|c| self.cuts.cuts_above(c, &self.t)).collect()
                }
            })
            .collect();
        let top_parent = self.cuts.cuts_above(&top, &self.t).then(|| {
            self.t.parent(&top).expect("a severed edge has an upper endpoint")
        });

        let ckey = self.key.child("cluster").child_addr(&top);
        let coin = self.cluster_type(&top);
        let too_small = n < self.cfg.d as usize + 1;
        let (kind, adjacency) = if coin == ClusterType::Path || too_small {
            let fallback = coin == ClusterType::Exp;
            if fallback {
                self.warn(format!(
                    "cluster {top}: {n} members cannot host a degree-{} interior; using a path",
                    self.cfg.d
                ));
            }
            (ClusterKindInfo::Path { fallback }, path_adjacency(n, &out, idx(&top), &ckey))
        } else {
            self.exp_adjacency(&ckey, &top, n, &out, idx(&top))?
        };

        Ok(ClusterGraph { top, members, out, kind, adjacency, cut_children, top_parent })
    }

    // Interior of an expander cluster: a girth graph with the marked
    // variant's degree bookkeeping baked in.
    fn exp_adjacency(
        &self,
        ckey: &StreamKey,
        top: &VertexAddr,
        n: usize,
        out: &[u32],
        top_idx: u32,
    ) -> Result<(ClusterKindInfo, Vec<Vec<u32>>), OverlayError> {
        let d = self.cfg.d;
        let mut cfg = GirthConfig::new(n as u32, d, 3);
        let ext = if self.cfg.variant == Variant::Marked {
            let want = (&self.cfg.eps * BigRational::from_integer(n.into())
                / BigRational::from_integer(2.into()))
            .ceil()
            .to_integer()
            .to_usize()
            .expect("reserve count fits");
            let mut candidates: Vec<u32> =
                (0..n as u32).filter(|i| *i != top_idx && out.binary_search(i).is_err()).collect();
            if want > candidates.len() {
                return Err(OverlayError::Config(format!(
                    "cluster {top}: reserve of {want} exceeds the {} free members",
                    candidates.len()
                )));
            }
            candidates.shuffle(&mut ckey.child("ext").rng());
            let mut ext: Vec<u32> = candidates.into_iter().take(want).collect();
            ext.sort_unstable();
            cfg.marked = out.iter().chain(ext.iter()).copied().collect();
            cfg.capped = [top_idx].into_iter().collect();
            ext
        } else {
            Vec::new()
        };

        let full_target = default_girth_target(n as u32, d, self.cfg.girth_cap);
        let gkey = ckey.child("girth");
        let mut graph = None;
        for target in (3..=full_target).rev() {
            cfg.girth_target = target;
            match girth::generate(&cfg, &gkey) {
                Ok(g) => {
                    if target < full_target {
                        self.warn(format!(
                            "cluster {top}: girth target lowered from {full_target} to {target}"
                        ));
                    }
                    graph = Some(g);
                    break;
                }
                Err(GirthError::Unsatisfiable { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let mut graph = graph.ok_or(GirthError::Unsatisfiable {
            n: n as u32,
            d,
            target: 3,
        })?;
        let pruned = if self.cfg.variant == Variant::Marked {
            girth::prune_marked(&mut graph, &ckey.child("prune"))
        } else {
            Vec::new()
        };
        let adjacency: Vec<Vec<u32>> =
            (0..n as u32).map(|i| graph.neighbors(i).to_vec()).collect();
        Ok((
            ClusterKindInfo::Exp {
                ext,
                girth: graph.girth(),
                girth_target: cfg.girth_target,
                pruned,
                exceptional: graph.exceptional(),
            },
            adjacency,
        ))
    }

    /// Overlay neighborhood of `v`: interior edges of its cluster plus
    /// the severed tree edges it carries. Fails when `v`'s own cluster
    /// is open; reaching INTO an open cluster from a closed one is
    /// fine, expanding FROM it is not.
    pub fn adjacency(&self, v: &VertexAddr) -> Result<Vec<VertexAddr>, OverlayError> {
        let cg = self.cluster_graph(v)?;
        Ok(cg.neighbors_of(v).expect("v is a member of its own cluster"))
    }

    /// Tops of all clusters, open ones included (the apex stump last if
    /// present). Costs one representative draw per class at every
    /// level, so intended for moderate depths.
    pub fn cluster_tops(&self) -> Vec<VertexAddr> {
        let mut tops: Vec<VertexAddr> = Vec::new();
        match &self.cuts {
            CutSet::Levels(levels) => {
                for &l in levels {
                    if l < self.t.depth() as u64 {
                        let count = 1u64 << (self.t.depth() - l as u32);
                        tops.extend((0..count).map(|p| self.t.vertex(l as u32, p)));
                    }
                }
            }
            CutSet::Selected(sel) => {
                for &l in sel.levels() {
                    tops.extend(sel.reps_at_level(l, &self.t));
                }
            }
        }
        // The apex stump, unless the apex itself carries a cut (it
        // never does) or already appears.
        tops.push(self.t.apex());
        tops.sort();
        tops.dedup();
        tops
    }

    /// Ancestral cluster tops above `origin`, paired with how many cut
    /// edges separate them from `origin`'s cluster. Stops before any
    /// open cluster.
    pub fn ancestral_tops(&self, origin: &VertexAddr) -> Vec<(u32, VertexAddr)> {
        let mut out = Vec::new();
        let mut crossings = 0;
        let mut cur = *origin;
        loop {
            let top = self.top_of(&cur);
            if self.is_open_top(&top) {
                break;
            }
            out.push((crossings, top));
            match self.t.parent(&top) {
                Some(p) => {
                    crossings += 1;
                    cur = p;
                }
                None => break,
            }
        }
        out
    }
}

// Path interior: cut-incident members first in seeded order, then the
// remaining interior shuffled, the top last. Entering from a severed
// child edge therefore forces a walk past the whole interior block.
fn path_adjacency(n: usize, out: &[u32], top_idx: u32, ckey: &StreamKey) -> Vec<Vec<u32>> {
    let mut order: Vec<u32> = Vec::with_capacity(n);
    let mut rng = ckey.child("order").rng();
    let mut boundary = out.to_vec();
    boundary.shuffle(&mut rng);
    order.extend(boundary);
    let mut interior: Vec<u32> = (0..n as u32)
        .filter(|i| *i != top_idx && out.binary_search(i).is_err())
        .collect();
    interior.shuffle(&mut rng);
    order.extend(interior);
    order.push(top_idx);

    let mut adjacency = vec![Vec::new(); n];
    for w in order.windows(2) {
        adjacency[w[0] as usize].push(w[1]);
        adjacency[w[1] as usize].push(w[0]);
    }
    for a in &mut adjacency {
        a.sort_unstable();
    }
    adjacency
}

impl GraphOracle for OverlayGraph {
    type V = VertexAddr;
    fn neighbors(&self, v: &VertexAddr) -> Result<Vec<VertexAddr>, String> {
        self.adjacency(v).map_err(|e| e.to_string())
    }
}

/// Outcome of a slow-growth measurement: the distance to a path-type
/// ancestral top and the ball size at that radius, with both exact
/// comparisons evaluated.
#[derive(Debug, Clone)]
pub struct LowerWitness {
    pub target: VertexAddr,
    pub crossings: u32,
    pub cluster_size: u64,
    pub distance: u32,
    pub ball: u128,
    /// distance >= (1 - c) * cluster_size.
    pub distance_ok: bool,
    /// ball * (1 - c)^2 <= 3 * distance^2.
    pub ball_ok: bool,
    pub contaminated: bool,
}

/// Outcome of a fast-growth measurement: the ball around the entry
/// point of an expander-type cluster, against a branching threshold.
#[derive(Debug, Clone)]
pub struct UpperWitness {
    pub cluster_top: VertexAddr,
    pub crossings: u32,
    pub entry: VertexAddr,
    pub radius: u32,
    pub ball: u128,
    pub threshold: u128,
    pub ok: bool,
    pub contaminated: bool,
}

impl OverlayGraph {
    /// Measure against the first path-type ancestral top at least
    /// `min_crossings` cut edges above `origin`. `c` bounds the
    /// cut-incident fraction of the target cluster.
    pub fn witness_lower(
        &self,
        origin: &VertexAddr,
        min_crossings: u32,
        c: &BigRational,
        node_cap: usize,
    ) -> Result<LowerWitness, OverlayError> {
        let one = BigRational::from_integer(1.into());
        if *c <= BigRational::from_integer(0.into()) || *c >= one {
            return Err(OverlayError::Config("c must lie strictly in (0, 1)".into()));
        }
        let (crossings, target) = self
            .ancestral_tops(origin)
            .into_iter()
            .find(|(m, top)| *m >= min_crossings && self.cluster_type(top) == ClusterType::Path)
            .ok_or(OverlayError::NoWitnessTarget { origin: *origin })?;
        let size = self.cluster_graph(&target)?.size() as u64;

        let reach = crate::lab::bfs_distances(self, origin, Some(&target), None, node_cap);
        let distance = *reach.dist.get(&target).ok_or_else(|| {
            OverlayError::Measurement(format!(
                "target {target} not reached: {}",
                reach.note.unwrap_or_else(|| "unreachable".into())
            ))
        })?;
        let profile = crate::lab::ball_profile(self, origin, distance, node_cap);
        let ball = profile.sizes[distance as usize];

        let remainder = &one - c;
        let distance_ok = BigRational::from_integer(distance.into())
            >= &remainder * BigRational::from_integer(size.into());
        let ball_ok = BigRational::from_integer(ball.into()) * &remainder * &remainder
            <= BigRational::from_integer(3.into())
                * BigRational::from_integer((distance as u128 * distance as u128).into());
        Ok(LowerWitness {
            target,
            crossings,
            cluster_size: size,
            distance,
            ball,
            distance_ok,
            ball_ok,
            contaminated: !profile.is_exact_to(distance),
        })
    }

    /// Measure the ball around the entry point of the first
    /// expander-type ancestral cluster at least `min_crossings` cut
    /// edges up. With `min_crossings` 0 the origin itself must sit in
    /// an expander cluster and is its own entry point.
    pub fn witness_upper(
        &self,
        origin: &VertexAddr,
        min_crossings: u32,
        threshold_override: Option<u128>,
        node_cap: usize,
    ) -> Result<UpperWitness, OverlayError> {
        let chain = self.ancestral_tops(origin);
        let found = chain
            .iter()
            .find(|(m, top)| *m >= min_crossings && self.cluster_type(top) == ClusterType::Exp)
            .copied()
            .ok_or(OverlayError::NoWitnessTarget { origin: *origin })?;
        let (crossings, cluster_top) = found;
        let entry = if crossings == 0 {
            *origin
        } else {
            // The walk below enters this cluster through the parent of
            // the previous cluster's top.
            let (_, prev_top) =
                chain.iter().find(|(m, _)| *m == crossings - 1).expect("chain is contiguous");
            self.t.parent(prev_top).expect("a crossed edge has an upper endpoint")
        };

        let cg = self.cluster_graph(&cluster_top)?;
        let girth_half = match &cg.kind {
            ClusterKindInfo::Exp { girth, .. } => girth.map_or(u32::MAX, |g| g / 2),
            ClusterKindInfo::Path { .. } => {
                return Err(OverlayError::Measurement(format!(
                    "cluster {cluster_top} fell back to a path; no branching to witness"
                )))
            }
        };
        let radius =
            girth_half.min(girth::floor_log((self.cfg.d - 1) as u64, cg.size() as u128) / 2);
        let threshold =
            threshold_override.unwrap_or(((self.cfg.d - 1) as u128).pow(radius));

        let profile = crate::lab::ball_profile(self, &entry, radius, node_cap);
        let ball = profile.sizes[radius as usize];
        Ok(UpperWitness {
            cluster_top,
            crossings,
            entry,
            radius,
            ball,
            threshold,
            ok: ball >= threshold,
            contaminated: !profile.is_exact_to(radius),
        })
    }
}

/// Tally of the path-versus-cut consistency check.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathCutReport {
    pub pairs_checked: u32,
    pub violations: u32,
    /// Pairs abandoned for contamination or unreachability.
    pub skipped: u32,
    pub alt_paths_checked: u64,
}

impl OverlayGraph {
    /// Every simple path between two vertices must cross exactly the
    /// severed tree edges separating their clusters, in tree order.
    /// Samples uniform vertex pairs, compares the crossing sequence of
    /// a shortest path and of randomized alternative simple paths
    /// against the tree-prescribed sequence, and counts mismatches.
    pub fn check_path_cut_invariance(
        &self,
        pairs: u32,
        alt_tries: u32,
        key: &StreamKey,
        node_cap: usize,
    ) -> PathCutReport {
        let mut report = PathCutReport::default();
        let law = crate::canopy::RootLaw::new(self.t);
        let mut rng = key.child("pairs").rng();
        let mut attempts = 0;
        while report.pairs_checked < pairs && attempts < 20 * pairs.max(1) {
            attempts += 1;
            let u = law.sample(&mut rng);
            let v = law.sample(&mut rng);
            if u == v
                || self.is_open_top(&self.top_of(&u))
                || self.is_open_top(&self.top_of(&v))
            {
                report.skipped += 1;
                continue;
            }
            let expected = self.tree_cut_sequence(&u, &v);
            let Some(path) = crate::lab::bfs_between(self, &u, &v, node_cap) else {
                report.skipped += 1;
                continue;
            };
            report.pairs_checked += 1;
            if self.cut_sequence_of(&path) != expected {
                report.violations += 1;
            }
            // Alternatives are detours through a random waypoint: two
            // search legs spliced into one simple path. Unlike a
            // depth-first wander this is cost-bounded and reliably
            // produces routes far from the shortest one.
            for i in 0..alt_tries {
                let alt_key = key.child("alt").child_u64(report.pairs_checked as u64).child_u64(i as u64);
                let w = law.sample(&mut alt_key.rng());
                if w == u || w == v || self.is_open_top(&self.top_of(&w)) {
                    continue;
                }
                let legs = crate::lab::bfs_between(self, &u, &w, node_cap)
                    .zip(crate::lab::bfs_between(self, &w, &v, node_cap));
                let Some((mut alt, second)) = legs else { continue };
                alt.extend(second.into_iter().skip(1));
                let alt = crate::lab::splice_loops(alt);
                if alt == path {
                    continue;
                }
                report.alt_paths_checked += 1;
                if self.cut_sequence_of(&alt) != expected {
                    report.violations += 1;
                }
            }
        }
        report
    }

    // The severed edges on the tree path between u and v, each named by
    // its lower endpoint, ordered as crossed walking from u.
    fn tree_cut_sequence(&self, u: &VertexAddr, v: &VertexAddr) -> Vec<VertexAddr> {
        let meet = self.t.lca(u, v);
        let mut seq = Vec::new();
        let mut cur = *u;
        while cur != meet {
            if self.cuts.cuts_above(&cur, &self.t) {
                seq.push(cur);
            }
            cur = self.t.parent(&cur).expect("meet is above");
        }
        let mut down = Vec::new();
        let mut cur = *v;
        while cur != meet {
            if self.cuts.cuts_above(&cur, &self.t) {
                down.push(cur);
            }
            cur = self.t.parent(&cur).expect("meet is above");
        }
        down.reverse();
        seq.extend(down);
        seq
    }

    // Severed edges crossed by a concrete vertex path, in order.
    fn cut_sequence_of(&self, path: &[VertexAddr]) -> Vec<VertexAddr> {
        let mut seq = Vec::new();
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            if self.t.parent(&a) == Some(b) && self.cuts.cuts_above(&a, &self.t) {
                seq.push(a);
            } else if self.t.parent(&b) == Some(a) && self.cuts.cuts_above(&b, &self.t) {
                seq.push(b);
            }
        }
        seq
    }

}
