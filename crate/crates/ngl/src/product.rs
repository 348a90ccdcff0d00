//! Stacked fibers: a small binary tree whose every vertex carries its
//! own deep truncation with a selected-cut overlay, plus a rewiring
//! rule that swaps a few vertical cut edges for horizontal ones.
//!
//! The point of the swap is growth control. Inside one fiber, ball
//! growth is governed by the overlay clusters; a swapped edge lets a
//! ball escape into the parent fiber, but only at positions whose
//! upward reach (measured by `tbox_size`) is small compared to the
//! logarithm of the receiving cluster. The per-index tolerance schedule
//! decides how small. The construction proceeds in four moves: select a
//! cut set per fiber, thin the parents' cut sets until chosen edges
//! pass the tolerance test, rebuild every fiber overlay on the thinned
//! sets, then mark the lucky edges whose swap keeps all degrees at d.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use num::{BigInt, BigRational, BigUint, One, ToPrimitive, Zero};
use rand::Rng;

use crate::canopy::{subtree_size, RootLaw, Truncation, VertexAddr};
use crate::lab::{bfs_distances, GraphOracle};
use crate::overlay::{OverlayConfig, OverlayError, OverlayGraph, Variant};
use crate::partition::{
    select_j, selected_cluster_summary, CutSet, IndexSequence, PartitionError, SelectedCut,
};
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProductError {
    #[error("bad product configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
}

/// A vertex of the fiber stack: `first` names the fiber in the
/// horizontal tree, `second` is the position inside that fiber.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PVertex {
    pub first: VertexAddr,
    pub second: VertexAddr,
}

impl PVertex {
    pub fn new(first: VertexAddr, second: VertexAddr) -> Self {
        PVertex { first, second }
    }
}

impl fmt::Display for PVertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}~{}", self.first, self.second)
    }
}

/// Number of product vertices that can reach `p` by steps moving toward
/// the apex in either coordinate. Any interleaving of the two climbs
/// works, so the reachable set is the product of the two subtrees.
pub fn tbox_size(p: &PVertex) -> u128 {
    subtree_size(p.first)
        .checked_mul(subtree_size(p.second))
        .expect("subtree sizes stay below 2^61 each")
}

/// Per-index tolerance for the turnability test. `Geometric` is the
/// exact schedule eps_k = 1 / (4^k d (d-1)^2); it shrinks so fast that
/// no truncation of desk size has clusters large enough, so `Override`
/// accepts an explicit list instead, clamping past its end to the last
/// entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpsSchedule {
    Geometric { d: u32 },
    Override(Vec<BigRational>),
}

impl EpsSchedule {
    pub fn eps(&self, ind: u32) -> BigRational {
        match self {
            EpsSchedule::Geometric { d } => {
                let d = BigInt::from(*d);
                let dm1 = &d - BigInt::one();
                let quarter = num::pow(BigInt::from(4), ind as usize);
                BigRational::new(BigInt::one(), quarter * d * &dm1 * &dm1)
            }
            EpsSchedule::Override(v) => v
                .get(ind as usize)
                .or_else(|| v.last())
                .expect("an override schedule must have at least one entry")
                .clone(),
        }
    }

    /// The knee 1 / (d (d-1)^2). The geometric schedule starts exactly
    /// on it, so the strict comparison fails at index 0 and holds from
    /// index 1 on.
    pub fn boundary(d: u32) -> BigRational {
        let d = BigInt::from(d);
        let dm1 = &d - BigInt::one();
        BigRational::new(BigInt::one(), d * &dm1 * &dm1)
    }

    pub fn boundary_ok(&self, ind: u32, d: u32) -> bool {
        self.eps(ind) < Self::boundary(d)
    }

    pub fn strictly_decreasing(&self, upto: u32) -> bool {
        (1..=upto).all(|k| self.eps(k) < self.eps(k - 1))
    }
}

/// Exact evaluation of the turnability inequality
/// tbox <= eps * log_(d-1)(cluster_size), rewritten with integer
/// arithmetic as (d-1)^(tbox * den) <= cluster_size^num.
pub fn is_turnable_size(tbox: u128, eps: &BigRational, d: u32, cluster_size: u128) -> bool {
    assert!(d >= 3, "interior degree must be at least 3");
    if eps <= &BigRational::zero() || cluster_size <= 1 {
        return false;
    }
    let num = eps.numer().to_biguint().expect("positive tolerance");
    let den = eps.denom().to_biguint().expect("positive denominator");
    let lhs_exp = BigUint::from(tbox) * &den;
    // cluster_size < 2^128 and d - 1 >= 2, so beyond 128 * num the left
    // side is certainly larger; this also keeps exponents small.
    if lhs_exp > BigUint::from(128u32) * &num {
        return false;
    }
    let lhs_exp = lhs_exp.to_usize().expect("bounded by 128 * numerator");
    let num = num.to_usize().expect("tolerance numerator fits a machine word");
    assert!(
        lhs_exp <= 1 << 24 && num <= 1 << 20,
        "tolerance too extreme for exact evaluation"
    );
    num::pow(BigUint::from(d - 1), lhs_exp) <= num::pow(BigUint::from(cluster_size), num)
}

/// Turnability of the vertical cut edge named by its lower endpoint
/// `x`, judged against the parent fiber's cut set: the landing spot's
/// upward reach must be within tolerance of the log of the receiving
/// component. An open component never qualifies.
pub fn is_turnable(
    parent_fiber: VertexAddr,
    x: &VertexAddr,
    parent_cuts: &SelectedCut,
    t2: &Truncation,
    eps: &BigRational,
    d: u32,
    max_members: usize,
) -> Result<bool, PartitionError> {
    let tbox = tbox_size(&PVertex::new(parent_fiber, *x));
    let summary = selected_cluster_summary(x, parent_cuts, t2, max_members)?;
    Ok(!summary.open && is_turnable_size(tbox, eps, d, summary.size))
}

/// Knobs for the whole stack. `levels`, `class_len`, `select_eps` and
/// `start_after` feed every fiber's cut selection; `overlay_eps` sizes
/// the reserved landing sets; `schedule` and `turn_targets` drive the
/// thinning greedy.
#[derive(Debug, Clone)]
pub struct ProductConfig {
    pub d: u32,
    /// Depth of the horizontal tree of fibers.
    pub fiber_depth: u32,
    /// Depth of every fiber's own truncation.
    pub depth: u32,
    pub levels: Vec<u64>,
    pub class_len: u64,
    pub select_eps: BigRational,
    pub start_after: i64,
    pub overlay_eps: BigRational,
    pub schedule: EpsSchedule,
    /// Per-index count of edges each fiber tries to make turnable by
    /// thinning its parent's cut set. Missing entries mean zero.
    pub turn_targets: Vec<u32>,
    pub girth_cap: u32,
    pub max_cluster: usize,
    pub guard: Option<u32>,
}

fn frac(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

impl Default for ProductConfig {
    /// Calibrated so that the stack is cheap enough to sweep
    /// exhaustively while still exercising every mechanism: indices 0
    /// and 1 accept any closed component (their tolerance entries are
    /// huge, so thinning commits without removing anything), index 2 is
    /// tight enough that thinning actually strips levels from the top
    /// fibers, and the index-0 entry doubles the analytically expected
    /// luck rate among turnable edges, putting the measured rate at the
    /// center of its acceptance band.
    fn default() -> Self {
        ProductConfig {
            d: 3,
            fiber_depth: 4,
            depth: 16,
            levels: vec![3, 6, 9, 12, 15],
            class_len: 3,
            select_eps: frac(1, 2),
            start_after: -1,
            overlay_eps: frac(1, 13),
            schedule: EpsSchedule::Override(vec![
                frac(29, 1000),
                frac(50, 1),
                frac(28, 1),
                frac(20, 1),
                frac(1, 1000),
            ]),
            turn_targets: vec![1, 1, 2, 0, 0],
            girth_cap: 6,
            max_cluster: 1 << 17,
            guard: None,
        }
    }
}

/// One committed thinning step: scanning fiber `?`'s edge `edge` (a cut
/// edge at `level`), the parent's levels in `level ..= horizon` were
/// dropped. `None` means the component was already large enough and
/// nothing was removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinCommit {
    pub edge: VertexAddr,
    pub level: u64,
    pub horizon: Option<u64>,
}

/// Everything one fiber carries.
#[derive(Debug)]
pub struct FiberData {
    pub addr: VertexAddr,
    /// The thinned cut set the overlay is built on.
    pub jprime: SelectedCut,
    pub overlay: OverlayGraph,
    pub commits: Vec<ThinCommit>,
    /// Lower endpoints of this fiber's cut edges that pass the
    /// turnability test against the parent's final cut set. Empty for
    /// the apex fiber, which has no parent.
    pub turnable: BTreeSet<VertexAddr>,
}

/// The assembled stack with its swap set. Vertical edges come from the
/// per-fiber overlays; each lucky vertex trades its upward cut edge for
/// the horizontal edge to the same position one fiber up.
pub struct UGraph {
    cfg: ProductConfig,
    t1: Truncation,
    t2: Truncation,
    fibers: Vec<FiberData>,
    index: HashMap<VertexAddr, usize>,
    lucky: BTreeSet<PVertex>,
    warnings: Vec<String>,
}

impl UGraph {
    pub fn build(cfg: &ProductConfig, key: &StreamKey) -> Result<UGraph, ProductError> {
        validate(cfg)?;
        let t1 = Truncation::new(cfg.fiber_depth);
        let t2 = Truncation::new(cfg.depth);
        let seq = IndexSequence::new(cfg.levels.clone(), cfg.d)?;
        let mut warnings = Vec::new();

        // Fibers in index order (apex last), addresses ascending within
        // an index; the thinning pass below relies on children coming
        // strictly before their parents.
        let mut addrs: Vec<VertexAddr> = (0..t1.vertex_count())
            .map(|o| t1.vertex_at(o))
            .collect();
        addrs.sort_unstable_by_key(|v| (v.generation(), v.path_bits()));
        let index: HashMap<VertexAddr, usize> =
            addrs.iter().enumerate().map(|(i, v)| (*v, i)).collect();

        let mut jsets: Vec<SelectedCut> = Vec::with_capacity(addrs.len());
        for v in &addrs {
            let (cut, mut warns) = select_j(
                &seq,
                cfg.start_after,
                cfg.class_len,
                &cfg.select_eps,
                &key.child("select").child_addr(v),
                &t2,
            )?;
            warnings.append(&mut {
                warns.iter_mut().for_each(|w| *w = format!("fiber {v}: {w}"));
                warns
            });
            jsets.push(cut);
        }

        let mut commits: Vec<Vec<ThinCommit>> = vec![Vec::new(); addrs.len()];
        for (vi, v) in addrs.iter().enumerate() {
            let want = cfg.turn_targets.get(v.generation() as usize).copied().unwrap_or(0);
            let Some(vp) = t1.parent(v) else { continue };
            if want == 0 {
                continue;
            }
            let pi = index[&vp];
            let eps_up = cfg.schedule.eps(vp.generation());
            // This fiber's own cut set is final here: only its children
            // could have thinned it, and they were processed earlier.
            let edges: Vec<(u64, VertexAddr)> = {
                let jv = &jsets[vi];
                jv.levels()
                    .iter()
                    .copied()
                    .flat_map(|l| jv.reps_at_level(l, &t2).map(move |x| (l, x)))
                    .collect()
            };
            let mut chosen: BTreeSet<VertexAddr> = BTreeSet::new();
            'slots: for slot in 0..want {
                for (level, x) in &edges {
                    if chosen.contains(x) {
                        continue;
                    }
                    let tbox = tbox_size(&PVertex::new(vp, *x));
                    // Try the parent's set as it stands, then ever
                    // larger removals; components only grow, so the
                    // first horizon that works is the smallest.
                    let mut horizons: Vec<Option<u64>> = vec![None];
                    horizons
                        .extend(jsets[pi].levels().range(*level..).map(|&h| Some(h)));
                    for h in horizons {
                        let trial = match h {
                            None => jsets[pi].clone(),
                            Some(hi) => jsets[pi].without_levels(*level, hi),
                        };
                        let summary =
                            selected_cluster_summary(x, &trial, &t2, cfg.max_cluster)?;
                        if summary.open || !is_turnable_size(tbox, &eps_up, cfg.d, summary.size)
                        {
                            continue;
                        }
                        jsets[pi] = trial;
                        commits[vi].push(ThinCommit { edge: *x, level: *level, horizon: h });
                        chosen.insert(*x);
                        continue 'slots;
                    }
                }
                warnings.push(format!(
                    "fiber {v}: the turnable threshold is out of reach; filled {slot} of {want} slots"
                ));
                break;
            }
        }

        // With every cut set final, record which edges actually pass
        // the test, then rebuild the overlays on the thinned sets.
        let ceiling = t2.vertex_count();
        let mut turnable: Vec<BTreeSet<VertexAddr>> = vec![BTreeSet::new(); addrs.len()];
        for (vi, v) in addrs.iter().enumerate() {
            let Some(vp) = t1.parent(v) else { continue };
            let pi = index[&vp];
            let eps_up = cfg.schedule.eps(vp.generation());
            let fiber_cap = subtree_size(vp);
            // No component can beat the whole truncation; skip the
            // summaries when even that would fail.
            let hopeless = |level: u64| {
                let tbox = fiber_cap * (2u128.pow(level as u32 + 1) - 1);
                !is_turnable_size(tbox, &eps_up, cfg.d, ceiling)
            };
            let jv = &jsets[vi];
            for level in jv.levels().iter().copied().collect::<Vec<_>>() {
                if hopeless(level) {
                    continue;
                }
                for x in jv.reps_at_level(level, &t2) {
                    let tbox = tbox_size(&PVertex::new(vp, x));
                    let summary = selected_cluster_summary(&x, &jsets[pi], &t2, cfg.max_cluster)?;
                    if !summary.open && is_turnable_size(tbox, &eps_up, cfg.d, summary.size) {
                        turnable[vi].insert(x);
                    }
                }
            }
        }

        let mut fibers = Vec::with_capacity(addrs.len());
        for (v, (jprime, (commits, turnable))) in addrs
            .iter()
            .zip(jsets.into_iter().zip(commits.into_iter().zip(turnable.into_iter())))
        {
            let ovcfg = OverlayConfig {
                d: cfg.d,
                variant: Variant::Marked,
                eps: cfg.overlay_eps.clone(),
                girth_cap: cfg.girth_cap,
                max_cluster: cfg.max_cluster,
                guard: cfg.guard,
            };
            let overlay = OverlayGraph::new(
                ovcfg,
                t2,
                CutSet::Selected(jprime.clone()),
                key.child("fiber").child_addr(v),
            )?;
            fibers.push(FiberData { addr: *v, jprime, overlay, commits, turnable });
        }

        let mut u = UGraph {
            cfg: cfg.clone(),
            t1,
            t2,
            fibers,
            index,
            lucky: BTreeSet::new(),
            warnings,
        };
        u.mark_lucky()?;
        Ok(u)
    }

    // The swap set: a turnable edge is swapped when its landing spot
    // belongs to the receiving cluster's reserved set and the sibling
    // fiber does not hold the same cut edge. Landing on a cluster top
    // or inside the apex stump never qualifies.
    fn mark_lucky(&mut self) -> Result<(), ProductError> {
        let mut lucky = BTreeSet::new();
        for f in &self.fibers {
            let Some(vp) = self.t1.parent(&f.addr) else { continue };
            let sib = self.sibling_of(&f.addr).expect("non-apex fibers have a sibling");
            let pf = &self.fibers[self.index[&vp]];
            let sf = &self.fibers[self.index[&sib]];
            for &x in &f.turnable {
                if sf.jprime.levels().contains(&(x.generation() as u64))
                    && sf.jprime.is_representative(&x, &self.t2)
                {
                    continue;
                }
                let top = {
                    let mut cur = x;
                    while !pf.overlay.cuts().cuts_above(&cur, &self.t2) {
                        match self.t2.parent(&cur) {
                            Some(p) => cur = p,
                            None => break,
                        }
                    }
                    cur
                };
                if top == x || pf.overlay.is_open_top(&top) {
                    continue;
                }
                if pf.overlay.cluster_graph(&x)?.is_ext(&x) {
                    lucky.insert(PVertex::new(f.addr, x));
                }
            }
        }
        self.lucky = lucky;
        Ok(())
    }

    fn sibling_of(&self, v: &VertexAddr) -> Option<VertexAddr> {
        let p = self.t1.parent(v)?;
        let [a, b] = self.t1.children(&p).expect("a parent has children");
        Some(if a == *v { b } else { a })
    }

    pub fn config(&self) -> &ProductConfig {
        &self.cfg
    }

    pub fn t1(&self) -> &Truncation {
        &self.t1
    }

    pub fn t2(&self) -> &Truncation {
        &self.t2
    }

    pub fn fibers(&self) -> &[FiberData] {
        &self.fibers
    }

    pub fn fiber(&self, v: &VertexAddr) -> Option<&FiberData> {
        self.index.get(v).map(|&i| &self.fibers[i])
    }

    pub fn lucky(&self) -> &BTreeSet<PVertex> {
        &self.lucky
    }

    /// The swapped-in horizontal edges, source first.
    pub fn f_arrow(&self) -> impl Iterator<Item = (PVertex, PVertex)> + '_ {
        self.lucky.iter().map(|p| {
            let fp = self.t1.parent(&p.first).expect("lucky sources have a parent fiber");
            (*p, PVertex::new(fp, p.second))
        })
    }

    /// The swapped-out vertical edges, lower endpoint first.
    pub fn f_up(&self) -> impl Iterator<Item = (PVertex, PVertex)> + '_ {
        self.lucky.iter().map(|p| {
            let up = self.t2.parent(&p.second).expect("cut edges have an upper endpoint");
            (*p, PVertex::new(p.first, up))
        })
    }

    /// Build-time warnings plus everything the fiber overlays have
    /// accumulated so far, deduplicated.
    pub fn warnings(&self) -> Vec<String> {
        let mut all = self.warnings.clone();
        for f in &self.fibers {
            let fiber = f.addr;
            all.extend(f.overlay.warnings().into_iter().map(|w| format!("fiber {fiber}: {w}")));
        }
        all.sort();
        all.dedup();
        all
    }

    pub fn sample_root<R: Rng + ?Sized>(&self, rng: &mut R) -> PVertex {
        let law1 = RootLaw::new(self.t1);
        let law2 = RootLaw::new(self.t2);
        PVertex::new(law1.sample(rng), law2.sample(rng))
    }

    /// Turnable-versus-lucky tallies per fiber index. The gate value is
    /// half the schedule entry, present only when that is at most one
    /// and can be read as a probability.
    pub fn lucky_stats(&self) -> Vec<IndLuck> {
        let mut by_ind: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for f in &self.fibers {
            if self.t1.parent(&f.addr).is_none() {
                continue;
            }
            let e = by_ind.entry(f.addr.generation()).or_default();
            e.0 += f.turnable.len() as u64;
            e.1 += f
                .turnable
                .iter()
                .filter(|x| self.lucky.contains(&PVertex::new(f.addr, **x)))
                .count() as u64;
        }
        by_ind
            .into_iter()
            .map(|(ind, (sources, lucky))| {
                let eps = self.cfg.schedule.eps(ind);
                let gate = (eps / BigRational::from_integer(2.into()))
                    .to_f64()
                    .filter(|g| *g <= 1.0);
                IndLuck { ind, sources, lucky, gate }
            })
            .collect()
    }

    /// Fraction of sampled positions whose upward chain meets a lucky
    /// vertex of its fiber, i.e. whose escape route to the parent fiber
    /// exists.
    pub fn lucky_hit_fraction(&self, walks: u32, min_len: u32, key: &StreamKey) -> LuckyHitReport {
        let law1 = RootLaw::new(self.t1);
        let law2 = RootLaw::new(self.t2);
        // Generations count from the leaves, so the climb from x to the
        // apex has length depth - generation(x).
        let max_gen = self.t2.depth() - min_len.min(self.t2.depth());
        let mut rng = key.rng();
        let mut hits = 0;
        for _ in 0..walks {
            let v = law1.sample(&mut rng);
            let mut x = law2.sample(&mut rng);
            while x.generation() > max_gen {
                x = law2.sample(&mut rng);
            }
            let hit = loop {
                if self.lucky.contains(&PVertex::new(v, x)) {
                    break true;
                }
                match self.t2.parent(&x) {
                    Some(p) => x = p,
                    None => break false,
                }
            };
            hits += u32::from(hit);
        }
        LuckyHitReport { walks, hits }
    }

    /// Exact probability of the event `lucky_hit_fraction` estimates:
    /// a position of generation at least `min_len`, drawn with its
    /// fiber from the product law, starts an upward chain that meets a
    /// lucky vertex. Counts, per fiber holding luck, the qualifying
    /// positions lying at or below a lucky one.
    pub fn lucky_shadow_mass(&self, min_len: u32) -> BigRational {
        let mut by_fiber: BTreeMap<VertexAddr, BTreeSet<VertexAddr>> = BTreeMap::new();
        for p in &self.lucky {
            by_fiber.entry(p.first).or_default().insert(p.second);
        }
        let min_len = min_len.min(self.t2.depth());
        let max_gen = self.t2.depth() - min_len;
        let n2 = self.t2.vertex_count();
        let eligible = n2 - ((1u128 << min_len) - 1);
        let mut covered: u128 = 0;
        for lucky_pos in by_fiber.values() {
            for ord in 0..n2 {
                let start = self.t2.vertex_at(ord);
                if start.generation() > max_gen {
                    continue;
                }
                let mut x = Some(start);
                while let Some(v) = x {
                    if lucky_pos.contains(&v) {
                        covered += 1;
                        break;
                    }
                    x = self.t2.parent(&v);
                }
            }
        }
        BigRational::new(
            BigInt::from(covered),
            BigInt::from(self.t1.vertex_count() * eligible),
        )
    }

    /// Every swap, re-checked against the assembled adjacency: the
    /// vertical edge is gone, the horizontal one is present in both
    /// directions, degrees stay at d on both ends, the landing spot is
    /// reserved, and the sibling source is not also swapped.
    pub fn check_swap_bookkeeping(&self) -> SwapReport {
        let mut report = SwapReport { swaps: self.lucky.len() as u64, ..SwapReport::default() };
        let complain = |what: String, log: &mut Vec<String>| {
            if log.len() < 8 {
                log.push(what);
            }
        };
        for p in &self.lucky {
            let target = PVertex::new(
                self.t1.parent(&p.first).expect("lucky sources have a parent fiber"),
                p.second,
            );
            let up = PVertex::new(
                p.first,
                self.t2.parent(&p.second).expect("cut edges have an upper endpoint"),
            );
            let (Ok(src), Ok(dst)) = (self.neighbors(p), self.neighbors(&target)) else {
                report.violations += 1;
                complain(format!("{p}: swap endpoint refused to expand"), &mut report.examples);
                continue;
            };
            let sib = self.sibling_of(&p.first).expect("non-apex fibers have a sibling");
            let mut bad = Vec::new();
            if src.contains(&up) {
                bad.push("vertical edge still present");
            }
            if !src.contains(&target) || !dst.contains(p) {
                bad.push("horizontal edge missing");
            }
            if src.len() > self.cfg.d as usize || dst.len() > self.cfg.d as usize {
                bad.push("degree above d");
            }
            let fp = &self.fibers[self.index[&target.first]];
            if !fp
                .overlay
                .cluster_graph(&p.second)
                .map(|cg| cg.is_ext(&p.second))
                .unwrap_or(false)
            {
                bad.push("landing spot not reserved");
            }
            if self.lucky.contains(&PVertex::new(sib, p.second)) {
                bad.push("sibling swapped the same target");
            }
            if !self.fibers[self.index[&p.first]]
                .jprime
                .is_representative(&p.second, &self.t2)
            {
                bad.push("swapped edge is not a cut edge");
            }
            if !bad.is_empty() {
                report.violations += 1;
                complain(format!("{p}: {}", bad.join(", ")), &mut report.examples);
            }
        }
        report
    }

    /// Exhaustive degree check over every member of every closed
    /// cluster in every fiber. Materializes the whole stack; meant for
    /// the acceptance gate, not for unit tests.
    pub fn degree_sweep(&self) -> Result<DegreeReport, ProductError> {
        let mut report = DegreeReport::default();
        for f in &self.fibers {
            for top in f.overlay.cluster_tops() {
                if f.overlay.is_open_top(&top) {
                    continue;
                }
                let cg = f.overlay.cluster_graph(&top)?;
                for m in &cg.members {
                    let p = PVertex::new(f.addr, *m);
                    let deg = self
                        .neighbors(&p)
                        .map_err(|e| ProductError::Config(format!("{p}: {e}")))?
                        .len() as u32;
                    report.vertices_checked += 1;
                    report.max_degree = report.max_degree.max(deg);
                    if deg > self.cfg.d {
                        report.violations += 1;
                    }
                }
            }
        }
        Ok(report)
    }

    /// Any two routes between the same endpoints must cross the same
    /// horizontal swap edges and the same vertical cut edges. Samples
    /// endpoint pairs (half of them within one fiber, since in a finite
    /// truncation most cross-fiber pairs have no route at all), finds a
    /// shortest path, then compares randomized alternative simple paths
    /// against it.
    pub fn check_path_invariance(
        &self,
        pairs: u32,
        alt_tries: u32,
        key: &StreamKey,
        node_cap: usize,
    ) -> UPathReport {
        let mut report = UPathReport::default();
        let mut rng = key.child("pairs").rng();
        let law1 = RootLaw::new(self.t1);
        let law2 = RootLaw::new(self.t2);
        // Positions inside open clusters refuse to expand (their wiring
        // is a truncation artifact), so resample the position until the
        // endpoint is usable; the fiber stays as drawn.
        let draw = |fiber: VertexAddr, rng: &mut rand_chacha::ChaCha8Rng| {
            for _ in 0..10 {
                let p = PVertex::new(fiber, law2.sample(rng));
                if self.neighbors(&p).is_ok() {
                    return Some(p);
                }
            }
            None
        };
        let mut attempts = 0;
        while report.pairs_checked < pairs && attempts < 20 * pairs.max(1) {
            attempts += 1;
            let first = law1.sample(&mut rng);
            let second = if attempts % 2 == 0 { first } else { law1.sample(&mut rng) };
            let (Some(p), Some(q)) = (draw(first, &mut rng), draw(second, &mut rng)) else {
                report.skipped += 1;
                continue;
            };
            if p == q {
                report.skipped += 1;
                continue;
            }
            // The only way up and out of a fiber is through a lucky
            // vertex on the climb from the current position, so a
            // cross-fiber route needs an unbroken chain of them on both
            // descents from the meeting fiber.
            if !self.ascent_chains_meet(&p, &q) {
                report.skipped += 1;
                report.disconnected_skips += 1;
                continue;
            }
            let Some(path) = crate::lab::bfs_between(self, &p, &q, node_cap) else {
                report.skipped += 1;
                continue;
            };
            report.pairs_checked += 1;
            let expected = self.crossing_sets(&path);
            // Alternatives are detours through a random waypoint, as in
            // the per-fiber overlay check: cost-bounded, and the routes
            // wander much further than depth-first jitter would.
            for i in 0..alt_tries {
                let alt_key =
                    key.child("alt").child_u64(report.pairs_checked as u64).child_u64(i as u64);
                let mut wrng = alt_key.rng();
                let wf = law1.sample(&mut wrng);
                let Some(w) = draw(wf, &mut wrng) else { continue };
                if w == p
                    || w == q
                    || !self.ascent_chains_meet(&p, &w)
                    || !self.ascent_chains_meet(&w, &q)
                {
                    continue;
                }
                let legs = crate::lab::bfs_between(self, &p, &w, node_cap)
                    .zip(crate::lab::bfs_between(self, &w, &q, node_cap));
                let Some((mut alt, second)) = legs else { continue };
                alt.extend(second.into_iter().skip(1));
                let alt = crate::lab::splice_loops(alt);
                if alt == path {
                    continue;
                }
                report.alt_paths_checked += 1;
                if self.crossing_sets(&alt) != expected {
                    report.violations += 1;
                }
            }
        }
        report
    }

    fn ascent_chains_meet(&self, p: &PVertex, q: &PVertex) -> bool {
        let meet = self.t1.lca(&p.first, &q.first);
        self.climbs_to(p, &meet) && self.climbs_to(q, &meet)
    }

    // Whether some chain of lucky swaps lifts `p` into the target
    // fiber: each hop must find a lucky vertex weakly above one of the
    // positions reached so far. Necessary for a route; the search
    // itself settles sufficiency.
    fn climbs_to(&self, p: &PVertex, target: &VertexAddr) -> bool {
        let mut fiber = p.first;
        let mut frontier: BTreeSet<VertexAddr> = [p.second].into();
        while fiber != *target {
            let Some(up) = self.t1.parent(&fiber) else { return false };
            let mut next = BTreeSet::new();
            for u in &frontier {
                let mut cur = Some(*u);
                while let Some(x) = cur {
                    if self.lucky.contains(&PVertex::new(fiber, x)) {
                        next.insert(x);
                    }
                    cur = self.t2.parent(&x);
                }
            }
            if next.is_empty() {
                return false;
            }
            frontier = next;
            fiber = up;
        }
        true
    }

    // Horizontal swap edges (by source) and vertical cut edges (by
    // fiber and lower endpoint) crossed by a concrete path.
    fn crossing_sets(&self, path: &[PVertex]) -> (BTreeSet<PVertex>, BTreeSet<PVertex>) {
        let mut horizontal = BTreeSet::new();
        let mut vertical = BTreeSet::new();
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.first == b.first {
                let lower = if self.t2.parent(&a.second) == Some(b.second) {
                    Some(a)
                } else if self.t2.parent(&b.second) == Some(a.second) {
                    Some(b)
                } else {
                    None
                };
                if let Some(l) = lower {
                    let f = &self.fibers[self.index[&l.first]];
                    if f.jprime.is_representative(&l.second, &self.t2) {
                        vertical.insert(l);
                    }
                }
            } else {
                let source = if self.t1.parent(&a.first) == Some(b.first) { a } else { b };
                horizontal.insert(source);
            }
        }
        (horizontal, vertical)
    }
}

impl fmt::Debug for UGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UGraph")
            .field("fibers", &self.fibers.len())
            .field("lucky", &self.lucky.len())
            .finish_non_exhaustive()
    }
}

impl GraphOracle for UGraph {
    type V = PVertex;

    fn neighbors(&self, p: &PVertex) -> Result<Vec<PVertex>, String> {
        let Some(&fi) = self.index.get(&p.first) else {
            return Err(format!("{p}: no such fiber"));
        };
        if !self.t2.contains(&p.second) {
            return Err(format!("{p}: position outside the fiber"));
        }
        let base = self.fibers[fi]
            .overlay
            .adjacency(&p.second)
            .map_err(|e| format!("{p}: {e}"))?;
        let mut out: Vec<PVertex> =
            base.into_iter().map(|u| PVertex::new(p.first, u)).collect();
        if self.lucky.contains(p) {
            let up = self.t2.parent(&p.second).expect("cut edges sit below the apex");
            out.retain(|q| q.second != up);
            let fp = self.t1.parent(&p.first).expect("lucky sources have a parent fiber");
            out.push(PVertex::new(fp, p.second));
        }
        if let Some(cs) = self.t2.children(&p.second) {
            for c in cs {
                if self.lucky.contains(&PVertex::new(p.first, c)) {
                    out.retain(|q| *q != PVertex::new(p.first, c));
                }
            }
        }
        if let Some(fcs) = self.t1.children(&p.first) {
            for g in fcs {
                if self.lucky.contains(&PVertex::new(g, p.second)) {
                    out.push(PVertex::new(g, p.second));
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

fn validate(cfg: &ProductConfig) -> Result<(), ProductError> {
    if cfg.d < 3 {
        return Err(ProductError::Config("interior degree must be at least 3".into()));
    }
    if cfg.fiber_depth == 0 {
        return Err(ProductError::Config("the horizontal tree needs at least depth 1".into()));
    }
    if let EpsSchedule::Override(v) = &cfg.schedule {
        if v.is_empty() {
            return Err(ProductError::Config("override schedule is empty".into()));
        }
        if v.iter().any(|e| e <= &BigRational::zero()) {
            return Err(ProductError::Config("tolerances must be positive".into()));
        }
    }
    match cfg.levels.last() {
        None => return Err(ProductError::Config("no cut levels given".into())),
        Some(&l) if l >= cfg.depth as u64 => {
            return Err(ProductError::Config(format!(
                "cut level {l} does not fit a depth-{} fiber",
                cfg.depth
            )));
        }
        _ => {}
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndLuck {
    pub ind: u32,
    pub sources: u64,
    pub lucky: u64,
    /// Half the schedule entry when that is a probability, else None.
    pub gate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwapReport {
    pub swaps: u64,
    pub violations: u64,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DegreeReport {
    pub vertices_checked: u64,
    pub max_degree: u32,
    pub violations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UPathReport {
    pub pairs_checked: u32,
    pub violations: u32,
    pub skipped: u32,
    pub disconnected_skips: u32,
    pub alt_paths_checked: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LuckyHitReport {
    pub walks: u32,
    pub hits: u32,
}

/// Address in the 3-regular tree: a word over {0, 1, 2} with no letter
/// equal to its predecessor. The empty word is the origin.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct T3Addr {
    word: Vec<u8>,
}

impl T3Addr {
    pub fn origin() -> Self {
        T3Addr { word: Vec::new() }
    }

    pub fn new(word: Vec<u8>) -> Result<Self, String> {
        for (i, &l) in word.iter().enumerate() {
            if l > 2 {
                return Err(format!("letter {l} is outside the 3-letter alphabet"));
            }
            if i > 0 && word[i - 1] == l {
                return Err("a reduced word never repeats a letter".into());
            }
        }
        Ok(T3Addr { word })
    }

    pub fn len(&self) -> usize {
        self.word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word.is_empty()
    }

    pub fn letters(&self) -> &[u8] {
        &self.word
    }

    pub fn parent(&self) -> Option<T3Addr> {
        if self.word.is_empty() {
            return None;
        }
        Some(T3Addr { word: self.word[..self.word.len() - 1].to_vec() })
    }

    /// The 2 (or, at the origin, 3) words extending this one.
    pub fn extensions(&self) -> Vec<T3Addr> {
        (0u8..3)
            .filter(|l| self.word.last() != Some(l))
            .map(|l| {
                let mut w = self.word.clone();
                w.push(l);
                T3Addr { word: w }
            })
            .collect()
    }
}

impl fmt::Display for T3Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.word.is_empty() {
            return write!(f, "-");
        }
        for l in &self.word {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Ball size in the 3-regular tree: 1 + 3 (2^r - 1).
pub fn t3_ball_size(r: u32) -> u128 {
    1 + 3 * ((1u128 << r) - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UT3Vertex {
    pub base: PVertex,
    pub word: T3Addr,
}

impl fmt::Display for UT3Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.base, self.word)
    }
}

/// The stack crossed with the 3-regular tree, word coordinates
/// materialized lazily up to `radius`. With radius 0 this is the stack
/// itself.
pub struct UT3Graph<'a> {
    u: &'a UGraph,
    radius: u32,
}

impl<'a> UT3Graph<'a> {
    pub fn new(u: &'a UGraph, radius: u32) -> Self {
        UT3Graph { u, radius }
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }
}

impl GraphOracle for UT3Graph<'_> {
    type V = UT3Vertex;

    fn neighbors(&self, v: &UT3Vertex) -> Result<Vec<UT3Vertex>, String> {
        let base = self.u.neighbors(&v.base)?;
        let mut out: Vec<UT3Vertex> = base
            .into_iter()
            .map(|b| UT3Vertex { base: b, word: v.word.clone() })
            .collect();
        if let Some(p) = v.word.parent() {
            out.push(UT3Vertex { base: v.base, word: p });
        }
        if (v.word.len() as u32) < self.radius {
            out.extend(
                v.word.extensions().into_iter().map(|w| UT3Vertex { base: v.base, word: w }),
            );
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// One radius of the product-ball comparison: the directly counted ball
/// against the per-word-length convolution bound and the loose closed
/// form 6 r 2^r |B_r|. The loose form is vacuous at r = 0, where it
/// reads 0 against a ball of 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ut3BallCheck {
    pub r: u32,
    pub product_ball: u128,
    pub term_bound: u128,
    pub loose_bound: u128,
    /// Counts split by word length each stay under their own term.
    pub per_length_ok: bool,
    pub sum_ok: bool,
    pub loose_ok: bool,
    pub contaminated: bool,
}

/// Measure balls around `(root, origin)` in the crossed graph and
/// compare them with bounds assembled from the stack's own profile.
pub fn ut3_ball_check(
    u: &UGraph,
    root: &PVertex,
    r_max: u32,
    node_cap: usize,
) -> Vec<Ut3BallCheck> {
    let profile = crate::lab::ball_profile(u, root, r_max, node_cap);
    let g = UT3Graph::new(u, r_max);
    let origin = UT3Vertex { base: *root, word: T3Addr::origin() };
    let reach = bfs_distances(&g, &origin, None, Some(r_max), node_cap);

    (0..=r_max)
        .map(|r| {
            let mut by_len: BTreeMap<u32, u128> = BTreeMap::new();
            for (v, d) in &reach.dist {
                if *d <= r {
                    *by_len.entry(v.word.len() as u32).or_default() += 1;
                }
            }
            let product_ball: u128 = by_len.values().sum();
            let term = |i: u32| -> u128 {
                let words = if i == 0 { 1 } else { 3 * (1u128 << (i - 1)) };
                words * profile.sizes[(r - i) as usize]
            };
            let term_bound: u128 = (0..=r).map(term).sum();
            let loose_bound = 6 * u128::from(r) * (1u128 << r) * profile.sizes[r as usize];
            let per_length_ok = by_len.iter().all(|(i, n)| *n <= term(*i));
            let contaminated = !profile.is_exact_to(r)
                || reach.contaminated_from.map_or(false, |c| c <= r);
            Ut3BallCheck {
                r,
                product_ball,
                term_bound,
                loose_bound,
                per_length_ok,
                sum_ok: product_ball <= term_bound,
                loose_ok: term_bound <= loose_bound,
                contaminated,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    // Small enough to build in milliseconds, rich enough to exercise
    // everything: the generous reserve fraction makes swaps plentiful,
    // the entry 50 accepts any closed component, 28 accepts exactly the
    // components the index-1 fibers see, and 23 is low enough that the
    // index-2 fibers can only reach it by stripping levels from the
    // apex fiber's cut set.
    fn small_config() -> ProductConfig {
        ProductConfig {
            fiber_depth: 3,
            depth: 10,
            levels: vec![3, 6, 9],
            overlay_eps: frac(1, 5),
            schedule: EpsSchedule::Override(vec![
                frac(1, 4),
                frac(50, 1),
                frac(28, 1),
                frac(23, 1),
            ]),
            turn_targets: vec![1, 1, 1, 0],
            max_cluster: 1 << 12,
            ..ProductConfig::default()
        }
    }

    fn small_u(seed: u64) -> UGraph {
        UGraph::build(&small_config(), &StreamKey::root(seed)).unwrap()
    }

    #[test]
    fn tbox_matches_brute_force_reachability() {
        let t = Truncation::new(4);
        let all: Vec<VertexAddr> = (0..t.vertex_count()).map(|o| t.vertex_at(o)).collect();
        for u1 in &all {
            for u2 in &all {
                let p = PVertex::new(*u1, *u2);
                // Walk downward over both coordinates: everything below
                // in the product of the two subtrees reaches p by
                // climbing back up.
                let mut seen: HashSet<PVertex> = [p].into();
                let mut frontier = vec![p];
                while let Some(q) = frontier.pop() {
                    let mut push = |r: PVertex, seen: &mut HashSet<PVertex>| {
                        if seen.insert(r) {
                            frontier.push(r);
                        }
                    };
                    if let Some(cs) = t.children(&q.first) {
                        for c in cs {
                            push(PVertex::new(c, q.second), &mut seen);
                        }
                    }
                    if let Some(cs) = t.children(&q.second) {
                        for c in cs {
                            push(PVertex::new(q.first, c), &mut seen);
                        }
                    }
                }
                assert_eq!(seen.len() as u128, tbox_size(&p), "at {p}");
            }
        }
    }

    #[test]
    fn tbox_examples() {
        let t = Truncation::new(4);
        let leaf = t.vertex(0, 0);
        assert_eq!(tbox_size(&PVertex::new(leaf, leaf)), 1);
        assert_eq!(tbox_size(&PVertex::new(t.vertex(1, 0), leaf)), 3);
        assert_eq!(tbox_size(&PVertex::new(t.vertex(2, 1), t.vertex(2, 3))), 49);
    }

    #[test]
    fn geometric_schedule_values_and_boundary() {
        let s = EpsSchedule::Geometric { d: 3 };
        assert_eq!(s.eps(0), frac(1, 12));
        assert_eq!(s.eps(1), frac(1, 48));
        assert_eq!(s.eps(5), frac(1, 12 * 1024));
        assert!(s.strictly_decreasing(10));
        // The first entry sits exactly on the knee, so the strict
        // comparison is honest about failing there.
        assert!(!s.boundary_ok(0, 3));
        assert!((1..8).all(|k| s.boundary_ok(k, 3)));
    }

    #[test]
    fn override_schedule_clamps_to_its_last_entry() {
        let s = EpsSchedule::Override(vec![frac(1, 2), frac(1, 3)]);
        assert_eq!(s.eps(0), frac(1, 2));
        assert_eq!(s.eps(1), frac(1, 3));
        assert_eq!(s.eps(17), frac(1, 3));
        assert!(!s.strictly_decreasing(2));
    }

    #[test]
    fn turnability_examples() {
        // A component of one vertex has log zero.
        assert!(!is_turnable_size(3, &frac(2, 1), 3, 1));
        // 2^3 = 8 <= 31^2 = 961.
        assert!(is_turnable_size(3, &frac(2, 1), 3, 31));
        // At the exact schedule the threshold is astronomical: tbox 3
        // against eps 1/12 needs 2^36 members.
        assert!(!is_turnable_size(3, &frac(1, 12), 3, (1 << 36) - 1));
        assert!(is_turnable_size(3, &frac(1, 12), 3, 1 << 36));
    }

    #[test]
    fn turnability_is_monotone_in_component_size() {
        let eps = frac(7, 5);
        let mut last = false;
        for n in [1u128, 2, 30, 31, 32, 1000, 1 << 20, 1 << 60] {
            let now = is_turnable_size(9, &eps, 3, n);
            assert!(now >= last, "turnability flipped off at {n}");
            last = now;
        }
    }

    #[test]
    fn small_stack_realizes_turnable_edges_below_the_apex() {
        let u = small_u(11);
        for f in u.fibers() {
            if u.t1().parent(&f.addr).is_some() {
                assert!(
                    !f.turnable.is_empty(),
                    "fiber {} realized no turnable edge",
                    f.addr
                );
            } else {
                assert!(f.turnable.is_empty());
            }
        }
    }

    #[test]
    fn thinning_commits_are_recorded_and_consistent() {
        let u = small_u(11);
        let mut committed = 0;
        let mut removals = 0;
        for f in u.fibers() {
            let ind = f.addr.generation() as usize;
            let want = u.config().turn_targets.get(ind).copied().unwrap_or(0);
            if u.t1().parent(&f.addr).is_none() {
                assert!(f.commits.is_empty());
                continue;
            }
            assert!(f.commits.len() as u32 <= want);
            committed += f.commits.len();
            for c in &f.commits {
                assert_eq!(c.edge.generation() as u64, c.level);
                assert!(f.jprime.levels().contains(&c.level));
                if let Some(h) = c.horizon {
                    assert!(h >= c.level);
                    removals += 1;
                    // The removed band is really gone from the parent.
                    let vp = u.t1().parent(&f.addr).unwrap();
                    let pj = &u.fiber(&vp).unwrap().jprime;
                    assert!(pj.levels().range(c.level..=h).next().is_none());
                }
            }
        }
        assert!(committed > 0, "the greedy never committed anything");
        // The last schedule entry is unreachable without removals, so
        // some commit must have stripped levels from the apex fiber.
        assert!(removals > 0, "no commit exercised the removal path");
        let apex = u.fiber(&u.t1().apex()).unwrap();
        assert!(apex.jprime.levels().len() < u.config().levels.len());
    }

    #[test]
    fn lucky_sources_are_turnable_and_land_on_reserved_spots() {
        let u = small_u(11);
        assert!(!u.lucky().is_empty(), "no swaps on the small stack");
        for p in u.lucky() {
            let f = u.fiber(&p.first).unwrap();
            assert!(f.turnable.contains(&p.second));
            let vp = u.t1().parent(&p.first).unwrap();
            let pf = u.fiber(&vp).unwrap();
            let cg = pf.overlay.cluster_graph(&p.second).unwrap();
            assert!(cg.is_ext(&p.second));
            // The sibling cannot hold the same cut edge, let alone swap it.
            let sib = if u.t1().children(&vp).unwrap()[0] == p.first {
                u.t1().children(&vp).unwrap()[1]
            } else {
                u.t1().children(&vp).unwrap()[0]
            };
            let sf = u.fiber(&sib).unwrap();
            assert!(!sf.jprime.is_representative(&p.second, u.t2()));
            assert!(!u.lucky().contains(&PVertex::new(sib, p.second)));
        }
    }

    #[test]
    fn swap_bookkeeping_is_clean() {
        let u = small_u(11);
        let report = u.check_swap_bookkeeping();
        assert!(report.swaps > 0);
        assert_eq!(report.violations, 0, "{:?}", report.examples);
    }

    #[test]
    fn degrees_stay_at_d_everywhere() {
        let u = small_u(11);
        let report = u.degree_sweep().unwrap();
        assert!(report.vertices_checked > 1000);
        assert_eq!(report.violations, 0);
        assert!(report.max_degree <= u.config().d);
    }

    #[test]
    fn swapped_edges_change_the_adjacency_as_promised() {
        let u = small_u(11);
        for (src, dst) in u.f_arrow() {
            let ns = u.neighbors(&src).unwrap();
            assert!(ns.contains(&dst));
            assert!(u.neighbors(&dst).unwrap().contains(&src));
        }
        for (low, high) in u.f_up() {
            assert!(!u.neighbors(&low).unwrap().contains(&high));
            // The upper endpoint may sit in an open cluster and refuse;
            // when it answers, the severed edge must be gone there too.
            if let Ok(ns) = u.neighbors(&high) {
                assert!(!ns.contains(&low));
            }
        }
    }

    #[test]
    fn path_crossings_agree_between_routes() {
        let u = small_u(11);
        let report = u.check_path_invariance(40, 3, &StreamKey::root(5), 200_000);
        assert!(report.pairs_checked >= 15, "{report:?}");
        assert!(report.alt_paths_checked > 0);
        assert_eq!(report.violations, 0, "{report:?}");
    }

    #[test]
    fn upward_walks_meet_swaps() {
        let u = small_u(11);
        let r = u.lucky_hit_fraction(4000, 5, &StreamKey::root(6));
        assert!(r.hits > 0, "no sampled walk met a swap");
        assert!(r.hits < r.walks);
    }

    #[test]
    fn sampled_hit_rate_tracks_the_exact_shadow_mass() {
        let u = small_u(11);
        for min_len in [0, 5, 10] {
            let mass = u.lucky_shadow_mass(min_len);
            assert!(mass > BigRational::zero());
            assert!(mass < BigRational::one());
            let p = mass.to_f64().unwrap();
            let walks = 4000;
            let r = u.lucky_hit_fraction(walks, min_len, &StreamKey::root(6));
            let rate = f64::from(r.hits) / f64::from(walks);
            let se = (p * (1.0 - p) / f64::from(walks)).sqrt();
            assert!(
                (rate - p).abs() <= 4.0 * se,
                "min_len {min_len}: rate {rate} vs exact {p}, se {se}"
            );
        }
    }

    #[test]
    fn lucky_stats_cover_only_probability_gates() {
        let u = small_u(11);
        let stats = u.lucky_stats();
        assert!(!stats.is_empty());
        for s in &stats {
            assert!(s.lucky <= s.sources);
            match s.gate {
                Some(g) => assert!(u.config().schedule.eps(s.ind) <= frac(2, 1) && g <= 1.0),
                None => assert!(u.config().schedule.eps(s.ind) > frac(2, 1)),
            }
        }
        assert!(stats.iter().any(|s| s.gate.is_some()));
    }

    #[test]
    fn reduced_words_and_ball_sizes() {
        assert!(T3Addr::new(vec![0, 1, 0, 2]).is_ok());
        assert!(T3Addr::new(vec![0, 0]).is_err());
        assert!(T3Addr::new(vec![3]).is_err());
        assert_eq!(t3_ball_size(0), 1);
        assert_eq!(t3_ball_size(1), 4);
        assert_eq!(t3_ball_size(3), 22);
        // Count words of length <= r directly.
        let mut frontier = vec![T3Addr::origin()];
        let mut count = 1u128;
        for _ in 0..3 {
            frontier = frontier.into_iter().flat_map(|w| w.extensions()).collect();
            count += frontier.len() as u128;
        }
        assert_eq!(count, t3_ball_size(3));
    }

    #[test]
    fn word_neighbors_are_symmetric() {
        let u = small_u(11);
        let g = UT3Graph::new(&u, 2);
        let mut rng = StreamKey::root(9).rng();
        let root = u.sample_root(&mut rng);
        let origin = UT3Vertex { base: root, word: T3Addr::origin() };
        if let Ok(ns) = g.neighbors(&origin) {
            for n in ns {
                assert!(g.neighbors(&n).unwrap().contains(&origin), "asymmetric at {n}");
            }
        }
    }

    #[test]
    fn radius_zero_product_is_the_stack_itself() {
        let u = small_u(11);
        let g = UT3Graph::new(&u, 0);
        let mut rng = StreamKey::root(10).rng();
        for _ in 0..40 {
            let p = u.sample_root(&mut rng);
            let wrapped = UT3Vertex { base: p, word: T3Addr::origin() };
            match (u.neighbors(&p), g.neighbors(&wrapped)) {
                (Ok(base), Ok(prod)) => {
                    let unwrapped: Vec<PVertex> = prod.into_iter().map(|v| v.base).collect();
                    assert_eq!(unwrapped, base);
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("refusals disagree at {p}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn product_balls_respect_the_convolution_bound() {
        let u = small_u(11);
        let mut rng = StreamKey::root(12).rng();
        let mut clean = 0;
        let mut tried = 0;
        while clean < 6 && tried < 120 {
            tried += 1;
            let root = u.sample_root(&mut rng);
            let checks = ut3_ball_check(&u, &root, 5, 400_000);
            if checks.iter().any(|c| c.contaminated) {
                continue;
            }
            clean += 1;
            for c in &checks {
                assert!(c.per_length_ok, "per-length bound failed at {root}, r = {}", c.r);
                assert!(c.sum_ok, "sum bound failed at {root}, r = {}", c.r);
                if c.r >= 1 {
                    assert!(c.loose_ok, "loose bound failed at r = {}", c.r);
                } else {
                    assert!(!c.loose_ok, "the r = 0 loose bound should be vacuous");
                }
            }
        }
        assert!(clean >= 6, "too few uncontaminated roots ({clean} of {tried} tries)");
    }

    #[test]
    fn different_seeds_move_the_swap_set() {
        let a = small_u(11);
        let b = small_u(12);
        assert_ne!(a.lucky(), b.lucky());
    }

    #[test]
    fn config_validation_refuses_nonsense() {
        let mut c = small_config();
        c.levels = vec![3, 6, 10];
        assert!(matches!(UGraph::build(&c, &StreamKey::root(1)), Err(ProductError::Config(_))));
        let mut c = small_config();
        c.schedule = EpsSchedule::Override(vec![]);
        assert!(matches!(UGraph::build(&c, &StreamKey::root(1)), Err(ProductError::Config(_))));
        let mut c = small_config();
        c.schedule = EpsSchedule::Override(vec![frac(-1, 2)]);
        assert!(matches!(UGraph::build(&c, &StreamKey::root(1)), Err(ProductError::Config(_))));
    }
}
