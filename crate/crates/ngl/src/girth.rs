//! Random near-regular graphs of prescribed girth, with the degree and
//! marking constraints the cluster rewiring step needs.
//!
//! Generation is greedy: starting from an empty graph, uniformly random
//! admissible pairs get an edge until every vertex reaches its target
//! degree. A pair is admissible when the endpoints are distinct,
//! nonadjacent, far enough apart that no short cycle closes, and
//! compatible with the marking rules below. Stalls are resolved by
//! removing a few edges and, failing that, by restarting from scratch;
//! the budget is bounded, so impossible requests fail cleanly.
//!
//! Marked vertices are kept pairwise at distance 3 or more. That makes
//! the later edge pruning safe: each marked vertex loses one incident
//! edge and no two of those edges collide. The invariant is enforced
//! incrementally through a `near` map: `near[v]` is the unique marked
//! vertex within distance one of `v`, if any, and an edge (u, v) with u
//! marked is admissible only while `near[v]` is empty or already u.

use crate::rng::StreamKey;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GirthError {
    #[error("no graph with n={n}, degree {d}, girth at least {target} found within the retry budget")]
    Unsatisfiable { n: u32, d: u32, target: u32 },
    #[error("invalid request: {0}")]
    BadConfig(String),
}

/// Generation request. `marked` vertices are kept pairwise at distance
/// at least 3; `capped` vertices aim for degree d-1 instead of d. The
/// two sets must be disjoint.
#[derive(Debug, Clone)]
pub struct GirthConfig {
    pub n: u32,
    pub d: u32,
    pub girth_target: u32,
    pub marked: BTreeSet<u32>,
    pub capped: BTreeSet<u32>,
    /// Consecutive rejected draws tolerated before edges get removed.
    pub stall_limit: u32,
    /// Edge-removal rounds tolerated before a full restart.
    pub max_backtracks: u32,
    pub max_restarts: u32,
}

impl GirthConfig {
    pub fn new(n: u32, d: u32, girth_target: u32) -> Self {
        GirthConfig {
            n,
            d,
            girth_target,
            marked: BTreeSet::new(),
            capped: BTreeSet::new(),
            stall_limit: 20_000,
            max_backtracks: 24,
            max_restarts: 40,
        }
    }

    fn validate(&self) -> Result<(), GirthError> {
        let bad = |msg: String| Err(GirthError::BadConfig(msg));
        if self.d < 3 {
            return bad(format!("degree {} is below 3", self.d));
        }
        if self.n <= self.d {
            return bad(format!("n={} leaves no room for degree {}", self.n, self.d));
        }
        if self.girth_target < 3 {
            return bad(format!("girth target {} is below 3", self.girth_target));
        }
        if let Some(&v) = self.marked.union(&self.capped).find(|&&v| v >= self.n) {
            return bad(format!("vertex {v} is out of range"));
        }
        if self.marked.intersection(&self.capped).next().is_some() {
            return bad("marked and capped sets overlap".into());
        }
        Ok(())
    }
}

/// A generated graph. Vertex indices run over 0..n; adjacency lists are
/// sorted. Exactly one vertex may sit one below its nominal degree to
/// fix parity, recorded in `exceptional`.
#[derive(Debug, Clone)]
pub struct GirthGraph {
    d: u32,
    adjacency: Vec<Vec<u32>>,
    girth: Option<u32>,
    exceptional: Option<u32>,
    marked: BTreeSet<u32>,
    capped: BTreeSet<u32>,
    pruned: Vec<(u32, u32)>,
    retries: u32,
}

impl GirthGraph {
    pub fn n(&self) -> u32 {
        self.adjacency.len() as u32
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    /// None means acyclic.
    pub fn girth(&self) -> Option<u32> {
        self.girth
    }

    pub fn exceptional(&self) -> Option<u32> {
        self.exceptional
    }

    pub fn marked(&self) -> &BTreeSet<u32> {
        &self.marked
    }

    pub fn capped(&self) -> &BTreeSet<u32> {
        &self.capped
    }

    /// Edges removed by [`prune_marked`], as (marked vertex, neighbor).
    /// Full restarts the generator burned before this graph came out.
    pub fn retries(&self) -> u32 {
        self.retries
    }

    pub fn pruned(&self) -> &[(u32, u32)] {
        &self.pruned
    }

    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.adjacency[v as usize]
    }

    pub fn degree(&self, v: u32) -> u32 {
        self.adjacency[v as usize].len() as u32
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        self.adjacency[u as usize].binary_search(&v).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        connected(&self.adjacency)
    }
}

/// Largest k with base^k <= x, for base >= 2 and x >= 1.
pub fn floor_log(base: u64, x: u128) -> u32 {
    assert!(base >= 2 && x >= 1);
    let mut k = 0;
    let mut pow = 1u128;
    while pow <= x / base as u128 {
        pow *= base as u128;
        k += 1;
    }
    k
}

/// Girth to aim for by default: log base d-1 of n, pulled back two
/// steps for headroom, floored at 3 and capped.
pub fn default_girth_target(n: u32, d: u32, cap: u32) -> u32 {
    (floor_log((d - 1) as u64, n as u128).saturating_sub(2)).clamp(3, cap)
}

/// Build a graph per `cfg`. Same key and config, same graph.
pub fn generate(cfg: &GirthConfig, key: &StreamKey) -> Result<GirthGraph, GirthError> {
    cfg.validate()?;
    let n = cfg.n as usize;
    let marked_list: Vec<u32> = cfg.marked.iter().copied().collect();

    // Parity: when the stub total is odd, one vertex gives up a stub.
    // Marked vertices already run a deficit in the finished object, so
    // the loss hides there when possible.
    let stub_total = cfg.n as u64 * cfg.d as u64 - cfg.capped.len() as u64;
    let exceptional = if stub_total % 2 == 1 {
        let mut rng = key.child("exceptional").rng();
        Some(if marked_list.is_empty() {
            loop {
                let v = rng.gen_range(0..cfg.n);
                if !cfg.capped.contains(&v) {
                    break v;
                }
            }
        } else {
            *marked_list.choose(&mut rng).expect("nonempty")
        })
    } else {
        None
    };

    let target: Vec<u32> = (0..cfg.n)
        .map(|v| cfg.d - u32::from(cfg.capped.contains(&v)) - u32::from(exceptional == Some(v)))
        .collect();
    let is_marked: Vec<bool> = (0..cfg.n).map(|v| cfg.marked.contains(&v)).collect();

    for attempt in 0..=cfg.max_restarts {
        let mut rng = key.child("attempt").child_u64(attempt as u64).rng();
        if let Some(adjacency) = try_build(cfg, &target, &is_marked, &mut rng) {
            if !connected(&adjacency) {
                continue;
            }
            let girth = compute_girth(&adjacency);
            if girth.map_or(false, |g| g < cfg.girth_target) {
                continue;
            }
            let mut adjacency = adjacency;
            for a in &mut adjacency {
                a.sort_unstable();
            }
            return Ok(GirthGraph {
                d: cfg.d,
                adjacency,
                girth,
                exceptional,
                marked: cfg.marked.clone(),
                capped: cfg.capped.clone(),
                pruned: Vec::new(),
                retries: attempt,
            });
        }
        let _ = n;
    }
    Err(GirthError::Unsatisfiable { n: cfg.n, d: cfg.d, target: cfg.girth_target })
}

// One restart's worth of greedy growth. None when the backtrack budget
// runs out.
fn try_build(
    cfg: &GirthConfig,
    target: &[u32],
    is_marked: &[bool],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec<u32>>> {
    let n = cfg.n as usize;
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::with_capacity(cfg.d as usize); n];
    let mut near: Vec<Option<u32>> = vec![None; n];
    for v in 0..n {
        if is_marked[v] {
            near[v] = Some(v as u32);
        }
    }
    let mut active: Vec<u32> = (0..cfg.n).filter(|&v| target[v as usize] > 0).collect();
    let mut bfs = BfsScratch::new(n);
    let mut backtracks = 0;

    'outer: loop {
        if active.is_empty() {
            return Some(adjacency);
        }
        if active.len() >= 2 {
            for _ in 0..cfg.stall_limit {
                let u = active[rng.gen_range(0..active.len())];
                let v = active[rng.gen_range(0..active.len())];
                if u == v || adjacency[u as usize].contains(&v) {
                    continue;
                }
                if is_marked[u as usize] && near[v as usize].map_or(false, |x| x != u) {
                    continue;
                }
                if is_marked[v as usize] && near[u as usize].map_or(false, |x| x != v) {
                    continue;
                }
                if cfg.girth_target >= 4
                    && bfs.within_distance(&adjacency, u, v, cfg.girth_target - 2)
                {
                    continue;
                }
                adjacency[u as usize].push(v);
                adjacency[v as usize].push(u);
                if is_marked[u as usize] {
                    near[v as usize] = Some(u);
                }
                if is_marked[v as usize] {
                    near[u as usize] = Some(v);
                }
                active.retain(|&w| (adjacency[w as usize].len() as u32) < target[w as usize]);
                continue 'outer;
            }
        }

        // Stalled: free capacity around the stuck vertices and at a few
        // random spots, then rebuild the derived state.
        backtracks += 1;
        if backtracks > cfg.max_backtracks {
            return None;
        }
        for v in active.clone() {
            if let Some(&w) = adjacency[v as usize].as_slice().choose(&mut *rng) {
                remove_edge(&mut adjacency, v, w);
            }
        }
        for _ in 0..4 {
            let candidates: Vec<u32> =
                (0..cfg.n).filter(|&v| !adjacency[v as usize].is_empty()).collect();
            if let Some(&v) = candidates.choose(&mut *rng) {
                let &w = adjacency[v as usize].as_slice().choose(&mut *rng).expect("nonempty");
                remove_edge(&mut adjacency, v, w);
            }
        }
        for v in 0..n {
            near[v] = if is_marked[v] { Some(v as u32) } else { None };
        }
        for v in 0..n {
            if is_marked[v] {
                for &w in &adjacency[v] {
                    debug_assert!(near[w as usize].is_none());
                    near[w as usize] = Some(v as u32);
                }
            }
        }
        active = (0..cfg.n)
            .filter(|&v| (adjacency[v as usize].len() as u32) < target[v as usize])
            .collect();
    }
}

fn remove_edge(adjacency: &mut [Vec<u32>], u: u32, v: u32) {
    let pos = adjacency[u as usize].iter().position(|&x| x == v).expect("edge exists");
    adjacency[u as usize].swap_remove(pos);
    let pos = adjacency[v as usize].iter().position(|&x| x == u).expect("edge exists");
    adjacency[v as usize].swap_remove(pos);
}

// Reusable depth-limited BFS with a visit-stamp trick so nothing gets
// cleared between queries.
struct BfsScratch {
    stamp: Vec<u32>,
    dist: Vec<u32>,
    queue: Vec<u32>,
    round: u32,
}

impl BfsScratch {
    fn new(n: usize) -> Self {
        BfsScratch { stamp: vec![0; n], dist: vec![0; n], queue: Vec::new(), round: 0 }
    }

    /// True when v lies within `limit` steps of u.
    fn within_distance(&mut self, adjacency: &[Vec<u32>], u: u32, v: u32, limit: u32) -> bool {
        self.round += 1;
        self.queue.clear();
        self.queue.push(u);
        self.stamp[u as usize] = self.round;
        self.dist[u as usize] = 0;
        let mut head = 0;
        while head < self.queue.len() {
            let x = self.queue[head];
            head += 1;
            if x == v {
                return true;
            }
            let dx = self.dist[x as usize];
            if dx == limit {
                continue;
            }
            for &y in &adjacency[x as usize] {
                if self.stamp[y as usize] != self.round {
                    self.stamp[y as usize] = self.round;
                    self.dist[y as usize] = dx + 1;
                    self.queue.push(y);
                }
            }
        }
        false
    }
}

fn connected(adjacency: &[Vec<u32>]) -> bool {
    let n = adjacency.len();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0u32];
    seen[0] = true;
    let mut count = 0;
    while let Some(v) = stack.pop() {
        count += 1;
        for &w in &adjacency[v as usize] {
            if !seen[w as usize] {
                seen[w as usize] = true;
                stack.push(w);
            }
        }
    }
    count == n
}

/// Exact girth by a breadth-first search from every vertex, pruned once
/// a depth can no longer improve the best cycle. None for forests.
///
/// From each root, a non-tree edge (x, y) closes a walk of length
/// dist(x) + dist(y) + 1, never shorter than the girth; with the root
/// on a shortest cycle the walk realizes it, so the minimum over all
/// roots is exact.
pub fn compute_girth(adjacency: &[Vec<u32>]) -> Option<u32> {
    let n = adjacency.len();
    let mut best: Option<u32> = None;
    let mut dist = vec![u32::MAX; n];
    let mut parent = vec![u32::MAX; n];
    let mut touched: Vec<u32> = Vec::new();
    let mut queue: Vec<u32> = Vec::new();

    for s in 0..n as u32 {
        queue.clear();
        queue.push(s);
        for &t in &touched {
            dist[t as usize] = u32::MAX;
        }
        touched.clear();
        dist[s as usize] = 0;
        parent[s as usize] = u32::MAX;
        touched.push(s);
        let mut head = 0;
        while head < queue.len() {
            let x = queue[head];
            head += 1;
            let dx = dist[x as usize];
            if let Some(b) = best {
                if 2 * dx + 1 >= b {
                    continue;
                }
            }
            for &y in &adjacency[x as usize] {
                if dist[y as usize] == u32::MAX {
                    dist[y as usize] = dx + 1;
                    parent[y as usize] = x;
                    touched.push(y);
                    queue.push(y);
                } else if y != parent[x as usize] {
                    let cycle = dx + dist[y as usize] + 1;
                    if best.map_or(true, |b| cycle < b) {
                        best = Some(cycle);
                    }
                }
            }
        }
    }
    best
}

/// Remove one uniformly chosen incident edge at every marked vertex, in
/// ascending marked order, each from its own named stream. Because
/// marked vertices sit pairwise at distance 3 or more, the removed
/// edges share no endpoint and the count equals the marked count.
pub fn prune_marked(g: &mut GirthGraph, key: &StreamKey) -> Vec<(u32, u32)> {
    let marked: Vec<u32> = g.marked.iter().copied().collect();
    let mut removed = Vec::with_capacity(marked.len());
    for m in marked {
        let mut rng = key.child("prune").child_u64(m as u64).rng();
        let list = &g.adjacency[m as usize];
        assert!(!list.is_empty(), "marked vertex {m} has no edge left to prune");
        let w = list[rng.gen_range(0..list.len())];
        let pos = g.adjacency[m as usize].binary_search(&w).expect("edge exists");
        g.adjacency[m as usize].remove(pos);
        let pos = g.adjacency[w as usize].binary_search(&m).expect("edge exists");
        g.adjacency[w as usize].remove(pos);
        removed.push((m, w));
    }
    g.girth = compute_girth(&g.adjacency);
    g.pruned.extend(removed.iter().copied());
    removed
}

impl crate::lab::GraphOracle for GirthGraph {
    type V = u32;
    fn neighbors(&self, v: &u32) -> Result<Vec<u32>, String> {
        if *v >= self.n() {
            return Err(format!("vertex {v} out of range (n = {})", self.n()));
        }
        Ok(GirthGraph::neighbors(self, *v).to_vec())
    }
}

/// Offspring law for the branching-process oracle: d-1 children with
/// probability 1 - eta, d-2 with probability eta.
#[derive(Debug, Clone, Copy)]
pub struct OffspringLaw {
    pub d: u32,
    pub eta_num: u64,
    pub eta_den: u64,
}

/// Monte Carlo q-quantile of the cumulative population through
/// generation r (generation 0 included, so the result is at least
/// r + 1). The quantile is the order statistic at index
/// max(ceil(q * samples), 1), counted from the smallest.
pub fn gw_percentile(
    law: &OffspringLaw,
    r: u32,
    q_num: u64,
    q_den: u64,
    samples: u32,
    key: &StreamKey,
) -> u64 {
    assert!(law.d >= 3 && law.eta_den > 0 && law.eta_num <= law.eta_den);
    assert!(q_den > 0 && q_num <= q_den);
    assert!(samples > 0 && r <= 40);
    let threshold = ((law.eta_num as u128) << 64) / law.eta_den as u128;
    let mut rng = key.child("gw").rng();
    let mut totals: Vec<u64> = (0..samples)
        .map(|_| {
            let mut z = 1u64;
            let mut total = 1u64;
            for _ in 0..r {
                let mut next = 0u64;
                for _ in 0..z {
                    let reduced = ((rng.gen::<u64>() as u128) < threshold) as u64;
                    next += (law.d - 1) as u64 - reduced;
                }
                z = next;
                total += z;
            }
            total
        })
        .collect();
    totals.sort_unstable();
    let rank = ((q_num as u128 * samples as u128 + q_den as u128 - 1) / q_den as u128).max(1);
    totals[(rank - 1) as usize]
}
