//! Sampling test for mass-transport balance.
//!
//! A transport sends nonnegative mass from each vertex to vertices in
//! its radius-rho ball, reading only that ball. Under a root law that
//! weights every vertex equally, expected mass sent equals expected
//! mass received; the test estimates both sides from samples and
//! passes when the paired difference is statistically zero.
//!
//! Masses are exact rationals and the running sums stay exact, so the
//! verdict depends only on the drawn roots, never on summation order.

use std::collections::BTreeMap;

use num::{BigRational, ToPrimitive, Zero};
use rand_chacha::ChaCha8Rng;

use crate::canopy::{Truncation, VertexAddr};
use crate::lab::profile::GraphOracle;
use crate::partition::CutSet;
use crate::rng::StreamKey;

/// The radius-rho ball around one vertex, with exact distances. The
/// only graph access a mass function gets, which keeps transports
/// local by construction.
pub struct BallView<'a, G: GraphOracle> {
    g: &'a G,
    center: G::V,
    rho: u32,
    dist: BTreeMap<G::V, u32>,
    /// Some vertex within the radius would not expand; counts are
    /// lower bounds and the sample should be rejected.
    pub contaminated: bool,
}

impl<'a, G: GraphOracle> BallView<'a, G> {
    pub fn new(g: &'a G, center: &G::V, rho: u32, node_cap: usize) -> Self {
        let mut dist = BTreeMap::new();
        dist.insert(center.clone(), 0u32);
        let mut frontier = vec![center.clone()];
        let mut contaminated = false;
        let mut r = 0;
        while !frontier.is_empty() && r < rho {
            r += 1;
            let mut next = Vec::new();
            for v in frontier {
                match g.neighbors(&v) {
                    Ok(ns) => {
                        for w in ns {
                            if dist.len() >= node_cap {
                                contaminated = true;
                                break;
                            }
                            if !dist.contains_key(&w) {
                                dist.insert(w.clone(), r);
                                next.push(w);
                            }
                        }
                    }
                    Err(_) => contaminated = true,
                }
            }
            frontier = next;
        }
        // Refusals on the final shell also poison the view: a mass
        // function may read degrees there.
        if !contaminated {
            for (v, d) in &dist {
                if *d == rho && g.neighbors(v).is_err() {
                    contaminated = true;
                    break;
                }
            }
        }
        BallView { g, center: center.clone(), rho, dist, contaminated }
    }

    pub fn center(&self) -> &G::V {
        &self.center
    }

    pub fn rho(&self) -> u32 {
        self.rho
    }

    pub fn dist(&self, v: &G::V) -> Option<u32> {
        self.dist.get(v).copied()
    }

    pub fn contains(&self, v: &G::V) -> bool {
        self.dist.contains_key(v)
    }

    /// Members in address order with their distances.
    pub fn members(&self) -> impl Iterator<Item = (&G::V, u32)> {
        self.dist.iter().map(|(v, d)| (v, *d))
    }

    /// Neighbor query, restricted to vertices strictly inside the ball
    /// so the answer never depends on anything outside it.
    pub fn neighbors(&self, v: &G::V) -> Option<Vec<G::V>> {
        match self.dist.get(v) {
            Some(d) if *d < self.rho => self.g.neighbors(v).ok(),
            _ => None,
        }
    }
}

/// A named transport: how far it reads and how much mass flows from
/// the view's center to a given vertex of the view.
pub struct TransportSpec<G: GraphOracle> {
    pub name: String,
    pub rho: u32,
    #[allow(clippy::type_complexity)]
    pub mass: Box<dyn Fn(&BallView<'_, G>, &G::V) -> BigRational + Send + Sync>,
}

impl<G: GraphOracle> TransportSpec<G> {
    pub fn new(
        name: impl Into<String>,
        rho: u32,
        mass: impl Fn(&BallView<'_, G>, &G::V) -> BigRational + Send + Sync + 'static,
    ) -> Self {
        TransportSpec { name: name.into(), rho, mass: Box::new(mass) }
    }
}

/// Unit mass to every neighbor.
pub fn neighbor_transport<G: GraphOracle>() -> TransportSpec<G> {
    TransportSpec::new("neighbor", 1, |view, y| {
        if view.dist(y) == Some(1) {
            BigRational::from_integer(1.into())
        } else {
            BigRational::zero()
        }
    })
}

/// Unit mass upward along the tree edge.
pub fn parent_transport<G>(t: Truncation) -> TransportSpec<G>
where
    G: GraphOracle<V = VertexAddr>,
{
    TransportSpec::new("parent", 1, move |view, y| {
        if t.parent(view.center()) == Some(*y) {
            BigRational::from_integer(1.into())
        } else {
            BigRational::zero()
        }
    })
}

/// Unit mass across each incident severed tree edge (both directions,
/// so the transport is symmetric).
pub fn cut_edge_transport<G>(cuts: CutSet, t: Truncation) -> TransportSpec<G>
where
    G: GraphOracle<V = VertexAddr>,
{
    TransportSpec::new("cut-edge", 1, move |view, y| {
        let x = view.center();
        let crossing = (t.parent(x) == Some(*y) && cuts.cuts_above(x, &t))
            || (t.parent(y) == Some(*x) && cuts.cuts_above(y, &t));
        if crossing {
            BigRational::from_integer(1.into())
        } else {
            BigRational::zero()
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MtpParams {
    /// Accepted samples required before the verdict is computed.
    pub samples: u32,
    /// Total draw budget, guarding against a rejection loop.
    pub max_draws: u64,
    pub node_cap: usize,
}

impl Default for MtpParams {
    fn default() -> Self {
        MtpParams { samples: 10_000, max_draws: 2_000_000, node_cap: 1 << 16 }
    }
}

#[derive(Debug, Clone)]
pub struct MtpReport {
    pub transport: String,
    pub accepted: u32,
    pub rejected: u64,
    pub mean_out: f64,
    pub mean_in: f64,
    pub mean_diff: f64,
    pub stderr: f64,
    /// |mean_diff| <= 3 stderr, with exact equality when every paired
    /// difference is zero.
    pub pass: bool,
    pub note: Option<String>,
}

/// Estimate sent and received mass under the given root sampler and
/// compare the paired difference against three standard errors.
///
/// A sample is rejected when the 2·rho ball around its root touches
/// the guard zone or refuses to expand: both sides of every pairing
/// must see exact neighborhoods, and received mass at the root reads
/// balls centered up to rho away.
pub fn mtp_test<G, R, Gd>(
    g: &G,
    mut draw_root: R,
    in_guard: Gd,
    spec: &TransportSpec<G>,
    params: &MtpParams,
    key: &StreamKey,
) -> MtpReport
where
    G: GraphOracle,
    R: FnMut(&mut ChaCha8Rng) -> G::V,
    Gd: Fn(&G::V) -> bool,
{
    let mut rng = key.child("roots").rng();
    let mut accepted = 0u32;
    let mut rejected = 0u64;
    let mut draws = 0u64;
    let mut sum_out = BigRational::zero();
    let mut sum_in = BigRational::zero();
    let mut sum_diff = BigRational::zero();
    let mut sum_diff_sq = BigRational::zero();

    while accepted < params.samples && draws < params.max_draws {
        draws += 1;
        let root = draw_root(&mut rng);
        let wide = BallView::new(g, &root, 2 * spec.rho, params.node_cap);
        if wide.contaminated || wide.members().any(|(v, _)| in_guard(v)) {
            rejected += 1;
            continue;
        }
        let view = BallView::new(g, &root, spec.rho, params.node_cap);
        let mut out = BigRational::zero();
        for (y, d) in view.members() {
            if d == 0 {
                continue;
            }
            out += (spec.mass)(&view, y);
        }
        let mut incoming = BigRational::zero();
        for (y, d) in view.members() {
            if d == 0 {
                continue;
            }
            let yview = BallView::new(g, y, spec.rho, params.node_cap);
            debug_assert!(!yview.contaminated, "rho-ball inside a clean 2 rho ball");
            incoming += (spec.mass)(&yview, &root);
        }
        let diff = &out - &incoming;
        sum_out += out;
        sum_in += incoming;
        sum_diff_sq += &diff * &diff;
        sum_diff += diff;
        accepted += 1;
    }

    let n = accepted.max(1) as f64;
    let mean_out = (sum_out / BigRational::from_integer(accepted.max(1).into()))
        .to_f64()
        .unwrap_or(f64::NAN);
    let mean_in = (sum_in / BigRational::from_integer(accepted.max(1).into()))
        .to_f64()
        .unwrap_or(f64::NAN);
    let mean_diff_exact = sum_diff.clone() / BigRational::from_integer(accepted.max(1).into());
    let mean_diff = mean_diff_exact.to_f64().unwrap_or(f64::NAN);
    // Sample variance of the paired differences.
    let var = if accepted > 1 {
        let nq = BigRational::from_integer(accepted.into());
        let centered = sum_diff_sq - (&sum_diff * &sum_diff) / &nq;
        (centered / BigRational::from_integer((accepted - 1).into()))
            .to_f64()
            .unwrap_or(f64::NAN)
            .max(0.0)
    } else {
        0.0
    };
    let stderr = (var / n).sqrt();
    let short = accepted < params.samples;
    let pass = !short
        && (sum_diff.is_zero() || mean_diff.abs() <= 3.0 * stderr);
    MtpReport {
        transport: spec.name.clone(),
        accepted,
        rejected,
        mean_out,
        mean_in,
        mean_diff,
        stderr,
        pass,
        note: short.then(|| {
            format!("only {accepted} accepted samples within {draws} draws")
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canopy::RootLaw;
    use num::One;

    fn guard_above(t: Truncation, from_generation: u32) -> impl Fn(&VertexAddr) -> bool {
        let _ = t;
        move |v: &VertexAddr| v.generation() >= from_generation
    }

    #[test]
    fn neighbor_transport_balances_on_the_canopy() {
        let t = Truncation::new(14);
        let law = RootLaw::new(t);
        let spec = neighbor_transport::<Truncation>();
        let params = MtpParams { samples: 2_000, ..Default::default() };
        let report = mtp_test(
            &t,
            |rng| law.sample(rng),
            guard_above(t, 12),
            &spec,
            &params,
            &StreamKey::root(5),
        );
        assert_eq!(report.accepted, 2_000);
        assert!(report.pass, "{report:?}");
        // Symmetric transport: every paired difference is exactly zero.
        assert_eq!(report.mean_diff, 0.0);
        assert_eq!(report.stderr, 0.0);
    }

    #[test]
    fn parent_transport_balances_under_the_root_law() {
        let t = Truncation::new(14);
        let law = RootLaw::new(t);
        let spec = parent_transport::<Truncation>(t);
        let params = MtpParams { samples: 10_000, ..Default::default() };
        let report = mtp_test(
            &t,
            |rng| law.sample(rng),
            guard_above(t, 12),
            &spec,
            &params,
            &StreamKey::root(6),
        );
        assert_eq!(report.accepted, 10_000);
        assert!(report.pass, "{report:?}");
        // Out-mass is exactly 1 below the guard; in-mass averages to 1
        // because half the vertices are leaves and the rest have two
        // children.
        assert!((report.mean_out - 1.0).abs() < 1e-12, "{}", report.mean_out);
        assert!((report.mean_in - 1.0).abs() < 0.05, "{}", report.mean_in);
    }

    #[test]
    fn leaf_only_sampler_fails_the_parent_transport() {
        let t = Truncation::new(14);
        let spec = parent_transport::<Truncation>(t);
        let params = MtpParams { samples: 5_000, ..Default::default() };
        let leaves = 1u64 << 14;
        let report = mtp_test(
            &t,
            |rng| t.vertex(0, rand::Rng::gen_range(rng, 0..leaves)),
            guard_above(t, 12),
            &spec,
            &params,
            &StreamKey::root(7),
        );
        assert_eq!(report.accepted, 5_000);
        assert!(!report.pass, "a leaf-only root law must be caught: {report:?}");
        assert!((report.mean_diff - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guard_rejections_are_counted() {
        let t = Truncation::new(6);
        let law = RootLaw::new(t);
        let spec = neighbor_transport::<Truncation>();
        let params = MtpParams { samples: 500, ..Default::default() };
        let report = mtp_test(
            &t,
            |rng| law.sample(rng),
            guard_above(t, 4),
            &spec,
            &params,
            &StreamKey::root(8),
        );
        assert_eq!(report.accepted, 500);
        assert!(report.rejected > 0, "depth-6 truncation must reject near the apex");
    }

    #[test]
    fn draw_budget_exhaustion_reports_a_note_and_fails() {
        let t = Truncation::new(6);
        let spec = neighbor_transport::<Truncation>();
        let params = MtpParams { samples: 100, max_draws: 50, node_cap: 1 << 16 };
        let report = mtp_test(
            &t,
            |_| t.apex(),
            guard_above(t, 4),
            &spec,
            &params,
            &StreamKey::root(9),
        );
        assert!(!report.pass);
        assert!(report.note.is_some());
        assert_eq!(report.accepted, 0);
        assert_eq!(report.rejected, 50);
    }

    #[test]
    fn ball_view_is_exact_and_ordered() {
        let t = Truncation::new(10);
        let v = t.vertex(3, 9);
        let view = BallView::new(&t, &v, 2, 1 << 16);
        assert!(!view.contaminated);
        assert_eq!(view.dist(&v), Some(0));
        assert_eq!(view.members().filter(|(_, d)| *d == 1).count(), 3);
        assert_eq!(view.members().filter(|(_, d)| *d == 2).count(), 6);
        let inside = view.neighbors(&t.parent(&v).unwrap());
        assert!(inside.is_some());
        let boundary_member = view
            .members()
            .find(|(_, d)| *d == 2)
            .map(|(w, _)| w.clone())
            .unwrap();
        assert!(view.neighbors(&boundary_member).is_none(), "shell reads are refused");
    }

    #[test]
    fn cut_edge_transport_balances_on_a_basic_overlay() {
        let t = Truncation::new(12);
        let overlay = crate::overlay::OverlayGraph::new(
            crate::overlay::OverlayConfig::basic(3),
            t,
            CutSet::levels([3u64, 8]),
            StreamKey::root(21),
        )
        .unwrap();
        let law = RootLaw::new(t);
        let params = MtpParams { samples: 3_000, ..Default::default() };
        for spec in [
            cut_edge_transport::<crate::overlay::OverlayGraph>(overlay.cuts().clone(), t),
            neighbor_transport(),
        ] {
            let report = mtp_test(
                &overlay,
                |rng| law.sample(rng),
                |_| false,
                &spec,
                &params,
                &StreamKey::root(22),
            );
            assert_eq!(report.accepted, 3_000, "{report:?}");
            assert!(report.pass, "{report:?}");
            // Both transports are symmetric, so the pairing is exact.
            assert_eq!(report.mean_diff, 0.0, "{report:?}");
            assert!(report.mean_out > 0.0);
        }
    }

    #[test]
    fn mass_functions_read_nothing_outside_the_ball() {
        // Two graphs agreeing within distance 2 of the probe vertex
        // but different beyond it: every built-in transport must give
        // identical masses on both.
        use std::collections::BTreeMap as Map;
        struct Fixture {
            adj: Map<u32, Vec<u32>>,
        }
        impl GraphOracle for Fixture {
            type V = u32;
            fn neighbors(&self, v: &u32) -> Result<Vec<u32>, String> {
                self.adj.get(v).cloned().ok_or_else(|| "missing".into())
            }
        }
        let path = |edges: &[(u32, u32)]| {
            let mut adj: Map<u32, Vec<u32>> = Map::new();
            for (a, b) in edges {
                adj.entry(*a).or_default().push(*b);
                adj.entry(*b).or_default().push(*a);
            }
            Fixture { adj }
        };
        let a = path(&[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let b = path(&[(0, 1), (1, 2), (2, 3), (3, 5), (5, 6), (3, 7)]);
        let spec = neighbor_transport::<Fixture>();
        let va = BallView::new(&a, &1, 1, 1 << 10);
        let vb = BallView::new(&b, &1, 1, 1 << 10);
        for y in [0u32, 2] {
            assert_eq!((spec.mass)(&va, &y), (spec.mass)(&vb, &y));
            assert!((spec.mass)(&va, &y).is_one());
        }
    }
}
