//! Calibration probe for the default stack: phase timings, per-index
//! turnable/lucky tallies against the gate, thinning outcomes, and the
//! exhaustive degree sweep.

use std::time::Instant;

use ngl::product::{ProductConfig, UGraph};
use ngl::rng::StreamKey;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let mode = std::env::args().nth(2).unwrap_or_else(|| "full".into());
    let cfg = ProductConfig::default();
    println!("seed {seed} mode {mode}");

    let t0 = Instant::now();
    let u = UGraph::build(&cfg, &StreamKey::root(seed)).expect("build");
    println!("build: {:.1?}", t0.elapsed());

    for f in u.fibers() {
        if !f.commits.is_empty() {
            println!(
                "fiber {} (ind {}): commits {:?}",
                f.addr,
                f.addr.generation(),
                f.commits
                    .iter()
                    .map(|c| (c.level, c.horizon))
                    .collect::<Vec<_>>()
            );
        }
    }
    for f in u.fibers() {
        let levels: Vec<u64> = f.jprime.levels().iter().copied().collect();
        if levels.len() != cfg.levels.len() {
            println!("fiber {} thinned to {levels:?}", f.addr);
        }
    }

    // Factor breakdown for index-0 sources: which gate does each
    // turnable edge fall at?
    if mode == "full" {
    let t1g = *u.t1();
    let t2g = *u.t2();
    let mut tally: std::collections::BTreeMap<(u32, &str), u64> = Default::default();
    let mut ext_frac: std::collections::BTreeMap<u32, (u128, u128)> = Default::default();
    for f in u.fibers() {
        if f.addr.generation() != 0 {
            continue;
        }
        let vp = t1g.parent(&f.addr).unwrap();
        let [a, b] = t1g.children(&vp).unwrap();
        let sib = if a == f.addr { b } else { a };
        let sf = u.fiber(&sib).unwrap();
        let pf = u.fiber(&vp).unwrap();
        for &x in &f.turnable {
            let blocked = sf.jprime.levels().contains(&(x.generation() as u64))
                && sf.jprime.is_representative(&x, &t2g);
            let mut top = x;
            while !pf.overlay.cuts().cuts_above(&top, &t2g) {
                match t2g.parent(&top) {
                    Some(p) => top = p,
                    None => break,
                }
            }
            let tg = top.generation();
            if top == x {
                *tally.entry((tg, "top-is-x")).or_default() += 1;
                continue;
            }
            if pf.overlay.is_open_top(&top) {
                *tally.entry((tg, "open")).or_default() += 1;
                continue;
            }
            if blocked {
                *tally.entry((tg, "sibling")).or_default() += 1;
                continue;
            }
            let cg = pf.overlay.cluster_graph(&x).unwrap();
            let e = ext_frac.entry(tg).or_default();
            e.0 += cg.ext_addrs().len() as u128;
            e.1 += cg.members.len() as u128;
            let kind = cg.cluster_type();
            let hit = cg.is_ext(&x);
            let label: &str = match (kind, hit) {
                (ngl::overlay::ClusterType::Path, _) => "path",
                (_, true) => "ext-hit",
                (_, false) => "exp-miss",
            };
            *tally.entry((tg, label)).or_default() += 1;
        }
    }
    for ((tg, label), n) in &tally {
        println!("  top@{tg} {label}: {n}");
    }
    for (tg, (es, ms)) in &ext_frac {
        println!("  top@{tg} mean ext share {:.5}", *es as f64 / *ms as f64);
    }
    }

    for s in u.lucky_stats() {
        let rate = s.lucky as f64 / s.sources.max(1) as f64;
        let se = (rate * (1.0 - rate) / s.sources.max(1) as f64).sqrt();
        println!(
            "ind {}: sources {}, lucky {}, rate {:.5} +- {:.5}, gate {:?}",
            s.ind, s.sources, s.lucky, rate, se, s.gate
        );
    }
    println!("lucky total {}", u.lucky().len());

    if mode == "full" {
        let t1 = Instant::now();
        let swaps = u.check_swap_bookkeeping();
        println!(
            "swap bookkeeping: {} swaps, {} violations ({:.1?})",
            swaps.swaps,
            swaps.violations,
            t1.elapsed()
        );

        let t2 = Instant::now();
        let deg = u.degree_sweep().expect("sweep");
        println!(
            "degree sweep: {} vertices, max {}, {} violations ({:.1?})",
            deg.vertices_checked,
            deg.max_degree,
            deg.violations,
            t2.elapsed()
        );
    }

    if let Some(n) = mode.strip_prefix("paths:").and_then(|s| s.parse::<u32>().ok()) {
        let t3 = Instant::now();
        let paths = u.check_path_invariance(n, 1, &StreamKey::root(seed ^ 0x9e37), 2_000_000);
        println!("paths: {paths:?} ({:.1?})", t3.elapsed());
    } else if mode == "full" {
        let t3 = Instant::now();
        let paths = u.check_path_invariance(100, 2, &StreamKey::root(seed ^ 0x9e37), 2_000_000);
        println!("paths: {paths:?} ({:.1?})", t3.elapsed());
    }

    let warnings = u.warnings();
    println!("warnings: {}", warnings.len());
    for w in warnings.iter().take(5) {
        println!("  {w}");
    }
}
