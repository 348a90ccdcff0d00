//! One-command experiment runs: build a configured instance, audit it,
//! and leave an output directory that a rerun of the same config must
//! reproduce byte for byte.
//!
//! The manifest hashes every data file it writes; wall-clock timings
//! live in the manifest too but are deliberately kept out of the
//! hashed files, so determinism can be asserted as plain map equality.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use num::{BigRational, ToPrimitive};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canopy::{RootLaw, Truncation, VertexAddr, MAX_DEPTH};
use crate::lab::config::ConfigMap;
use crate::lab::growth::{growth_estimates, sig12, GrowthProfile};
use crate::lab::mtp::{cut_edge_transport, mtp_test, neighbor_transport, MtpParams, MtpReport};
use crate::lab::profile::{ball_profile, BallProfile, GraphOracle};
use crate::overlay::{ClusterKindInfo, OverlayConfig, OverlayError, OverlayGraph};
use crate::partition::{cluster_of, matching_ok, out_fraction_ok, select_j, CutSet, IndexSequence};
use crate::product::{ut3_ball_check, PVertex, ProductConfig, T3Addr, UGraph, UT3Graph, UT3Vertex};
use crate::rng::StreamKey;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] crate::lab::config::ConfigError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("build failed: {0}")]
    Build(String),
    #[error("cannot write {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Load { path: String, reason: String },
}

/// The full key table with its defaults. Every key can be overridden
/// by config file, `NGL_*` environment variable, or CLI flag; keys
/// that do not apply to the chosen mode are echoed but ignored.
pub fn default_config() -> ConfigMap {
    ConfigMap::new(&[
        // what to build
        ("mode", "I"),
        ("d", "3"),
        ("levels", "3,8,14"),
        ("depth", "15"),
        ("seed", "7"),
        // selection (mode J)
        ("epsilon", "1/24"),
        ("k0", "-1"),
        ("class_len", "25"),
        // overlay knobs
        ("girth_cap", "10"),
        ("max_cluster", "2097152"),
        ("guard", "auto"),
        // check suite
        ("checks", "auto"),
        ("pairs", "300"),
        ("alt_tries", "2"),
        ("roots", "6"),
        ("r_max", "12"),
        ("node_cap", "4000000"),
        ("mtp_samples", "10000"),
        ("witness_count", "4"),
        ("witness_m", "1"),
        ("witness_c", "1/2"),
        ("edges", "auto"),
        // product stack (modes U and UT3)
        ("fiber_depth", "4"),
        ("select_eps", "1/2"),
        ("overlay_eps", "1/13"),
        ("eps_schedule", "override:29/1000,50,28,20,1/1000"),
        ("turn_targets", "1,1,2,0,0"),
        ("walks", "2000"),
        ("ut3_radius", "6"),
        ("ut3_roots", "12"),
    ])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    /// "pass", "fail" or "skip".
    pub status: String,
    pub detail: String,
}

impl CheckRecord {
    fn pass(name: &str, detail: String) -> Self {
        CheckRecord { name: name.into(), status: "pass".into(), detail }
    }
    fn fail(name: &str, detail: String) -> Self {
        CheckRecord { name: name.into(), status: "fail".into(), detail }
    }
    fn skip(name: &str, detail: String) -> Self {
        CheckRecord { name: name.into(), status: "skip".into(), detail }
    }
    fn gated(name: &str, ok: bool, detail: String) -> Self {
        if ok {
            Self::pass(name, detail)
        } else {
            Self::fail(name, detail)
        }
    }
}

/// Per-generation luck census of a product build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndSummary {
    pub ind: u32,
    pub turnable: u64,
    pub lucky: u64,
    /// Expected luck rate among turnable vertices, when meaningful.
    pub gate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductSummary {
    pub per_ind: Vec<IndSummary>,
    pub lucky_total: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub mode: String,
    pub seed: u64,
    /// Final value of every key, after file/env/flag layering.
    pub config: BTreeMap<String, String>,
    /// SHA-256 of each data file written next to the manifest.
    pub outputs: BTreeMap<String, String>,
    pub checks: Vec<CheckRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<ProductSummary>,
    pub warnings: Vec<String>,
    /// Not covered by any hash: the one field a rerun may change.
    pub timings_ms: BTreeMap<String, u64>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn failed(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| c.status == "fail").collect()
    }
}

/// Accumulates rows while checks run; written out once at the end.
struct Run {
    checks: Vec<CheckRecord>,
    /// (root, r) -> (ball, exponent, contaminated). Keyed so a root
    /// profiled by two checks yields one row per radius.
    profiles: BTreeMap<(String, u32), (u128, Option<f64>, bool)>,
    edges: Option<Vec<String>>,
    clusters: Option<String>,
    product: Option<ProductSummary>,
    warnings: Vec<String>,
    timings: BTreeMap<String, u64>,
}

impl Run {
    fn new() -> Self {
        Run {
            checks: Vec::new(),
            profiles: BTreeMap::new(),
            edges: None,
            clusters: None,
            product: None,
            warnings: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    fn add_profile(&mut self, root: &str, p: &BallProfile) {
        for (r, size) in p.sizes.iter().enumerate() {
            let r = r as u32;
            let exponent =
                (r > 0 && *size > 0).then(|| (*size as f64).powf(1.0 / f64::from(r)));
            let contaminated = p.contaminated_from.map_or(false, |c| r >= c);
            self.profiles.insert((root.to_string(), r), (*size, exponent, contaminated));
        }
    }

    fn stamp(&mut self, name: &str, started: Instant, rec: CheckRecord) {
        self.timings.insert(name.to_string(), started.elapsed().as_millis() as u64);
        self.checks.push(rec);
    }

    fn stamp_many(&mut self, name: &str, started: Instant, recs: Vec<CheckRecord>) {
        self.timings.insert(name.to_string(), started.elapsed().as_millis() as u64);
        self.checks.extend(recs);
    }
}

const CHECK_ORDER: [&str; 7] =
    ["degrees", "girths", "jconditions", "lemma3", "witnesses", "profiles", "mtp"];

/// The checks to run, in fixed execution order. "auto" expands to the
/// whole suite minus the entries that make no sense for the mode;
/// "none" builds and exports without auditing anything.
fn check_list(cfg: &ConfigMap, mode: &str) -> Result<Vec<String>, ExperimentError> {
    let raw = cfg.get("checks").trim().to_string();
    let wanted: BTreeSet<String> = match raw.as_str() {
        "none" => BTreeSet::new(),
        "auto" => {
            let skip: &[&str] = match mode {
                // witness thresholds are calibrated for the basic
                // variant; on the marked one they are opt-in.
                "J" => &["witnesses"],
                _ => &["jconditions"],
            };
            CHECK_ORDER
                .iter()
                .filter(|n| !skip.contains(*n))
                .map(|n| n.to_string())
                .collect()
        }
        _ => {
            let mut set = BTreeSet::new();
            for part in raw.split(',') {
                let part = part.trim();
                if !CHECK_ORDER.contains(&part) {
                    return Err(ExperimentError::Invalid(format!(
                        "unknown check {part:?}; known: {}",
                        CHECK_ORDER.join(", ")
                    )));
                }
                set.insert(part.to_string());
            }
            set
        }
    };
    Ok(CHECK_ORDER.iter().filter(|n| wanted.contains(**n)).map(|n| n.to_string()).collect())
}

fn parse_guard(cfg: &ConfigMap) -> Result<Option<u32>, ExperimentError> {
    let raw = cfg.get("guard");
    if raw == "auto" {
        return Ok(None);
    }
    raw.parse::<u32>().map(Some).map_err(|_| {
        ExperimentError::Invalid(format!("guard must be \"auto\" or a generation, got {raw:?}"))
    })
}

/// Build the configured graph, run the configured checks, write
/// `manifest.json`, `profiles.csv`, `checks.csv` and (where enabled)
/// `edges.txt` into `out_dir`. Check failures are recorded, not
/// returned as errors; only config and build problems abort.
pub fn run_experiment(cfg: &ConfigMap, out_dir: &Path) -> Result<ExperimentManifest, ExperimentError> {
    let mode = cfg.get("mode").to_string();
    let seed = cfg.get_u64("seed")?;
    let depth = cfg.get_u32("depth")?;
    if depth == 0 || depth > MAX_DEPTH {
        return Err(ExperimentError::Invalid(format!(
            "depth must be in 1..={MAX_DEPTH}, got {depth}"
        )));
    }
    let key = StreamKey::root(seed);
    let checks = check_list(cfg, &mode)?;

    let mut run = Run::new();
    match mode.as_str() {
        "I" | "J" => run_overlay(cfg, &mode, &key, &checks, &mut run)?,
        "U" => run_product(cfg, &key, &checks, &mut run)?,
        "UT3" => run_ut3(cfg, &key, &checks, &mut run)?,
        other => {
            return Err(ExperimentError::Invalid(format!(
                "mode must be I, J, U or UT3, got {other:?}"
            )))
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| ExperimentError::Io {
        path: out_dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let d = cfg.get_u32("d")?;
    let mut outputs = BTreeMap::new();
    write_file(out_dir, "profiles.csv", profiles_csv(&run, d).as_bytes(), &mut outputs)?;
    write_file(out_dir, "checks.csv", checks_csv(&run.checks).as_bytes(), &mut outputs)?;
    if let Some(clusters) = &run.clusters {
        write_file(out_dir, "clusters.csv", clusters.as_bytes(), &mut outputs)?;
    }
    if let Some(edges) = &run.edges {
        let mut body = edges.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        write_file(out_dir, "edges.txt", body.as_bytes(), &mut outputs)?;
    }

    let manifest = ExperimentManifest {
        mode,
        seed,
        config: cfg.echo(),
        outputs,
        checks: run.checks,
        product: run.product,
        warnings: run.warnings,
        timings_ms: run.timings,
    };
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, body).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(manifest)
}

// ---------------------------------------------------------------- I/J

fn run_overlay(
    cfg: &ConfigMap,
    mode: &str,
    key: &StreamKey,
    checks: &[String],
    run: &mut Run,
) -> Result<(), ExperimentError> {
    let d = cfg.get_u32("d")?;
    let depth = cfg.get_u32("depth")?;
    let levels = cfg.get_u64_list("levels")?;
    if levels.is_empty() {
        return Err(ExperimentError::Invalid("levels must name at least one cut".into()));
    }
    let node_cap = cfg.get_usize("node_cap")?;

    let started = Instant::now();
    let t = Truncation::new(depth);
    let (cuts, eps) = match mode {
        "I" => (CutSet::levels(levels.iter().copied()), None),
        _ => {
            let eps = cfg.get_rational("epsilon")?;
            let knee = BigRational::new(
                1.into(),
                (i64::from(d) * i64::from(d - 1) * i64::from(d - 1)).into(),
            );
            if eps >= knee {
                return Err(ExperimentError::Invalid(format!(
                    "epsilon {eps} is not below 1/(d(d-1)^2) = {knee}"
                )));
            }
            let seq = IndexSequence::new(levels, d).map_err(build_err)?;
            let (sel, warns) = select_j(
                &seq,
                cfg.get_i64("k0")?,
                cfg.get_u64("class_len")?,
                &eps,
                &key.child("select"),
                &t,
            )
            .map_err(build_err)?;
            run.warnings.extend(warns);
            (CutSet::Selected(sel), Some(eps))
        }
    };
    let mut ocfg = match mode {
        "I" => OverlayConfig::basic(d),
        _ => OverlayConfig::marked(d, eps.clone().expect("mode J fixes epsilon")),
    };
    ocfg.girth_cap = cfg.get_u32("girth_cap")?;
    ocfg.max_cluster = cfg.get_usize("max_cluster")?;
    ocfg.guard = parse_guard(cfg)?;
    let g = OverlayGraph::new(ocfg, t, cuts.clone(), key.child("overlay")).map_err(build_err)?;
    run.timings.insert("build".into(), started.elapsed().as_millis() as u64);

    let t0 = Instant::now();
    let (inventory, skipped) = cluster_inventory(&g);
    run.warnings.extend(skipped);
    run.clusters = Some(inventory);
    run.timings.insert("inventory".into(), t0.elapsed().as_millis() as u64);

    let degree_cap = if mode == "J" { d } else { d + 2 };
    for name in checks {
        let t0 = Instant::now();
        match name.as_str() {
            "degrees" => {
                let rec = check_overlay_degrees(&g, degree_cap);
                run.stamp(name, t0, rec);
            }
            "girths" => {
                let rec = check_overlay_girths(&g);
                run.stamp(name, t0, rec);
            }
            "jconditions" => {
                let rec = if mode == "J" {
                    check_j_conditions(&g, eps.as_ref().expect("mode J fixes epsilon"))
                } else {
                    CheckRecord::skip(name, "nothing selected in this mode".into())
                };
                run.stamp(name, t0, rec);
            }
            "lemma3" => {
                let pairs = cfg.get_u32("pairs")?;
                let rep = g.check_path_cut_invariance(
                    pairs,
                    cfg.get_u32("alt_tries")?,
                    &key.child("lemma3"),
                    node_cap,
                );
                let ok = rep.violations == 0 && rep.pairs_checked == pairs;
                let rec = CheckRecord::gated(
                    name,
                    ok,
                    format!(
                        "{} pairs, {} violations, {} skipped, {} alternative paths",
                        rep.pairs_checked, rep.violations, rep.skipped, rep.alt_paths_checked
                    ),
                );
                run.stamp(name, t0, rec);
            }
            "witnesses" => {
                let rec = check_overlay_witnesses(cfg, &g, key, run)?;
                run.stamp(name, t0, rec);
            }
            "profiles" => {
                let rec = check_profiles(cfg, &g, key, run, |v| v.to_string(), |law, rng| {
                    law.sample(rng)
                })?;
                run.stamp(name, t0, rec);
            }
            "mtp" => {
                let recs = check_overlay_mtp(cfg, &g, &cuts, key)?;
                run.stamp_many(name, t0, recs);
            }
            _ => unreachable!("check_list validates names"),
        }
    }

    let edges_on = match cfg.get("edges") {
        "auto" | "true" => true,
        _ => false,
    };
    if edges_on {
        let t0 = Instant::now();
        run.edges = Some(export_overlay_edges(&g));
        run.timings.insert("edges".into(), t0.elapsed().as_millis() as u64);
    }
    run.warnings.extend(g.warnings());
    Ok(())
}

fn check_overlay_degrees(g: &OverlayGraph, cap: u32) -> CheckRecord {
    let t = g.truncation();
    let mut max = 0u32;
    let mut checked = 0u64;
    let mut skipped = 0u64;
    let mut violations = 0u64;
    for ord in 0..t.vertex_count() {
        let v = t.vertex_at(ord);
        match g.adjacency(&v) {
            Err(_) => skipped += 1,
            Ok(ns) => {
                checked += 1;
                let deg = ns.len() as u32;
                max = max.max(deg);
                if deg > cap {
                    violations += 1;
                }
            }
        }
    }
    CheckRecord::gated(
        "degrees",
        violations == 0,
        format!(
            "max degree {max} over {checked} vertices (cap {cap}); {skipped} in open clusters"
        ),
    )
}

fn check_overlay_girths(g: &OverlayGraph) -> CheckRecord {
    let mut exp = 0u64;
    let mut paths = 0u64;
    let mut fallbacks = 0u64;
    let mut open = 0u64;
    let mut acyclic = 0u64;
    let mut achieved: BTreeMap<u32, u64> = BTreeMap::new();
    let mut bad = Vec::new();
    for top in g.cluster_tops() {
        if g.is_open_top(&top) {
            open += 1;
            continue;
        }
        let cg = match g.cluster_graph(&top) {
            Ok(cg) => cg,
            Err(e) => {
                bad.push(format!("{top}: {e}"));
                continue;
            }
        };
        match &cg.kind {
            ClusterKindInfo::Path { fallback } => {
                paths += 1;
                if *fallback {
                    fallbacks += 1;
                }
            }
            ClusterKindInfo::Exp { girth, girth_target, .. } => {
                exp += 1;
                match girth {
                    None => acyclic += 1, // pruning can empty out the cycles
                    Some(gv) => {
                        *achieved.entry(*gv).or_default() += 1;
                        if gv < girth_target {
                            bad.push(format!("{top}: girth {gv} below target {girth_target}"));
                        }
                    }
                }
            }
        }
    }
    let histogram = if achieved.is_empty() {
        "-".to_string()
    } else {
        achieved.iter().map(|(g, n)| format!("{g}:{n}")).collect::<Vec<_>>().join(" ")
    };
    CheckRecord::gated(
        "girths",
        bad.is_empty(),
        format!(
            "{exp} expander interiors (girths {histogram}, {acyclic} acyclic), {paths} paths \
             ({fallbacks} fallbacks), {open} open; {}",
            if bad.is_empty() { "all at target".to_string() } else { bad.join("; ") }
        ),
    )
}

/// Audits the selected construction cluster by cluster: the matching
/// and boundary-fraction conditions, marked spacing before pruning,
/// and the exact pruning count.
fn check_j_conditions(g: &OverlayGraph, eps: &BigRational) -> CheckRecord {
    let t = g.truncation();
    let cuts = g.cuts();
    let mut audited = 0u64;
    let mut bad = Vec::new();
    for top in g.cluster_tops() {
        if g.is_open_top(&top) {
            continue;
        }
        audited += 1;
        let cluster = match cluster_of(&top, cuts, t, g.config().max_cluster) {
            Ok(c) => c,
            Err(e) => {
                bad.push(format!("{top}: {e}"));
                continue;
            }
        };
        if !matching_ok(&cluster, cuts, t) {
            bad.push(format!("{top}: a member touches two severed edges"));
        }
        if !out_fraction_ok(&cluster, eps) {
            bad.push(format!("{top}: boundary exceeds eps/2 of the cluster"));
        }
        let cg = match g.cluster_graph(&top) {
            Ok(cg) => cg,
            Err(e) => {
                bad.push(format!("{top}: {e}"));
                continue;
            }
        };
        if let ClusterKindInfo::Exp { ext, pruned, .. } = &cg.kind {
            let marked: BTreeSet<u32> =
                cg.out.iter().chain(ext.iter()).copied().collect();
            let want = marked.len();
            if pruned.len() != want {
                bad.push(format!(
                    "{top}: {} edges pruned for {want} marked members",
                    pruned.len()
                ));
            }
            // Rebuild the interior as it stood before pruning and
            // check the marked set is 3-separated there.
            let n = cg.size();
            let mut adj: Vec<Vec<u32>> =
                (0..n).map(|i| cg.interior_neighbors(i as u32).to_vec()).collect();
            for (a, b) in pruned {
                adj[*a as usize].push(*b);
                adj[*b as usize].push(*a);
            }
            for &m in &marked {
                let mut seen = BTreeSet::from([m]);
                let mut frontier = vec![m];
                for _ in 0..2 {
                    let mut next = Vec::new();
                    for x in frontier.drain(..) {
                        for &y in &adj[x as usize] {
                            if seen.insert(y) {
                                next.push(y);
                            }
                        }
                    }
                    frontier = next;
                }
                seen.remove(&m);
                if let Some(other) = seen.iter().find(|x| marked.contains(x)) {
                    bad.push(format!(
                        "{top}: marked members {m} and {other} within distance 2 before pruning"
                    ));
                    break;
                }
            }
        }
    }
    CheckRecord::gated(
        "jconditions",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{audited} closed clusters audited")
        } else {
            bad.join("; ")
        },
    )
}

fn check_overlay_witnesses(
    cfg: &ConfigMap,
    g: &OverlayGraph,
    key: &StreamKey,
    run: &mut Run,
) -> Result<CheckRecord, ExperimentError> {
    let count = cfg.get_u32("witness_count")?;
    let ms = cfg.get_u32_list("witness_m")?;
    let c = cfg.get_rational("witness_c")?;
    let node_cap = cfg.get_usize("node_cap")?;
    let law = RootLaw::new(*g.truncation());
    let mut rng = key.child("witness").rng();
    let mut ok = 0u64;
    let mut skipped = 0u64;
    let mut contaminated = 0u64;
    let mut bad = Vec::new();
    for _ in 0..count {
        let origin = law.sample(&mut rng);
        match g.witness_upper(&origin, 0, None, node_cap) {
            Ok(w) if w.contaminated => contaminated += 1,
            Ok(w) => {
                if w.ok {
                    ok += 1;
                } else {
                    bad.push(format!(
                        "upper witness from {origin}: ball {} under threshold {} at radius {}",
                        w.ball, w.threshold, w.radius
                    ));
                }
            }
            Err(OverlayError::NoWitnessTarget { .. } | OverlayError::Measurement { .. }) => {
                skipped += 1
            }
            Err(e) => bad.push(format!("upper witness from {origin}: {e}")),
        }
        for m in &ms {
            match g.witness_lower(&origin, *m, &c, node_cap) {
                Ok(w) if w.contaminated => contaminated += 1,
                Ok(w) => {
                    if w.distance_ok && w.ball_ok {
                        ok += 1;
                        let p = ball_profile(g, &origin, w.distance, node_cap);
                        run.add_profile(&origin.to_string(), &p);
                    } else {
                        bad.push(format!(
                            "lower witness from {origin} (m = {m}): distance {} ball {} \
                             against cluster size {}",
                            w.distance, w.ball, w.cluster_size
                        ));
                    }
                }
                Err(OverlayError::NoWitnessTarget { .. } | OverlayError::Measurement { .. }) => {
                    skipped += 1
                }
                Err(e) => bad.push(format!("lower witness from {origin} (m = {m}): {e}")),
            }
        }
    }
    let detail = if bad.is_empty() {
        format!("{ok} witnesses checked, {skipped} skipped, {contaminated} contaminated")
    } else {
        bad.join("; ")
    };
    Ok(CheckRecord::gated("witnesses", bad.is_empty() && ok > 0, detail))
}

fn check_profiles<G, L, S>(
    cfg: &ConfigMap,
    g: &G,
    key: &StreamKey,
    run: &mut Run,
    label: L,
    mut sample: S,
) -> Result<CheckRecord, ExperimentError>
where
    G: GraphOracle,
    L: Fn(&G::V) -> String,
    S: FnMut(&RootLaw, &mut rand_chacha::ChaCha8Rng) -> G::V,
{
    let roots = cfg.get_u32("roots")?;
    let r_max = cfg.get_u32("r_max")?;
    if r_max == 0 {
        return Err(ExperimentError::Invalid("r_max must be at least 1".into()));
    }
    let node_cap = cfg.get_usize("node_cap")?;
    let law = RootLaw::new(Truncation::new(cfg.get_u32("depth")?));
    let mut rng = key.child("profiles").rng();
    let mut gps = Vec::new();
    for _ in 0..roots {
        let root = sample(&law, &mut rng);
        let p = ball_profile(g, &root, r_max, node_cap);
        let name = label(&root);
        run.add_profile(&name, &p);
        gps.push(GrowthProfile::new(name, &p));
    }
    let rec = match growth_estimates(&gps, 1..=r_max) {
        Ok(est) => CheckRecord::pass(
            "profiles",
            format!(
                "upper {} at ({}, r = {}) over {} roots",
                sig12(est.upper),
                est.upper_at.0,
                est.upper_at.1,
                roots
            ),
        ),
        Err(e) => CheckRecord::fail("profiles", e.to_string()),
    };
    Ok(rec)
}

fn mtp_record(name: &str, rep: &MtpReport) -> CheckRecord {
    let mut detail = format!(
        "{} accepted, {} rejected, mean diff {} against stderr {}",
        rep.accepted,
        rep.rejected,
        sig12(rep.mean_diff),
        sig12(rep.stderr)
    );
    if let Some(note) = &rep.note {
        detail.push_str("; ");
        detail.push_str(note);
    }
    CheckRecord::gated(name, rep.pass, detail)
}

fn check_overlay_mtp(
    cfg: &ConfigMap,
    g: &OverlayGraph,
    cuts: &CutSet,
    key: &StreamKey,
) -> Result<Vec<CheckRecord>, ExperimentError> {
    let samples = cfg.get_u32("mtp_samples")?;
    let params = MtpParams {
        samples,
        max_draws: u64::from(samples) * 80,
        ..MtpParams::default()
    };
    let t = *g.truncation();
    let law = RootLaw::new(t);
    let mut recs = Vec::new();
    for (suffix, spec) in [
        ("cut-edge", cut_edge_transport(cuts.clone(), t)),
        ("neighbor", neighbor_transport()),
    ] {
        let rep = mtp_test(
            g,
            |rng| law.sample(rng),
            |_| false,
            &spec,
            &params,
            &key.child("mtp").child(suffix),
        );
        recs.push(mtp_record(&format!("mtp:{suffix}"), &rep));
    }
    Ok(recs)
}

/// One row per cluster, open stump included, in address order.
fn cluster_inventory(g: &OverlayGraph) -> (String, Vec<String>) {
    let t = g.truncation();
    let cap = usize::try_from(t.vertex_count()).unwrap_or(usize::MAX);
    let mut out = String::from("id,band,size,boundary_count,open_flag\n");
    let mut warnings = Vec::new();
    for top in g.cluster_tops() {
        match cluster_of(&top, g.cuts(), t, cap) {
            Ok(c) => out.push_str(&format!(
                "{top},{},{},{},{}\n",
                top.generation(),
                c.members.len(),
                c.boundary.len(),
                c.open
            )),
            Err(e) => warnings.push(format!("inventory dropped {top}: {e}")),
        }
    }
    (out, warnings)
}

/// Every edge with at least one queryable endpoint, normalized and
/// sorted. Members of open clusters refuse adjacency, so their edges
/// appear only from the closed side.
fn export_overlay_edges(g: &OverlayGraph) -> Vec<String> {
    let t = g.truncation();
    let mut set: BTreeSet<(VertexAddr, VertexAddr)> = BTreeSet::new();
    for ord in 0..t.vertex_count() {
        let v = t.vertex_at(ord);
        let Ok(ns) = g.adjacency(&v) else { continue };
        for w in ns {
            set.insert(if v <= w { (v, w) } else { (w, v) });
        }
    }
    set.into_iter().map(|(a, b)| format!("{a} {b}")).collect()
}

// ----------------------------------------------------------------- U

fn product_config(cfg: &ConfigMap) -> Result<ProductConfig, ExperimentError> {
    let d = cfg.get_u32("d")?;
    Ok(ProductConfig {
        d,
        fiber_depth: cfg.get_u32("fiber_depth")?,
        depth: cfg.get_u32("depth")?,
        levels: cfg.get_u64_list("levels")?,
        class_len: cfg.get_u64("class_len")?,
        select_eps: cfg.get_rational("select_eps")?,
        start_after: cfg.get_i64("k0")?,
        overlay_eps: cfg.get_rational("overlay_eps")?,
        schedule: cfg.get_schedule("eps_schedule", d)?,
        turn_targets: cfg.get_u32_list("turn_targets")?,
        girth_cap: cfg.get_u32("girth_cap")?,
        max_cluster: cfg.get_usize("max_cluster")?,
        guard: parse_guard(cfg)?,
    })
}

fn product_summary(u: &UGraph) -> ProductSummary {
    ProductSummary {
        per_ind: u
            .lucky_stats()
            .into_iter()
            .map(|s| IndSummary { ind: s.ind, turnable: s.sources, lucky: s.lucky, gate: s.gate })
            .collect(),
        lucky_total: u.lucky().len() as u64,
    }
}

fn build_product(cfg: &ConfigMap, key: &StreamKey, run: &mut Run) -> Result<UGraph, ExperimentError> {
    let started = Instant::now();
    let pcfg = product_config(cfg)?;
    let u = UGraph::build(&pcfg, &key.child("product")).map_err(build_err)?;
    run.timings.insert("build".into(), started.elapsed().as_millis() as u64);
    run.warnings.extend(u.warnings());
    run.product = Some(product_summary(&u));
    Ok(u)
}

/// Luck rates per generation against their scheduled expectation,
/// judged at four binomial standard errors.
fn check_luck_gate(u: &UGraph) -> CheckRecord {
    let mut worst: Option<(u32, f64)> = None;
    let mut bad = Vec::new();
    for s in u.lucky_stats() {
        let (Some(gate), true) = (s.gate, s.sources > 0) else { continue };
        let rate = s.lucky as f64 / s.sources as f64;
        let se = (gate * (1.0 - gate) / s.sources as f64).sqrt();
        let z = if se > 0.0 { (rate - gate).abs() / se } else { 0.0 };
        if worst.map_or(true, |(_, w)| z > w) {
            worst = Some((s.ind, z));
        }
        if z > 4.0 {
            bad.push(format!(
                "ind {}: rate {} against {} is {} standard errors",
                s.ind,
                sig12(rate),
                sig12(gate),
                sig12(z)
            ));
        }
    }
    let detail = match (bad.is_empty(), worst) {
        (true, Some((ind, z))) => {
            format!("all rates within 4 standard errors; worst ind {ind} at {}", sig12(z))
        }
        (true, None) => "no generation carries a meaningful gate".to_string(),
        (false, _) => bad.join("; "),
    };
    CheckRecord::gated("witnesses:gate", bad.is_empty(), detail)
}

/// Sampled lucky-hit rate against the exact shadow mass, for upward
/// chains starting at generation >= depth / 2. The build knows the
/// true probability, so the pass line is a plain binomial tolerance
/// rather than a bare hits > 0, which would flake on configurations
/// where luck is sparse.
fn check_lucky_hits(
    cfg: &ConfigMap,
    u: &UGraph,
    key: &StreamKey,
) -> Result<CheckRecord, ExperimentError> {
    let walks = cfg.get_u32("walks")?;
    let horizon = cfg.get_u32("depth")? / 2;
    let mass = u.lucky_shadow_mass(horizon).to_f64().unwrap_or(0.0);
    let hits = u.lucky_hit_fraction(walks, horizon, &key.child("hits"));
    let rate = f64::from(hits.hits) / f64::from(hits.walks.max(1));
    let se = (mass * (1.0 - mass) / f64::from(walks.max(1))).sqrt();
    let ok = (rate - mass).abs() <= 4.0 * se;
    Ok(CheckRecord::gated(
        "witnesses:hits",
        ok,
        format!(
            "{} of {} chains of length >= {} hit luck; exact mass {}",
            hits.hits,
            hits.walks,
            horizon,
            sig12(mass)
        ),
    ))
}

fn run_product(
    cfg: &ConfigMap,
    key: &StreamKey,
    checks: &[String],
    run: &mut Run,
) -> Result<(), ExperimentError> {
    let u = build_product(cfg, key, run)?;
    let node_cap = cfg.get_usize("node_cap")?;
    for name in checks {
        let t0 = Instant::now();
        match name.as_str() {
            "degrees" => {
                let rec = match u.degree_sweep() {
                    Ok(rep) => CheckRecord::gated(
                        name,
                        rep.violations == 0,
                        format!(
                            "max degree {} over {} vertices, {} violations",
                            rep.max_degree, rep.vertices_checked, rep.violations
                        ),
                    ),
                    Err(e) => CheckRecord::fail(name, e.to_string()),
                };
                run.stamp(name, t0, rec);
            }
            "girths" => {
                let rec = CheckRecord::skip(
                    name,
                    "interior girth is enforced fiber by fiber at build time".into(),
                );
                run.stamp(name, t0, rec);
            }
            "jconditions" => {
                let rec = CheckRecord::skip(name, "audited on the plain overlay modes".into());
                run.stamp(name, t0, rec);
            }
            "lemma3" => {
                let rep = u.check_path_invariance(
                    cfg.get_u32("pairs")?,
                    cfg.get_u32("alt_tries")?,
                    &key.child("upaths"),
                    node_cap,
                );
                let rec = CheckRecord::gated(
                    name,
                    rep.violations == 0,
                    format!(
                        "{} pairs, {} violations, {} skipped ({} without any route), \
                         {} alternative paths",
                        rep.pairs_checked,
                        rep.violations,
                        rep.skipped,
                        rep.disconnected_skips,
                        rep.alt_paths_checked
                    ),
                );
                run.stamp(name, t0, rec);
            }
            "witnesses" => {
                let swaps = u.check_swap_bookkeeping();
                let mut recs = vec![CheckRecord::gated(
                    "witnesses:swaps",
                    swaps.violations == 0,
                    if swaps.violations == 0 {
                        format!("{} swap edges audited", swaps.swaps)
                    } else {
                        swaps.examples.join("; ")
                    },
                )];
                recs.push(check_luck_gate(&u));
                recs.push(check_lucky_hits(cfg, &u, key)?);
                run.stamp_many(name, t0, recs);
            }
            "profiles" => {
                let rec =
                    check_profiles(cfg, &u, key, run, |p| p.to_string(), |_, rng| {
                        u.sample_root(rng)
                    })?;
                run.stamp(name, t0, rec);
            }
            "mtp" => {
                let rec = CheckRecord::skip(
                    name,
                    "transports are validated on the canopy and overlay ensembles".into(),
                );
                run.stamp(name, t0, rec);
            }
            _ => unreachable!("check_list validates names"),
        }
    }
    if cfg.get("edges") == "true" {
        let t0 = Instant::now();
        run.edges = Some(export_product_edges(&u));
        run.timings.insert("edges".into(), t0.elapsed().as_millis() as u64);
    }
    Ok(())
}

/// Traversal-ordered edge stream for the product. Big: off unless
/// `edges = true`.
fn export_product_edges(u: &UGraph) -> Vec<String> {
    let t1 = u.t1();
    let t2 = u.t2();
    let mut lines = Vec::new();
    for ord1 in 0..t1.vertex_count() {
        let fiber = t1.vertex_at(ord1);
        for ord2 in 0..t2.vertex_count() {
            let p = PVertex::new(fiber, t2.vertex_at(ord2));
            let Ok(ns) = u.neighbors(&p) else { continue };
            for q in ns {
                if p < q || u.neighbors(&q).is_err() {
                    lines.push(format!("{p} {q}"));
                }
            }
        }
    }
    lines
}

// --------------------------------------------------------------- UT3

fn run_ut3(
    cfg: &ConfigMap,
    key: &StreamKey,
    checks: &[String],
    run: &mut Run,
) -> Result<(), ExperimentError> {
    let u = build_product(cfg, key, run)?;
    let node_cap = cfg.get_usize("node_cap")?;
    let radius = cfg.get_u32("ut3_radius")?;
    let want = cfg.get_u32("ut3_roots")?;
    for name in checks {
        let t0 = Instant::now();
        match name.as_str() {
            "degrees" => {
                let rec = check_ut3_degrees(cfg, &u, key)?;
                run.stamp(name, t0, rec);
            }
            "witnesses" => {
                let rec = check_ut3_chain(&u, radius, want, node_cap, key);
                run.stamp(name, t0, rec);
            }
            "profiles" => {
                let rec =
                    check_profiles(cfg, &u, key, run, |p| p.to_string(), |_, rng| {
                        u.sample_root(rng)
                    })?;
                run.stamp(name, t0, rec);
            }
            other => {
                let rec = CheckRecord::skip(other, "not measured on the crossed stack".into());
                run.stamp(name, t0, rec);
            }
        }
    }
    Ok(())
}

/// Degree of a crossed vertex never exceeds the base degree plus the
/// three tree moves available to its word.
fn check_ut3_degrees(
    cfg: &ConfigMap,
    u: &UGraph,
    key: &StreamKey,
) -> Result<CheckRecord, ExperimentError> {
    let want = cfg.get_u32("ut3_roots")?;
    let g = UT3Graph::new(u, 2);
    let mut rng = key.child("ut3deg").rng();
    let mut checked = 0u64;
    let mut max_slack = 0i64;
    let mut bad = Vec::new();
    for _ in 0..want {
        let base = u.sample_root(&mut rng);
        let Ok(base_deg) = u.neighbors(&base).map(|ns| ns.len() as i64) else { continue };
        let origin = UT3Vertex { base, word: T3Addr::origin() };
        let mut stack = vec![origin];
        while let Some(v) = stack.pop() {
            let Ok(ns) = g.neighbors(&v) else { continue };
            checked += 1;
            let slack = ns.len() as i64 - (base_deg + 3);
            max_slack = max_slack.max(slack);
            if slack > 0 {
                bad.push(format!("{v}: degree {} over base {base_deg} + 3", ns.len()));
            }
            if v.word.is_empty() {
                stack.extend(ns.into_iter().filter(|n| n.word.len() == 1 && n.base == v.base));
            }
        }
    }
    Ok(CheckRecord::gated(
        "degrees",
        bad.is_empty() && checked > 0,
        format!("{checked} crossed vertices, worst slack {max_slack}"),
    ))
}

/// The two-sided ball-count chain, term by term, on sampled roots.
/// Contaminated draws are resampled; the loose side is vacuous at
/// radius zero and skipped there.
fn check_ut3_chain(
    u: &UGraph,
    radius: u32,
    want: u32,
    node_cap: usize,
    key: &StreamKey,
) -> CheckRecord {
    let mut rng = key.child("ut3").rng();
    let mut clean = 0u32;
    let mut resampled = 0u32;
    let mut bad = Vec::new();
    let mut attempts = 0u32;
    while clean < want && attempts < want.saturating_mul(8).max(8) {
        attempts += 1;
        let root = u.sample_root(&mut rng);
        let rows = ut3_ball_check(u, &root, radius, node_cap);
        if rows.iter().any(|row| row.contaminated) {
            resampled += 1;
            continue;
        }
        clean += 1;
        for row in rows {
            if !(row.per_length_ok && row.sum_ok && (row.r == 0 || row.loose_ok)) {
                bad.push(format!(
                    "root {root}, r = {}: ball {} term bound {} loose bound {}",
                    row.r, row.product_ball, row.term_bound, row.loose_bound
                ));
            }
        }
    }
    CheckRecord::gated(
        "witnesses:chain",
        bad.is_empty() && clean == want,
        if bad.is_empty() {
            format!("{clean} clean roots to radius {radius}, {resampled} resampled")
        } else {
            bad.join("; ")
        },
    )
}

// ------------------------------------------------------------ output

fn build_err<E: std::fmt::Display>(e: E) -> ExperimentError {
    ExperimentError::Build(e.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// The exponent column is |B_r|^{1/r}; its logarithmic companion is
/// taken base d-1 and says so in its header.
fn profiles_csv(run: &Run, d: u32) -> String {
    let mut out = format!("root,r,ball,exponent,exponent_log{},contaminated\n", d - 1);
    let base = f64::from(d - 1).ln();
    for ((root, r), (ball, exponent, contaminated)) in &run.profiles {
        let (exp_str, log_str) = match exponent {
            Some(e) => (sig12(*e), sig12(e.ln() / base)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{r},{ball},{exp_str},{log_str},{contaminated}\n",
            csv_field(root)
        ));
    }
    out
}

fn checks_csv(checks: &[CheckRecord]) -> String {
    let mut out = String::from("name,status,detail\n");
    for c in checks {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&c.name),
            csv_field(&c.status),
            csv_field(&c.detail)
        ));
    }
    out
}

fn write_file(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    outputs: &mut BTreeMap<String, String>,
) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let digest = Sha256::digest(bytes);
    outputs.insert(name.to_string(), digest.iter().map(|b| format!("{b:02x}")).collect());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ConfigMap {
        let mut cfg = default_config();
        for (k, v) in [
            ("depth", "8"),
            ("levels", "2,5"),
            ("seed", "11"),
            ("pairs", "20"),
            ("roots", "3"),
            ("r_max", "6"),
            ("witness_count", "2"),
            ("checks", "degrees,girths,lemma3,profiles"),
        ] {
            cfg.set_flag(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn reruns_reproduce_output_hashes() {
        let cfg = tiny_config();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = run_experiment(&cfg, dir1.path()).unwrap();
        let m2 = run_experiment(&cfg, dir2.path()).unwrap();
        assert_eq!(m1.outputs, m2.outputs);
        assert_eq!(m1.outputs.len(), 4, "profiles, checks, clusters and edges");
        for c in &m1.checks {
            assert_eq!(c.status, "pass", "{}: {}", c.name, c.detail);
        }
        let loaded = ExperimentManifest::load(&dir1.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.outputs, m1.outputs);
        assert!(loaded.failed().is_empty());
    }

    #[test]
    fn a_different_seed_changes_the_edge_stream_hash() {
        let mut cfg = tiny_config();
        cfg.set_flag("seed", "12").unwrap();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = run_experiment(&tiny_config(), dir1.path()).unwrap();
        let m2 = run_experiment(&cfg, dir2.path()).unwrap();
        assert_ne!(m1.outputs["edges.txt"], m2.outputs["edges.txt"]);
    }

    #[test]
    fn hot_epsilon_is_a_configuration_error() {
        for eps in ["1/12", "1/5"] {
            let mut cfg = tiny_config();
            cfg.set_flag("mode", "J").unwrap();
            cfg.set_flag("epsilon", eps).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let err = run_experiment(&cfg, dir.path()).unwrap_err();
            assert!(
                matches!(err, ExperimentError::Invalid(_)),
                "epsilon {eps} gave {err}"
            );
        }
    }

    #[test]
    fn selected_mode_runs_its_audit() {
        let mut cfg = tiny_config();
        cfg.set_flag("mode", "J").unwrap();
        cfg.set_flag("checks", "degrees,jconditions").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = run_experiment(&cfg, dir.path()).unwrap();
        for c in &m.checks {
            assert_eq!(c.status, "pass", "{}: {}", c.name, c.detail);
        }
        assert!(m.checks.iter().any(|c| c.name == "jconditions"));
    }

    #[test]
    fn unknown_mode_and_checks_are_rejected() {
        let mut cfg = tiny_config();
        cfg.set_flag("mode", "X").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_experiment(&cfg, dir.path()),
            Err(ExperimentError::Invalid(_))
        ));

        let mut cfg = tiny_config();
        cfg.set_flag("checks", "degrees,sorcery").unwrap();
        assert!(matches!(
            run_experiment(&cfg, dir.path()),
            Err(ExperimentError::Invalid(_))
        ));
    }

    #[test]
    fn exported_edges_agree_with_the_oracle_census() {
        use std::collections::HashMap;

        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir.path()).unwrap();
        let body = fs::read_to_string(dir.path().join("edges.txt")).unwrap();
        let mut adj: HashMap<String, Vec<String>> = HashMap::new();
        for line in body.lines() {
            let (a, b) = line.split_once(' ').unwrap();
            adj.entry(a.to_string()).or_default().push(b.to_string());
            adj.entry(b.to_string()).or_default().push(a.to_string());
        }

        let t = Truncation::new(8);
        let g = OverlayGraph::new(
            OverlayConfig::basic(3),
            t,
            CutSet::levels([2u64, 5]),
            StreamKey::root(11).child("overlay"),
        )
        .unwrap();
        let law = RootLaw::new(t);
        let mut rng = StreamKey::root(99).rng();
        for _ in 0..20 {
            let root = law.sample(&mut rng);
            let p = ball_profile(&g, &root, 6, 1 << 20);
            // Materialized BFS over the edge list, radius by radius.
            let mut seen = BTreeSet::from([root.to_string()]);
            let mut frontier = vec![root.to_string()];
            let mut sizes = vec![1u128];
            for _ in 1..=6u32 {
                let mut next = Vec::new();
                for v in frontier.drain(..) {
                    for w in adj.get(&v).into_iter().flatten() {
                        if seen.insert(w.clone()) {
                            next.push(w.clone());
                        }
                    }
                }
                frontier = next;
                sizes.push(seen.len() as u128);
            }
            let horizon = p.contaminated_from.unwrap_or(7).min(7);
            for r in 0..horizon as usize {
                assert_eq!(p.sizes[r], sizes[r], "root {root} radius {r}");
            }
        }
    }

    #[test]
    fn csv_fields_escape_commas_and_quotes() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        let rows = checks_csv(&[CheckRecord::pass("x", "one, two \"three\"".into())]);
        assert_eq!(rows.lines().count(), 2);
        assert!(rows.ends_with("x,pass,\"one, two \"\"three\"\"\"\n"));
    }
}
