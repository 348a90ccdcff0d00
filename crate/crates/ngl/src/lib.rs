//! Constructions of bounded-degree graphs whose ball volumes oscillate
//! between polynomial and exponential windows, plus a small measurement
//! lab for probing them.
//!
//! The building blocks, bottom to top:
//!
//! * [`canopy`]: finite truncations of the canopy tree and the uniform
//!   root law on them.
//! * [`partition`]: cut sets (level cuts and seeded selected cuts) that
//!   slice a truncation into clusters, plus validity checks on the
//!   index sequences that drive them.
//! * [`girth`]: random regular-ish graphs of prescribed girth, with the
//!   degree/marking constraints the overlay step needs, and a
//!   branching-process oracle for calibrating ball-volume thresholds.
//! * [`overlay`]: the cluster-replacement graphs built over a cut
//!   truncation, where each cluster is rewired as either a long path or
//!   a high-girth expander-like patch.
//! * [`product`]: the two-level construction, fibering overlays over a
//!   base truncation with turn/luck bookkeeping, and its variant with a
//!   3-regular-tree factor.
//! * [`lab`]: ball profiles, growth-exponent estimates, a mass
//!   transport harness, and the experiment driver used by the CLI.
//!
//! Everything random is driven by [`rng::StreamKey`], so that any two
//! runs with the same seed and configuration produce identical graphs,
//! measurements, and exports regardless of traversal order.

pub mod canopy;
pub mod girth;
pub mod lab;
pub mod overlay;
pub mod partition;
pub mod product;
pub mod rng;
