//! Ball-growth profiles and the window estimators built on them.
//!
//! A profile is the exact BFS layer census from one root; the exponent
//! column is |B_r|^{1/r}, the quantity whose limsup and liminf the
//! whole construction is designed to pull apart. Estimators only ever
//! take max/min over clean radii, so aggregation is order-free.

use std::fmt;
use std::ops::RangeInclusive;

use crate::lab::profile::BallProfile;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrowthError {
    /// No profile offered a single clean exponent in the window.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// Per-root growth measurement: exact ball sizes and the derived
/// exponent column. `witness_radius` marks the distinguished radius L
/// of a slow-growth witness, when the profile came from one.
#[derive(Debug, Clone)]
pub struct GrowthProfile {
    pub root: String,
    pub sizes: Vec<u128>,
    /// |B_r|^{1/r}; None at r = 0 where the expression is undefined.
    pub exponents: Vec<Option<f64>>,
    pub contaminated_from: Option<u32>,
    pub witness_radius: Option<u32>,
}

impl GrowthProfile {
    pub fn new(root: impl fmt::Display, profile: &BallProfile) -> Self {
        let sizes = profile.sizes.clone();
        let exponents = sizes
            .iter()
            .enumerate()
            .map(|(r, n)| {
                (r > 0 && *n > 0).then(|| (*n as f64).powf(1.0 / r as f64))
            })
            .collect();
        GrowthProfile {
            root: root.to_string(),
            sizes,
            exponents,
            contaminated_from: profile.contaminated_from,
            witness_radius: None,
        }
    }

    pub fn witnessed(root: impl fmt::Display, profile: &BallProfile, radius: u32) -> Self {
        let mut p = Self::new(root, profile);
        p.witness_radius = Some(radius);
        p
    }

    pub fn max_radius(&self) -> u32 {
        (self.sizes.len() as u32).saturating_sub(1)
    }

    /// True when the census at radius r saw no truncation boundary.
    pub fn clean_at(&self, r: u32) -> bool {
        r <= self.max_radius() && self.contaminated_from.map_or(true, |c| r < c)
    }

    /// Exponent at a clean radius; None at r = 0, past the horizon, or
    /// once the ball has touched the boundary (the census there is
    /// only a lower bound).
    pub fn exponent_at(&self, r: u32) -> Option<f64> {
        if !self.clean_at(r) {
            return None;
        }
        self.exponents.get(r as usize).copied().flatten()
    }
}

/// Window extremes over a batch of profiles, each tagged with the
/// (root, radius) pair achieving it.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthEstimates {
    pub upper: f64,
    pub upper_at: (String, u32),
    /// Min exponent over the supplied witness radii; absent when no
    /// profile carried one.
    pub lower: Option<f64>,
    pub lower_at: Option<(String, u32)>,
}

/// Max exponent over the window across all clean radii, and min
/// exponent over the profiles' witness radii. Pure max/min, so the
/// result does not depend on the order of `profiles`.
pub fn growth_estimates(
    profiles: &[GrowthProfile],
    window: RangeInclusive<u32>,
) -> Result<GrowthEstimates, GrowthError> {
    let mut upper: Option<(f64, (String, u32))> = None;
    let mut lower: Option<(f64, (String, u32))> = None;
    for p in profiles {
        for r in window.clone() {
            if let Some(e) = p.exponent_at(r) {
                if upper.as_ref().map_or(true, |(b, _)| e > *b) {
                    upper = Some((e, (p.root.clone(), r)));
                }
            }
        }
        if let Some(l) = p.witness_radius {
            if let Some(e) = p.exponent_at(l) {
                if lower.as_ref().map_or(true, |(b, _)| e < *b) {
                    lower = Some((e, (p.root.clone(), l)));
                }
            }
        }
    }
    let (upper, upper_at) = upper.ok_or_else(|| {
        GrowthError::InsufficientData(format!(
            "no clean exponent in radius window {}..={} across {} profiles",
            window.start(),
            window.end(),
            profiles.len()
        ))
    })?;
    let (lower, lower_at) = match lower {
        Some((e, at)) => (Some(e), Some(at)),
        None => (None, None),
    };
    Ok(GrowthEstimates { upper, upper_at, lower, lower_at })
}

/// Decimal with 12 significant digits, the output precision contract
/// for exponent columns.
pub fn sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (11 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canopy::Truncation;
    use crate::lab::profile::ball_profile;
    use crate::rng::StreamKey;

    fn profile_of(sizes: &[u128], contaminated_from: Option<u32>) -> GrowthProfile {
        GrowthProfile::new(
            "fixture",
            &BallProfile { sizes: sizes.to_vec(), contaminated_from, note: None },
        )
    }

    #[test]
    fn canopy_leaf_ball_is_leaf_parent_sibling_grandparent() {
        let t = Truncation::new(6);
        let leaf = t.vertex(0, 0);
        let p = ball_profile(&t, &leaf, 2, 1 << 20);
        assert_eq!(p.sizes, vec![1, 2, 4]);
    }

    #[test]
    fn three_regular_tree_ball_at_radius_two() {
        // Interior vertex of a big truncation: parent + 2 children,
        // then 2 + 4 at distance two. 1 + 3 + 6.
        let t = Truncation::new(12);
        let v = t.vertex(6, 5);
        let p = ball_profile(&t, &v, 2, 1 << 20);
        assert_eq!(p.sizes[2], 10);
    }

    #[test]
    fn exponents_are_root_of_ball_size() {
        let p = profile_of(&[1, 3, 9, 27], None);
        assert_eq!(p.exponents[0], None);
        assert!((p.exponent_at(1).unwrap() - 3.0).abs() < 1e-12);
        assert!((p.exponent_at(2).unwrap() - 3.0).abs() < 1e-12);
        assert!((p.exponent_at(3).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn contamination_blanks_the_exponent() {
        let p = profile_of(&[1, 4, 16, 20], Some(3));
        assert!(p.exponent_at(2).is_some());
        assert_eq!(p.exponent_at(3), None);
        assert!(!p.clean_at(3));
    }

    #[test]
    fn estimates_take_window_max_and_witness_min() {
        let a = profile_of(&[1, 5, 9], None);
        let mut b = profile_of(&[1, 2, 4, 8, 16], None);
        b.witness_radius = Some(4);
        let est = growth_estimates(&[a.clone(), b.clone()], 1..=3).unwrap();
        assert!((est.upper - 5.0).abs() < 1e-12);
        assert_eq!(est.upper_at.1, 1);
        assert!((est.lower.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(est.lower_at.unwrap().1, 4);

        let flipped = growth_estimates(&[b, a], 1..=3).unwrap();
        assert_eq!(flipped.upper, est.upper);
        assert_eq!(flipped.lower, est.lower);
    }

    #[test]
    fn degenerate_profile_is_an_error() {
        // A single isolated vertex has no radius-1 ball to speak of.
        let p = profile_of(&[1], None);
        assert!(matches!(
            growth_estimates(&[p], 1..=4),
            Err(GrowthError::InsufficientData(_))
        ));
    }

    #[test]
    fn all_contaminated_is_an_error() {
        let p = profile_of(&[1, 3, 6], Some(1));
        assert!(growth_estimates(&[p], 1..=2).is_err());
    }

    #[test]
    fn seeded_expander_cluster_estimates_near_branching_number() {
        // A 1023-vertex cubic high-girth graph measured at half girth
        // should show exponent close to d - 1 = 2.
        let cfg = crate::girth::GirthConfig::new(1023, 3, 7);
        let g = crate::girth::generate(&cfg, &StreamKey::root(404)).unwrap();
        let r = g.girth().expect("girth recorded") / 2;
        assert!(r >= 3, "generator fell below girth 6 (girth {:?})", g.girth());
        let mut profiles = Vec::new();
        for v in [0u32, 17, 511] {
            let p = ball_profile(&g, &v, r, 1 << 22);
            profiles.push(GrowthProfile::new(format!("v{v}"), &p));
        }
        let est = growth_estimates(&profiles, r..=r).unwrap();
        assert!(est.upper >= 0.85 * 2.0, "upper {} too small", est.upper);
        assert!(est.upper <= 3.0);
    }

    #[test]
    fn sig12_formats_twelve_significant_digits() {
        assert_eq!(sig12(2.0), "2.00000000000");
        assert_eq!(sig12(1.9128709291752), "1.91287092918");
        assert_eq!(sig12(123.456), "123.456000000");
        assert_eq!(sig12(0.0), "0");
    }
}
