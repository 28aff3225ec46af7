//! Compass direction vocabulary and angle conversions.
//!
//! Directions are identified by the 16-point compass tokens. Internally each
//! token carries a bearing in degrees (N = 0°, clockwise). Velocity
//! components use u = east, v = north, with the convention that a profile's
//! direction is where the wind blows *toward*, so the math angle
//! θ = 90° − bearing satisfies u = s·cos θ, v = s·sin θ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 16 compass tokens in clockwise order starting at north.
pub const COMPASS_16: [&str; 16] = [
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW",
    "NNW",
];

/// An ordered set of compass directions used for condition encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    tokens: Vec<String>,
    /// Bearing of each token in degrees, N = 0, clockwise.
    bearings_deg: Vec<f64>,
}

impl DirectionSet {
    /// The full 16-point compass (the encoding vocabulary used throughout).
    pub fn compass16() -> Self {
        let tokens: Vec<String> = COMPASS_16.iter().map(|s| s.to_string()).collect();
        let bearings_deg = (0..16).map(|i| 22.5 * i as f64).collect();
        Self { tokens, bearings_deg }
    }

    /// Build a set from a subset of the 16 compass tokens.
    pub fn from_tokens(tokens: &[&str]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("direction set must not be empty".into()));
        }
        let mut out_tokens = Vec::with_capacity(tokens.len());
        let mut bearings = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let idx = COMPASS_16
                .iter()
                .position(|&c| c == t)
                .ok_or_else(|| Error::InvalidInput(format!("unknown compass token `{t}`")))?;
            out_tokens.push(t.to_string());
            bearings.push(22.5 * idx as f64);
        }
        Ok(Self { tokens: out_tokens, bearings_deg: bearings })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// Index of a token, or `None` if the token is not in the set.
    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Math angle (radians, u = s·cos θ, v = s·sin θ) of a direction index.
    pub fn angle_rad(&self, index: usize) -> f64 {
        (90.0 - self.bearings_deg[index]).to_radians()
    }

    /// Snap a math angle (radians) to the nearest direction in the set.
    pub fn snap_angle(&self, theta_rad: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for i in 0..self.len() {
            let d = angular_distance(theta_rad, self.angle_rad(i));
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best
    }

    /// Snap the direction of a velocity vector (u, v) to the nearest token.
    pub fn snap_uv(&self, u: f64, v: f64) -> usize {
        self.snap_angle(v.atan2(u))
    }
}

/// Absolute angular distance in radians, wrapped to [0, π].
fn angular_distance(a: f64, b: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut d = (a - b) % two_pi;
    if d < 0.0 {
        d += two_pi;
    }
    d.min(two_pi - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn north_points_along_positive_v() {
        let dirs = DirectionSet::compass16();
        let n = dirs.index_of("N").unwrap();
        let theta = dirs.angle_rad(n);
        assert!((theta.cos()).abs() < 1e-12);
        assert!((theta.sin() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snap_recovers_every_token() {
        let dirs = DirectionSet::compass16();
        for i in 0..dirs.len() {
            let theta = dirs.angle_rad(i);
            assert_eq!(dirs.snap_angle(theta), i, "token {}", dirs.token(i));
            // A velocity vector built from the angle snaps back too.
            assert_eq!(dirs.snap_uv(3.0 * theta.cos(), 3.0 * theta.sin()), i);
        }
    }

    #[test]
    fn snap_handles_wraparound() {
        let dirs = DirectionSet::compass16();
        // Slightly east of north, approached from either side of the wrap.
        let n = dirs.index_of("N").unwrap();
        assert_eq!(dirs.snap_angle(dirs.angle_rad(n) + 0.1), n);
        assert_eq!(dirs.snap_angle(dirs.angle_rad(n) - 0.1), n);
    }

    #[test]
    fn subset_preserves_bearings() {
        let sub = DirectionSet::from_tokens(&["SW", "W", "WNW", "WSW"]).unwrap();
        assert_eq!(sub.len(), 4);
        let full = DirectionSet::compass16();
        let sw_sub = sub.angle_rad(sub.index_of("SW").unwrap());
        let sw_full = full.angle_rad(full.index_of("SW").unwrap());
        assert!((sw_sub - sw_full).abs() < 1e-12);
    }

    #[test]
    fn unknown_token_is_rejected() {
        assert!(DirectionSet::from_tokens(&["SW", "XX"]).is_err());
    }
}
