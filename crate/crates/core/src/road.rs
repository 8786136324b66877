//! Road geometry, lane bookkeeping, and the Frenet-frame mapping every other
//! module consumes. A link is immutable after construction and safe to share
//! across concurrently running planners.

use crate::real::{fl, Real};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RoadError {
    #[error("lane index {index} out of range 1..={lanes}")]
    InvalidLane { index: usize, lanes: usize },
    #[error("lateral offset {y_e} m outside road bounds [{lo}, {hi}] m")]
    OffRoad { y_e: f64, lo: f64, hi: f64 },
    #[error("invalid link geometry: {0}")]
    BadGeometry(String),
}

/// Piecewise-linear curvature profile over the path coordinate.
///
/// Breakpoints must be strictly increasing in `s`; evaluation clamps to the
/// first/last breakpoint outside the table. An empty table means a straight
/// link.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureTable<T: Real> {
    breaks: Vec<(T, T)>,
}

impl<T: Real> CurvatureTable<T> {
    pub fn straight() -> Self {
        Self { breaks: Vec::new() }
    }

    pub fn new(breaks: Vec<(T, T)>) -> Result<Self, RoadError> {
        for w in breaks.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(RoadError::BadGeometry(
                    "curvature breakpoints must be strictly increasing in s".into(),
                ));
            }
        }
        Ok(Self { breaks })
    }

    pub fn kappa(&self, s: T) -> T {
        match self.breaks.len() {
            0 => T::zero(),
            1 => self.breaks[0].1,
            _ => {
                let first = self.breaks[0];
                let last = self.breaks[self.breaks.len() - 1];
                if s <= first.0 {
                    return first.1;
                }
                if s >= last.0 {
                    return last.1;
                }
                let i = self.breaks.partition_point(|&(sb, _)| sb <= s) - 1;
                let (s0, k0) = self.breaks[i];
                let (s1, k1) = self.breaks[i + 1];
                k0 + (k1 - k0) * (s - s0) / (s1 - s0)
            }
        }
    }

    /// dκ/ds at `s` (zero outside the table and on breakpoints' flat tails).
    pub fn kappa_ds(&self, s: T) -> T {
        if self.breaks.len() < 2 {
            return T::zero();
        }
        let first = self.breaks[0];
        let last = self.breaks[self.breaks.len() - 1];
        if s <= first.0 || s >= last.0 {
            return T::zero();
        }
        let i = self.breaks.partition_point(|&(sb, _)| sb <= s) - 1;
        let (s0, k0) = self.breaks[i];
        let (s1, k1) = self.breaks[i + 1];
        (k1 - k0) / (s1 - s0)
    }

    pub fn max_abs_kappa(&self) -> T {
        self.breaks
            .iter()
            .map(|&(_, k)| k.abs())
            .fold(T::zero(), |a, b| a.max(b))
    }
}

/// A single directed road link with `lane_count` parallel lanes.
///
/// Lane 1 is the rightmost lane; its centerline is the origin of the lateral
/// axis, and centers increase to the left in steps of one lane width.
#[derive(Debug, Clone)]
pub struct RoadLink<T: Real> {
    length: T,
    lane_count: usize,
    lane_width: T,
    lane_centers: Vec<T>,
    curvature: CurvatureTable<T>,
    speed_limit: T,
    no_lane_change_zone: T,
}

impl<T: Real> RoadLink<T> {
    pub fn new(
        length: T,
        lane_count: usize,
        lane_width: T,
        speed_limit: T,
        curvature: CurvatureTable<T>,
        no_lane_change_zone: T,
    ) -> Result<Self, RoadError> {
        if lane_count < 1 {
            return Err(RoadError::BadGeometry("lane_count must be >= 1".into()));
        }
        if length <= T::zero() || lane_width <= T::zero() || speed_limit <= T::zero() {
            return Err(RoadError::BadGeometry(
                "length, lane_width and speed_limit must be positive".into(),
            ));
        }
        let lane_centers: Vec<T> = (0..lane_count)
            .map(|i| fl::<T>(i as f64) * lane_width)
            .collect();
        let link = Self {
            length,
            lane_count,
            lane_width,
            lane_centers,
            curvature,
            speed_limit,
            no_lane_change_zone,
        };
        // The ego model denominator 1 - y_e*kappa(s) must stay away from zero
        // for every reachable (s, y_e) on the link.
        let y_reach = link.y_min().abs().max(link.y_max().abs());
        if y_reach * link.curvature.max_abs_kappa() >= T::one() {
            return Err(RoadError::BadGeometry(
                "curvature too large: |y_e * kappa| >= 1 reachable on the link".into(),
            ));
        }
        Ok(link)
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn lane_count(&self) -> usize {
        self.lane_count
    }

    pub fn lane_width(&self) -> T {
        self.lane_width
    }

    pub fn speed_limit(&self) -> T {
        self.speed_limit
    }

    pub fn no_lane_change_zone(&self) -> T {
        self.no_lane_change_zone
    }

    /// Right road bound (edge of lane 1).
    pub fn y_min(&self) -> T {
        self.lane_centers[0] - self.lane_width / fl(2.0)
    }

    /// Left road bound (edge of the leftmost lane).
    pub fn y_max(&self) -> T {
        self.lane_centers[self.lane_count - 1] + self.lane_width / fl(2.0)
    }

    pub fn kappa(&self, s: T) -> T {
        self.curvature.kappa(s)
    }

    pub fn kappa_ds(&self, s: T) -> T {
        self.curvature.kappa_ds(s)
    }

    pub fn curvature_table(&self) -> &CurvatureTable<T> {
        &self.curvature
    }

    pub fn lane_centers(&self) -> &[T] {
        &self.lane_centers
    }

    /// Centerline offset of 1-based lane `l`.
    pub fn lane_center(&self, l: usize) -> Result<T, RoadError> {
        if l < 1 || l > self.lane_count {
            return Err(RoadError::InvalidLane {
                index: l,
                lanes: self.lane_count,
            });
        }
        Ok(self.lane_centers[l - 1])
    }

    /// 1-based index of the nearest lane centerline; ties break toward the
    /// lower index.
    pub fn lane_of(&self, y_e: T) -> Result<usize, RoadError> {
        if y_e < self.y_min() || y_e > self.y_max() {
            return Err(RoadError::OffRoad {
                y_e: y_e.to_f64().unwrap_or(f64::NAN),
                lo: self.y_min().to_f64().unwrap_or(f64::NAN),
                hi: self.y_max().to_f64().unwrap_or(f64::NAN),
            });
        }
        let mut best = 1;
        let mut best_dist = (y_e - self.lane_centers[0]).abs();
        for (i, &c) in self.lane_centers.iter().enumerate().skip(1) {
            let d = (y_e - c).abs();
            if d < best_dist {
                best = i + 1;
                best_dist = d;
            }
        }
        Ok(best)
    }
}
