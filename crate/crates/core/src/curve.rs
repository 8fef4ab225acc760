//! Calibration-curve container: ordered (ε, value) samples with explicit +∞
//! support, the greatest convex non-decreasing minorant, and CSV round-trip.

use crate::{Error, Result};
use std::fmt;

/// A curve sample value; +∞ is a first-class state, never a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveValue {
    Finite(f64),
    Infinite,
}

impl CurveValue {
    pub fn is_finite(&self) -> bool {
        matches!(self, CurveValue::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            CurveValue::Finite(v) => Some(*v),
            CurveValue::Infinite => None,
        }
    }

    /// Total order treating +∞ as larger than every finite value.
    pub fn le(&self, other: &CurveValue) -> bool {
        match (self, other) {
            (CurveValue::Finite(a), CurveValue::Finite(b)) => a <= b,
            (CurveValue::Finite(_), CurveValue::Infinite) => true,
            (CurveValue::Infinite, CurveValue::Infinite) => true,
            (CurveValue::Infinite, CurveValue::Finite(_)) => false,
        }
    }

    pub fn min(self, other: CurveValue) -> CurveValue {
        if self.le(&other) {
            self
        } else {
            other
        }
    }
}

impl fmt::Display for CurveValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveValue::Finite(v) => write!(f, "{v:.12e}"),
            CurveValue::Infinite => write!(f, "inf"),
        }
    }
}

/// Provenance of a curve: exact QP sweep, bound with optimized or unit v,
/// or the closed-form tree bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMeta {
    /// Minimum over pair QPs.  This is exact up to possible tie-breaking
    /// boundary effects, in which case it is still a valid lower bound.
    ExactQp,
    BoundVopt,
    BoundV1,
    TreeClosed,
}

impl fmt::Display for CurveMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CurveMeta::ExactQp => "exact_qp",
            CurveMeta::BoundVopt => "bound_vopt",
            CurveMeta::BoundV1 => "bound_v1",
            CurveMeta::TreeClosed => "tree_closed",
        };
        write!(f, "{s}")
    }
}

/// Ordered samples of a calibration function or a bound on it.
#[derive(Debug, Clone)]
pub struct CalibrationCurve {
    pub points: Vec<(f64, CurveValue)>,
    pub meta: CurveMeta,
}

impl CalibrationCurve {
    pub fn new(points: Vec<(f64, CurveValue)>, meta: CurveMeta) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Invalid("curve epsilons must be strictly increasing".into()));
            }
            if !w[0].1.le(&w[1].1) {
                return Err(Error::Invalid("curve values must be non-decreasing".into()));
            }
        }
        Ok(CalibrationCurve { points, meta })
    }

    /// Largest grid ε with value 0 (the empirical zero-exit point), or None
    /// when the curve is positive from the first positive grid point on.
    pub fn zero_exit(&self) -> Option<f64> {
        self.points
            .iter()
            .rev()
            .find(|(_, v)| matches!(v, CurveValue::Finite(x) if *x == 0.0))
            .map(|(e, _)| *e)
    }

    /// Value at a grid point or linear interpolation between grid points;
    /// +∞ outside the sampled range or beyond the finite prefix.
    pub fn value_at(&self, eps: f64) -> CurveValue {
        let pts = &self.points;
        if pts.is_empty() || eps < pts[0].0 - 1e-12 || eps > pts[pts.len() - 1].0 + 1e-12 {
            return CurveValue::Infinite;
        }
        for w in pts.windows(2) {
            let (e0, v0) = w[0];
            let (e1, v1) = w[1];
            if eps <= e1 + 1e-12 {
                if (eps - e0).abs() <= 1e-12 {
                    return v0;
                }
                if (eps - e1).abs() <= 1e-12 {
                    return v1;
                }
                return match (v0, v1) {
                    (CurveValue::Finite(a), CurveValue::Finite(b)) => {
                        let t = (eps - e0) / (e1 - e0);
                        CurveValue::Finite(a + t * (b - a))
                    }
                    _ => CurveValue::Infinite,
                };
            }
        }
        pts.last().map(|(_, v)| *v).unwrap_or(CurveValue::Infinite)
    }

    /// Serialize as `epsilon,value` CSV with LF endings and `inf` for +∞.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,value\n");
        for (e, v) in &self.points {
            out.push_str(&format!("{e:.12e},{v}\n"));
        }
        out
    }

    /// Parse the CSV produced by [`to_csv`]; `meta` is not stored in the
    /// file and must be supplied.
    pub fn from_csv(text: &str, meta: CurveMeta) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "epsilon,value" => {}
            _ => return Err(Error::Invalid("curve CSV must start with `epsilon,value`".into())),
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, ',');
            let missing = |what: &str| Error::Parse {
                row: i + 2,
                col: 0,
                msg: format!("missing {what}"),
            };
            let e_str = parts.next().map(str::trim).ok_or_else(|| missing("epsilon"))?;
            let e: f64 = e_str.parse().map_err(|_| Error::Parse {
                row: i + 2,
                col: 1,
                msg: "bad epsilon".into(),
            })?;
            let vs = parts.next().map(str::trim).ok_or_else(|| missing("value"))?;
            let v = if vs == "inf" {
                CurveValue::Infinite
            } else {
                CurveValue::Finite(vs.parse().map_err(|_| Error::Parse {
                    row: i + 2,
                    col: 2,
                    msg: "bad value".into(),
                })?)
            };
            points.push((e, v));
        }
        CalibrationCurve::new(points, meta)
    }
}

/// Greatest convex non-decreasing minorant of the sampled points: the lower
/// convex hull of the finite prefix, re-sampled on the same grid, with any
/// +∞ tail preserved.
pub fn convex_minorant(curve: &CalibrationCurve) -> Result<CalibrationCurve> {
    let finite: Vec<(f64, f64)> = curve
        .points
        .iter()
        .take_while(|(_, v)| v.is_finite())
        .map(|(e, v)| (*e, v.finite().unwrap()))
        .collect();
    if finite.len() != curve.points.iter().filter(|(_, v)| v.is_finite()).count() {
        return Err(Error::Invalid("curve must be finite on a prefix of the grid".into()));
    }
    // Andrew monotone chain, lower hull only.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &finite {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // Drop b when it lies on or above segment a–p.
            if (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1) <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let eval = |x: f64| -> f64 {
        match hull.binary_search_by(|p| p.0.partial_cmp(&x).unwrap()) {
            Ok(i) => hull[i].1,
            Err(i) => {
                let (a, b) = (hull[i - 1], hull[i]);
                a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1)
            }
        }
    };
    let mut points: Vec<(f64, CurveValue)> = Vec::with_capacity(curve.points.len());
    for (e, v) in &curve.points {
        let cv = match v {
            CurveValue::Finite(orig) => CurveValue::Finite(eval(*e).min(*orig).max(0.0)),
            CurveValue::Infinite => CurveValue::Infinite,
        };
        points.push((*e, cv));
    }
    CalibrationCurve::new(points, curve.meta)
}
