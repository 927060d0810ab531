use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Result, TvError};

type CurveFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// How a minimum trajectory is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Closed-form `h(t)` and `hdot(t)`.
    Analytic,
    /// Samples on a time grid, interpolated with cubic Hermite segments whose
    /// endpoint slopes come from finite differences of the samples.
    Sampled,
}

#[derive(Clone)]
enum Curve {
    Analytic { h: CurveFn, hdot: CurveFn },
    Sampled { ts: Vec<f64>, xs: Vec<DVector<f64>>, ds: Vec<DVector<f64>> },
}

/// A labeled curve of local minimizers `t -> h(t)`.
#[derive(Clone)]
pub struct MinTrajectory {
    label: String,
    dim: usize,
    curve: Curve,
}

impl fmt::Debug for MinTrajectory {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("MinTrajectory")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("kind", &self.kind())
            .finish()
    }
}

impl MinTrajectory {
    /// Builds an analytic trajectory from closed-form position and velocity.
    pub fn analytic<H, D>(label: impl Into<String>, dim: usize, h: H, hdot: D) -> Self
    where
        H: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        D: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            dim,
            curve: Curve::Analytic { h: Arc::new(h), hdot: Arc::new(hdot) },
        }
    }

    /// Builds a sampled trajectory from a strictly increasing time grid.
    /// Slopes for the Hermite segments are finite differences: three-point
    /// one-sided at the ends, distance-weighted central in the interior.
    pub fn from_samples(label: impl Into<String>, ts: Vec<f64>, xs: Vec<DVector<f64>>) -> Result<Self> {
        let label = label.into();
        if ts.len() < 2 || ts.len() != xs.len() {
            return Err(TvError::InvalidParameter {
                name: "samples".into(),
                reason: format!("need at least 2 samples with matching grid, got {} times / {} points", ts.len(), xs.len()),
            });
        }
        if !ts.windows(2).all(|w| w[1] > w[0]) {
            return Err(TvError::InvalidParameter {
                name: "samples".into(),
                reason: "time grid must be strictly increasing".into(),
            });
        }
        let dim = xs[0].len();
        if xs.iter().any(|x| x.len() != dim) {
            return Err(TvError::InvalidParameter {
                name: "samples".into(),
                reason: "all sample points must share one dimension".into(),
            });
        }
        let ds = fd_slopes(&ts, &xs);
        Ok(Self { label, dim, curve: Curve::Sampled { ts, xs, ds } })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> TrajectoryKind {
        match &self.curve {
            Curve::Analytic { .. } => TrajectoryKind::Analytic,
            Curve::Sampled { .. } => TrajectoryKind::Sampled,
        }
    }

    /// Time span of the underlying samples, if this trajectory is sampled.
    pub fn span(&self) -> Option<(f64, f64)> {
        match &self.curve {
            Curve::Analytic { .. } => None,
            Curve::Sampled { ts, .. } => Some((ts[0], *ts.last().unwrap())),
        }
    }

    /// Position at time `t`. Sampled trajectories extrapolate linearly beyond
    /// their grid using the endpoint slope.
    pub fn h(&self, t: f64) -> DVector<f64> {
        match &self.curve {
            Curve::Analytic { h, .. } => h(t),
            Curve::Sampled { ts, xs, ds } => {
                if t <= ts[0] {
                    return &xs[0] + &ds[0] * (t - ts[0]);
                }
                let last = ts.len() - 1;
                if t >= ts[last] {
                    return &xs[last] + &ds[last] * (t - ts[last]);
                }
                let i = segment_index(ts, t);
                let dt = ts[i + 1] - ts[i];
                let s = (t - ts[i]) / dt;
                let (s2, s3) = (s * s, s * s * s);
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                &xs[i] * h00 + &ds[i] * (h10 * dt) + &xs[i + 1] * h01 + &ds[i + 1] * (h11 * dt)
            }
        }
    }

    /// Velocity at time `t` (derivative of the interpolant for sampled data).
    pub fn hdot(&self, t: f64) -> DVector<f64> {
        match &self.curve {
            Curve::Analytic { hdot, .. } => hdot(t),
            Curve::Sampled { ts, ds, xs } => {
                if t <= ts[0] {
                    return ds[0].clone();
                }
                let last = ts.len() - 1;
                if t >= ts[last] {
                    return ds[last].clone();
                }
                let i = segment_index(ts, t);
                let dt = ts[i + 1] - ts[i];
                let s = (t - ts[i]) / dt;
                let s2 = s * s;
                let d00 = (6.0 * s2 - 6.0 * s) / dt;
                let d10 = 3.0 * s2 - 4.0 * s + 1.0;
                let d01 = (-6.0 * s2 + 6.0 * s) / dt;
                let d11 = 3.0 * s2 - 2.0 * s;
                &xs[i] * d00 + &ds[i] * d10 + &xs[i + 1] * d01 + &ds[i + 1] * d11
            }
        }
    }

    /// Returns a relabeled copy.
    pub fn with_label(&self, label: impl Into<String>) -> Self {
        let mut out = self.clone();
        out.label = label.into();
        out
    }
}

fn segment_index(ts: &[f64], t: f64) -> usize {
    let i = ts.partition_point(|&s| s <= t);
    i.clamp(1, ts.len() - 1) - 1
}

fn fd_slopes(ts: &[f64], xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = ts.len();
    if n == 2 {
        let d = (&xs[1] - &xs[0]) / (ts[1] - ts[0]);
        return vec![d.clone(), d];
    }
    let mut ds = Vec::with_capacity(n);
    for i in 0..n {
        let d = if i == 0 {
            let h0 = ts[1] - ts[0];
            let h1 = ts[2] - ts[1];
            (&xs[1] - &xs[0]) * ((2.0 * h0 + h1) / (h0 * (h0 + h1)))
                - (&xs[2] - &xs[1]) * (h0 / (h1 * (h0 + h1)))
        } else if i == n - 1 {
            let h0 = ts[n - 1] - ts[n - 2];
            let h1 = ts[n - 2] - ts[n - 3];
            (&xs[n - 1] - &xs[n - 2]) * ((2.0 * h0 + h1) / (h0 * (h0 + h1)))
                - (&xs[n - 3] - &xs[n - 2]) * (h0 / (h1 * (h0 + h1)))
        } else {
            let hl = ts[i] - ts[i - 1];
            let hr = ts[i + 1] - ts[i];
            (&xs[i + 1] - &xs[i]) * (hl / (hr * (hl + hr))) + (&xs[i] - &xs[i - 1]) * (hr / (hl * (hl + hr)))
        };
        ds.push(d);
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sampled_trajectory_reproduces_a_sine_between_nodes() {
        let n = 200;
        let ts: Vec<f64> = (0..=n).map(|i| i as f64 * (2.0 * std::f64::consts::PI / n as f64)).collect();
        let xs: Vec<DVector<f64>> = ts.iter().map(|&t| DVector::from_vec(vec![t.sin()])).collect();
        let traj = MinTrajectory::from_samples("sine", ts, xs).unwrap();
        for k in 0..50 {
            let t = 0.013 + k as f64 * 0.12;
            assert_abs_diff_eq!(traj.h(t)[0], t.sin(), epsilon = 1e-5);
            assert_abs_diff_eq!(traj.hdot(t)[0], t.cos(), epsilon = 1e-3);
        }
    }

    #[test]
    fn analytic_trajectory_evaluates_closures() {
        let traj = MinTrajectory::analytic(
            "global",
            1,
            |t: f64| DVector::from_vec(vec![1.0 + 5.0 * t.sin()]),
            |t: f64| DVector::from_vec(vec![5.0 * t.cos()]),
        );
        assert_eq!(traj.kind(), TrajectoryKind::Analytic);
        assert_abs_diff_eq!(traj.h(0.0)[0], 1.0);
        assert_abs_diff_eq!(traj.hdot(0.0)[0], 5.0);
    }

    #[test]
    fn unsorted_grid_is_rejected() {
        let ts = vec![0.0, 0.5, 0.4];
        let xs = vec![DVector::zeros(1), DVector::zeros(1), DVector::zeros(1)];
        assert!(MinTrajectory::from_samples("bad", ts, xs).is_err());
    }
}
