//! Random primitives: Brownian paths on grids, reflected Brownian motion,
//! exponential lifetimes and the exact Feller-diffusion transition sampler.

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Uniform time discretisation `k * dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "horizon must be non-negative, got {horizon}"
            )));
        }
        // Guard against T/dt landing a hair above an integer.
        let n_steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
        Ok(Self {
            dt,
            horizon,
            n_steps,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Anything that can be read as a piecewise-linear path through
/// `(time, value)` nodes.
pub trait Polyline {
    fn len(&self) -> usize;
    fn time(&self, i: usize) -> f64;
    fn value(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn end_time(&self) -> f64 {
        self.time(self.len() - 1)
    }
}

/// Values of a path at every point of a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.n_points(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("grid has at least one point")
    }

    /// Appends `next`, which must start where `self` ends and share its `dt`.
    pub fn concat(&self, next: &GridPath) -> Result<GridPath> {
        if next.grid.dt != self.grid.dt {
            return Err(Error::InvalidGrid("concatenated paths differ in dt".into()));
        }
        if next.values[0] != self.last() {
            return Err(Error::InvalidGrid("concatenated path is discontinuous".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&next.values[1..]);
        let n_steps = values.len() - 1;
        let grid = TimeGrid {
            dt: self.grid.dt,
            horizon: n_steps as f64 * self.grid.dt,
            n_steps,
        };
        Ok(GridPath { grid, values })
    }
}

impl Polyline for GridPath {
    fn len(&self) -> usize {
        self.values.len()
    }

    fn time(&self, i: usize) -> f64 {
        self.grid.time(i)
    }

    fn value(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Piecewise-linear path with arbitrary, strictly increasing node times.
#[derive(Clone, Debug, PartialEq)]
pub struct PolylinePath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl PolylinePath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::InvalidGrid("times and values must be non-empty and equal length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("node times must increase strictly".into()));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Polyline for PolylinePath {
    fn len(&self) -> usize {
        self.times.len()
    }

    fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    fn value(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Brownian motion from `start`: independent `N(0, dt)` increments.
pub fn sample_brownian(grid: &TimeGrid, start: f64, rng: &mut impl RandomSource) -> GridPath {
    let sd = grid.dt.sqrt();
    let mut values = Vec::with_capacity(grid.n_points());
    let mut x = start;
    values.push(x);
    for _ in 0..grid.n_steps {
        x += sd * rng.standard_normal();
        values.push(x);
    }
    GridPath { grid: *grid, values }
}

/// `2 |B|` for a standard Brownian motion `B` from zero, on the grid.
pub fn sample_reflected_bm(grid: &TimeGrid, rng: &mut impl RandomSource) -> GridPath {
    let mut path = sample_brownian(grid, 0.0, rng);
    for v in &mut path.values {
        *v = 2.0 * v.abs();
    }
    path
}

/// `2 |B|` where `B` is the linear interpolation of the given grid path.
///
/// Sign changes of `B` between grid points become exact zero nodes, so the
/// result returns to zero the way the continuous process does.
pub fn reflect_with_zeros(b: &GridPath) -> PolylinePath {
    let dt = b.grid.dt;
    let mut times = Vec::with_capacity(b.values.len() + b.values.len() / 8);
    let mut values = Vec::with_capacity(times.capacity());
    times.push(0.0);
    values.push(2.0 * b.values[0].abs());
    for (k, w) in b.values.windows(2).enumerate() {
        let (x0, x1) = (w[0], w[1]);
        let t0 = k as f64 * dt;
        if x0 * x1 < 0.0 {
            let tz = t0 + dt * (x0 / (x0 - x1));
            let t1 = (k + 1) as f64 * dt;
            if tz > t0 && tz < t1 {
                times.push(tz);
                values.push(0.0);
            }
        }
        times.push((k + 1) as f64 * dt);
        values.push(2.0 * x1.abs());
    }
    PolylinePath { times, values }
}

/// Reflected Brownian motion with its zero set resolved, see
/// [`reflect_with_zeros`].
pub fn sample_reflected_bm_polyline(grid: &TimeGrid, rng: &mut impl RandomSource) -> PolylinePath {
    reflect_with_zeros(&sample_brownian(grid, 0.0, rng))
}

/// Exponential draw with the given mean.
pub fn sample_exponential(mean: f64, rng: &mut impl RandomSource) -> Result<f64> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Domain(format!("exponential mean must be positive, got {mean}")));
    }
    Ok(exponential_from_uniform(mean, rng.uniform()))
}

/// Inverse CDF of the exponential law with the given mean.
pub fn exponential_from_uniform(mean: f64, u: f64) -> f64 {
    -mean * (-u).ln_1p()
}

/// Laplace exponent of the Feller diffusion: `E[exp(-l Z_t) | Z_0 = z] = exp(-z u_t(l))`.
pub fn u_t(lambda: f64, t: f64) -> f64 {
    lambda / (1.0 + 0.5 * lambda * t)
}

/// Exact draw of `Z_t` for the Feller diffusion started at `z`.
///
/// `Z_t` is compound Poisson: `N ~ Poisson(2z/t)` exponential clumps of
/// mean `t/2`.
pub fn feller_sample(z: f64, t: f64, rng: &mut impl RandomSource) -> Result<f64> {
    if !(z >= 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!("Feller start must be non-negative, got {z}")));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("Feller time must be positive, got {t}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let n = rng.poisson(2.0 * z / t);
    Ok(0.5 * t * rng.gamma_int(n))
}

/// Uniform grid of observation times, optionally refined on windows.
///
/// Times always start at 0 and end exactly at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationGrid {
    times: Vec<f64>,
}

impl ObservationGrid {
    pub fn uniform(grid: &TimeGrid) -> Self {
        let mut times: Vec<f64> = (0..grid.n_points()).map(|k| grid.time(k)).collect();
        if let Some(last) = times.last_mut() {
            *last = grid.horizon();
        }
        if times.len() >= 2 && times[times.len() - 2] >= grid.horizon() {
            times.pop();
            *times.last_mut().unwrap() = grid.horizon();
        }
        Self { times }
    }

    /// Base grid with additional points at spacing `dt` inside each window
    /// `(start, end)`.
    pub fn refined(base: &TimeGrid, windows: &[(f64, f64, f64)]) -> Result<Self> {
        let mut times = Self::uniform(base).times;
        for &(a, b, dt) in windows {
            if !(dt > 0.0) || !(b > a) {
                return Err(Error::InvalidGrid(format!("bad refinement window ({a}, {b}, {dt})")));
            }
            let n = ((b - a) / dt - 1e-9).ceil() as usize;
            for k in 0..=n {
                let t = (a + k as f64 * dt).min(b);
                if t > 0.0 && t < base.horizon() {
                    times.push(t);
                }
            }
        }
        times.sort_by(f64::total_cmp);
        times.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.first() != Some(&0.0) {
            return Err(Error::InvalidGrid("observation grid must start at 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("observation times must increase strictly".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the first observation time `>= t`.
    pub fn first_at_or_after(&self, t: f64) -> usize {
        self.times.partition_point(|&g| g < t)
    }

    /// Index of `t` itself if it is an observation time.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.first_at_or_after(t);
        (i < self.times.len() && self.times[i] == t).then_some(i)
    }
}
