//! Branching Brownian particle systems built on a marked forest: spatial
//! motions, historical paths, the discrete snake and measure snapshots.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::stochastic::ObservationGrid;
use crate::tree_coding::{
    exact_lifetime, forest_to_contour_indexed, ContourProcess, EdgeLabel, MarkedForest,
};

#[inline]
pub(crate) fn interp(t0: f64, x0: f64, t1: f64, x1: f64, t: f64) -> f64 {
    if t <= t0 {
        x0
    } else if t >= t1 {
        x1
    } else {
        x0 + (x1 - x0) * ((t - t0) / (t1 - t0))
    }
}

/// A path `w` on `[0, zeta]`, linear between its samples and frozen at
/// `w(zeta)` afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct StoppedPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StoppedPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() || times[0] != 0.0 {
            return Err(Error::Domain("stopped path needs samples starting at time 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("stopped path times must increase".into()));
        }
        Ok(Self { times, values })
    }

    /// The trivial path of lifetime 0 at `x`.
    pub fn trivial(x: f64) -> Self {
        Self {
            times: vec![0.0],
            values: vec![x],
        }
    }

    pub fn lifetime(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn origin(&self) -> f64 {
        self.values[0]
    }

    pub fn tip(&self) -> f64 {
        *self.values.last().expect("non-empty")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        let j = self.times.partition_point(|&s| s < t);
        if j == 0 {
            return self.values[0];
        }
        if j >= self.times.len() {
            return self.tip();
        }
        interp(self.times[j - 1], self.values[j - 1], self.times[j], self.values[j], t)
    }
}

/// Initial positions `x_1 <= ... <= x_N`, either explicit or as the
/// `N = floor(a / eps)` midpoint quantiles of a density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialMeasure {
    Atoms { positions: Vec<f64> },
    Uniform { mass: f64, low: f64, high: f64 },
    Triangular { mass: f64, low: f64, mode: f64, high: f64 },
}

impl InitialMeasure {
    pub fn positions(&self, epsilon: f64) -> Result<Vec<f64>> {
        let quantiles = |mass: f64| -> Result<Vec<f64>> {
            let n = (mass / epsilon + 1e-9).floor();
            if !(n >= 1.0) {
                return Err(Error::Domain(format!("mass {mass} gives no particles at eps {epsilon}")));
            }
            let n = n as usize;
            Ok((0..n).map(|j| (j as f64 + 0.5) / n as f64).collect())
        };
        let xs = match *self {
            InitialMeasure::Atoms { ref positions } => {
                let mut p = positions.clone();
                p.sort_by(f64::total_cmp);
                p
            }
            InitialMeasure::Uniform { mass, low, high } => {
                if !(high > low) {
                    return Err(Error::Domain("uniform interval is empty".into()));
                }
                quantiles(mass)?.into_iter().map(|u| low + u * (high - low)).collect()
            }
            InitialMeasure::Triangular {
                mass,
                low,
                mode,
                high,
            } => {
                if !(high > low && mode >= low && mode <= high) {
                    return Err(Error::Domain("bad triangular parameters".into()));
                }
                let fc = (mode - low) / (high - low);
                quantiles(mass)?
                    .into_iter()
                    .map(|u| {
                        if u < fc {
                            low + (u * (high - low) * (mode - low)).sqrt()
                        } else {
                            high - ((1.0 - u) * (high - low) * (high - mode)).sqrt()
                        }
                    })
                    .collect()
            }
        };
        if xs.is_empty() {
            return Err(Error::Domain("initial measure has no atoms".into()));
        }
        Ok(xs)
    }
}

/// Forest with a Brownian motion attached to every edge.
///
/// Each edge stores samples at its birth, at every observation time strictly
/// inside its life, and at its end (death, or the horizon if it is still
/// alive there). Edges alive at the horizon are flagged as truncated and
/// have no children.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalSystem {
    forest: MarkedForest,
    grid: ObservationGrid,
    initial: Vec<f64>,
    births: Vec<f64>,
    deaths: Vec<f64>,
    truncated: Vec<bool>,
    first_obs: Vec<u32>,
    offsets: Vec<usize>,
    samples: Vec<f64>,
}

fn check_positions(forest: &MarkedForest, initial: &[f64]) -> Result<()> {
    if initial.len() != forest.n_roots() {
        return Err(Error::Domain(format!(
            "{} initial positions for {} roots",
            initial.len(),
            forest.n_roots()
        )));
    }
    if initial.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("initial positions must be finite".into()));
    }
    if initial.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("initial positions must be sorted".into()));
    }
    Ok(())
}

/// Attaches independent Brownian motions to every edge of `forest`.
///
/// Roots start at the given sorted positions and children at their
/// parent's death position. Lifetimes reaching past the horizon are
/// truncated; their descendants are dropped. Duplicate death times are
/// separated by nudging the later edge by one ulp.
pub fn attach_motions(
    forest: &MarkedForest,
    initial_positions: &[f64],
    grid: &ObservationGrid,
    rng: &mut impl RandomSource,
) -> Result<HistoricalSystem> {
    check_positions(forest, initial_positions)?;
    let horizon = grid.horizon();
    let mut forest = forest.clone();
    let n = forest.len();
    let mut deaths = vec![0.0; n];
    let mut seen: HashSet<u64> = HashSet::with_capacity(n);
    let mut cut = vec![false; n];
    let mut any_cut = false;
    for i in 0..n {
        let birth = forest.parent(i).map_or(0.0, |p| deaths[p]);
        let mut d = birth + forest.lifetime(i);
        if d < horizon {
            if !seen.insert(d.to_bits()) {
                let orig = d;
                while !seen.insert(d.to_bits()) {
                    d = d.next_up();
                }
                log::warn!("death time {orig:e} repeated; moved to {d:e}");
                forest.set_lifetime(i, exact_lifetime(birth, d));
            }
        } else if forest.children(i).is_some() {
            cut[i] = true;
            any_cut = true;
        }
        deaths[i] = d;
    }
    let (forest, kept) = if any_cut {
        forest.prune(&cut)
    } else {
        let kept = (0..n).collect();
        (forest, kept)
    };
    let deaths: Vec<f64> = kept.iter().map(|&i| deaths[i]).collect();
    let births: Vec<f64> = (0..forest.len())
        .map(|i| forest.parent(i).map_or(0.0, |p| deaths[p]))
        .collect();
    let truncated: Vec<bool> = deaths.iter().map(|&d| d >= horizon).collect();

    let times = grid.times();
    let mut first_obs = Vec::with_capacity(forest.len());
    let mut offsets = Vec::with_capacity(forest.len() + 1);
    offsets.push(0);
    let mut total = 0usize;
    for i in 0..forest.len() {
        let end = deaths[i].min(horizon);
        let a = times.partition_point(|&g| g <= births[i]);
        let b = times.partition_point(|&g| g < end);
        first_obs.push(a as u32);
        total += b.saturating_sub(a) + 2;
        offsets.push(total);
    }
    let mut samples = Vec::with_capacity(total);
    for i in 0..forest.len() {
        let start = match forest.parent(i) {
            None => initial_positions[forest.tree_of(i)],
            Some(p) => samples[offsets[p + 1] - 1],
        };
        let count = offsets[i + 1] - offsets[i];
        let a = first_obs[i] as usize;
        let end = deaths[i].min(horizon);
        let mut x = start;
        let mut t = births[i];
        samples.push(x);
        for k in 1..count {
            let tk = if k == count - 1 { end } else { times[a + k - 1] };
            x += (tk - t).sqrt() * rng.standard_normal();
            samples.push(x);
            t = tk;
        }
    }
    Ok(HistoricalSystem {
        forest,
        grid: grid.clone(),
        initial: initial_positions.to_vec(),
        births,
        deaths,
        truncated,
        first_obs,
        offsets,
        samples,
    })
}

/// Positions of the particles alive at one time, each of weight `weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureAtoms {
    pub t: f64,
    pub weight: f64,
    pub locations: Vec<f64>,
}

impl MeasureAtoms {
    pub fn total_mass(&self) -> f64 {
        self.weight * self.locations.len() as f64
    }

    pub fn mass_in(&self, low: f64, high: f64) -> f64 {
        self.weight * self.locations.iter().filter(|&&x| x >= low && x <= high).count() as f64
    }
}

/// Historical paths of the particles alive at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAtoms {
    pub t: f64,
    pub weight: f64,
    pub paths: Vec<StoppedPath>,
}

impl HistoricalAtoms {
    pub fn total_mass(&self) -> f64 {
        self.weight * self.paths.len() as f64
    }

    /// Projection onto the current positions.
    pub fn endpoints(&self) -> MeasureAtoms {
        MeasureAtoms {
            t: self.t,
            weight: self.weight,
            locations: self.paths.iter().map(|p| p.eval(self.t)).collect(),
        }
    }
}

/// Stopped path of the snake at one contour grid index.
#[derive(Clone, Debug, PartialEq)]
pub struct SnakeSample {
    pub s_index: usize,
    pub path: StoppedPath,
}

/// The discrete snake with the contour driving it.
#[derive(Clone, Debug, PartialEq)]
pub struct Snake {
    pub contour: ContourProcess,
    pub samples: Vec<SnakeSample>,
}

impl HistoricalSystem {
    /// Assembles a system from per-edge samples laid out as described on
    /// the type.
    pub(crate) fn from_parts(
        forest: MarkedForest,
        grid: ObservationGrid,
        initial: Vec<f64>,
        births: Vec<f64>,
        deaths: Vec<f64>,
        per_edge: Vec<Vec<f64>>,
    ) -> Self {
        let horizon = grid.horizon();
        let truncated = deaths.iter().map(|&d| d >= horizon).collect();
        let mut first_obs = Vec::with_capacity(births.len());
        let mut offsets = Vec::with_capacity(births.len() + 1);
        offsets.push(0);
        let mut total = 0;
        for (i, s) in per_edge.iter().enumerate() {
            first_obs.push(grid.times().partition_point(|&g| g <= births[i]) as u32);
            total += s.len();
            offsets.push(total);
        }
        let mut samples = Vec::with_capacity(total);
        for s in per_edge {
            samples.extend_from_slice(&s);
        }
        Self {
            forest,
            grid,
            initial,
            births,
            deaths,
            truncated,
            first_obs,
            offsets,
            samples,
        }
    }

    pub fn forest(&self) -> &MarkedForest {
        &self.forest
    }

    pub fn grid(&self) -> &ObservationGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.forest.epsilon()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn len(&self) -> usize {
        self.forest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forest.is_empty()
    }

    pub fn initial_positions(&self) -> &[f64] {
        &self.initial
    }

    pub fn birth(&self, i: usize) -> f64 {
        self.births[i]
    }

    /// Death time, which may lie beyond the horizon for truncated edges.
    pub fn death(&self, i: usize) -> f64 {
        self.deaths[i]
    }

    /// Last sampled time: the death, or the horizon if truncated.
    pub fn end(&self, i: usize) -> f64 {
        self.deaths[i].min(self.grid.horizon())
    }

    pub fn truncated(&self, i: usize) -> bool {
        self.truncated[i]
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated.iter().any(|&t| t)
    }

    pub fn samples(&self, i: usize) -> &[f64] {
        &self.samples[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn sample_time(&self, i: usize, k: usize) -> f64 {
        let n = self.offsets[i + 1] - self.offsets[i];
        if k == 0 {
            self.births[i]
        } else if k == n - 1 {
            self.end(i)
        } else {
            self.grid.times()[self.first_obs[i] as usize + k - 1]
        }
    }

    pub fn sample_times(&self, i: usize) -> Vec<f64> {
        let n = self.offsets[i + 1] - self.offsets[i];
        (0..n).map(|k| self.sample_time(i, k)).collect()
    }

    /// `birth <= t < death`, or `t <= horizon` for truncated edges.
    pub fn is_alive(&self, i: usize, t: f64) -> bool {
        self.births[i] <= t && (t < self.deaths[i] || (self.truncated[i] && t <= self.horizon()))
    }

    pub fn alive_at(&self, t: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_alive(i, t)).collect()
    }

    /// Position of edge `i` at `t`, linear between samples and clamped to
    /// its life interval.
    pub fn value_at(&self, i: usize, t: f64) -> f64 {
        let s = self.samples(i);
        let n = s.len();
        if t <= self.births[i] {
            return s[0];
        }
        if t >= self.end(i) {
            return s[n - 1];
        }
        let a = self.first_obs[i] as usize;
        let j = self.grid.first_at_or_after(t);
        let next = (j + 1).saturating_sub(a).clamp(1, n - 1);
        let (t1, x1) = (self.sample_time(i, next), s[next]);
        if t1 == t {
            return x1;
        }
        interp(self.sample_time(i, next - 1), s[next - 1], t1, x1, t)
    }

    /// Ancestor of `i` (possibly `i` itself) alive at `t <= end(i)`.
    pub fn ancestor_at(&self, mut i: usize, t: f64) -> usize {
        while self.births[i] > t {
            i = self.forest.parent(i).expect("roots are born at 0");
        }
        i
    }

    /// `w_i(t)`, the historical path of edge `i` at time `t`.
    pub fn path_value(&self, i: usize, t: f64) -> f64 {
        self.value_at(self.ancestor_at(i, t), t)
    }

    pub fn find(&self, label: &EdgeLabel) -> Result<usize> {
        self.forest
            .find(label)
            .ok_or_else(|| Error::Lookup(label.to_string()))
    }

    pub fn historical_path(&self, label: &EdgeLabel, t: f64) -> Result<StoppedPath> {
        let i = self.find(label)?;
        self.historical_path_of(i, t)
    }

    /// Ancestral concatenation of motions up to `t <= end(i)`.
    pub fn historical_path_of(&self, i: usize, t: f64) -> Result<StoppedPath> {
        if !(t >= 0.0) || t > self.end(i) {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}] for edge {}",
                self.end(i),
                self.forest.label(i)
            )));
        }
        let mut line = Vec::new();
        let mut j = self.ancestor_at(i, t);
        loop {
            line.push(j);
            match self.forest.parent(j) {
                Some(p) => j = p,
                None => break,
            }
        }
        line.reverse();
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (pos, &e) in line.iter().enumerate() {
            let s = self.samples(e);
            // the birth sample repeats the parent's end sample
            let from = usize::from(pos > 0);
            for (k, &x) in s.iter().enumerate().skip(from) {
                let tk = self.sample_time(e, k);
                if tk >= t {
                    break;
                }
                times.push(tk);
                values.push(x);
            }
        }
        let tip = self.path_value(i, t);
        if times.last() != Some(&t) {
            times.push(t);
            values.push(tip);
        }
        Ok(StoppedPath { times, values })
    }

    pub fn measure_at(&self, t: f64) -> MeasureAtoms {
        let locations = (0..self.len())
            .filter(|&i| self.is_alive(i, t))
            .map(|i| self.value_at(i, t))
            .collect();
        MeasureAtoms {
            t,
            weight: self.epsilon(),
            locations,
        }
    }

    pub fn alive_count(&self, t: f64) -> usize {
        (0..self.len()).filter(|&i| self.is_alive(i, t)).count()
    }

    pub fn historical_measure(&self, t: f64) -> HistoricalAtoms {
        let paths = (0..self.len())
            .filter(|&i| self.is_alive(i, t))
            .map(|i| self.historical_path_of(i, t).expect("alive edge covers t"))
            .collect();
        HistoricalAtoms {
            t,
            weight: self.epsilon(),
            paths,
        }
    }

    /// `(t, f_v(t))` for every edge and observation time in its life.
    pub fn graph_points(&self) -> Vec<(f64, f64)> {
        self.graph_points_until(self.horizon())
    }

    pub fn graph_points_until(&self, t_max: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &t in self.grid.times().iter().take_while(|&&t| t <= t_max) {
            for i in 0..self.len() {
                if self.is_alive(i, t) {
                    out.push((t, self.value_at(i, t)));
                }
            }
        }
        out
    }

    /// The discrete snake `W_s` over every contour grid index.
    pub fn build_snake(&self) -> Result<Snake> {
        if self.is_truncated() {
            return Err(Error::Unsupported(
                "the snake needs complete trees; some edges outlive the horizon".into(),
            ));
        }
        let (contour, owner) = forest_to_contour_indexed(&self.forest);
        let mut samples = Vec::with_capacity(owner.len());
        let mut tree = 0usize;
        for (s, o) in owner.iter().enumerate() {
            let path = match *o {
                Some(i) => self.historical_path_of(i, self.deaths[i])?,
                None => {
                    let k = tree.min(self.forest.n_roots() - 1);
                    tree += 1;
                    StoppedPath::trivial(self.initial[k])
                }
            };
            samples.push(SnakeSample { s_index: s, path });
        }
        Ok(Snake { contour, samples })
    }

    /// Subsystem of the first `m` trees, sharing the motions.
    pub fn restrict_roots(&self, m: usize) -> Result<Self> {
        let forest = self.forest.restrict_roots(m)?;
        let n = forest.len();
        Ok(Self {
            grid: self.grid.clone(),
            initial: self.initial[..m].to_vec(),
            births: self.births[..n].to_vec(),
            deaths: self.deaths[..n].to_vec(),
            truncated: self.truncated[..n].to_vec(),
            first_obs: self.first_obs[..n].to_vec(),
            offsets: self.offsets[..=n].to_vec(),
            samples: self.samples[..self.offsets[n]].to_vec(),
            forest,
        })
    }

    /// CSV `t,particle_id,position` at every observation time.
    pub fn write_snapshots_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,particle_id,position")?;
        for &t in self.grid.times() {
            for i in 0..self.len() {
                if self.is_alive(i, t) {
                    writeln!(w, "{t:?},{i},{:?}", self.value_at(i, t))?;
                }
            }
        }
        Ok(())
    }
}

/// CSV `path_id,t,x`.
pub fn write_paths_csv<'a>(
    paths: impl IntoIterator<Item = (usize, &'a StoppedPath)>,
    mut w: impl Write,
) -> Result<()> {
    writeln!(w, "path_id,t,x")?;
    for (id, p) in paths {
        for (t, x) in p.times().iter().zip(p.values()) {
            writeln!(w, "{id},{t:?},{x:?}")?;
        }
    }
    Ok(())
}

/// Reads CSV `path_id,t,x` back into `(path_id, path)` pairs.
pub fn read_paths_csv(r: impl std::io::BufRead) -> Result<Vec<(usize, StoppedPath)>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "path_id,t,x" => {}
        _ => return Err(Error::Parse("expected header path_id,t,x".into())),
    }
    let mut out: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("bad row {line:?}")));
        }
        let bad = |s: &str| Error::Parse(format!("bad field {s:?}"));
        let id: usize = f[0].parse().map_err(|_| bad(f[0]))?;
        let t: f64 = f[1].parse().map_err(|_| bad(f[1]))?;
        let x: f64 = f[2].parse().map_err(|_| bad(f[2]))?;
        match out.last_mut() {
            Some(last) if last.0 == id => {
                last.1.push(t);
                last.2.push(x);
            }
            _ => out.push((id, vec![t], vec![x])),
        }
    }
    out.into_iter()
        .map(|(id, t, x)| StoppedPath::new(t, x).map(|p| (id, p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, ZeroNoise};
    use crate::stochastic::TimeGrid;
    use crate::tree_coding::{contour_to_forest, sample_contour_direct_capped, sample_forest_until};
    use std::collections::BTreeMap;

    fn grid(dt: f64, horizon: f64) -> ObservationGrid {
        ObservationGrid::uniform(&TimeGrid::new(dt, horizon).unwrap())
    }

    fn leaf(lifetime: f64) -> MarkedForest {
        let mut m = BTreeMap::new();
        m.insert(EdgeLabel::root(1).unwrap(), lifetime);
        MarkedForest::from_lifetime_map(0.1, 1, &m).unwrap()
    }

    fn small_system(seed: u64, n: usize) -> HistoricalSystem {
        let mut rng = RngStream::new(seed, 0);
        let c = sample_contour_direct_capped(0.1, n, 600, &mut rng)
            .unwrap_or_else(|_| crate::tree_coding::ContourProcess::new(0.1, vec![0.0, 0.3, 0.0]).unwrap());
        let f = contour_to_forest(&c).unwrap();
        let x0: Vec<f64> = (0..f.n_roots()).map(|k| k as f64 * 0.1).collect();
        let horizon = f.death_times().iter().copied().fold(0.0, f64::max) + 0.05;
        attach_motions(&f, &x0, &grid(0.01, horizon), &mut rng).unwrap()
    }

    #[test]
    fn zero_noise_leaf_is_constant() {
        let s = attach_motions(&leaf(0.35), &[1.25], &grid(0.1, 1.0), &mut ZeroNoise).unwrap();
        assert!(s.samples(0).iter().all(|&x| x == 1.25));
        assert_eq!(s.sample_times(0), vec![0.0, 0.1, 0.2, 0.30000000000000004, 0.35]);
    }

    #[test]
    fn unsorted_positions_rejected() {
        let f = sample_forest_until(0.1, 2, 0.5, &mut RngStream::new(1, 0)).unwrap();
        let r = attach_motions(&f, &[1.0, 0.0], &grid(0.1, 0.5), &mut ZeroNoise);
        assert!(matches!(r, Err(Error::Domain(_))));
        let r = attach_motions(&f, &[1.0], &grid(0.1, 0.5), &mut ZeroNoise);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn branch_points_are_continuous() {
        for seed in 0..200 {
            let f = sample_forest_until(0.05, 4, 0.5, &mut RngStream::new(seed, 1)).unwrap();
            let x0 = [0.0, 0.1, 0.2, 0.3];
            let s = attach_motions(&f, &x0, &grid(0.02, 0.5), &mut RngStream::new(seed, 2)).unwrap();
            for i in 0..s.len() {
                match s.forest().parent(i) {
                    Some(p) => {
                        assert_eq!(s.samples(i)[0], *s.samples(p).last().unwrap());
                        assert_eq!(s.birth(i), s.death(p));
                    }
                    None => assert_eq!(s.samples(i)[0], x0[s.forest().tree_of(i)]),
                }
                assert_eq!(s.birth(i) + s.forest().lifetime(i), s.death(i));
            }
        }
    }

    #[test]
    fn truncation_flags_and_prunes() {
        let c = ContourProcess::new(0.1, vec![0.0, 0.9, 0.4, 0.7, 0.0]).unwrap();
        let f = contour_to_forest(&c).unwrap();
        let s = attach_motions(&f, &[0.0], &grid(0.1, 0.3), &mut ZeroNoise).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.truncated(0));
        assert_eq!(s.end(0), 0.3);
        assert!(s.is_alive(0, 0.3));
        assert!(matches!(s.build_snake(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn duplicate_deaths_are_separated() {
        let r = EdgeLabel::root(1).unwrap();
        let mut m = BTreeMap::new();
        m.insert(r.clone(), 0.25);
        m.insert(EdgeLabel::root(2).unwrap(), 0.25);
        let f = MarkedForest::from_lifetime_map(0.1, 2, &m).unwrap();
        let s = attach_motions(&f, &[0.0, 1.0], &grid(0.1, 1.0), &mut ZeroNoise).unwrap();
        assert_ne!(s.death(0), s.death(1));
        assert_eq!(s.death(1), 0.25f64.next_up());
    }

    #[test]
    fn historical_path_boundaries() {
        let s = small_system(3, 3);
        for i in 0..s.len() {
            let w = s.historical_path_of(i, s.death(i)).unwrap();
            assert_eq!(w.tip(), *s.samples(i).last().unwrap());
            assert_eq!(w.lifetime(), s.death(i));
            if let Some(p) = s.forest().parent(i) {
                let at_birth = s.historical_path_of(i, s.birth(i)).unwrap();
                let parent = s.historical_path_of(p, s.death(p)).unwrap();
                assert_eq!(at_birth, parent);
            } else {
                let t = 0.5 * s.death(i);
                let w = s.historical_path_of(i, t).unwrap();
                for (&tk, &x) in w.times().iter().zip(w.values()) {
                    assert_eq!(x, s.value_at(i, tk));
                }
            }
        }
        let bad = EdgeLabel::parse(9, "").unwrap();
        assert!(matches!(s.historical_path(&bad, 0.0), Err(Error::Lookup(_))));
    }

    #[test]
    fn leaf_snake() {
        let s = attach_motions(&leaf(0.35), &[2.0], &grid(0.1, 1.0), &mut RngStream::new(4, 0)).unwrap();
        let snake = s.build_snake().unwrap();
        assert_eq!(snake.samples.len(), 3);
        assert_eq!(snake.samples[0].path, StoppedPath::trivial(2.0));
        assert_eq!(snake.samples[2].path, StoppedPath::trivial(2.0));
        assert_eq!(snake.samples[1].path.lifetime(), 0.35);
    }

    #[test]
    fn snake_property_and_lifetimes() {
        for seed in 0..20 {
            let s = small_system(100 + seed, 2);
            let snake = s.build_snake().unwrap();
            let v = snake.contour.values();
            for sample in &snake.samples {
                assert_eq!(sample.path.lifetime(), v[sample.s_index]);
            }
            for (a, b) in snake.contour.excursions() {
                for s1 in a + 1..b {
                    let mut m = f64::INFINITY;
                    for s2 in s1..b {
                        m = m.min(v[s2]);
                        let (p, q) = (&snake.samples[s1].path, &snake.samples[s2].path);
                        for &t in p.times().iter().chain(q.times()) {
                            if t <= m {
                                assert_eq!(p.eval(t), q.eval(t));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn measure_matches_snake_upcrossings() {
        for seed in 0..20 {
            let s = small_system(200 + seed, 3);
            let snake = s.build_snake().unwrap();
            let v = snake.contour.values();
            for &t in s.grid().times() {
                let mut atoms = s.measure_at(t).locations;
                let mut from_snake: Vec<f64> = (0..v.len() - 1)
                    .filter(|&r| v[r] <= t && t < v[r + 1])
                    .map(|r| snake.samples[r + 1].path.eval(t))
                    .collect();
                atoms.sort_by(f64::total_cmp);
                from_snake.sort_by(f64::total_cmp);
                assert_eq!(atoms, from_snake, "t = {t}");
            }
        }
    }

    #[test]
    fn measure_boundaries() {
        let s = small_system(5, 4);
        let m0 = s.measure_at(0.0);
        assert_eq!(m0.locations, s.initial_positions());
        assert!(s.measure_at(s.horizon()).locations.is_empty());
        assert_eq!(m0.total_mass(), 0.1 * s.forest().n_roots() as f64);
    }

    #[test]
    fn historical_measure_projects() {
        let s = small_system(6, 4);
        for &t in s.grid().times() {
            let h = s.historical_measure(t);
            assert_eq!(h.endpoints(), s.measure_at(t));
            assert!(h.paths.iter().all(|p| p.lifetime() == t));
            assert_eq!(h.total_mass(), s.epsilon() * s.alive_count(t) as f64);
        }
        let h0 = s.historical_measure(0.0);
        assert!(h0.paths.iter().zip(s.initial_positions()).all(|(p, &x)| *p == StoppedPath::trivial(x)));
    }

    #[test]
    fn graph_inclusions() {
        let flat = attach_motions(&leaf(0.35), &[0.5], &grid(0.1, 1.0), &mut ZeroNoise).unwrap();
        assert!(flat.graph_points().iter().all(|&(_, x)| x == 0.5));
        assert_eq!(flat.graph_points().len(), 4);

        let s = small_system(7, 3);
        let all = s.graph_points();
        for &t in s.grid().times() {
            for x in s.measure_at(t).locations {
                assert!(all.contains(&(t, x)));
            }
        }
        let early = s.graph_points_until(0.5 * s.horizon());
        assert!(early.iter().all(|p| all.contains(p)));
        assert!(early.len() <= all.len());
    }

    #[test]
    fn restriction_is_a_prefix() {
        let s = small_system(8, 4);
        let n = s.forest().n_roots();
        assert_eq!(s.restrict_roots(n).unwrap(), s);
        let one = s.restrict_roots(1).unwrap();
        assert_eq!(one.forest().n_roots(), 1);
        for i in 0..one.len() {
            assert_eq!(one.samples(i), s.samples(i));
        }
    }

    #[test]
    fn initial_measure_quantiles() {
        let u = InitialMeasure::Uniform { mass: 1.0, low: 0.0, high: 1.0 };
        let x = u.positions(0.1).unwrap();
        assert_eq!(x.len(), 10);
        assert!((x[0] - 0.05).abs() < 1e-15);
        let t = InitialMeasure::Triangular { mass: 1.0, low: -1.0, mode: 0.0, high: 1.0 };
        let x = t.positions(0.01).unwrap();
        assert_eq!(x.len(), 100);
        assert!(x.windows(2).all(|w| w[1] > w[0]));
        assert!((x[49] + x[50]).abs() < 1e-12);
        let a = InitialMeasure::Atoms { positions: vec![2.0, 1.0] };
        assert_eq!(a.positions(0.5).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn paths_csv_round_trip() {
        let s = small_system(9, 2);
        let paths: Vec<StoppedPath> = (0..s.len())
            .map(|i| s.historical_path_of(i, s.death(i)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_paths_csv(paths.iter().enumerate(), &mut buf).unwrap();
        let back = read_paths_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), paths.len());
        for ((id, p), (j, q)) in back.iter().zip(paths.iter().enumerate()) {
            assert_eq!(*id, j);
            assert_eq!(p, q);
        }
    }
}
