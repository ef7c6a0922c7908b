//! Statistics on particle systems: kernel densities, the ψ statistic,
//! oscillation and branch-separation scaling, Feller mass laws and the
//! tagged-particle experiment for ordered Brownian motions.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::branching::{HistoricalSystem, MeasureAtoms, StoppedPath};
use crate::error::{Error, Result};
use crate::reflection::ReflectedSystem;
use crate::rng::RandomSource;
use crate::stats::{self, LinearFit};
use crate::stochastic::u_t;
use crate::tree_coding::EdgeLabel;

/// Kernel estimate of the density of a measure on a location grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub t: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    /// Set when the measure had no atoms; the values are then all zero.
    pub empty: bool,
}

impl DensityEstimate {
    /// Linear interpolation on the grid, zero outside it.
    pub fn at(&self, y: f64) -> f64 {
        let g = &self.grid;
        if g.is_empty() || y < g[0] || y > g[g.len() - 1] {
            return 0.0;
        }
        let j = g.partition_point(|&x| x < y);
        if g[j] == y {
            return self.values[j];
        }
        let (x0, x1) = (g[j - 1], g[j]);
        let w = (y - x0) / (x1 - x0);
        self.values[j - 1] * (1.0 - w) + self.values[j] * w
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, v)| 0.5 * (x[1] - x[0]) * (v[0] + v[1]))
            .sum()
    }
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// `1.06 σ m^{-1/5}` for `m` locations; `None` with fewer than two atoms or
/// zero spread.
pub fn silverman_bandwidth(locations: &[f64]) -> Option<f64> {
    if locations.len() < 2 {
        return None;
    }
    let s = stats::variance(locations).sqrt();
    (s > 0.0).then(|| 1.06 * s * (locations.len() as f64).powf(-0.2))
}

/// `x̂(y) = Σ w K_h(y - x)` with the Epanechnikov kernel.
pub fn density_estimate(atoms: &MeasureAtoms, h: f64, grid: &[f64]) -> Result<DensityEstimate> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("location grid must be increasing".into()));
    }
    let mut xs = atoms.locations.clone();
    xs.sort_by(f64::total_cmp);
    let values = grid
        .iter()
        .map(|&y| {
            let a = xs.partition_point(|&x| x <= y - h);
            let b = xs.partition_point(|&x| x < y + h);
            let s: f64 = xs[a..b].iter().map(|&x| epanechnikov((y - x) / h)).sum();
            (atoms.weight * s / h).max(0.0)
        })
        .collect();
    Ok(DensityEstimate {
        t: atoms.t,
        grid: grid.to_vec(),
        values,
        bandwidth: h,
        empty: xs.is_empty(),
    })
}

/// Density of `atoms` with the Silverman bandwidth (or `h` if given) on a
/// uniform grid covering the support padded by one bandwidth.
pub fn density_auto(atoms: &MeasureAtoms, h: Option<f64>, points: usize) -> Result<DensityEstimate> {
    let h = match h.or_else(|| silverman_bandwidth(&atoms.locations)) {
        Some(h) => h,
        None => atoms.weight.max(1e-3),
    };
    let lo = atoms.locations.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = atoms.locations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo - h, hi + h) } else { (-h, h) };
    let n = points.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect();
    density_estimate(atoms, h, &grid)
}

/// Right-most position at `t + delta` among particles whose reflected
/// historical path at `t` lies below `z`; `-inf` when there are none.
pub fn psi_statistic(refl: &ReflectedSystem, t: f64, delta: f64, z: f64) -> Result<f64> {
    let s = refl.system();
    let u = t + delta;
    if !(t >= 0.0 && delta >= 0.0 && u <= s.horizon()) {
        return Err(Error::Domain(format!(
            "[{t}, {u}] must lie inside [0, {}]",
            s.horizon()
        )));
    }
    Ok(s.alive_at(u)
        .into_iter()
        .filter(|&i| s.path_value(i, t) < z)
        .map(|i| s.value_at(i, u))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Historical paths of every particle alive at `t`, in label order.
pub fn historical_paths_at(system: &HistoricalSystem, t: f64) -> Result<Vec<StoppedPath>> {
    system
        .alive_at(t)
        .into_iter()
        .map(|i| system.historical_path_of(i, t))
        .collect()
}

/// One row of a [`ScalingTable`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub delta: f64,
    pub n: usize,
    pub median: f64,
    pub q90: f64,
    pub q99: f64,
}

/// Oscillation quantiles per increment, with `delta` strictly decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingTable {
    rows: Vec<ScalingRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantile {
    Median,
    Q90,
    Q99,
}

impl ScalingTable {
    pub fn new(rows: Vec<ScalingRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTable("scaling table has no rows".into()));
        }
        if rows.windows(2).any(|w| !(w[1].delta < w[0].delta)) {
            return Err(Error::Domain("deltas must be strictly decreasing".into()));
        }
        if rows.iter().any(|r| r.n == 0) {
            return Err(Error::Domain("every row needs a positive count".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ScalingRow] {
        &self.rows
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "delta,n,median,q90,q99")?;
        for r in &self.rows {
            writeln!(w, "{:?},{},{:?},{:?},{:?}", r.delta, r.n, r.median, r.q90, r.q99)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "delta,n,median,q90,q99" => {}
            _ => return Err(Error::Parse("missing header delta,n,median,q90,q99".into())),
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("bad row {line:?}")));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
            };
            rows.push(ScalingRow {
                delta: num(f[0])?,
                n: f[1]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("{:?}: {e}", f[1])))?,
                median: num(f[2])?,
                q90: num(f[3])?,
                q99: num(f[4])?,
            });
        }
        Self::new(rows)
    }
}

/// `count` log-spaced points from `hi` down to `lo`.
pub fn log_spaced_desc(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (b + (a - b) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// `|w(r + δ) - w(r)|` for every path and anchor where the density at
/// `w(r)` is at least `c`, one vector per delta in the given order. Paths
/// too short for an anchor are skipped. `densities[k]` is the density used
/// for `anchors[k]`.
pub fn oscillation_samples(
    paths: &[StoppedPath],
    anchors: &[f64],
    deltas: &[f64],
    c: f64,
    densities: &[DensityEstimate],
) -> Result<Vec<Vec<f64>>> {
    if anchors.len() != densities.len() {
        return Err(Error::Domain(format!(
            "{} anchors but {} densities",
            anchors.len(),
            densities.len()
        )));
    }
    if deltas.is_empty()
        || deltas.iter().any(|&d| !(d > 0.0))
        || anchors.iter().any(|&r| !(r > 0.0))
    {
        return Err(Error::Domain("anchors and deltas must be positive".into()));
    }
    let dmax = deltas.iter().copied().fold(0.0, f64::max);
    let mut samples = vec![Vec::new(); deltas.len()];
    for (&r, dens) in anchors.iter().zip(densities) {
        for p in paths {
            if p.lifetime() < r + dmax {
                continue;
            }
            let x = p.eval(r);
            if dens.at(x) < c {
                continue;
            }
            for (k, &d) in deltas.iter().enumerate() {
                samples[k].push((p.eval(r + d) - x).abs());
            }
        }
    }
    Ok(samples)
}

impl ScalingTable {
    /// Quantile table from per-delta samples, sorted by decreasing delta.
    pub fn from_samples(deltas: &[f64], samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyTable(
                "no qualifying (path, anchor) pair; lower the density threshold".into(),
            ));
        }
        let mut rows: Vec<ScalingRow> = deltas
            .iter()
            .zip(samples)
            .map(|(&delta, mut s)| {
                s.sort_by(f64::total_cmp);
                ScalingRow {
                    delta,
                    n: s.len(),
                    median: stats::quantile_sorted(&s, 0.5),
                    q90: stats::quantile_sorted(&s, 0.9),
                    q99: stats::quantile_sorted(&s, 0.99),
                }
            })
            .collect();
        rows.sort_by(|a, b| b.delta.total_cmp(&a.delta));
        Self::new(rows)
    }
}

/// Quantiles of `|w(r + δ) - w(r)|` over qualifying paths and anchors, see
/// [`oscillation_samples`].
pub fn oscillation_scan(
    paths: &[StoppedPath],
    anchors: &[f64],
    deltas: &[f64],
    c: f64,
    densities: &[DensityEstimate],
) -> Result<ScalingTable> {
    let samples = oscillation_samples(paths, anchors, deltas, c, densities)?;
    ScalingTable::from_samples(deltas, samples)
}

/// Least-squares slope of `log(quantile)` against `log(delta)`.
pub fn scaling_exponent(table: &ScalingTable, q: Quantile) -> Result<LinearFit> {
    if table.rows.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 rows, got {}",
            table.rows.len()
        )));
    }
    let pick = |r: &ScalingRow| match q {
        Quantile::Median => r.median,
        Quantile::Q90 => r.q90,
        Quantile::Q99 => r.q99,
    };
    if table.rows.iter().any(|r| !(pick(r) > 0.0)) {
        return Err(Error::Domain("quantiles must be positive for a log fit".into()));
    }
    let x: Vec<f64> = table.rows.iter().map(|r| r.delta.ln()).collect();
    let y: Vec<f64> = table.rows.iter().map(|r| pick(r).ln()).collect();
    Ok(stats::ols(&x, &y))
}

/// Separation of two reflected paths after their branch time.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationProfile {
    pub gamma: f64,
    pub deltas: Vec<f64>,
    pub separation: Vec<f64>,
    pub density_at_branch: f64,
}

pub fn write_separation_csv<'a>(
    profiles: impl IntoIterator<Item = &'a SeparationProfile>,
    mut w: impl Write,
) -> Result<()> {
    writeln!(w, "gamma,delta,separation,density_at_branch")?;
    for p in profiles {
        for (d, s) in p.deltas.iter().zip(&p.separation) {
            writeln!(w, "{:?},{:?},{:?},{:?}", p.gamma, d, s, p.density_at_branch)?;
        }
    }
    Ok(())
}

/// Deepest common ancestor of `a` and `b` whose different children lead
/// to them.
fn branch_edge(system: &HistoricalSystem, a: usize, b: usize) -> Option<usize> {
    let f = system.forest();
    if f.tree_of(a) != f.tree_of(b) {
        return None;
    }
    let (la, lb) = (f.label(a), f.label(b));
    let common = la
        .word()
        .iter()
        .zip(lb.word())
        .take_while(|(x, y)| x == y)
        .count();
    if common == la.word().len() || common == lb.word().len() {
        return None;
    }
    let anc = EdgeLabel::new(la.root_index(), la.word()[..common].to_vec()).ok()?;
    system.find(&anc).ok()
}

/// `|w̃_a(γ + δ) - w̃_b(γ + δ)|` on the δ grid, where `γ` is the death time
/// of the last common reflected ancestor of `a` and `b`, together with the
/// density of the reflected measure at the branch point (Silverman
/// bandwidth unless `bandwidth` is given).
pub fn branch_separation(
    refl: &ReflectedSystem,
    a: &EdgeLabel,
    b: &EdgeLabel,
    deltas: &[f64],
    bandwidth: Option<f64>,
) -> Result<SeparationProfile> {
    let s = refl.system();
    let (ia, ib) = (s.find(a)?, s.find(b)?);
    let u = branch_edge(s, ia, ib).ok_or_else(|| {
        Error::Domain(format!("{a} and {b} have no common reflected ancestor"))
    })?;
    let gamma = s.death(u);
    let mut separation = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let t = gamma + d;
        if !(d >= 0.0) || t > s.end(ia) || t > s.end(ib) {
            return Err(Error::Domain(format!(
                "γ + δ = {t} outside the lives of {a} and {b}"
            )));
        }
        separation.push((s.path_value(ia, t) - s.path_value(ib, t)).abs());
    }
    let atoms = s.measure_at(gamma);
    let x = *s.samples(u).last().expect("non-empty");
    let h = bandwidth
        .or_else(|| silverman_bandwidth(&atoms.locations))
        .unwrap_or(atoms.weight);
    let dens = density_estimate(&atoms, h, &[x])?;
    Ok(SeparationProfile {
        gamma,
        deltas: deltas.to_vec(),
        separation,
        density_at_branch: dens.values[0],
    })
}

/// One pair of labels per reflected branch time in `[lo, hi]` with
/// `γ + reach <= horizon`: a descendant of each child alive at `γ + reach`.
pub fn branch_pairs(
    refl: &ReflectedSystem,
    lo: f64,
    hi: f64,
    reach: f64,
) -> Vec<(EdgeLabel, EdgeLabel)> {
    pairs_alive(refl, lo, hi, |g| g + reach)
}

/// One pair of paths alive at `t` per branch time in `[lo, hi]` of their
/// common reflected genealogy.
pub fn support_pairs(refl: &ReflectedSystem, t: f64, lo: f64, hi: f64) -> Vec<(EdgeLabel, EdgeLabel)> {
    let s = refl.system();
    let f = s.forest();
    let mut alive = vec![None; s.len()];
    for i in (0..s.len()).rev() {
        alive[i] = if s.birth(i) <= t && t <= s.end(i) {
            Some(i)
        } else {
            f.children(i).and_then(|(c1, c2)| alive[c1].or(alive[c2]))
        };
    }
    let mut out = Vec::new();
    for u in 0..s.len() {
        let Some((c1, c2)) = f.children(u) else { continue };
        let g = s.death(u);
        if g < lo || g > hi || g > t {
            continue;
        }
        if let (Some(x), Some(y)) = (alive[c1], alive[c2]) {
            out.push((f.label(x), f.label(y)));
        }
    }
    out
}

fn pairs_alive(
    refl: &ReflectedSystem,
    lo: f64,
    hi: f64,
    target: impl Fn(f64) -> f64,
) -> Vec<(EdgeLabel, EdgeLabel)> {
    let s = refl.system();
    let f = s.forest();
    let alive_in = |c: usize, t: f64| -> Option<usize> {
        (c..f.subtree_end(c)).find(|&i| s.is_alive(i, t) || (s.end(i) == t && s.birth(i) <= t))
    };
    let mut out = Vec::new();
    for u in 0..s.len() {
        let Some((c1, c2)) = f.children(u) else { continue };
        let g = s.death(u);
        let t = target(g);
        if g < lo || g > hi || t > s.horizon() || t < g {
            continue;
        }
        if let (Some(x), Some(y)) = (alive_in(c1, t), alive_in(c2, t)) {
            out.push((f.label(x), f.label(y)));
        }
    }
    out
}

/// `⟨X_t, 1⟩ = ε · #alive` at each time.
pub fn total_mass_series(system: &HistoricalSystem, times: &[f64]) -> Vec<f64> {
    times
        .iter()
        .map(|&t| system.epsilon() * system.alive_count(t) as f64)
        .collect()
}

/// `(mean(exp(-λ X)) - exp(-a u_t(λ))) / SE` for each λ.
pub fn laplace_z_scores(masses: &[f64], a: f64, t: f64, lambdas: &[f64]) -> Vec<f64> {
    lambdas
        .iter()
        .map(|&l| {
            let v: Vec<f64> = masses.iter().map(|&x| (-l * x).exp()).collect();
            let (m, se) = stats::mean_se(&v);
            z_score(m - (-a * u_t(l, t)).exp(), se)
        })
        .collect()
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Outcome of a Laplace-transform comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    /// Largest absolute z-score.
    pub statistic: f64,
    pub z_scores: Vec<f64>,
    pub pass: bool,
}

impl TestReport {
    pub fn from_z_scores(z_scores: Vec<f64>, limit: f64) -> Self {
        let statistic = z_scores.iter().map(|z| z.abs()).fold(0.0, f64::max);
        Self {
            statistic,
            pass: statistic <= limit,
            z_scores,
        }
    }
}

/// `X_t(A)` and `Z^{t,A}_r` for each `r`: the mass at `t` in `A = [lo, hi)`
/// and the mass at `t + r` descending from it.
pub fn descendant_masses(
    system: &HistoricalSystem,
    t: f64,
    a: (f64, f64),
    rs: &[f64],
) -> (f64, Vec<f64>) {
    let eps = system.epsilon();
    let inside = |x: f64| a.0 <= x && x < a.1;
    let x_t = eps
        * system
            .alive_at(t)
            .into_iter()
            .filter(|&i| inside(system.value_at(i, t)))
            .count() as f64;
    let z = rs
        .iter()
        .map(|&r| {
            eps * system
                .alive_at(t + r)
                .into_iter()
                .filter(|&i| inside(system.path_value(i, t)))
                .count() as f64
        })
        .collect();
    (x_t, z)
}

/// Conditional Laplace transform of the mass descending from the
/// time-`t` particles in `A` against `exp(-X_t(A) u_r(λ))`. The z-scores
/// run over `r` (outer) and `λ` (inner), followed by one z-score for
/// `E[Z_r - X_t(A)] = 0` per `r`.
pub fn feller_descendant_test(
    replicas: &[ReflectedSystem],
    t: f64,
    a: (f64, f64),
    rs: &[f64],
    lambdas: &[f64],
) -> Result<TestReport> {
    if replicas.is_empty() {
        return Err(Error::InsufficientData("no replicas".into()));
    }
    if replicas.len() < 200 {
        log::warn!(
            "only {} replicas; the descendant test has little power below 200",
            replicas.len()
        );
    }
    let obs: Vec<(f64, Vec<f64>)> = replicas
        .iter()
        .map(|r| descendant_masses(r.system(), t, a, rs))
        .collect();
    Ok(descendant_report(&obs, rs, lambdas))
}

/// The report of [`feller_descendant_test`] from per-replica
/// [`descendant_masses`] results.
pub fn descendant_report(obs: &[(f64, Vec<f64>)], rs: &[f64], lambdas: &[f64]) -> TestReport {
    let mut z = Vec::new();
    for (k, &r) in rs.iter().enumerate() {
        for &l in lambdas {
            let d: Vec<f64> = obs
                .iter()
                .map(|(x, zs)| (-l * zs[k]).exp() - (-x * u_t(l, r)).exp())
                .collect();
            let (m, se) = stats::mean_se(&d);
            z.push(z_score(m, se));
        }
    }
    for k in 0..rs.len() {
        let d: Vec<f64> = obs.iter().map(|(x, zs)| zs[k] - x).collect();
        let (m, se) = stats::mean_se(&d);
        z.push(z_score(m, se));
    }
    TestReport::from_z_scores(z, 3.0)
}

/// Tagged-particle displacement statistics over replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarrisResult {
    pub t: f64,
    pub replicas: usize,
    /// Std of the central particle of the ordered system.
    pub ordered_std: f64,
    /// Std of the same particle without ordering.
    pub free_std: f64,
    /// `(2t/π)^{1/4} / sqrt(density)`.
    pub predicted_std: f64,
    pub edge_warning: bool,
}

/// `n` particles placed uniformly (a Poisson configuration conditioned on
/// its count) on a window of length `n / density` centred at 0. Ordering at
/// time `t` is the increasing rearrangement of free Brownian positions, so
/// the tagged central rank is read off the sorted time-`t` positions.
pub fn harris_experiment(
    n_particles: usize,
    density: f64,
    t: f64,
    replicas: usize,
    rng: &mut impl RandomSource,
) -> Result<HarrisResult> {
    if n_particles == 0 || replicas < 2 || !(density > 0.0) || !(t >= 0.0) {
        return Err(Error::Domain(
            "need particles, two or more replicas, positive density and t >= 0".into(),
        ));
    }
    let window = n_particles as f64 / density;
    let mid = n_particles / 2;
    let mut ordered = Vec::with_capacity(replicas);
    let mut free = Vec::with_capacity(replicas);
    let mut x0 = vec![0.0; n_particles];
    let mut xt = vec![0.0; n_particles];
    let sd = t.sqrt();
    for _ in 0..replicas {
        for x in x0.iter_mut() {
            *x = window * (rng.uniform() - 0.5);
        }
        x0.sort_by(f64::total_cmp);
        for (y, &x) in xt.iter_mut().zip(&x0) {
            *y = x + sd * rng.standard_normal();
        }
        free.push(xt[mid] - x0[mid]);
        xt.sort_by(f64::total_cmp);
        ordered.push(xt[mid] - x0[mid]);
    }
    let mut abs: Vec<f64> = ordered.iter().chain(&free).map(|d| d.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let edge_warning = stats::quantile_sorted(&abs, 0.99) > window / 4.0;
    if edge_warning {
        log::warn!("displacements reach a quarter of the window {window}; edge effects likely");
    }
    let raw_sd = |v: &[f64]| stats::variance(v).sqrt();
    Ok(HarrisResult {
        t,
        replicas,
        ordered_std: raw_sd(&ordered),
        free_std: raw_sd(&free),
        predicted_std: (2.0 * t / std::f64::consts::PI).powf(0.25) / density.sqrt(),
        edge_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::attach_motions;
    use crate::reflection::reflect_system;
    use crate::rng::RngStream;
    use crate::stochastic::{ObservationGrid, TimeGrid};
    use crate::tree_coding::sample_forest_until;

    fn atoms(locations: Vec<f64>, weight: f64) -> MeasureAtoms {
        MeasureAtoms {
            t: 0.0,
            weight,
            locations,
        }
    }

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect()
    }

    fn reflected(seed: u64, eps: f64, n: usize, horizon: f64) -> ReflectedSystem {
        let mut rng = RngStream::new(seed, 0);
        let f = sample_forest_until(eps, n, horizon, &mut rng).unwrap();
        let x0: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        let g = ObservationGrid::uniform(&TimeGrid::new(0.01, horizon).unwrap());
        let s = attach_motions(&f, &x0, &g, &mut rng).unwrap();
        reflect_system(&s).unwrap()
    }

    #[test]
    fn single_atom_bump() {
        let d = density_estimate(&atoms(vec![0.3], 0.01), 0.1, &grid(0.0, 0.6, 2001)).unwrap();
        assert!((d.integral() - 0.01).abs() < 0.005 * 0.01);
        assert!(d.values.iter().all(|&v| v >= 0.0));
        assert!((d.at(0.3) - 0.01 * 0.75 / 0.1).abs() < 1e-12);
        assert!(!d.empty);
    }

    #[test]
    fn empty_measure_flagged() {
        let d = density_estimate(&atoms(vec![], 0.01), 0.1, &grid(0.0, 1.0, 11)).unwrap();
        assert!(d.empty);
        assert!(d.values.iter().all(|&v| v == 0.0));
        assert!(density_estimate(&atoms(vec![0.5], 0.1), 0.0, &[0.0]).is_err());
    }

    #[test]
    fn uniform_cloud_is_flat() {
        let n = 1000;
        let locs: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        let d = density_estimate(&atoms(locs, 1.0 / n as f64), 0.05, &grid(0.0, 1.0, 201)).unwrap();
        for (&y, &v) in d.grid.iter().zip(&d.values) {
            if (0.2..=0.8).contains(&y) {
                assert!((0.8..=1.2).contains(&v), "{y} {v}");
            }
        }
    }

    #[test]
    fn density_linear_in_weight() {
        let locs = vec![0.1, 0.4, 0.45, 0.9];
        let g = grid(-0.2, 1.2, 57);
        let a = density_estimate(&atoms(locs.clone(), 0.25), 0.2, &g).unwrap();
        let b = density_estimate(&atoms(locs, 0.5), 0.2, &g).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn psi_boundaries_and_monotonicity() {
        let r = reflected(1, 0.05, 8, 0.4);
        let s = r.system();
        let (t, d) = (0.1, 0.2);
        let lowest = s
            .alive_at(t)
            .into_iter()
            .map(|i| s.value_at(i, t))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(psi_statistic(&r, t, d, lowest).unwrap(), f64::NEG_INFINITY);
        let top = s
            .alive_at(t + d)
            .into_iter()
            .map(|i| s.value_at(i, t + d))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(psi_statistic(&r, t, d, f64::INFINITY).unwrap(), top);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let z = -1.0 + 3.0 * k as f64 / 199.0;
            let p = psi_statistic(&r, t, d, z).unwrap();
            assert!(p >= prev && p <= top);
            prev = p;
        }
        assert!(psi_statistic(&r, 0.3, 0.2, 0.0).is_err());
    }

    fn flat_density() -> DensityEstimate {
        DensityEstimate {
            t: 0.5,
            grid: vec![-100.0, 100.0],
            values: vec![1.0, 1.0],
            bandwidth: 1.0,
            empty: false,
        }
    }

    #[test]
    fn constant_paths_do_not_oscillate() {
        let paths: Vec<StoppedPath> = (0..5)
            .map(|k| StoppedPath::new(vec![0.0, 1.0], vec![k as f64, k as f64]).unwrap())
            .collect();
        let deltas = log_spaced_desc(0.01, 0.1, 5);
        let t = oscillation_scan(&paths, &[0.5], &deltas, 0.5, &[flat_density()]).unwrap();
        assert!(t.rows().iter().all(|r| r.median == 0.0 && r.q99 == 0.0 && r.n == 5));
        let err = oscillation_scan(&paths, &[0.5], &deltas, 2.0, &[flat_density()]);
        assert!(matches!(err, Err(Error::EmptyTable(_))));
    }

    #[test]
    fn free_brownian_exponent() {
        let mut rng = RngStream::new(5, 0);
        let grid = TimeGrid::new(1e-4, 0.2).unwrap();
        let paths: Vec<StoppedPath> = (0..400)
            .map(|_| {
                let b = crate::stochastic::sample_brownian(&grid, 0.0, &mut rng);
                let times = (0..grid.n_points()).map(|k| grid.time(k)).collect();
                StoppedPath::new(times, b.values().to_vec()).unwrap()
            })
            .collect();
        let deltas = log_spaced_desc(2e-3, 0.1, 8);
        let t = oscillation_scan(&paths, &[0.05], &deltas, 0.5, &[flat_density()]).unwrap();
        let fit = scaling_exponent(&t, Quantile::Median).unwrap();
        assert!((0.4..=0.6).contains(&fit.slope), "{fit:?}");
    }

    fn table(f: impl Fn(f64) -> f64) -> ScalingTable {
        let rows = log_spaced_desc(1e-3, 0.1, 8)
            .into_iter()
            .map(|d| ScalingRow {
                delta: d,
                n: 10,
                median: f(d),
                q90: 2.0 * f(d),
                q99: 3.0 * f(d),
            })
            .collect();
        ScalingTable::new(rows).unwrap()
    }

    #[test]
    fn exponent_of_pure_powers() {
        let fit = scaling_exponent(&table(|d| d), Quantile::Median).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && fit.slope_se < 1e-10);
        let fit = scaling_exponent(&table(|d| d.sqrt()), Quantile::Q90).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        let mut rng = RngStream::new(3, 0);
        let noise: Vec<f64> = (0..8).map(|_| 1.0 + 0.01 * rng.standard_normal()).collect();
        let rows = log_spaced_desc(1e-3, 0.1, 8)
            .into_iter()
            .zip(&noise)
            .map(|(d, e)| {
                let q = 0.7 * d.powf(0.75) * e;
                ScalingRow { delta: d, n: 1, median: q, q90: q, q99: q }
            })
            .collect();
        let fit = scaling_exponent(&ScalingTable::new(rows).unwrap(), Quantile::Median).unwrap();
        assert!((0.72..=0.78).contains(&fit.slope));
        assert!((fit.slope - 0.75).abs() <= 2.0 * fit.slope_se.max(1e-3));
    }

    #[test]
    fn exponent_needs_four_rows() {
        let rows = (0..3)
            .map(|k| ScalingRow {
                delta: 0.1 / (k + 1) as f64,
                n: 1,
                median: 1.0,
                q90: 1.0,
                q99: 1.0,
            })
            .collect();
        let t = ScalingTable::new(rows).unwrap();
        assert!(matches!(
            scaling_exponent(&t, Quantile::Median),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn scaling_table_csv_round_trip() {
        let t = table(|d| d.powf(0.75));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"delta,n,median,q90,q99\n"));
        assert_eq!(ScalingTable::read_csv(&buf[..]).unwrap(), t);
    }

    #[test]
    fn separation_profiles() {
        let r = reflected(11, 0.05, 10, 0.6);
        let pairs = branch_pairs(&r, 0.1, 0.4, 0.1);
        assert!(!pairs.is_empty());
        let deltas = [0.0, 0.01, 0.05, 0.1];
        for (a, b) in &pairs {
            let p = branch_separation(&r, a, b, &deltas, None).unwrap();
            assert_eq!(p.separation[0], 0.0);
            assert!(p.separation.iter().all(|&x| x >= 0.0));
            assert!(p.density_at_branch >= 0.0);
        }
        let (a, _) = &pairs[0];
        assert!(branch_separation(&r, a, a, &deltas, None).is_err());
        let mut buf = Vec::new();
        let profiles: Vec<SeparationProfile> = pairs
            .iter()
            .map(|(a, b)| branch_separation(&r, a, b, &deltas, None).unwrap())
            .collect();
        write_separation_csv(&profiles, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("gamma,delta,separation,density_at_branch\n"));
        assert_eq!(text.lines().count(), 1 + 4 * pairs.len());
    }

    #[test]
    fn support_pairs_alive_at_t() {
        let r = reflected(11, 0.05, 10, 0.6);
        let s = r.system();
        let pairs = support_pairs(&r, 0.5, 0.1, 0.4);
        assert!(!pairs.is_empty());
        for (a, b) in &pairs {
            let (ia, ib) = (s.find(a).unwrap(), s.find(b).unwrap());
            assert!(s.is_alive(ia, 0.5) && s.is_alive(ib, 0.5));
            let p = branch_separation(&r, a, b, &[0.0], None).unwrap();
            assert!((0.1..=0.4).contains(&p.gamma));
        }
    }

    #[test]
    fn mass_series_starts_at_initial_mass() {
        let r = reflected(2, 0.05, 10, 0.3);
        let m = total_mass_series(r.system(), &[0.0, 0.1]);
        assert!((m[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn descendant_masses_edge_cases() {
        let r = reflected(4, 0.05, 10, 0.5);
        let s = r.system();
        let (x, z) = descendant_masses(s, 0.2, (1.0, 1.0), &[0.1, 0.2]);
        assert_eq!(x, 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
        let (x, z) = descendant_masses(s, 0.2, (f64::NEG_INFINITY, f64::INFINITY), &[0.1]);
        let m = total_mass_series(s, &[0.2, 0.3]);
        assert_eq!(x, m[0]);
        assert_eq!(z[0], m[1]);
    }

    #[test]
    fn feller_report_json() {
        let reps: Vec<ReflectedSystem> = (0..20).map(|k| reflected(100 + k, 0.05, 10, 0.5)).collect();
        let rep = feller_descendant_test(&reps, 0.2, (0.25, 0.75), &[0.2], &[1.0]).unwrap();
        assert_eq!(rep.z_scores.len(), 2);
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for k in ["statistic", "z_scores", "pass"] {
            assert!(v.get(k).is_some());
        }
    }

    #[test]
    fn harris_limits() {
        let mut rng = RngStream::new(8, 0);
        let h = harris_experiment(500, 1.0, 0.0, 50, &mut rng).unwrap();
        assert_eq!(h.ordered_std, 0.0);
        assert_eq!(h.free_std, 0.0);
        let h = harris_experiment(200, 1.0, 4.0, 1000, &mut rng).unwrap();
        assert!((h.free_std / 2.0 - 1.0).abs() < 0.05, "{h:?}");
    }
}
