use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use refsnake::analysis::{
    branch_pairs, branch_separation, density_auto, descendant_masses, descendant_report,
    harris_experiment, historical_paths_at, laplace_z_scores, log_spaced_desc, oscillation_samples,
    psi_statistic, scaling_exponent, total_mass_series, write_separation_csv, Quantile,
    ScalingTable, SeparationProfile,
};
use refsnake::branching::{attach_motions, write_paths_csv};
use refsnake::reflection::{check_label_order, check_noncrossing, check_position_multisets};
use refsnake::stats;
use refsnake::stochastic::{reflect_with_zeros, sample_brownian};
use refsnake::tree_coding::{
    contour_from_chain, contour_to_forest, discrete_local_time, embed_stopping_times,
    forest_to_contour, local_time_sup_error, sample_forest_until, upcrossing_count,
};
use refsnake::{
    reflect_system, ContourProcess, Error, HistoricalSystem, MarkedForest, ObservationGrid,
    RngStream, TimeGrid,
};
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Reflect,
    Roundtrip,
    Localtime,
    Scaling,
    Branchpoint,
    Feller,
    Harris,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Reflect => "reflect",
            Self::Roundtrip => "roundtrip",
            Self::Localtime => "localtime",
            Self::Scaling => "scaling",
            Self::Branchpoint => "branchpoint",
            Self::Feller => "feller",
            Self::Harris => "harris",
        }
    }

    /// Whether the run embeds contours into sampled paths.
    pub fn embeds(self) -> bool {
        self == Self::Localtime
    }

    fn stream(self) -> u64 {
        match self {
            Self::Simulate | Self::Reflect => 1,
            Self::Roundtrip => 3,
            Self::Localtime => 4,
            Self::Scaling => 5,
            Self::Branchpoint => 6,
            Self::Feller => 7,
            Self::Harris => 8,
        }
    }
}

/// Failure of a run after the config was accepted.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Runtime(String),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_) | Error::Unsupported(_) => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

type RunResult<T> = Result<T, RunError>;

/// State shared by the subcommands: config, output directory and the
/// artifacts written so far.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub files: Vec<String>,
    pub results: Map<String, Value>,
    /// Acceptance checks that failed.
    pub failures: Vec<String>,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, jobs: usize) -> Self {
        Self {
            cfg,
            out,
            jobs: jobs.max(1),
            files: Vec::new(),
            results: Map::new(),
            failures: Vec::new(),
        }
    }

    fn create(&mut self, name: &str) -> RunResult<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> RunResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn record(&mut self, key: &str, value: Value) {
        self.results.insert(key.to_string(), value);
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn rng(&self, cmd: Subcommand, replica: usize) -> RngStream {
        RngStream::new(self.cfg.seed(), cmd.stream()).substream(replica as u64)
    }

    fn positions(&self) -> RunResult<Vec<f64>> {
        self.cfg
            .initial
            .positions(self.cfg.epsilon)
            .map_err(|e| RunError::Config(format!("initial measure: {e}")))
    }

    /// Writes `manifest.json`.
    pub fn write_manifest(&self, cmd: &str, status: &str, exit_code: u8, error: Option<&str>) -> RunResult<Value> {
        let mut files = self.files.clone();
        files.sort();
        let manifest = json!({
            "command": cmd,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed(),
            "config": self.cfg,
            "status": status,
            "exit_code": exit_code,
            "error": error,
            "failures": self.failures,
            "files": files,
            "results": self.results,
        });
        let mut w = BufWriter::new(File::create(self.out.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        Ok(manifest)
    }
}

/// Evaluates `f(0..n)` on `jobs` threads and returns the results in index
/// order, reporting progress on stderr at every 10%.
pub fn par_map<T: Send>(n: usize, jobs: usize, label: &str, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= n {
            break;
        }
        let v = f(i);
        slots.lock().expect("no panics while locked")[i] = Some(v);
        let d = done.fetch_add(1, Ordering::Relaxed) + 1;
        if n >= 10 && (d * 10 / n) > ((d - 1) * 10 / n) {
            eprintln!("{label}: {d}/{n} replicas ({}%)", d * 100 / n);
        }
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.min(n.max(1)) {
            s.spawn(work);
        }
        work();
    });
    slots
        .into_inner()
        .expect("no panics while locked")
        .into_iter()
        .map(|v| v.expect("every index evaluated"))
        .collect()
}

fn collect<T>(v: Vec<refsnake::Result<T>>) -> RunResult<Vec<T>> {
    v.into_iter().map(|r| r.map_err(RunError::from)).collect()
}

fn sample_system(
    eps: f64,
    x0: &[f64],
    grid: &ObservationGrid,
    rng: &mut RngStream,
) -> refsnake::Result<(MarkedForest, HistoricalSystem)> {
    let forest = sample_forest_until(eps, x0.len(), grid.horizon(), rng)?;
    let system = attach_motions(&forest, x0, grid, rng)?;
    Ok((forest, system))
}

pub fn run(cmd: Subcommand, run: &mut Run) -> RunResult<()> {
    match cmd {
        Subcommand::Simulate => simulate(run),
        Subcommand::Reflect => reflect(run),
        Subcommand::Roundtrip => roundtrip(run),
        Subcommand::Localtime => localtime(run),
        Subcommand::Scaling => scaling(run),
        Subcommand::Branchpoint => branchpoint(run),
        Subcommand::Feller => feller(run),
        Subcommand::Harris => harris(run),
    }
}

fn uniform_grid(run: &Run, default_dt: f64) -> RunResult<ObservationGrid> {
    let dt = run.cfg.dt_or(default_dt);
    Ok(ObservationGrid::uniform(&TimeGrid::new(dt, run.cfg.horizon)?))
}

fn simulate(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let x0 = run.positions()?;
    let grid = uniform_grid(run, cfg.horizon / 100.0)?;
    let systems = collect(par_map(cfg.replicas, run.jobs, "simulate", |r| {
        sample_system(cfg.epsilon, &x0, &grid, &mut run.rng(Subcommand::Simulate, r))
    }))?;
    let mut mass = run.create("mass.csv")?;
    writeln!(mass, "replica,t,mass")?;
    let mut final_masses = Vec::new();
    for (r, (forest, system)) in systems.iter().enumerate() {
        forest.write_json(run.create(&format!("forest_{r}.json"))?)?;
        let mut w = run.create(&format!("snapshots_{r}.csv"))?;
        system.write_snapshots_csv(&mut w)?;
        w.flush()?;
        let series = total_mass_series(system, grid.times());
        for (t, m) in grid.times().iter().zip(&series) {
            writeln!(mass, "{r},{t:?},{m:?}")?;
        }
        final_masses.push(*series.last().expect("grid is non-empty"));
    }
    mass.flush()?;
    run.record("replicas", json!(cfg.replicas));
    run.record("particles", json!(x0.len()));
    run.record("mean_final_mass", json!(stats::mean(&final_masses)));
    run.record(
        "edges",
        json!(systems.iter().map(|(f, _)| f.len()).collect::<Vec<_>>()),
    );
    Ok(())
}

fn reflect(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let x0 = run.positions()?;
    let grid = uniform_grid(run, cfg.horizon / 100.0)?;
    let t = cfg.t.unwrap_or(cfg.horizon / 2.0);
    let deltas = cfg
        .deltas
        .clone()
        .unwrap_or_else(|| log_spaced_desc(grid_dt(&grid), cfg.horizon - t, 4));
    let z_grid = cfg.z_grid.clone().unwrap_or_else(|| vec![0.25, 0.5, 0.75]);
    let outcomes = par_map(cfg.replicas, run.jobs, "reflect", |r| {
        let (_, s) = sample_system(cfg.epsilon, &x0, &grid, &mut run.rng(Subcommand::Reflect, r))?;
        let refl = reflect_system(&s)?;
        let mut bad = Vec::new();
        for check in [
            check_position_multisets(&s, &refl),
            check_label_order(&refl),
            check_noncrossing(&refl),
        ] {
            if let Err(e) = check {
                bad.push(format!("replica {r}: {e}"));
            }
        }
        Ok((s, refl, bad))
    });
    let outcomes = collect(outcomes)?;
    let mut psi = run.create("psi.csv")?;
    writeln!(psi, "replica,t,delta,z,psi")?;
    for (r, (s, refl, bad)) in outcomes.iter().enumerate() {
        let rs = refl.system();
        let f = rs.forest();
        let leaves: Vec<usize> = (0..rs.len()).filter(|&i| f.is_leaf(i)).collect();
        let paths = leaves
            .iter()
            .map(|&i| rs.historical_path_of(i, rs.end(i)))
            .collect::<refsnake::Result<Vec<_>>>()?;
        let mut w = run.create(&format!("reflected_paths_{r}.csv"))?;
        write_paths_csv(leaves.iter().copied().zip(&paths), &mut w)?;
        w.flush()?;
        let labels: Map<String, Value> = leaves
            .iter()
            .map(|&i| {
                let l = f.label(i);
                (i.to_string(), json!({"root": l.root_index(), "word": l.word_string()}))
            })
            .collect();
        run.write_json(&format!("reflected_labels_{r}.json"), &labels)?;
        let mut w = run.create(&format!("snapshots_{r}.csv"))?;
        s.write_snapshots_csv(&mut w)?;
        w.flush()?;
        let mut w = run.create(&format!("reflected_snapshots_{r}.csv"))?;
        rs.write_snapshots_csv(&mut w)?;
        w.flush()?;
        for &d in &deltas {
            if t + d > cfg.horizon {
                continue;
            }
            for &z in &z_grid {
                writeln!(psi, "{r},{t:?},{d:?},{z:?},{:?}", psi_statistic(refl, t, d, z)?)?;
            }
        }
        for b in bad {
            run.failures.push(b.clone());
        }
    }
    psi.flush()?;
    run.record("replicas", json!(cfg.replicas));
    run.record(
        "reflection_events",
        json!(outcomes.iter().map(|o| o.1.events().len()).collect::<Vec<_>>()),
    );
    run.record("invariants_exact", json!(run.failures.is_empty()));
    Ok(())
}

fn grid_dt(grid: &ObservationGrid) -> f64 {
    let t = grid.times();
    if t.len() > 1 { t[1] - t[0] } else { grid.horizon().max(f64::MIN_POSITIVE) }
}

fn roundtrip(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let n = cfg.forests.unwrap_or(1000);
    let roots = cfg.initial.positions(cfg.epsilon).map(|p| p.len().min(5)).unwrap_or(5);
    let exact = par_map(n, run.jobs, "roundtrip", |k| -> refsnake::Result<bool> {
        let mut rng = run.rng(Subcommand::Roundtrip, k);
        let f = sample_forest_until(cfg.epsilon, roots, cfg.horizon, &mut rng)?;
        let c = forest_to_contour(&f);
        let f2 = contour_to_forest(&c)?;
        let mut json = Vec::new();
        f.write_json(&mut json)?;
        let f3 = MarkedForest::read_json(&json[..])?;
        let mut csv = Vec::new();
        c.write_csv(&mut csv)?;
        let c3 = ContourProcess::read_csv(cfg.epsilon, &csv[..])?;
        Ok(f2.lifetime_map() == f.lifetime_map()
            && forest_to_contour(&f2).values() == c.values()
            && f3 == f
            && c3.values() == c.values())
    });
    let exact = collect(exact)?;
    let failed: Vec<usize> = (0..n).filter(|&k| !exact[k]).collect();
    let count = n - failed.len();
    let report = json!({
        "epsilon": cfg.epsilon,
        "roots": roots,
        "forests": n,
        "exact": count,
        "summary": format!("{count}/{n} exact"),
        "failed": failed,
    });
    run.write_json("roundtrip.json", &report)?;
    run.record("roundtrip", json!(format!("{count}/{n} exact")));
    run.check(failed.is_empty(), format!("{} of {n} round trips were not exact", failed.len()));
    Ok(())
}

fn localtime(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let eps = cfg.epsilon;
    let dt = cfg.dt_or(eps * eps / 50.0);
    let grid = TimeGrid::new(dt, cfg.horizon)?;
    let identity = par_map(cfg.replicas, run.jobs, "localtime", |k| -> refsnake::Result<(u64, u64, usize)> {
        let mut rng = run.rng(Subcommand::Localtime, k);
        let beta = reflect_with_zeros(&sample_brownian(&grid, 0.0, &mut rng));
        let emb = embed_stopping_times(&beta, eps)?;
        let n = emb.returns();
        if n == 0 {
            return Ok((0, 0, 0));
        }
        let contour = contour_from_chain(&emb, n)?;
        let half = eps / 2.0;
        let top = (contour.max_value() / half).ceil() as usize + 2;
        let (mut checks, mut bad) = (0, 0);
        for m in 0..=top {
            let x = m as f64 * half;
            for s in (0..=contour.tau_index()).step_by(2) {
                if s >= emb.times.len() {
                    break;
                }
                checks += 1;
                let l = discrete_local_time(&contour, x, s);
                if l != eps * upcrossing_count(&beta, x, eps, emb.times[s]) as f64 {
                    bad += 1;
                }
            }
        }
        Ok((checks, bad, n))
    });
    let identity = collect(identity)?;
    let checks: u64 = identity.iter().map(|r| r.0).sum();
    let mismatches: u64 = identity.iter().map(|r| r.1).sum();
    let excursions: usize = identity.iter().map(|r| r.2).sum();
    let fine = cfg.fine_epsilon;
    let levels: Vec<f64> = (0..3).map(|j| eps / f64::from(1 << j)).filter(|&e| e > 2.0 * fine).collect();
    let mut trend = Vec::new();
    for (j, &e) in levels.iter().enumerate() {
        let errs = par_map(cfg.replicas, run.jobs, "localtime trend", |k| {
            let mut rng = run.rng(Subcommand::Localtime, 1_000_000 + k);
            let beta = reflect_with_zeros(&sample_brownian(&grid, 0.0, &mut rng));
            local_time_sup_error(&beta, e, fine)
        });
        let errs = collect(errs)?;
        trend.push(json!({"epsilon": e, "median_sup_error": stats::median(&errs), "index": j}));
    }
    let report = json!({
        "epsilon": eps,
        "dt": dt,
        "paths": cfg.replicas,
        "excursions": excursions,
        "checks": checks,
        "mismatches": mismatches,
        "fine_epsilon": fine,
        "trend": trend,
    });
    run.write_json("localtime.json", &report)?;
    run.record("checks", json!(checks));
    run.record("mismatches", json!(mismatches));
    run.check(mismatches == 0, format!("{mismatches} local time mismatches in {checks} checks"));
    Ok(())
}

fn fit_json(table: &ScalingTable) -> RunResult<(Value, f64, f64)> {
    let fit = scaling_exponent(table, Quantile::Median)?;
    let q90 = scaling_exponent(table, Quantile::Q90).ok().map(|f| f.slope);
    Ok((
        json!({"median_slope": fit.slope, "median_slope_se": fit.slope_se, "q90_slope": q90, "n": table.rows()[0].n}),
        fit.slope,
        fit.slope_se,
    ))
}

fn scaling(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let x0 = run.positions()?;
    let anchor = cfg.t.unwrap_or(cfg.horizon / 2.0);
    let deltas = cfg
        .deltas
        .clone()
        .unwrap_or_else(|| log_spaced_desc(2e-4, 0.1 * cfg.horizon, 8));
    let dmax = deltas.iter().copied().fold(0.0, f64::max);
    if anchor + dmax > cfg.horizon {
        return Err(RunError::Config(format!(
            "t + max delta = {} exceeds the horizon {}",
            anchor + dmax,
            cfg.horizon
        )));
    }
    let base = TimeGrid::new(cfg.dt_or(1e-3), cfg.horizon)?;
    let fine = cfg.fine_dt.unwrap_or(1e-5);
    let grid = ObservationGrid::refined(&base, &[(anchor, anchor + dmax, fine)])?;
    let per_replica = par_map(cfg.replicas, run.jobs, "scaling", |k| -> refsnake::Result<Option<_>> {
        let (_, s) = sample_system(cfg.epsilon, &x0, &grid, &mut run.rng(Subcommand::Scaling, k))?;
        let atoms = s.measure_at(anchor);
        if atoms.locations.len() < 10 {
            return Ok(None);
        }
        let dens = density_auto(&atoms, cfg.bandwidth, 512)?;
        let c = cfg.c_fraction * dens.max();
        let refl = reflect_system(&s)?;
        let end = anchor + dmax;
        let rp = historical_paths_at(refl.system(), end)?;
        let fp = historical_paths_at(&s, end)?;
        let a = oscillation_samples(&rp, &[anchor], &deltas, c, std::slice::from_ref(&dens))?;
        let b = oscillation_samples(&fp, &[anchor], &deltas, c, std::slice::from_ref(&dens))?;
        Ok(Some((a, b)))
    });
    let per_replica = collect(per_replica)?;
    let mut refl_samples = vec![Vec::new(); deltas.len()];
    let mut free_samples = vec![Vec::new(); deltas.len()];
    let mut used = 0;
    for (a, b) in per_replica.into_iter().flatten() {
        used += 1;
        for j in 0..deltas.len() {
            refl_samples[j].extend_from_slice(&a[j]);
            free_samples[j].extend_from_slice(&b[j]);
        }
    }
    if used < cfg.replicas {
        log::warn!("{} replicas had fewer than 10 particles at t = {anchor}", cfg.replicas - used);
    }
    let rt = ScalingTable::from_samples(&deltas, refl_samples)?;
    let ft = ScalingTable::from_samples(&deltas, free_samples)?;
    let mut w = run.create("scaling_reflected.csv")?;
    rt.write_csv(&mut w)?;
    w.flush()?;
    let mut w = run.create("scaling_free.csv")?;
    ft.write_csv(&mut w)?;
    w.flush()?;
    let (rj, rs, rse) = fit_json(&rt)?;
    let (fj, fs, fse) = fit_json(&ft)?;
    let z = (rs - fs) / (rse * rse + fse * fse).sqrt();
    let pass = (0.6..=0.9).contains(&rs) && (0.4..=0.6).contains(&fs) && z > 1.645;
    let report = json!({"anchor": anchor, "deltas": deltas, "replicas_used": used, "reflected": rj, "free": fj, "z": z, "pass": pass});
    run.write_json("exponents.json", &report)?;
    run.record("reflected_slope", json!(rs));
    run.record("free_slope", json!(fs));
    run.record("z", json!(z));
    run.check(
        pass,
        format!("reflected slope {rs:.3} (band [0.6, 0.9]), free slope {fs:.3} (band [0.4, 0.6]), z {z:.2}"),
    );
    Ok(())
}

fn branchpoint(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let x0 = run.positions()?;
    let dt = cfg.dt_or(2e-4);
    let grid = ObservationGrid::uniform(&TimeGrid::new(dt, cfg.horizon)?);
    let deltas = cfg
        .deltas
        .clone()
        .unwrap_or_else(|| log_spaced_desc(20.0 * dt, 0.1 * cfg.horizon, 8));
    let [lo, hi] = cfg.gamma_range.unwrap_or([0.2, 0.6]);
    let reach = deltas.iter().copied().fold(0.0, f64::max);
    let per_replica = par_map(cfg.replicas, run.jobs, "branchpoint", |k| -> refsnake::Result<Vec<SeparationProfile>> {
        let (_, s) = sample_system(cfg.epsilon, &x0, &grid, &mut run.rng(Subcommand::Branchpoint, k))?;
        let refl = reflect_system(&s)?;
        branch_pairs(&refl, lo, hi, reach)
            .into_iter()
            .map(|(a, b)| branch_separation(&refl, &a, &b, &deltas, cfg.bandwidth))
            .collect()
    });
    let profiles: Vec<SeparationProfile> = collect(per_replica)?.into_iter().flatten().collect();
    let mut w = run.create("separation.csv")?;
    write_separation_csv(&profiles, &mut w)?;
    w.flush()?;
    if profiles.is_empty() {
        return Err(RunError::Runtime(Error::EmptyTable("no branch pairs in the gamma range".into()).to_string()));
    }
    let samples: Vec<Vec<f64>> = (0..deltas.len())
        .map(|j| profiles.iter().map(|p| p.separation[j]).collect())
        .collect();
    let table = ScalingTable::from_samples(&deltas, samples)?;
    let fit = scaling_exponent(&table, Quantile::Median)?;
    let j = deltas
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
        .expect("deltas non-empty");
    let d = deltas[j];
    let norm = 2.0 * d * d.ln().abs().ln();
    let sep: Vec<f64> = profiles.iter().map(|p| p.separation[j] / norm).collect();
    let dens: Vec<f64> = profiles.iter().map(|p| p.density_at_branch).collect();
    let rho = stats::spearman(&dens, &sep);
    let p = stats::spearman_p_positive(rho, profiles.len());
    let pass = profiles.len() >= 200 && (0.8..=1.2).contains(&fit.slope) && p < 0.05;
    let report = json!({
        "pairs": profiles.len(),
        "gamma_range": [lo, hi],
        "deltas": deltas,
        "slope": fit.slope,
        "slope_se": fit.slope_se,
        "spearman_rho": rho,
        "spearman_p": p,
        "pass": pass,
    });
    run.write_json("branchpoint.json", &report)?;
    run.record("pairs", json!(profiles.len()));
    run.record("slope", json!(fit.slope));
    run.record("spearman_rho", json!(rho));
    run.check(
        pass,
        format!("{} pairs, slope {:.3} (band [0.8, 1.2]), Spearman p {p:.3}", profiles.len(), fit.slope),
    );
    Ok(())
}

fn feller(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let x0 = run.positions()?;
    let t = cfg.t.unwrap_or(cfg.horizon / 2.0);
    let r = cfg.r.unwrap_or(cfg.horizon - t);
    if !(t > 0.0 && r > 0.0 && t + r <= cfg.horizon * (1.0 + 1e-12)) {
        return Err(RunError::Config(format!("need t > 0, r > 0 and t + r <= horizon, got t = {t}, r = {r}")));
    }
    let [low, high] = cfg.interval.unwrap_or([0.1, 0.9]);
    let lambdas = cfg.lambdas.clone().unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
    let grid = uniform_grid(run, 0.01)?;
    let horizon = cfg.horizon;
    let obs = par_map(cfg.replicas, run.jobs, "feller", |k| -> refsnake::Result<(f64, (f64, Vec<f64>))> {
        let (_, s) = sample_system(cfg.epsilon, &x0, &grid, &mut run.rng(Subcommand::Feller, k))?;
        let mass = total_mass_series(&s, &[horizon])[0];
        let refl = reflect_system(&s)?;
        Ok((mass, descendant_masses(refl.system(), t, (low, high), &[r])))
    });
    let obs = collect(obs)?;
    let masses: Vec<f64> = obs.iter().map(|o| o.0).collect();
    let a = cfg.epsilon * x0.len() as f64;
    let mut z = laplace_z_scores(&masses, a, horizon, &lambdas);
    let extinct: Vec<f64> = masses.iter().map(|&m| f64::from(m == 0.0)).collect();
    let (p, _) = stats::mean_se(&extinct);
    let target = (-2.0 * a / horizon).exp();
    let se = (target * (1.0 - target) / masses.len() as f64).sqrt();
    z.push(if se > 0.0 { (p - target) / se } else { 0.0 });
    let mass_report = refsnake::TestReport::from_z_scores(z, 3.0);
    let desc: Vec<(f64, Vec<f64>)> = obs.into_iter().map(|o| o.1).collect();
    let desc_report = descendant_report(&desc, &[r], &lambdas);
    run.write_json("feller_mass.json", &mass_report)?;
    run.write_json("feller_descendant.json", &desc_report)?;
    run.record("mass", serde_json::to_value(&mass_report)?);
    run.record("descendant", serde_json::to_value(&desc_report)?);
    run.record("extinction_frequency", json!(p));
    run.check(mass_report.pass, format!("total mass test statistic {:.2} > 3", mass_report.statistic));
    run.check(desc_report.pass, format!("descendant test statistic {:.2} > 3", desc_report.statistic));
    Ok(())
}

fn harris(run: &mut Run) -> RunResult<()> {
    let cfg = run.cfg.clone();
    let n = cfg.n_particles.unwrap_or(2000);
    let density = cfg.density.unwrap_or(1.0);
    let t = cfg.t.unwrap_or(100.0);
    let mut rng = run.rng(Subcommand::Harris, 0);
    let h = harris_experiment(n, density, t, cfg.replicas, &mut rng)?;
    let ratio = h.ordered_std / h.predicted_std;
    let pass = (0.85..=1.15).contains(&ratio) && !h.edge_warning;
    let mut v = serde_json::to_value(&h)?;
    v["ratio"] = json!(ratio);
    v["n_particles"] = json!(n);
    v["density"] = json!(density);
    v["pass"] = json!(pass);
    run.write_json("harris.json", &v)?;
    run.record("ratio", json!(ratio));
    run.check(pass, format!("std ratio {ratio:.3} outside [0.85, 1.15] or edge effects"));
    Ok(())
}

/// Creates the output directory.
pub fn prepare_out(out: &Path) -> RunResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| RunError::Runtime(format!("cannot create {}: {e}", out.display())))
}
