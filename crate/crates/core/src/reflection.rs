//! Increasing-rearrangement reflection of a branching particle system.
//!
//! Between consecutive death times the reflected labels, taken in
//! lexicographic order, carry the sorted positions of the living source
//! particles. When a source particle dies, the reflected label holding its
//! rank dies in its place and is replaced by two children exactly when the
//! source particle branches.
//!
//! Positions are sorted at every observation time. At a death time the rank
//! of the dying particle is found among the other living particles, whose
//! positions are linearly interpolated between their samples.

use std::collections::HashSet;

use crate::branching::{HistoricalSystem, Snake, StoppedPath};
use crate::error::{Error, Result};
use crate::tree_coding::{exact_lifetime, EdgeLabel, ForestBuilder};

/// Reflected genealogy with its ordered motions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectedSystem {
    system: HistoricalSystem,
    events: Vec<f64>,
}

/// Snake of the reflected system.
pub type ReflectedSnake = Snake;

impl ReflectedSystem {
    /// The reflected system in the same representation as a source system.
    pub fn system(&self) -> &HistoricalSystem {
        &self.system
    }

    pub fn into_system(self) -> HistoricalSystem {
        self.system
    }

    /// `R_0 = 0 < R_1 < ... < R_M`.
    pub fn events(&self) -> &[f64] {
        &self.events
    }

    pub fn historical_path(&self, label: &EdgeLabel, t: f64) -> Result<StoppedPath> {
        self.system.historical_path(label, t)
    }
}

struct Source {
    edge: usize,
    k: usize,
    t0: f64,
    x0: f64,
    slope: f64,
}

impl Source {
    fn at(system: &HistoricalSystem, edge: usize, k: usize) -> Self {
        let s = system.samples(edge);
        let t0 = system.sample_time(edge, k);
        let x0 = s[k];
        let slope = if k + 1 < s.len() {
            (s[k + 1] - x0) / (system.sample_time(edge, k + 1) - t0)
        } else {
            0.0
        };
        Self {
            edge,
            k,
            t0,
            x0,
            slope,
        }
    }
}

struct Label {
    parent: u32,
    slot: u8,
    birth: f64,
    death: f64,
    values: Vec<f64>,
}

/// Builds the reflected system of `system`.
pub fn reflect_system(system: &HistoricalSystem) -> Result<ReflectedSystem> {
    let forest = system.forest();
    let times = system.grid().times();
    let horizon = system.horizon();

    let mut deaths: Vec<usize> = (0..system.len()).filter(|&i| !system.truncated(i)).collect();
    deaths.sort_by(|&a, &b| system.death(a).total_cmp(&system.death(b)));
    if let Some(w) = deaths.windows(2).find(|w| system.death(w[0]) == system.death(w[1])) {
        return Err(Error::DeathTimeTie(system.death(w[0])));
    }

    let n_roots = forest.n_roots();
    let mut sources: Vec<Source> = Vec::with_capacity(n_roots);
    let mut slot_of = vec![u32::MAX; system.len()];
    let mut labels: Vec<Label> = Vec::with_capacity(system.len());
    for k in 0..n_roots {
        let e = forest.root_node(k);
        slot_of[e] = sources.len() as u32;
        sources.push(Source::at(system, e, 0));
        labels.push(Label {
            parent: u32::MAX,
            slot: 0,
            birth: 0.0,
            death: f64::INFINITY,
            values: vec![system.samples(e)[0]],
        });
    }
    let mut order: Vec<usize> = (0..n_roots).collect();
    let mut events = vec![0.0];
    let mut sorted: Vec<f64> = Vec::new();
    let mut next_event = 0;

    for &g in &times[1..] {
        while next_event < deaths.len() && system.death(deaths[next_event]) <= g {
            let v = deaths[next_event];
            next_event += 1;
            let r = system.death(v);
            let x_d = *system.samples(v).last().expect("non-empty");
            let p = slot_of[v] as usize;
            let mut rank = 0usize;
            for (q, s) in sources.iter().enumerate() {
                if q == p {
                    continue;
                }
                let y = s.x0 + s.slope * (r - s.t0);
                if y < x_d {
                    rank += 1;
                } else if y == x_d {
                    return Err(Error::Ambiguous(r));
                }
            }
            let u = order[rank];
            labels[u].death = r;
            labels[u].values.push(x_d);
            events.push(r);

            sources.swap_remove(p);
            if p < sources.len() {
                slot_of[sources[p].edge] = p as u32;
            }
            slot_of[v] = u32::MAX;
            match forest.children(v) {
                Some((c1, c2)) => {
                    for c in [c1, c2] {
                        slot_of[c] = sources.len() as u32;
                        sources.push(Source::at(system, c, 0));
                    }
                    let first = labels.len();
                    for slot in [1u8, 2] {
                        labels.push(Label {
                            parent: u as u32,
                            slot,
                            birth: r,
                            death: f64::INFINITY,
                            values: vec![x_d],
                        });
                    }
                    order.splice(rank..=rank, [first, first + 1]);
                }
                None => {
                    order.remove(rank);
                }
            }
        }

        sorted.clear();
        for s in sources.iter_mut() {
            if s.t0 < g {
                *s = Source::at(system, s.edge, s.k + 1);
            }
            debug_assert_eq!(s.t0, g);
            sorted.push(s.x0);
        }
        sorted.sort_by(f64::total_cmp);
        for (&u, &x) in order.iter().zip(&sorted) {
            if labels[u].birth < g {
                labels[u].values.push(x);
            }
        }
    }

    for &u in &order {
        labels[u].death = horizon;
    }
    Ok(ReflectedSystem {
        system: assemble(system, labels)?,
        events,
    })
}

/// Lays out labels created in event order as a depth-first forest.
fn assemble(source: &HistoricalSystem, mut labels: Vec<Label>) -> Result<HistoricalSystem> {
    let n_roots = source.forest().n_roots();
    let mut child2 = vec![u32::MAX; labels.len()];
    for (i, l) in labels.iter().enumerate() {
        if l.slot == 2 {
            child2[l.parent as usize] = i as u32;
        }
    }
    let mut b = ForestBuilder::with_capacity(source.epsilon(), labels.len());
    let mut births = Vec::with_capacity(labels.len());
    let mut deaths = Vec::with_capacity(labels.len());
    let mut per_edge = Vec::with_capacity(labels.len());
    let mut stack: Vec<(usize, u32)> = Vec::new();
    for root in (0..n_roots).rev() {
        stack.push((root, u32::MAX));
    }
    while let Some((u, parent)) = stack.pop() {
        let l = &mut labels[u];
        let lifetime = exact_lifetime(l.birth, l.death);
        let idx = if parent == u32::MAX {
            b.push_root(lifetime)?
        } else {
            b.push_child(parent as usize, l.slot, lifetime)?
        };
        births.push(l.birth);
        deaths.push(l.death);
        per_edge.push(std::mem::take(&mut l.values));
        if child2[u] != u32::MAX {
            stack.push((child2[u] as usize, idx as u32));
            stack.push((child2[u] as usize - 1, idx as u32));
        }
    }
    let forest = b.finish()?;
    Ok(HistoricalSystem::from_parts(
        forest,
        source.grid().clone(),
        source.initial_positions().to_vec(),
        births,
        deaths,
        per_edge,
    ))
}

pub fn reflected_historical_path(
    refl: &ReflectedSystem,
    label: &EdgeLabel,
    t: f64,
) -> Result<StoppedPath> {
    refl.historical_path(label, t)
}

/// Snake of the reflected genealogy; needs every reflected label to die
/// before the horizon.
pub fn reflected_snake(refl: &ReflectedSystem) -> Result<ReflectedSnake> {
    refl.system.build_snake()
}

/// Subsystem of roots `1..=m` and their descendants.
pub fn restrict_system(system: &HistoricalSystem, m: usize) -> Result<HistoricalSystem> {
    system.restrict_roots(m)
}

/// `(edge, value)` for every particle alive at each observation time, with
/// edges in increasing (lexicographic) order.
pub fn observations(system: &HistoricalSystem) -> Vec<Vec<(usize, f64)>> {
    let times = system.grid().times();
    let mut out = vec![Vec::new(); times.len()];
    for i in 0..system.len() {
        let s = system.samples(i);
        for k in 0..s.len() {
            let t = system.sample_time(i, k);
            if !system.is_alive(i, t) {
                continue;
            }
            if k > 0 && k + 1 < s.len() {
                let j = times.partition_point(|&g| g < t);
                out[j].push((i, s[k]));
            } else if let Some(j) = system.grid().index_of(t) {
                out[j].push((i, s[k]));
            }
        }
    }
    out
}

/// Multisets of positions agree at every observation time.
pub fn check_position_multisets(
    source: &HistoricalSystem,
    refl: &ReflectedSystem,
) -> std::result::Result<(), String> {
    let a = observations(source);
    let b = observations(refl.system());
    for (j, (x, y)) in a.iter().zip(&b).enumerate() {
        let mut x: Vec<f64> = x.iter().map(|p| p.1).collect();
        let mut y: Vec<f64> = y.iter().map(|p| p.1).collect();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        if x != y {
            return Err(format!("position multisets differ at t = {}", source.grid().times()[j]));
        }
    }
    Ok(())
}

/// Living reflected labels carry nondecreasing positions in label order at
/// every observation time.
pub fn check_label_order(refl: &ReflectedSystem) -> std::result::Result<(), String> {
    let times = refl.system().grid().times();
    for (j, obs) in observations(refl.system()).iter().enumerate() {
        if let Some(w) = obs.windows(2).find(|w| w[1].1 < w[0].1) {
            let f = refl.system().forest();
            return Err(format!(
                "labels {} and {} cross at t = {}",
                f.label(w[0].0),
                f.label(w[1].0),
                times[j]
            ));
        }
    }
    Ok(())
}

/// Brute-force pairwise check that `u < v` implies `w_u(t) <= w_v(t)` at
/// every observation time `t <= min(zeta_u, zeta_v)`.
pub fn check_noncrossing_pairwise(refl: &ReflectedSystem) -> std::result::Result<(), String> {
    let s = refl.system();
    let times = s.grid().times();
    let n = s.len();
    let paths: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            times
                .iter()
                .take_while(|&&t| t <= s.end(i))
                .map(|&t| s.path_value(i, t))
                .collect()
        })
        .collect();
    for u in 0..n {
        for v in u + 1..n {
            let m = paths[u].len().min(paths[v].len());
            for j in 0..m {
                if paths[u][j] > paths[v][j] {
                    return Err(format!(
                        "paths {} and {} cross at t = {}",
                        s.forest().label(u),
                        s.forest().label(v),
                        times[j]
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Same statement as [`check_noncrossing_pairwise`], checked in linear
/// time per observation time: among labels still defined at `t`, values
/// must be nondecreasing in label order.
pub fn check_noncrossing(refl: &ReflectedSystem) -> std::result::Result<(), String> {
    let s = refl.system();
    for &t in s.grid().times() {
        let mut prev: Option<(usize, f64)> = None;
        for i in 0..s.len() {
            if s.end(i) < t {
                continue;
            }
            let x = s.path_value(i, t);
            if let Some((j, y)) = prev {
                if x < y {
                    return Err(format!(
                        "paths {} and {} cross at t = {t}",
                        s.forest().label(j),
                        s.forest().label(i)
                    ));
                }
            }
            prev = Some((i, x));
        }
    }
    Ok(())
}

/// Monotonicity of the snake in `s` at observation times below
/// `min(beta_s, beta_s')`.
pub fn check_snake_monotone(snake: &Snake, times: &[f64]) -> std::result::Result<(), String> {
    let v = snake.contour.values();
    for a in 0..snake.samples.len() {
        for b in a + 1..snake.samples.len() {
            let m = v[a].min(v[b]);
            for &t in times.iter().take_while(|&&t| t <= m) {
                let (x, y) = (snake.samples[a].path.eval(t), snake.samples[b].path.eval(t));
                if x > y {
                    return Err(format!("snake decreases between s = {a} and {b} at t = {t}"));
                }
            }
        }
    }
    Ok(())
}

/// Value vectors at the observation times `<= t` of the reflected paths
/// alive at `t` that stay inside `(low, high)` on `[0, t]`.
pub fn paths_inside(
    refl: &ReflectedSystem,
    t: f64,
    low: f64,
    high: f64,
) -> HashSet<Vec<u64>> {
    let s = refl.system();
    let times: Vec<f64> = s.grid().times().iter().copied().take_while(|&g| g <= t).collect();
    s.alive_at(t)
        .into_iter()
        .filter_map(|i| {
            let w: Vec<f64> = times.iter().map(|&g| s.path_value(i, g)).collect();
            w.iter()
                .all(|&x| x > low && x < high)
                .then(|| w.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::attach_motions;
    use crate::rng::RngStream;
    use crate::stochastic::{ObservationGrid, TimeGrid};
    use crate::tree_coding::{contour_to_forest, sample_forest_until, MarkedForest};
    use std::collections::BTreeMap;

    fn manual(
        lifetimes: &[f64],
        times: Vec<f64>,
        samples: Vec<Vec<f64>>,
    ) -> HistoricalSystem {
        let mut m = BTreeMap::new();
        for (k, &l) in lifetimes.iter().enumerate() {
            m.insert(EdgeLabel::root(k + 1).unwrap(), l);
        }
        let forest = MarkedForest::from_lifetime_map(0.1, lifetimes.len(), &m).unwrap();
        let initial = samples.iter().map(|s| s[0]).collect();
        HistoricalSystem::from_parts(
            forest,
            ObservationGrid::from_times(times).unwrap(),
            initial,
            vec![0.0; lifetimes.len()],
            lifetimes.to_vec(),
            samples,
        )
    }

    fn random_system(seed: u64, eps: f64, n: usize, horizon: f64) -> HistoricalSystem {
        let mut rng = RngStream::new(seed, 0);
        let f = sample_forest_until(eps, n, horizon, &mut rng).unwrap();
        let x0: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
        let g = ObservationGrid::uniform(&TimeGrid::new(0.01, horizon).unwrap());
        attach_motions(&f, &x0, &g, &mut rng).unwrap()
    }

    #[test]
    fn crossing_pair_is_sorted() {
        let s = manual(
            &[2.0, 2.0],
            vec![0.0, 0.5, 1.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.5, -0.5, 0.5]],
        );
        let r = reflect_system(&s).unwrap();
        assert_eq!(r.system().samples(0), &[0.0, -0.5, 0.0]);
        assert_eq!(r.system().samples(1), &[0.5, 1.0, 0.5]);
    }

    #[test]
    fn early_death_joins_two_paths() {
        let (y1, z1, y2, z2) = (0.0, 1.1, 1.0, 2.0);
        let s = manual(
            &[0.5, 3.0],
            vec![0.0, 0.25, 0.75, 1.0],
            vec![vec![y1, 0.5, z1], vec![y2, 0.75, 1.25, z2]],
        );
        let r = reflect_system(&s).unwrap();
        let rs = r.system();
        assert_eq!(rs.death(1), 0.5);
        assert!(rs.truncated(0));
        let w = r.historical_path(&EdgeLabel::root(1).unwrap(), 1.0).unwrap();
        assert_eq!(w.origin(), y1);
        assert_eq!(w.tip(), z2);
        let osc = |p: &[f64]| {
            p.iter().copied().fold(f64::MIN, f64::max) - p.iter().copied().fold(f64::MAX, f64::min)
        };
        assert!(osc(w.values()) > osc(s.samples(0)).max(osc(s.samples(1))));
    }

    #[test]
    fn single_root_keeps_genealogy() {
        for seed in 0..20 {
            let s = random_system(seed, 0.05, 1, 0.6);
            let r = reflect_system(&s).unwrap();
            let rs = r.system();
            assert_eq!(rs.len(), s.len());
            assert_eq!(rs.sample_times(0), s.sample_times(0));
            assert_eq!(rs.samples(0), s.samples(0));
            check_position_multisets(&s, &r).unwrap();
        }
    }

    #[test]
    fn invariants_on_random_systems() {
        for seed in 0..30 {
            let s = random_system(50 + seed, 0.05, 5, 0.5);
            let r = reflect_system(&s).unwrap();
            assert_eq!(r.system().len(), s.len());
            check_position_multisets(&s, &r).unwrap();
            check_label_order(&r).unwrap();
            check_noncrossing(&r).unwrap();
            if s.len() <= 200 {
                check_noncrossing_pairwise(&r).unwrap();
            }
        }
    }

    #[test]
    fn endpoints_match_source_positions() {
        let s = random_system(7, 0.05, 6, 0.5);
        let r = reflect_system(&s).unwrap();
        for &t in s.grid().times() {
            let mut a = s.measure_at(t).locations;
            let mut b: Vec<f64> = r
                .system()
                .alive_at(t)
                .into_iter()
                .map(|i| r.system().historical_path_of(i, t).unwrap().tip())
                .collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn crossing_is_detected() {
        let s = manual(
            &[2.0, 2.0],
            vec![0.0, 0.5, 1.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.5, -0.5, 0.5]],
        );
        let fake = ReflectedSystem {
            system: s.clone(),
            events: vec![0.0],
        };
        assert!(check_label_order(&fake).is_err());
        assert!(check_noncrossing_pairwise(&fake).is_err());
        assert!(check_noncrossing(&fake).is_err());
    }

    #[test]
    fn ambiguous_death_position() {
        // the dying particle sits exactly on the other one
        let s = manual(
            &[0.5, 3.0],
            vec![0.0, 0.25, 0.75, 1.0],
            vec![vec![0.0, 0.5, 1.0], vec![1.0, 0.75, 1.25, 2.0]],
        );
        assert!(matches!(reflect_system(&s), Err(Error::Ambiguous(t)) if t == 0.5));
    }

    #[test]
    fn reflected_snake_properties() {
        for seed in 0..10 {
            let mut rng = RngStream::new(300 + seed, 0);
            let c = crate::tree_coding::sample_contour_direct_capped(0.1, 3, 400, &mut rng);
            let Ok(c) = c else { continue };
            let f = contour_to_forest(&c).unwrap();
            let horizon = f.death_times().iter().copied().fold(0.0, f64::max) + 0.05;
            let g = ObservationGrid::uniform(&TimeGrid::new(0.01, horizon).unwrap());
            let s = attach_motions(&f, &[0.0, 0.1, 0.2], &g, &mut rng).unwrap();
            let r = reflect_system(&s).unwrap();
            let snake = reflected_snake(&r).unwrap();
            check_snake_monotone(&snake, g.times()).unwrap();
        }
    }

    #[test]
    fn truncated_snake_rejected() {
        let s = random_system(9, 0.05, 3, 0.5);
        let r = reflect_system(&s).unwrap();
        if r.system().is_truncated() {
            assert!(matches!(reflected_snake(&r), Err(Error::Unsupported(_))));
        }
    }

    #[test]
    fn restriction_bounds() {
        let s = random_system(10, 0.05, 4, 0.3);
        assert_eq!(restrict_system(&s, 4).unwrap(), s);
        assert_eq!(restrict_system(&s, 1).unwrap().forest().n_roots(), 1);
        assert!(restrict_system(&s, 0).is_err());
        assert!(restrict_system(&s, 5).is_err());
    }
}
