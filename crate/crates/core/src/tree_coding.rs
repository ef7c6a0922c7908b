//! Coding of binary Galton-Watson forests by contour excursions.
//!
//! A [`ContourProcess`] is the alternating chain `S_0 = 0, S_1, S_2, ...`
//! read as a piecewise-linear path on the `eps^2` grid. Every excursion away
//! from zero codes one tree: odd grid indices are leaves, even interior
//! indices are branch points, and the value at an index is the absolute
//! death time of the edge owning it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::stochastic::Polyline;

const NONE: u32 = u32::MAX;

/// Edge of the genealogical forest: a root index and a word over `{1, 2}`.
///
/// The derived ordering is lexicographic, which is also depth-first order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeLabel {
    root: usize,
    word: Vec<u8>,
}

impl EdgeLabel {
    pub fn new(root: usize, word: Vec<u8>) -> Result<Self> {
        if root == 0 {
            return Err(Error::Forest("root index starts at 1".into()));
        }
        if word.iter().any(|&c| c != 1 && c != 2) {
            return Err(Error::Forest("word letters must be 1 or 2".into()));
        }
        Ok(Self { root, word })
    }

    pub fn root(root: usize) -> Result<Self> {
        Self::new(root, Vec::new())
    }

    /// Parses the word part from a string such as `"1211"`.
    pub fn parse(root: usize, word: &str) -> Result<Self> {
        let letters = word
            .bytes()
            .map(|b| match b {
                b'1' => Ok(1),
                b'2' => Ok(2),
                _ => Err(Error::Forest(format!("bad word {word:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(root, letters)
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn word(&self) -> &[u8] {
        &self.word
    }

    pub fn word_string(&self) -> String {
        self.word.iter().map(|&c| (b'0' + c) as char).collect()
    }

    pub fn child(&self, i: u8) -> Self {
        let mut word = self.word.clone();
        word.push(i);
        Self {
            root: self.root,
            word,
        }
    }

    pub fn parent(&self) -> Option<Self> {
        let n = self.word.len();
        (n > 0).then(|| Self {
            root: self.root,
            word: self.word[..n - 1].to_vec(),
        })
    }

    pub fn is_ancestor_of(&self, other: &EdgeLabel) -> bool {
        self.root == other.root
            && self.word.len() <= other.word.len()
            && other.word[..self.word.len()] == self.word[..]
    }
}

impl fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.root, self.word_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Node {
    lifetime: f64,
    parent: u32,
    child2: u32,
    root: u32,
    slot: u8,
}

/// Marked binary forest stored in depth-first order.
///
/// Node indices follow the lexicographic order of labels, so the first
/// child of a branching node `i` is `i + 1`, every subtree is a contiguous
/// index range and the trees of roots `1..=m` form a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedForest {
    epsilon: f64,
    roots: Vec<usize>,
    nodes: Vec<Node>,
}

impl MarkedForest {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_roots(&self) -> usize {
        self.roots.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the root of tree `k` (0-based).
    pub fn root_node(&self, k: usize) -> usize {
        self.roots[k]
    }

    /// Index range of tree `k` (0-based).
    pub fn tree_range(&self, k: usize) -> std::ops::Range<usize> {
        let end = self.roots.get(k + 1).copied().unwrap_or(self.nodes.len());
        self.roots[k]..end
    }

    pub fn lifetime(&self, i: usize) -> f64 {
        self.nodes[i].lifetime
    }

    pub(crate) fn set_lifetime(&mut self, i: usize, lifetime: f64) {
        self.nodes[i].lifetime = lifetime;
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        let p = self.nodes[i].parent;
        (p != NONE).then_some(p as usize)
    }

    pub fn children(&self, i: usize) -> Option<(usize, usize)> {
        let c2 = self.nodes[i].child2;
        (c2 != NONE).then_some((i + 1, c2 as usize))
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].child2 == NONE
    }

    /// 0-based tree index of node `i`.
    pub fn tree_of(&self, i: usize) -> usize {
        self.nodes[i].root as usize
    }

    /// 0 for roots, otherwise the last letter of the word.
    pub fn slot(&self, i: usize) -> u8 {
        self.nodes[i].slot
    }

    /// One past the last index of the subtree rooted at `i`.
    pub fn subtree_end(&self, mut i: usize) -> usize {
        while let Some((_, c2)) = self.children(i) {
            i = c2;
        }
        i + 1
    }

    pub fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent(i) {
            i = p;
            d += 1;
        }
        d
    }

    pub fn label(&self, i: usize) -> EdgeLabel {
        let mut word = Vec::new();
        let mut j = i;
        while let Some(p) = self.parent(j) {
            word.push(self.nodes[j].slot);
            j = p;
        }
        word.reverse();
        EdgeLabel {
            root: self.nodes[i].root as usize + 1,
            word,
        }
    }

    pub fn find(&self, label: &EdgeLabel) -> Option<usize> {
        if label.root == 0 || label.root > self.roots.len() {
            return None;
        }
        let mut i = self.roots[label.root - 1];
        for &c in &label.word {
            let (c1, c2) = self.children(i)?;
            i = if c == 1 { c1 } else { c2 };
        }
        Some(i)
    }

    pub fn labels(&self) -> impl Iterator<Item = EdgeLabel> + '_ {
        (0..self.nodes.len()).map(|i| self.label(i))
    }

    /// Death time of every edge: sum of lifetimes along the ancestral line.
    pub fn death_times(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let birth = self.parent(i).map_or(0.0, |p| d[p]);
            d[i] = birth + self.nodes[i].lifetime;
        }
        d
    }

    pub fn birth_times(&self) -> Vec<f64> {
        let d = self.death_times();
        (0..self.nodes.len())
            .map(|i| self.parent(i).map_or(0.0, |p| d[p]))
            .collect()
    }

    pub fn lifetime_map(&self) -> BTreeMap<EdgeLabel, f64> {
        (0..self.nodes.len())
            .map(|i| (self.label(i), self.nodes[i].lifetime))
            .collect()
    }

    pub fn from_lifetime_map(
        epsilon: f64,
        n_roots: usize,
        edges: &BTreeMap<EdgeLabel, f64>,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        let mut b = ForestBuilder::new(epsilon);
        // (node index, word length) along the current ancestral line
        let mut line: Vec<(usize, usize)> = Vec::new();
        for (label, &lifetime) in edges {
            if label.word.is_empty() {
                if label.root != b.roots.len() + 1 {
                    return Err(Error::Forest(format!("root {} missing", b.roots.len() + 1)));
                }
                line.clear();
                line.push((b.push_root(lifetime)?, 0));
                continue;
            }
            if label.root != b.roots.len() {
                return Err(Error::Forest(format!("edge {label} has no ancestor")));
            }
            let n = label.word.len();
            while line.last().is_some_and(|&(_, len)| len >= n) {
                line.pop();
            }
            let parent = match line.last() {
                Some(&(p, len)) if len == n - 1 && b.word_matches(p, &label.word[..n - 1]) => p,
                _ => return Err(Error::Forest(format!("edge {label} has no parent"))),
            };
            let idx = b.push_child(parent, label.word[n - 1], lifetime)?;
            line.push((idx, n));
        }
        if b.roots.len() != n_roots {
            return Err(Error::Forest(format!(
                "expected {n_roots} roots, found {}",
                b.roots.len()
            )));
        }
        b.finish()
    }

    /// Subforest made of the first `m` trees.
    pub fn restrict_roots(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.roots.len() {
            return Err(Error::Domain(format!(
                "keep_roots must be in 1..={}, got {m}",
                self.roots.len()
            )));
        }
        let end = self.tree_range(m - 1).end;
        Ok(Self {
            epsilon: self.epsilon,
            roots: self.roots[..m].to_vec(),
            nodes: self.nodes[..end].to_vec(),
        })
    }

    /// Copy with the children of every node where `cut` is true removed.
    ///
    /// Returns the pruned forest and, for each new index, the old index.
    pub fn prune(&self, cut: &[bool]) -> (Self, Vec<usize>) {
        let mut b = ForestBuilder::new(self.epsilon);
        let mut old_of_new = Vec::with_capacity(self.nodes.len());
        let mut new_of_old = vec![NONE; self.nodes.len()];
        let mut i = 0;
        while i < self.nodes.len() {
            let node = self.nodes[i];
            let idx = match self.parent(i) {
                None => b.push_root(node.lifetime),
                Some(p) => b.push_child(new_of_old[p] as usize, node.slot, node.lifetime),
            }
            .expect("pruning a valid forest stays valid");
            new_of_old[i] = idx as u32;
            old_of_new.push(i);
            i = if cut[i] { self.subtree_end(i) } else { i + 1 };
        }
        (b.finish().expect("pruning a valid forest stays valid"), old_of_new)
    }

    pub fn to_json(&self) -> ForestJson {
        ForestJson {
            epsilon: self.epsilon,
            n_roots: self.roots.len(),
            edges: (0..self.nodes.len())
                .map(|i| {
                    let l = self.label(i);
                    EdgeJson {
                        root: l.root,
                        word: l.word_string(),
                        lifetime: self.nodes[i].lifetime,
                    }
                })
                .collect(),
        }
    }

    pub fn from_json(json: &ForestJson) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in &json.edges {
            let label = EdgeLabel::parse(e.root, &e.word)?;
            if map.insert(label.clone(), e.lifetime).is_some() {
                return Err(Error::Forest(format!("duplicate edge {label}")));
            }
        }
        Self::from_lifetime_map(json.epsilon, json.n_roots, &map)
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.to_json())?;
        Ok(())
    }

    pub fn read_json(r: impl std::io::Read) -> Result<Self> {
        let json: ForestJson = serde_json::from_reader(r)?;
        Self::from_json(&json)
    }
}

/// Serialized forest: `{epsilon, n_roots, edges: [{root, word, lifetime}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestJson {
    pub epsilon: f64,
    pub n_roots: usize,
    pub edges: Vec<EdgeJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeJson {
    pub root: usize,
    pub word: String,
    pub lifetime: f64,
}

/// Appends nodes in depth-first order.
pub(crate) struct ForestBuilder {
    epsilon: f64,
    roots: Vec<usize>,
    nodes: Vec<Node>,
}

impl ForestBuilder {
    pub(crate) fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            roots: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub(crate) fn with_capacity(epsilon: f64, n: usize) -> Self {
        let mut b = Self::new(epsilon);
        b.nodes.reserve(n);
        b
    }

    fn check_lifetime(lifetime: f64) -> Result<()> {
        if !(lifetime > 0.0) || !lifetime.is_finite() {
            return Err(Error::Forest(format!("lifetime must be positive, got {lifetime}")));
        }
        Ok(())
    }

    pub(crate) fn push_root(&mut self, lifetime: f64) -> Result<usize> {
        Self::check_lifetime(lifetime)?;
        let idx = self.nodes.len();
        if idx >= NONE as usize {
            return Err(Error::TooLarge(idx));
        }
        self.roots.push(idx);
        self.nodes.push(Node {
            lifetime,
            parent: NONE,
            child2: NONE,
            root: (self.roots.len() - 1) as u32,
            slot: 0,
        });
        Ok(idx)
    }

    pub(crate) fn push_child(&mut self, parent: usize, slot: u8, lifetime: f64) -> Result<usize> {
        Self::check_lifetime(lifetime)?;
        let idx = self.nodes.len();
        if idx >= NONE as usize {
            return Err(Error::TooLarge(idx));
        }
        match slot {
            1 if idx == parent + 1 => {}
            2 if idx > parent + 1 && self.nodes[parent].child2 == NONE => {
                self.nodes[parent].child2 = idx as u32;
            }
            _ => {
                return Err(Error::Forest(format!(
                    "child {slot} of node {parent} out of depth-first order"
                )))
            }
        }
        let root = self.nodes[parent].root;
        self.nodes.push(Node {
            lifetime,
            parent: parent as u32,
            child2: NONE,
            root,
            slot,
        });
        Ok(idx)
    }

    fn word_matches(&self, mut i: usize, word: &[u8]) -> bool {
        for &c in word.iter().rev() {
            let n = &self.nodes[i];
            if n.slot != c || n.parent == NONE {
                return false;
            }
            i = n.parent as usize;
        }
        self.nodes[i].parent == NONE
    }

    pub(crate) fn finish(self) -> Result<MarkedForest> {
        // A first child without a second shows up as a node whose successor
        // is its child while child2 is unset.
        for i in 0..self.nodes.len() {
            let has_first = self
                .nodes
                .get(i + 1)
                .is_some_and(|n| n.parent == i as u32);
            if has_first != (self.nodes[i].child2 != NONE) {
                return Err(Error::Forest(format!("node {i} has exactly one child")));
            }
        }
        Ok(MarkedForest {
            epsilon: self.epsilon,
            roots: self.roots,
            nodes: self.nodes,
        })
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Domain(format!("epsilon must be in (0, 1], got {epsilon}")));
    }
    Ok(())
}

/// Lifetime `l` with `birth + l == death` exactly in floating point.
pub(crate) fn exact_lifetime(birth: f64, death: f64) -> f64 {
    let mut l = death - birth;
    for _ in 0..64 {
        let s = birth + l;
        if s < death {
            l = l.next_up();
        } else if s > death {
            l = l.next_down();
        } else {
            return l;
        }
    }
    l
}

/// Alternating chain on the `eps^2` grid coding a forest.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourProcess {
    epsilon: f64,
    values: Vec<f64>,
}

impl ContourProcess {
    pub fn new(epsilon: f64, values: Vec<f64>) -> Result<Self> {
        check_epsilon(epsilon)?;
        let c = Self { epsilon, values };
        c.validate()?;
        Ok(c)
    }

    pub(crate) fn unchecked(epsilon: f64, values: Vec<f64>) -> Self {
        Self { epsilon, values }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.values;
        if v.len() < 3 {
            return Err(Error::Coding("a contour needs at least one excursion".into()));
        }
        if v[0] != 0.0 || v[v.len() - 1] != 0.0 {
            return Err(Error::Coding("contour must start and end at 0".into()));
        }
        for (k, &x) in v.iter().enumerate() {
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::Coding(format!("value {x} at index {k}")));
            }
            if k > 0 {
                let ok = if k % 2 == 1 { x >= v[k - 1] } else { x <= v[k - 1] };
                if !ok {
                    return Err(Error::Coding(format!("alternation broken at index {k}")));
                }
            }
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `K` with `K eps^2 = tau`.
    pub fn tau_index(&self) -> usize {
        self.values.len() - 1
    }

    pub fn tau(&self) -> f64 {
        self.tau_index() as f64 * self.epsilon * self.epsilon
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `(start, end)` grid indices of every excursion away from 0.
    pub fn excursions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for k in 1..self.values.len() {
            if self.values[k] == 0.0 {
                if k > start + 1 {
                    out.push((start, k));
                }
                start = k;
            }
        }
        out
    }

    pub fn n_excursions(&self) -> usize {
        self.excursions().len()
    }

    /// Linear interpolation at continuous time `s`.
    pub fn value_at_time(&self, s: f64) -> f64 {
        let h = self.epsilon * self.epsilon;
        let x = (s / h).max(0.0);
        let k = x.floor() as usize;
        if k >= self.tau_index() {
            return self.values[self.tau_index()];
        }
        let f = x - k as f64;
        self.values[k] + f * (self.values[k + 1] - self.values[k])
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "k,beta")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{k},{v:?}")?;
        }
        Ok(())
    }

    pub fn read_csv(epsilon: f64, r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "k,beta" => {}
            _ => return Err(Error::Parse("expected header k,beta".into())),
        }
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad row {line:?}")))?;
            let k: usize = k.trim().parse().map_err(|_| Error::Parse(format!("bad index {k:?}")))?;
            if k != values.len() {
                return Err(Error::Parse(format!("index {k} out of sequence")));
            }
            values.push(v.trim().parse().map_err(|_| Error::Parse(format!("bad value {v:?}")))?);
        }
        Self::new(epsilon, values)
    }
}

/// Discrete local time `L^{eps,x}_s` read off a contour.
#[derive(Clone, Copy, Debug)]
pub struct LocalTimeField<'a> {
    contour: &'a ContourProcess,
}

impl<'a> LocalTimeField<'a> {
    pub fn new(contour: &'a ContourProcess) -> Self {
        Self { contour }
    }

    pub fn contour(&self) -> &'a ContourProcess {
        self.contour
    }

    pub fn at(&self, level: f64, s: usize) -> f64 {
        discrete_local_time(self.contour, level, s)
    }

    /// `L^{eps,x}_s` for every `s = 0..=K`.
    pub fn profile(&self, level: f64) -> Vec<f64> {
        let v = self.contour.values();
        let eps = self.contour.epsilon();
        let mut out = Vec::with_capacity(v.len());
        let mut count = 0u64;
        out.push(0.0);
        for r in 0..v.len() - 1 {
            if starts_upcrossing(v[r], v[r + 1], level) {
                count += 1;
            }
            out.push(eps * count as f64);
        }
        out
    }
}

#[inline]
fn starts_upcrossing(a: f64, b: f64, level: f64) -> bool {
    a <= level && level < b
}

/// `eps` times the number of up-segments `r -> r + 1` with `r < upto` that
/// leave `level`: the segment starts at or below the level and ends above it.
///
/// `upto` is clamped to the contour length.
pub fn discrete_local_time(contour: &ContourProcess, level: f64, upto: usize) -> f64 {
    let v = contour.values();
    let s = upto.min(contour.tau_index());
    let n = (0..s).filter(|&r| starts_upcrossing(v[r], v[r + 1], level)).count();
    contour.epsilon() * n as f64
}

#[inline]
fn crossing_time(t0: f64, t1: f64, a: f64, b: f64, h: f64) -> f64 {
    let t = t0 + (h - a) / (b - a) * (t1 - t0);
    t.clamp(t0, t1)
}

/// Completion times of the upcrossings of `beta` from `level` to
/// `level + 2 eps`, on the linearly interpolated path.
pub fn upcrossing_completions(beta: &impl Polyline, level: f64, epsilon: f64) -> Vec<f64> {
    let top = level + 2.0 * epsilon;
    let mut out = Vec::new();
    if beta.is_empty() {
        return out;
    }
    let mut armed = false;
    for i in 0..beta.len() - 1 {
        let a = beta.value(i);
        if a <= level {
            armed = true;
        }
        let b = beta.value(i + 1);
        if armed && b > top {
            out.push(crossing_time(beta.time(i), beta.time(i + 1), a, b, top));
            armed = false;
        }
    }
    out
}

/// Number of completed upcrossings from `level` to `level + 2 eps` strictly
/// before time `upto`.
pub fn upcrossing_count(beta: &impl Polyline, level: f64, epsilon: f64, upto: f64) -> usize {
    upcrossing_completions(beta, level, epsilon)
        .partition_point(|&v| v < upto)
}

/// Stopping times and chain values of the embedding of the contour chain
/// into a nonnegative path.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub epsilon: f64,
    /// `T_k`, for every stopping time reached before the path ends.
    pub times: Vec<f64>,
    /// `S_k` matching `times`.
    pub chain: Vec<f64>,
    /// Node spacing coarser than `eps^2 / 50`.
    pub coarse: bool,
    /// The path returned to 0 after the last even stopping time, so the next
    /// chain value is 0 even though its stopping time lies beyond the path.
    pub pending_zero: bool,
}

impl Embedding {
    /// Number of returns to 0 recorded in the chain, not counting `S_0`.
    pub fn returns(&self) -> usize {
        self.chain.iter().skip(1).filter(|&&x| x == 0.0).count()
    }
}

/// Stopping times `T_k` of the contour embedding, computed on the linear
/// interpolation of `beta`.
///
/// `T_0` is the first hit of `2 eps`; after an even stop the next stop is
/// the first drawdown of `2 eps` from the running maximum, after an odd stop
/// the first rise of `2 eps` above the running minimum. The path should be
/// a reflected Brownian path with its zeros resolved (see
/// [`crate::stochastic::reflect_with_zeros`]) so excursions can end.
pub fn embed_stopping_times(beta: &impl Polyline, epsilon: f64) -> Result<Embedding> {
    embed(beta, epsilon, usize::MAX)
}

fn embed(beta: &impl Polyline, epsilon: f64, max_returns: usize) -> Result<Embedding> {
    check_epsilon(epsilon)?;
    if beta.is_empty() || beta.value(0) != 0.0 {
        return Err(Error::Domain("embedded path must start at 0".into()));
    }
    let two = 2.0 * epsilon;
    let mut times = Vec::new();
    let mut chain = Vec::new();
    let mut max_gap = 0.0f64;
    let mut rising = true;
    let mut extreme = 0.0f64;
    let mut returns = 0;
    for i in 0..beta.len() - 1 {
        let (t0, t1) = (beta.time(i), beta.time(i + 1));
        max_gap = max_gap.max(t1 - t0);
        let (a, b) = (beta.value(i), beta.value(i + 1));
        if rising {
            // waiting for an even stop: rise of 2 eps above the running min
            let h = extreme + two;
            if b >= h {
                times.push(crossing_time(t0, t1, a, b, h));
                chain.push(extreme);
                if chain.len() > 1 && extreme == 0.0 {
                    returns += 1;
                    if returns >= max_returns {
                        break;
                    }
                }
                rising = false;
                extreme = b;
            } else {
                extreme = extreme.min(b);
            }
        } else {
            let h = extreme - two;
            if b <= h {
                times.push(crossing_time(t0, t1, a, b, h));
                chain.push(h);
                rising = true;
                extreme = b;
            } else {
                extreme = extreme.max(b);
            }
        }
    }
    let pending_zero = rising && extreme == 0.0 && !chain.is_empty();
    let coarse = max_gap > epsilon * epsilon / 50.0 * (1.0 + 1e-9);
    if coarse {
        log::warn!(
            "path spacing {max_gap:e} exceeds eps^2/50 = {:e}; stopping times are biased",
            epsilon * epsilon / 50.0
        );
    }
    Ok(Embedding {
        epsilon,
        times,
        chain,
        coarse,
        pending_zero,
    })
}

/// Contour of the first `n_roots` excursions embedded in `beta`.
pub fn contour_from_embedding(
    beta: &impl Polyline,
    epsilon: f64,
    n_roots: usize,
) -> Result<ContourProcess> {
    if n_roots == 0 {
        return Err(Error::Domain("n_roots must be at least 1".into()));
    }
    let emb = embed(beta, epsilon, n_roots)?;
    contour_from_chain(&emb, n_roots)
}

/// Cuts an embedding's chain after its `n_roots`-th return to 0.
pub fn contour_from_chain(emb: &Embedding, n_roots: usize) -> Result<ContourProcess> {
    let mut seen = 0;
    for (k, &x) in emb.chain.iter().enumerate().skip(1) {
        if x == 0.0 {
            seen += 1;
            if seen == n_roots {
                return ContourProcess::new(emb.epsilon, emb.chain[..=k].to_vec());
            }
        }
    }
    if emb.pending_zero && seen + 1 == n_roots {
        let mut values = emb.chain.clone();
        values.push(0.0);
        return ContourProcess::new(emb.epsilon, values);
    }
    let mut partial = emb.chain.clone();
    if partial.is_empty() {
        partial.push(0.0);
    }
    Err(Error::IncompleteCoding {
        completed: seen + usize::from(emb.pending_zero),
        wanted: n_roots,
        partial: Box::new(ContourProcess::unchecked(emb.epsilon, partial)),
    })
}

/// Simulates the contour chain directly until its `n_roots`-th return to 0.
///
/// Excursion lengths are heavy tailed (the total progeny of a critical tree
/// has infinite mean), so this can run long; see
/// [`sample_contour_direct_capped`] for a bounded variant.
pub fn sample_contour_direct(
    epsilon: f64,
    n_roots: usize,
    rng: &mut impl RandomSource,
) -> Result<ContourProcess> {
    sample_contour_direct_capped(epsilon, n_roots, usize::MAX, rng)
}

/// As [`sample_contour_direct`], failing with [`Error::TooLarge`] once the
/// chain exceeds `max_steps` steps.
pub fn sample_contour_direct_capped(
    epsilon: f64,
    n_roots: usize,
    max_steps: usize,
    rng: &mut impl RandomSource,
) -> Result<ContourProcess> {
    check_epsilon(epsilon)?;
    if n_roots == 0 {
        return Err(Error::Domain("n_roots must be at least 1".into()));
    }
    let mean = 2.0 * epsilon;
    let mut values = vec![0.0];
    let mut returns = 0;
    let mut s = 0.0;
    while returns < n_roots {
        if values.len() > max_steps {
            return Err(Error::TooLarge(max_steps));
        }
        s += mean * rng.standard_exponential();
        values.push(s);
        s = (s - mean * rng.standard_exponential()).max(0.0);
        values.push(s);
        if s == 0.0 {
            returns += 1;
        }
    }
    Ok(ContourProcess::unchecked(epsilon, values))
}

/// Binary critical Galton-Watson forest with `Exp(mean eps)` lifetimes,
/// grown only up to `horizon`: edges dying at or after the horizon get no
/// children.
pub fn sample_forest_until(
    epsilon: f64,
    n_roots: usize,
    horizon: f64,
    rng: &mut impl RandomSource,
) -> Result<MarkedForest> {
    check_epsilon(epsilon)?;
    if n_roots == 0 {
        return Err(Error::Domain("n_roots must be at least 1".into()));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("bad horizon {horizon}")));
    }
    let mut b = ForestBuilder::with_capacity(epsilon, n_roots);
    // (parent index, slot, birth)
    let mut stack: Vec<(u32, u8, f64)> = Vec::new();
    for _ in 0..n_roots {
        stack.push((NONE, 0, 0.0));
        while let Some((parent, slot, birth)) = stack.pop() {
            let lifetime = loop {
                let l = epsilon * rng.standard_exponential();
                if l > 0.0 {
                    break l;
                }
            };
            let death = birth + lifetime;
            let lifetime = exact_lifetime(birth, death);
            let idx = if parent == NONE {
                b.push_root(lifetime)?
            } else {
                b.push_child(parent as usize, slot, lifetime)?
            };
            if death < horizon && rng.uniform() < 0.5 {
                stack.push((idx as u32, 2, death));
                stack.push((idx as u32, 1, death));
            }
        }
    }
    b.finish()
}

/// Decodes a contour into its marked forest, one tree per excursion.
pub fn contour_to_forest(contour: &ContourProcess) -> Result<MarkedForest> {
    contour_to_forest_indexed(contour).map(|(f, _)| f)
}

/// As [`contour_to_forest`], also returning the grid index owned by each
/// node.
pub fn contour_to_forest_indexed(contour: &ContourProcess) -> Result<(MarkedForest, Vec<usize>)> {
    contour.validate()?;
    let v = contour.values();
    let excursions = contour.excursions();
    for w in v.windows(2) {
        if w[0] == 0.0 && w[1] == 0.0 {
            return Err(Error::Coding("empty excursion".into()));
        }
    }
    let mut b = ForestBuilder::with_capacity(contour.epsilon(), v.len());
    let mut index_of = Vec::with_capacity(v.len());
    let mut left = vec![NONE; v.len()];
    let mut right = vec![NONE; v.len()];
    let mut stack: Vec<u32> = Vec::new();
    let mut walk: Vec<(u32, u32, u8)> = Vec::new();
    for &(i, j) in &excursions {
        // min-Cartesian tree of the interior i+1..j-1
        stack.clear();
        for p in i + 1..j {
            let mut last = NONE;
            while let Some(&top) = stack.last() {
                if v[top as usize] > v[p] {
                    last = top;
                    stack.pop();
                } else {
                    break;
                }
            }
            left[p] = last;
            if let Some(&top) = stack.last() {
                right[top as usize] = p as u32;
            }
            stack.push(p as u32);
        }
        walk.push((stack[0], NONE, 0));
        while let Some((p, parent, slot)) = walk.pop() {
            let p = p as usize;
            let internal = p.is_multiple_of(2);
            let (l, r) = (left[p], right[p]);
            if (internal && (l == NONE || r == NONE)) || (!internal && (l != NONE || r != NONE)) {
                return Err(Error::Coding(format!("index {p} breaks the binary structure")));
            }
            let idx = if parent == NONE {
                let lifetime = v[p];
                b.push_root(lifetime)
            } else {
                let birth = v[index_of[parent as usize]];
                b.push_child(parent as usize, slot, exact_lifetime(birth, v[p]))
            }
            .map_err(|e| Error::Coding(format!("at index {p}: {e}")))?;
            index_of.push(p);
            if internal {
                walk.push((r, idx as u32, 2));
                walk.push((l, idx as u32, 1));
            }
        }
    }
    Ok((b.finish()?, index_of))
}

/// Encodes a forest as its contour: the in-order sequence of death times
/// of each tree, with a 0 between trees.
pub fn forest_to_contour(forest: &MarkedForest) -> ContourProcess {
    forest_to_contour_indexed(forest).0
}

/// As [`forest_to_contour`], also returning the node owning each grid index
/// (`None` at the zeros between trees).
pub fn forest_to_contour_indexed(forest: &MarkedForest) -> (ContourProcess, Vec<Option<usize>>) {
    let deaths = forest.death_times();
    let mut values = Vec::with_capacity(forest.len() + forest.n_roots() + 1);
    let mut owner = Vec::with_capacity(values.capacity());
    values.push(0.0);
    owner.push(None);
    let mut stack = Vec::new();
    for k in 0..forest.n_roots() {
        let mut node = forest.root_node(k);
        loop {
            while let Some((c1, _)) = forest.children(node) {
                stack.push(node);
                node = c1;
            }
            values.push(deaths[node]);
            owner.push(Some(node));
            match stack.pop() {
                Some(p) => {
                    values.push(deaths[p]);
                    owner.push(Some(p));
                    node = forest.children(p).expect("branching node").1;
                }
                None => break,
            }
        }
        values.push(0.0);
        owner.push(None);
    }
    (ContourProcess::unchecked(forest.epsilon(), values), owner)
}

/// `sup |L^{eps,x}_{2k} - eps' M^{eps'}_{T_{2k}}(x)|` over the even chain
/// indices of the embedding of `beta` and the levels `m eps / 2`, with the
/// finer upcrossing count standing in for the Brownian local time.
pub fn local_time_sup_error(beta: &impl Polyline, epsilon: f64, fine_epsilon: f64) -> Result<f64> {
    check_epsilon(fine_epsilon)?;
    let emb = embed_stopping_times(beta, epsilon)?;
    if emb.chain.is_empty() {
        return Ok(0.0);
    }
    let contour = ContourProcess::unchecked(epsilon, emb.chain.clone());
    let top = emb.chain.iter().copied().fold(0.0, f64::max);
    let half = epsilon / 2.0;
    let mut sup = 0.0f64;
    for m in 0..=(top / half).ceil() as usize + 1 {
        let x = m as f64 * half;
        let coarse = upcrossing_profile(&contour, x);
        let fine = upcrossing_completions(beta, x, fine_epsilon);
        for k in (0..emb.times.len()).step_by(2) {
            let l = epsilon * coarse[k] as f64;
            let m = fine.partition_point(|&c| c < emb.times[k]);
            sup = sup.max((l - fine_epsilon * m as f64).abs());
        }
    }
    Ok(sup)
}

fn upcrossing_profile(contour: &ContourProcess, level: f64) -> Vec<u64> {
    let v = contour.values();
    let mut out = Vec::with_capacity(v.len());
    let mut count = 0;
    out.push(0);
    for w in v.windows(2) {
        if starts_upcrossing(w[0], w[1], level) {
            count += 1;
        }
        out.push(count);
    }
    out
}
