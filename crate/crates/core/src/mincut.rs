//! Exact binary min-cut on 4-connected grids.
//!
//! A labeling assigns each active node 0 or 1. Its energy is
//!
//! ```text
//! E(l) = sum_p D_p(l_p) + sum_{(p,q)} w_pq [l_p != l_q]
//! ```
//!
//! with `D_p(0) = sink_cap[p]` and `D_p(1) = source_cap[p]`. Label 0 is the
//! source side of the cut. The minimizer is found with the augmenting-path
//! max-flow of Boykov and Kolmogorov (two search trees, orphan adoption),
//! which is well suited to the short paths of image grids.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Stand-in for an infinite data penalty.
pub const HARD: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct GridGraph {
    width: usize,
    height: usize,
    source_cap: Vec<f64>,
    sink_cap: Vec<f64>,
    right_cap: Vec<f64>,
    down_cap: Vec<f64>,
    active: Vec<bool>,
}

impl GridGraph {
    /// All nodes active, all capacities zero.
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            source_cap: vec![0.0; n],
            sink_cap: vec![0.0; n],
            right_cap: vec![0.0; n],
            down_cap: vec![0.0; n],
            active: vec![true; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn set_active(&mut self, x: usize, y: usize, active: bool) {
        let i = self.idx(x, y);
        self.active[i] = active;
    }

    #[inline]
    pub fn is_active(&self, x: usize, y: usize) -> bool {
        self.active[self.idx(x, y)]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Data costs of labeling `(x, y)` with 0 and with 1.
    pub fn set_data(&mut self, x: usize, y: usize, cost0: f64, cost1: f64) {
        let i = self.idx(x, y);
        self.sink_cap[i] = cost0;
        self.source_cap[i] = cost1;
    }

    pub fn data(&self, x: usize, y: usize) -> (f64, f64) {
        let i = self.idx(x, y);
        (self.sink_cap[i], self.source_cap[i])
    }

    /// Forbids the other label with a [`HARD`] penalty.
    pub fn force_label(&mut self, x: usize, y: usize, label: u8) {
        let i = self.idx(x, y);
        if label == 0 {
            self.source_cap[i] = self.source_cap[i].max(HARD);
        } else {
            self.sink_cap[i] = self.sink_cap[i].max(HARD);
        }
    }

    /// Label forced at `(x, y)`, if any.
    pub fn forced_label(&self, x: usize, y: usize) -> Option<u8> {
        let i = self.idx(x, y);
        match (self.sink_cap[i] >= HARD, self.source_cap[i] >= HARD) {
            (false, true) => Some(0),
            (true, false) => Some(1),
            _ => None,
        }
    }

    /// Cost between `(x, y)` and `(x + 1, y)` when their labels differ.
    pub fn set_right(&mut self, x: usize, y: usize, cost: f64) {
        let i = self.idx(x, y);
        self.right_cap[i] = cost;
    }

    /// Cost between `(x, y)` and `(x, y + 1)` when their labels differ.
    pub fn set_down(&mut self, x: usize, y: usize, cost: f64) {
        let i = self.idx(x, y);
        self.down_cap[i] = cost;
    }

    pub fn right(&self, x: usize, y: usize) -> f64 {
        self.right_cap[self.idx(x, y)]
    }

    pub fn down(&self, x: usize, y: usize) -> f64 {
        self.down_cap[self.idx(x, y)]
    }

    #[inline]
    fn has_right(&self, i: usize) -> bool {
        i % self.width + 1 < self.width && self.active[i] && self.active[i + 1]
    }

    #[inline]
    fn has_down(&self, i: usize) -> bool {
        i / self.width + 1 < self.height && self.active[i] && self.active[i + self.width]
    }

    fn validate(&self) -> Result<()> {
        if self.active_count() == 0 {
            return Err(Error::NoActiveNodes);
        }
        for i in 0..self.active.len() {
            if !self.active[i] {
                continue;
            }
            for c in [
                self.source_cap[i],
                self.sink_cap[i],
                self.right_cap[i],
                self.down_cap[i],
            ] {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "capacity {c} at node {i} must be finite and nonnegative"
                    )));
                }
            }
            if self.source_cap[i] >= HARD && self.sink_cap[i] >= HARD {
                return Err(Error::ConstraintConflict {
                    x: i % self.width,
                    y: i / self.width,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutResult {
    width: usize,
    /// Per-node labels; inactive nodes read 0.
    pub labels: Vec<u8>,
    pub cut_cost: f64,
}

impl CutResult {
    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// Energy of `labels` (one entry per grid node) under `graph`.
pub fn energy_of(graph: &GridGraph, labels: &[u8]) -> f64 {
    let mut e = 0.0;
    for i in 0..labels.len() {
        if !graph.active[i] {
            continue;
        }
        e += if labels[i] == 0 {
            graph.sink_cap[i]
        } else {
            graph.source_cap[i]
        };
        if graph.has_right(i) && labels[i] != labels[i + 1] {
            e += graph.right_cap[i];
        }
        if graph.has_down(i) && labels[i] != labels[i + graph.width] {
            e += graph.down_cap[i];
        }
    }
    e
}

pub fn solve_mincut(graph: &GridGraph) -> Result<CutResult> {
    graph.validate()?;
    let mut solver = BkSolver::new(graph);
    solver.maxflow();

    let constant: f64 = (0..graph.active.len())
        .filter(|&i| graph.active[i])
        .map(|i| graph.source_cap[i].min(graph.sink_cap[i]))
        .sum();
    let labels = (0..graph.active.len())
        .map(|i| u8::from(graph.active[i] && solver.tree[i] != Tree::Source))
        .collect();
    Ok(CutResult {
        width: graph.width,
        labels,
        cut_cost: solver.flow + constant,
    })
}

// Arc directions out of a node.
const RIGHT: u8 = 0;
const LEFT: u8 = 1;
const DOWN: u8 = 2;
const UP: u8 = 3;
const TERMINAL: u8 = 4;
const ORPHAN: u8 = 5;
const NONE: u32 = u32::MAX;

#[inline]
fn opposite(d: u8) -> u8 {
    d ^ 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tree {
    Free,
    Source,
    Sink,
}

struct BkSolver {
    nbr: Vec<u32>,
    res: Vec<f64>,
    /// Positive: residual from the source. Negative: residual to the sink.
    term: Vec<f64>,
    tree: Vec<Tree>,
    parent: Vec<u8>,
    stamp: Vec<u64>,
    dist: Vec<u32>,
    queued: Vec<bool>,
    active: VecDeque<usize>,
    orphans: VecDeque<usize>,
    time: u64,
    flow: f64,
}

impl BkSolver {
    fn new(g: &GridGraph) -> Self {
        let n = g.active.len();
        let mut nbr = vec![NONE; 4 * n];
        let mut res = vec![0.0; 4 * n];
        for i in 0..n {
            if g.has_right(i) {
                let j = i + 1;
                nbr[4 * i + RIGHT as usize] = j as u32;
                nbr[4 * j + LEFT as usize] = i as u32;
                res[4 * i + RIGHT as usize] = g.right_cap[i];
                res[4 * j + LEFT as usize] = g.right_cap[i];
            }
            if g.has_down(i) {
                let j = i + g.width;
                nbr[4 * i + DOWN as usize] = j as u32;
                nbr[4 * j + UP as usize] = i as u32;
                res[4 * i + DOWN as usize] = g.down_cap[i];
                res[4 * j + UP as usize] = g.down_cap[i];
            }
        }

        let mut s = Self {
            nbr,
            res,
            term: vec![0.0; n],
            tree: vec![Tree::Free; n],
            parent: vec![ORPHAN; n],
            stamp: vec![0; n],
            dist: vec![0; n],
            queued: vec![false; n],
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            time: 0,
            flow: 0.0,
        };
        for i in 0..n {
            if !g.active[i] {
                continue;
            }
            let t = g.source_cap[i] - g.sink_cap[i];
            s.term[i] = t;
            if t != 0.0 {
                s.tree[i] = if t > 0.0 { Tree::Source } else { Tree::Sink };
                s.parent[i] = TERMINAL;
                s.dist[i] = 1;
                s.push_active(i);
            }
        }
        s
    }

    #[inline]
    fn neighbor(&self, i: usize, d: u8) -> Option<usize> {
        match self.nbr[4 * i + d as usize] {
            NONE => None,
            j => Some(j as usize),
        }
    }

    #[inline]
    fn push_active(&mut self, i: usize) {
        if !self.queued[i] {
            self.queued[i] = true;
            self.active.push_back(i);
        }
    }

    fn maxflow(&mut self) {
        loop {
            let p = loop {
                match self.active.front() {
                    None => return,
                    Some(&p) if self.tree[p] == Tree::Free => {
                        self.active.pop_front();
                        self.queued[p] = false;
                    }
                    Some(&p) => break p,
                }
            };
            match self.grow(p) {
                Some((s, d)) => {
                    self.time += 1;
                    self.augment(s, d);
                    self.adopt();
                }
                None => {
                    self.active.pop_front();
                    self.queued[p] = false;
                }
            }
        }
    }

    /// Extends the tree of `p` by one layer. Returns the bridging arc
    /// (source-tree node, direction) once the trees touch.
    fn grow(&mut self, p: usize) -> Option<(usize, u8)> {
        let tp = self.tree[p];
        for d in 0..4u8 {
            let Some(q) = self.neighbor(p, d) else { continue };
            let cap = if tp == Tree::Source {
                self.res[4 * p + d as usize]
            } else {
                self.res[4 * q + opposite(d) as usize]
            };
            if cap <= 0.0 {
                continue;
            }
            match self.tree[q] {
                Tree::Free => {
                    self.tree[q] = tp;
                    self.parent[q] = opposite(d);
                    self.stamp[q] = self.stamp[p];
                    self.dist[q] = self.dist[p] + 1;
                    self.push_active(q);
                }
                t if t == tp => {}
                _ => {
                    return Some(if tp == Tree::Source {
                        (p, d)
                    } else {
                        (q, opposite(d))
                    })
                }
            }
        }
        None
    }

    fn augment(&mut self, s: usize, d: u8) {
        let t = self.neighbor(s, d).expect("bridge arc has a head");

        let mut f = self.res[4 * s + d as usize];
        let mut i = s;
        while self.parent[i] != TERMINAL {
            let pd = self.parent[i];
            let j = self.neighbor(i, pd).unwrap();
            f = f.min(self.res[4 * j + opposite(pd) as usize]);
            i = j;
        }
        f = f.min(self.term[i]);
        let mut i = t;
        while self.parent[i] != TERMINAL {
            let pd = self.parent[i];
            f = f.min(self.res[4 * i + pd as usize]);
            i = self.neighbor(i, pd).unwrap();
        }
        f = f.min(-self.term[i]);

        self.res[4 * s + d as usize] -= f;
        self.res[4 * t + opposite(d) as usize] += f;

        let mut i = s;
        while self.parent[i] != TERMINAL {
            let pd = self.parent[i];
            let j = self.neighbor(i, pd).unwrap();
            self.res[4 * i + pd as usize] += f;
            let back = 4 * j + opposite(pd) as usize;
            self.res[back] -= f;
            if self.res[back] <= 0.0 {
                self.res[back] = 0.0;
                self.make_orphan(i);
            }
            i = j;
        }
        self.term[i] -= f;
        if self.term[i] <= 0.0 {
            self.term[i] = 0.0;
            self.make_orphan(i);
        }

        let mut i = t;
        while self.parent[i] != TERMINAL {
            let pd = self.parent[i];
            let j = self.neighbor(i, pd).unwrap();
            self.res[4 * j + opposite(pd) as usize] += f;
            let fwd = 4 * i + pd as usize;
            self.res[fwd] -= f;
            if self.res[fwd] <= 0.0 {
                self.res[fwd] = 0.0;
                self.make_orphan(i);
            }
            i = j;
        }
        self.term[i] += f;
        if self.term[i] >= 0.0 {
            self.term[i] = 0.0;
            self.make_orphan(i);
        }

        self.flow += f;
    }

    #[inline]
    fn make_orphan(&mut self, i: usize) {
        self.parent[i] = ORPHAN;
        self.orphans.push_back(i);
    }

    /// Residual capacity of the arc joining `i` to neighbor `j` (reached by
    /// direction `d` from `i`) in the orientation valid for tree `t`.
    #[inline]
    fn tree_cap(&self, t: Tree, i: usize, j: usize, d: u8) -> f64 {
        if t == Tree::Source {
            self.res[4 * j + opposite(d) as usize]
        } else {
            self.res[4 * i + d as usize]
        }
    }

    fn adopt(&mut self) {
        while let Some(i) = self.orphans.pop_front() {
            let t = self.tree[i];
            let mut best: Option<u8> = None;
            let mut best_dist = u32::MAX;

            for d in 0..4u8 {
                let Some(j) = self.neighbor(i, d) else { continue };
                if self.tree[j] != t || self.parent[j] == ORPHAN {
                    continue;
                }
                if self.tree_cap(t, i, j, d) <= 0.0 {
                    continue;
                }
                // Trace j back to its terminal, reusing stamps from this round.
                let mut k = j;
                let mut depth = 0u32;
                let rooted = loop {
                    if self.stamp[k] == self.time {
                        depth += self.dist[k];
                        break true;
                    }
                    depth += 1;
                    match self.parent[k] {
                        TERMINAL => {
                            self.stamp[k] = self.time;
                            self.dist[k] = 1;
                            break true;
                        }
                        ORPHAN => break false,
                        pd => k = self.neighbor(k, pd).unwrap(),
                    }
                };
                if !rooted {
                    continue;
                }
                if depth < best_dist {
                    best = Some(d);
                    best_dist = depth;
                }
                let mut k = j;
                let mut dd = depth;
                while self.stamp[k] != self.time {
                    self.stamp[k] = self.time;
                    self.dist[k] = dd;
                    dd -= 1;
                    let pd = self.parent[k];
                    k = self.neighbor(k, pd).unwrap();
                }
            }

            if let Some(d) = best {
                self.parent[i] = d;
                self.stamp[i] = self.time;
                self.dist[i] = best_dist + 1;
                continue;
            }

            for d in 0..4u8 {
                let Some(j) = self.neighbor(i, d) else { continue };
                if self.tree[j] != t {
                    continue;
                }
                if self.tree_cap(t, i, j, d) > 0.0 {
                    self.push_active(j);
                }
                let pd = self.parent[j];
                if pd != TERMINAL && pd != ORPHAN && self.neighbor(j, pd) == Some(i) {
                    self.make_orphan(j);
                }
            }
            self.tree[i] = Tree::Free;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent brute force over all labelings of the active nodes.
    fn brute_force(g: &GridGraph) -> f64 {
        let active: Vec<usize> = (0..g.active.len()).filter(|&i| g.active[i]).collect();
        let mut labels = vec![0u8; g.active.len()];
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << active.len()) {
            for (b, &i) in active.iter().enumerate() {
                labels[i] = ((mask >> b) & 1) as u8;
            }
            best = best.min(naive_energy(g, &labels));
        }
        best
    }

    /// Second summation of the energy, written edge-list first.
    fn naive_energy(g: &GridGraph, labels: &[u8]) -> f64 {
        let (w, h) = (g.width, g.height);
        let mut edges = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    edges.push((y * w + x, y * w + x + 1, g.right_cap[y * w + x]));
                }
                if y + 1 < h {
                    edges.push((y * w + x, (y + 1) * w + x, g.down_cap[y * w + x]));
                }
            }
        }
        let pair: f64 = edges
            .iter()
            .filter(|&&(a, b, _)| g.active[a] && g.active[b] && labels[a] != labels[b])
            .map(|&(_, _, c)| c)
            .sum();
        let unary: f64 = (0..labels.len())
            .filter(|&i| g.active[i])
            .map(|i| [g.sink_cap[i], g.source_cap[i]][labels[i] as usize])
            .sum();
        unary + pair
    }

    fn random_graph(rng: &mut ChaCha8Rng, w: usize, h: usize, p_inactive: f64) -> GridGraph {
        let mut g = GridGraph::new(w, h);
        for y in 0..h {
            for x in 0..w {
                g.set_data(x, y, rng.gen_range(0..10) as f64, rng.gen_range(0..10) as f64);
                g.set_right(x, y, rng.gen_range(0..10) as f64);
                g.set_down(x, y, rng.gen_range(0..10) as f64);
                g.set_active(x, y, !rng.gen_bool(p_inactive));
            }
        }
        if g.active_count() == 0 {
            g.set_active(0, 0, true);
        }
        g
    }

    #[test]
    fn single_node() {
        let mut g = GridGraph::new(1, 1);
        g.set_data(0, 0, 3.0, 5.0);
        let r = solve_mincut(&g).unwrap();
        assert_eq!(r.cut_cost, 3.0);
        assert_eq!(r.labels, vec![0]);
    }

    #[test]
    fn forced_pair_cuts_the_edge() {
        let mut g = GridGraph::new(2, 1);
        g.force_label(0, 0, 0);
        g.force_label(1, 0, 1);
        g.set_right(0, 0, 7.0);
        let r = solve_mincut(&g).unwrap();
        assert_eq!(r.labels, vec![0, 1]);
        assert_eq!(r.cut_cost, 7.0);
        assert_eq!(g.forced_label(0, 0), Some(0));
        assert_eq!(g.forced_label(1, 0), Some(1));
    }

    #[test]
    fn conflict_is_reported() {
        let mut g = GridGraph::new(2, 1);
        g.force_label(1, 0, 0);
        g.force_label(1, 0, 1);
        assert!(matches!(
            solve_mincut(&g),
            Err(Error::ConstraintConflict { x: 1, y: 0 })
        ));
    }

    #[test]
    fn empty_graph_rejected() {
        let mut g = GridGraph::new(1, 1);
        g.set_active(0, 0, false);
        assert!(matches!(solve_mincut(&g), Err(Error::NoActiveNodes)));
    }

    #[test]
    fn energy_of_simple_cases() {
        let mut g = GridGraph::new(2, 1);
        g.set_data(0, 0, 1.5, 4.0);
        g.set_data(1, 0, 2.5, 8.0);
        g.set_right(0, 0, 3.0);
        assert_eq!(energy_of(&g, &[0, 0]), 4.0);
        assert_eq!(energy_of(&g, &[0, 1]), 1.5 + 8.0 + 3.0);
    }

    #[test]
    fn matches_brute_force_on_3x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let g = random_graph(&mut rng, 3, 4, 0.0);
            let r = solve_mincut(&g).unwrap();
            assert_eq!(r.cut_cost, brute_force(&g));
            assert_eq!(energy_of(&g, &r.labels), r.cut_cost);
        }
    }

    #[test]
    fn energy_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g = random_graph(&mut rng, 4, 3, 0.3);
            let labels: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2)).collect();
            assert_eq!(energy_of(&g, &labels), naive_energy(&g, &labels));
        }
    }

    #[test]
    fn hard_labels_survive_on_larger_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = random_graph(&mut rng, 30, 20, 0.05);
        for y in 0..20 {
            g.set_active(0, y, true);
            g.set_active(29, y, true);
            g.force_label(0, y, 0);
            g.force_label(29, y, 1);
        }
        let r = solve_mincut(&g).unwrap();
        for y in 0..20 {
            assert_eq!(r.label(0, y), 0);
            assert_eq!(r.label(29, y), 1);
        }
        let e = energy_of(&g, &r.labels);
        assert!((e - r.cut_cost).abs() <= 1e-9 * e.max(1.0));
        assert!(r.cut_cost < HARD);
    }

    proptest! {
        #[test]
        fn optimal_on_small_grids(seed in 0u64..10_000, w in 1usize..5, h in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, w, h, 0.2);
            let r = solve_mincut(&g).unwrap();
            prop_assert_eq!(r.cut_cost, brute_force(&g));
            prop_assert_eq!(energy_of(&g, &r.labels), r.cut_cost);
        }

        #[test]
        fn raising_a_capacity_never_lowers_the_optimum(
            seed in 0u64..10_000, which in 0usize..4, node in 0usize..12, bump in 1u32..20
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 4, 3, 0.0);
            let before = solve_mincut(&g).unwrap().cut_cost;
            let mut g2 = g.clone();
            let caps = [&mut g2.source_cap, &mut g2.sink_cap, &mut g2.right_cap, &mut g2.down_cap];
            let b = f64::from(bump);
            match which {
                0 => caps[0][node] += b,
                1 => caps[1][node] += b,
                2 => caps[2][node] += b,
                _ => caps[3][node] += b,
            }
            prop_assert!(solve_mincut(&g2).unwrap().cut_cost >= before);
        }

        #[test]
        fn forced_labels_appear_verbatim(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = random_graph(&mut rng, 4, 3, 0.0);
            let forced: Vec<(usize, usize, u8)> = (0..4)
                .map(|_| (rng.gen_range(0..4), rng.gen_range(0..3), rng.gen_range(0..2)))
                .collect();
            let mut seen = std::collections::HashMap::new();
            for &(x, y, l) in &forced {
                if *seen.entry((x, y)).or_insert(l) == l {
                    g.force_label(x, y, l);
                }
            }
            let r = solve_mincut(&g).unwrap();
            for ((x, y), l) in seen {
                if g.forced_label(x, y) == Some(l) {
                    prop_assert_eq!(r.label(x, y), l);
                }
            }
        }
    }
}
