//! Hierarchical navigable small world graph over an opaque distance.
//!
//! The graph stores ids only. Distances come from a [`Space`] (between two
//! indexed ids) or from a per-query closure, so the same index runs over
//! scale-and-perturb ciphertexts in production and over plaintexts in
//! oracle tests.
//!
//! Layer 0 holds every node; a node drawn at level `L` appears in layers
//! `0..=L`. Out-degree is capped at `2m` on layer 0 and `m` above.
//! Deletion removes the node outright and re-links each of its in-neighbours
//! by searching the remaining graph and reselecting diverse neighbours.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use crate::common::codec::{Decoder, Encoder};
use crate::common::SeededRng;
use crate::dcpe::SapStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HNSW";
pub const FORMAT_VERSION: u8 = 1;
const NO_ENTRY: u32 = u32::MAX;

/// Pairwise distance between indexed ids. Only the ordering matters.
pub trait Space {
    fn distance(&self, a: u32, b: u32) -> f64;
}

impl Space for SapStore {
    #[inline]
    fn distance(&self, a: u32, b: u32) -> f64 {
        self.sq_dist(a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
}

impl HnswParams {
    /// Build setting used for million-scale datasets.
    pub const MILLION_SCALE: HnswParams = HnswParams {
        m: 40,
        ef_construction: 600,
    };

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("m must be at least 2, got {}", self.m)));
        }
        if self.ef_construction < 1 {
            return Err(Error::InvalidParameter("ef_construction must be positive".into()));
        }
        Ok(())
    }
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchParams {
    pub ef_search: usize,
    pub k_prime: usize,
}

impl SearchParams {
    pub fn new(k_prime: usize, ef_search: usize) -> Result<Self> {
        if k_prime < 1 || ef_search < k_prime {
            return Err(Error::InvalidParameter(format!(
                "need ef_search >= k_prime >= 1, got ef_search={ef_search} k_prime={k_prime}"
            )));
        }
        Ok(Self { ef_search, k_prime })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Node {
    /// `links[l]` is the adjacency list on layer `l`.
    links: Vec<Vec<u32>>,
}

impl Node {
    fn level(&self) -> usize {
        self.links.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HnswGraph {
    m: usize,
    ef_construction: usize,
    level_multiplier: f64,
    entry_point: Option<u32>,
    max_level: usize,
    nodes: Vec<Option<Node>>,
    len: usize,
}

#[derive(Clone, Copy, Debug)]
struct Cand {
    dist: f64,
    id: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn start(&mut self, capacity: usize) {
        if self.marks.len() < capacity {
            self.marks.resize(capacity, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Marks `id`; returns false if it was already marked.
    #[inline]
    fn insert(&mut self, id: u32) -> bool {
        let m = &mut self.marks[id as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

thread_local! {
    static VISITED: RefCell<Visited> = const { RefCell::new(Visited { marks: Vec::new(), epoch: 0 }) };
}

impl HnswGraph {
    pub fn new(params: HnswParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            m: params.m,
            ef_construction: params.ef_construction,
            level_multiplier: 1.0 / (params.m as f64).ln(),
            entry_point: None,
            max_level: 0,
            nodes: Vec::new(),
            len: 0,
        })
    }

    /// Inserts ids `0..n` of `space` in order, drawing levels from `seed`.
    pub fn build<S: Space>(space: &S, n: usize, params: HnswParams, seed: u64) -> Result<Self> {
        Self::build_from_ids(space, 0..n as u32, params, seed)
    }

    /// Inserts the given ids of `space` in iteration order.
    pub fn build_from_ids<S: Space>(
        space: &S,
        ids: impl IntoIterator<Item = u32>,
        params: HnswParams,
        seed: u64,
    ) -> Result<Self> {
        let mut g = Self::new(params)?;
        let mut rng = SeededRng::new(seed);
        for id in ids {
            g.insert(id, space, &mut rng)?;
        }
        if g.is_empty() {
            return Err(Error::Empty("cannot build an index over an empty store"));
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ef_construction(&self) -> usize {
        self.ef_construction
    }

    pub fn level_multiplier(&self) -> f64 {
        self.level_multiplier
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry_point
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn contains(&self, id: u32) -> bool {
        matches!(self.nodes.get(id as usize), Some(Some(_)))
    }

    /// Live ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_some())
            .map(|(i, _)| i as u32)
    }

    pub fn level_of(&self, id: u32) -> Option<usize> {
        self.node(id).map(Node::level)
    }

    pub fn neighbors(&self, id: u32, layer: usize) -> &[u32] {
        self.node(id)
            .and_then(|n| n.links.get(layer))
            .map_or(&[], Vec::as_slice)
    }

    /// Ids present on `layer`, ascending.
    pub fn layer_members(&self, layer: usize) -> Vec<u32> {
        self.ids()
            .filter(|&id| self.level_of(id).is_some_and(|l| l >= layer))
            .collect()
    }

    fn node(&self, id: u32) -> Option<&Node> {
        self.nodes.get(id as usize).and_then(Option::as_ref)
    }

    fn links(&self, id: u32, layer: usize) -> &[u32] {
        &self.nodes[id as usize].as_ref().expect("live node").links[layer]
    }

    fn links_mut(&mut self, id: u32, layer: usize) -> &mut Vec<u32> {
        &mut self.nodes[id as usize].as_mut().expect("live node").links[layer]
    }

    fn degree_cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    fn sample_level(&self, rng: &mut SeededRng) -> usize {
        (-rng.open01().ln() * self.level_multiplier).floor() as usize
    }

    fn greedy_closest(&self, dist: &impl Fn(u32) -> f64, mut cur: Cand, layer: usize) -> Cand {
        loop {
            let mut improved = false;
            for &nb in self.links(cur.id, layer) {
                let c = Cand { dist: dist(nb), id: nb };
                if c < cur {
                    cur = c;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search on one layer. Returns at most `ef` candidates, ascending.
    fn search_layer(&self, dist: &impl Fn(u32) -> f64, entries: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        VISITED.with(|v| {
            let mut visited = v.borrow_mut();
            visited.start(self.nodes.len());
            let mut candidates: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
            let mut results: BinaryHeap<Cand> = BinaryHeap::new();
            for &e in entries {
                if visited.insert(e.id) {
                    candidates.push(Reverse(e));
                    results.push(e);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
            while let Some(Reverse(c)) = candidates.pop() {
                if results.len() >= ef && c > *results.peek().expect("non-empty") {
                    break;
                }
                for &nb in self.links(c.id, layer) {
                    if !visited.insert(nb) {
                        continue;
                    }
                    let cand = Cand { dist: dist(nb), id: nb };
                    if results.len() < ef || cand < *results.peek().expect("non-empty") {
                        candidates.push(Reverse(cand));
                        results.push(cand);
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
            results.into_sorted_vec()
        })
    }

    /// Keeps a candidate only if it is closer to the base than to every
    /// neighbour already kept. `sorted` is ascending by distance to the base.
    fn select_diverse<S: Space>(space: &S, sorted: &[Cand], limit: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(limit);
        for c in sorted {
            if kept.len() >= limit {
                break;
            }
            if kept.iter().all(|&r| space.distance(c.id, r) >= c.dist) {
                kept.push(c.id);
            }
        }
        kept
    }

    /// Descends from the entry point to `layer + 1` greedily and returns the
    /// entry candidate for `layer`.
    fn descend(&self, dist: &impl Fn(u32) -> f64, layer: usize) -> Option<Cand> {
        let ep = self.entry_point?;
        let mut cur = Cand { dist: dist(ep), id: ep };
        for l in ((layer + 1)..=self.max_level).rev() {
            cur = self.greedy_closest(dist, cur, l);
        }
        Some(cur)
    }

    /// Adds `id` to the adjacency of each of `targets` on `layer`, pruning any
    /// list that exceeds the degree cap.
    fn add_back_links<S: Space>(&mut self, space: &S, id: u32, targets: &[u32], layer: usize) {
        let cap = self.degree_cap(layer);
        for &nb in targets {
            let list = self.links_mut(nb, layer);
            if list.contains(&id) {
                continue;
            }
            list.push(id);
            if list.len() > cap {
                let mut cands: Vec<Cand> = list
                    .iter()
                    .map(|&x| Cand {
                        dist: space.distance(nb, x),
                        id: x,
                    })
                    .collect();
                cands.sort();
                let pruned = Self::select_diverse(space, &cands, cap);
                *self.links_mut(nb, layer) = pruned;
            }
        }
    }

    /// Inserts `id`, whose vector `space` must already resolve.
    pub fn insert<S: Space>(&mut self, id: u32, space: &S, rng: &mut SeededRng) -> Result<()> {
        if self.contains(id) {
            return Err(Error::DuplicateId(id));
        }
        if id == NO_ENTRY {
            return Err(Error::InvalidParameter("id u32::MAX is reserved".into()));
        }
        let level = self.sample_level(rng);
        if self.nodes.len() <= id as usize {
            self.nodes.resize(id as usize + 1, None);
        }
        self.nodes[id as usize] = Some(Node {
            links: vec![Vec::new(); level + 1],
        });
        self.len += 1;
        let Some(ep) = self.entry_point else {
            self.entry_point = Some(id);
            self.max_level = level;
            return Ok(());
        };

        let dist = |x: u32| space.distance(id, x);
        let mut cur = Cand { dist: dist(ep), id: ep };
        for l in ((level + 1)..=self.max_level).rev() {
            cur = self.greedy_closest(&dist, cur, l);
        }
        let mut entries = vec![cur];
        for l in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&dist, &entries, self.ef_construction, l);
            let chosen = Self::select_diverse(space, &found, self.m);
            *self.links_mut(id, l) = chosen.clone();
            self.add_back_links(space, id, &chosen, l);
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry_point = Some(id);
        }
        Ok(())
    }

    /// Removes `id` and re-links every node that pointed at it.
    pub fn delete<S: Space>(&mut self, id: u32, space: &S) -> Result<()> {
        let removed = self
            .nodes
            .get_mut(id as usize)
            .and_then(Option::take)
            .ok_or(Error::MissingId(id))?;
        self.len -= 1;
        while matches!(self.nodes.last(), Some(None)) {
            self.nodes.pop();
        }
        if self.len == 0 {
            self.entry_point = None;
            self.max_level = 0;
            return Ok(());
        }

        let mut in_neighbors: Vec<Vec<u32>> = vec![Vec::new(); removed.links.len()];
        for (u, node) in self.nodes.iter_mut().enumerate() {
            let Some(node) = node else { continue };
            for (l, list) in node.links.iter_mut().enumerate().take(removed.links.len()) {
                if let Some(pos) = list.iter().position(|&x| x == id) {
                    list.remove(pos);
                    in_neighbors[l].push(u as u32);
                }
            }
        }

        if self.entry_point == Some(id) {
            let (best, level) = self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.as_ref().map(|n| (i as u32, n.level())))
                .fold(
                    (NO_ENTRY, 0),
                    |acc, (i, l)| if acc.0 == NO_ENTRY || l > acc.1 { (i, l) } else { acc },
                );
            self.entry_point = Some(best);
            self.max_level = level;
        }

        for (l, users) in in_neighbors.iter().enumerate() {
            for &u in users {
                self.relink(u, l, &removed.links[l], space);
            }
        }
        Ok(())
    }

    /// Recomputes the adjacency of `u` on `layer` from its surviving
    /// neighbours, the deleted node's neighbours and a fresh beam search.
    fn relink<S: Space>(&mut self, u: u32, layer: usize, orphaned: &[u32], space: &S) {
        let dist = |x: u32| space.distance(u, x);
        let mut pool: Vec<u32> = self.links(u, layer).to_vec();
        pool.extend(orphaned.iter().copied().filter(|&x| self.contains(x)));
        if let Some(start) = self.descend(&dist, layer) {
            let found = self.search_layer(&dist, &[start], self.ef_construction, layer);
            pool.extend(found.iter().map(|c| c.id));
        }
        pool.retain(|&x| x != u);
        pool.sort_unstable();
        pool.dedup();
        let mut cands: Vec<Cand> = pool.into_iter().map(|x| Cand { dist: dist(x), id: x }).collect();
        cands.sort();
        let chosen = Self::select_diverse(space, &cands, self.degree_cap(layer));
        *self.links_mut(u, layer) = chosen.clone();
        self.add_back_links(space, u, &chosen, layer);
    }

    /// Approximate nearest neighbours of the query behind `dist`, ascending
    /// by distance (ties by id), at most `k_prime` of them.
    pub fn search_with_distances(&self, dist: impl Fn(u32) -> f64, params: SearchParams) -> Vec<(u32, f64)> {
        let Some(start) = self.descend(&dist, 0) else {
            return Vec::new();
        };
        let ef = params.ef_search.max(params.k_prime);
        let mut found = self.search_layer(&dist, &[start], ef, 0);
        found.truncate(params.k_prime);
        found.into_iter().map(|c| (c.id, c.dist)).collect()
    }

    pub fn knn_search(&self, dist: impl Fn(u32) -> f64, params: SearchParams) -> Vec<u32> {
        self.search_with_distances(dist, params)
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }

    /// Checks layer nesting, degree caps and referential integrity.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let live = self.nodes.iter().filter(|n| n.is_some()).count();
        if live != self.len {
            return Err(format!("len {} but {} live nodes", self.len, live));
        }
        match self.entry_point {
            None if self.len > 0 => return Err("missing entry point".into()),
            Some(ep) if self.level_of(ep) != Some(self.max_level) => {
                return Err(format!("entry point {ep} is not on the top layer {}", self.max_level))
            }
            _ => {}
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let Some(node) = node else { continue };
            if node.level() > self.max_level {
                return Err(format!("node {id} above max level"));
            }
            for (l, list) in node.links.iter().enumerate() {
                if list.len() > self.degree_cap(l) {
                    return Err(format!("node {id} layer {l} degree {} exceeds cap", list.len()));
                }
                let mut sorted = list.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != list.len() {
                    return Err(format!("node {id} layer {l} has duplicate links"));
                }
                for &nb in list {
                    if nb as usize == id {
                        return Err(format!("node {id} links to itself"));
                    }
                    if !self.level_of(nb).is_some_and(|nl| nl >= l) {
                        return Err(format!("node {id} layer {l} links to {nb}, which is not on that layer"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Layout: magic, version, n, m, ef_construction, max_level, entry point
    /// (`u32::MAX` when empty), then per layer the member count, member ids,
    /// `u64` CSR offsets and `u32` neighbour ids.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = Encoder::new(w);
        enc.bytes(MAGIC)?;
        enc.u8(FORMAT_VERSION)?;
        enc.len32(self.len)?;
        enc.len32(self.m)?;
        enc.len32(self.ef_construction)?;
        enc.len32(self.max_level)?;
        enc.u32(self.entry_point.unwrap_or(NO_ENTRY))?;
        if self.is_empty() {
            return Ok(());
        }
        for l in 0..=self.max_level {
            let members = self.layer_members(l);
            enc.len32(members.len())?;
            for &id in &members {
                enc.u32(id)?;
            }
            let mut offset = 0u64;
            enc.u64(offset)?;
            for &id in &members {
                offset += self.links(id, l).len() as u64;
                enc.u64(offset)?;
            }
            for &id in &members {
                for &nb in self.links(id, l) {
                    enc.u32(nb)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        const WHAT: &str = "HNSW graph";
        let mut dec = Decoder::new(r, WHAT);
        dec.magic(MAGIC)?;
        let version = dec.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let n = dec.u32()? as usize;
        let m = dec.u32()? as usize;
        let ef_construction = dec.u32()? as usize;
        let max_level = dec.u32()? as usize;
        let ep = dec.u32()?;
        let mut g = Self::new(HnswParams { m, ef_construction })?;
        if n == 0 {
            dec.finish()?;
            return if ep == NO_ENTRY {
                Ok(g)
            } else {
                Err(Error::format(WHAT, "entry point in empty graph"))
            };
        }
        for l in 0..=max_level {
            let count = dec.u32()? as usize;
            let ids = (0..count).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
            let offsets = (0..=count).map(|_| dec.u64()).collect::<Result<Vec<_>>>()?;
            if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::format(WHAT, "offsets are not monotone"));
            }
            for (i, &id) in ids.iter().enumerate() {
                let deg = (offsets[i + 1] - offsets[i]) as usize;
                let links = (0..deg).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
                if l == 0 {
                    if id == NO_ENTRY {
                        return Err(Error::format(WHAT, "reserved id"));
                    }
                    if g.nodes.len() <= id as usize {
                        g.nodes.resize(id as usize + 1, None);
                    }
                    if g.nodes[id as usize].is_some() {
                        return Err(Error::format(WHAT, format!("duplicate id {id}")));
                    }
                    g.nodes[id as usize] = Some(Node { links: vec![links] });
                } else {
                    let node = g
                        .nodes
                        .get_mut(id as usize)
                        .and_then(Option::as_mut)
                        .filter(|node| node.links.len() == l)
                        .ok_or_else(|| Error::format(WHAT, format!("layer {l} member {id} missing below")))?;
                    node.links.push(links);
                }
            }
        }
        dec.finish()?;
        g.len = g.nodes.iter().filter(|x| x.is_some()).count();
        g.max_level = max_level;
        g.entry_point = Some(ep);
        if g.len != n {
            return Err(Error::format(WHAT, format!("header says {n} nodes, found {}", g.len)));
        }
        g.check_invariants().map_err(|e| Error::format(WHAT, e))?;
        Ok(g)
    }
}
