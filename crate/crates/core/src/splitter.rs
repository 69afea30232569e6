//! Leak-free train/test partitioning.
//!
//! Items are nodes of a co-occurrence graph weighted by the number of
//! outfits each pair shares. Louvain communities of that graph are packed
//! into a train and a test side, and an outfit is kept only when all of its
//! items landed on the same side.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Item, Outfit, OutfitSet};
use crate::error::{Error, Result};

/// Undirected weighted graph without self-loops.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoOccurrenceGraph {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    /// Keyed by `(u, v)` with `u < v`.
    edges: BTreeMap<(usize, usize), u64>,
}

impl CoOccurrenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn add_edge(&mut self, a: &str, b: &str, weight: u64) {
        let (u, v) = (self.add_node(a), self.add_node(b));
        if u == v || weight == 0 {
            return;
        }
        *self.edges.entry((u.min(v), u.max(v))).or_insert(0) += weight;
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn weight(&self, a: &str, b: &str) -> Option<u64> {
        let (u, v) = (self.index_of(a)?, self.index_of(b)?);
        self.edges.get(&(u.min(v), u.max(v))).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.edges.iter().map(|(&(u, v), &w)| (u, v, w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Total edge weight m.
    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    fn degrees(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.nodes.len()];
        for (u, v, w) in self.edges() {
            deg[u] += w as f64;
            deg[v] += w as f64;
        }
        deg
    }
}

/// Each outfit of size N adds 1 to all N(N-1)/2 of its item pairs.
pub fn build_graph(outfits: &[Outfit]) -> CoOccurrenceGraph {
    let mut graph = CoOccurrenceGraph::new();
    for outfit in outfits {
        let ids: Vec<&str> = outfit.item_ids().collect();
        for id in &ids {
            graph.add_node(id);
        }
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                graph.add_edge(ids[i], ids[j], 1);
            }
        }
    }
    graph
}

/// Weighted Newman modularity `sum_c [in_c / 2m - (tot_c / 2m)^2]`, where
/// `in_c` is twice the intra-community weight and `tot_c` the degree sum.
pub fn modularity(graph: &CoOccurrenceGraph, partition: &[usize]) -> Result<f64> {
    if partition.len() != graph.node_count() {
        return Err(Error::Shape(format!(
            "partition covers {} of {} nodes",
            partition.len(),
            graph.node_count()
        )));
    }
    let m = graph.total_weight() as f64;
    if m == 0.0 {
        return Ok(0.0);
    }
    let k = partition.iter().max().map_or(0, |c| c + 1);
    let mut inside = vec![0.0; k];
    let mut total = vec![0.0; k];
    for (u, v, w) in graph.edges() {
        let w = w as f64;
        if partition[u] == partition[v] {
            inside[partition[u]] += 2.0 * w;
        }
        total[partition[u]] += w;
        total[partition[v]] += w;
    }
    Ok(inside
        .iter()
        .zip(&total)
        .map(|(i, t)| i / (2.0 * m) - (t / (2.0 * m)).powi(2))
        .sum())
}

/// Modularity of a partition given as id -> community.
pub fn modularity_of(graph: &CoOccurrenceGraph, communities: &HashMap<String, usize>) -> Result<f64> {
    let partition = graph
        .nodes()
        .iter()
        .map(|id| {
            communities
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownItem(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    modularity(graph, &partition)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LouvainResult {
    /// Community per node index, numbered densely by first appearance.
    pub partition: Vec<usize>,
    pub modularity: f64,
    /// Modularity after each local-moving phase (the first entry is the
    /// all-singletons partition).
    pub phase_modularity: Vec<f64>,
}

impl LouvainResult {
    pub fn community_count(&self) -> usize {
        self.partition.iter().max().map_or(0, |c| c + 1)
    }

    pub fn by_id(&self, graph: &CoOccurrenceGraph) -> HashMap<String, usize> {
        graph
            .nodes()
            .iter()
            .cloned()
            .zip(self.partition.iter().copied())
            .collect()
    }

    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.community_count()];
        for (node, &c) in self.partition.iter().enumerate() {
            out[c].push(node);
        }
        out
    }
}

/// Aggregated graph used between Louvain levels.
struct WorkGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
}

impl WorkGraph {
    fn from_graph(graph: &CoOccurrenceGraph) -> Self {
        let n = graph.node_count();
        let mut adj = vec![Vec::new(); n];
        for (u, v, w) in graph.edges() {
            adj[u].push((v, w as f64));
            adj[v].push((u, w as f64));
        }
        WorkGraph {
            adj,
            self_loops: vec![0.0; n],
            degree: graph.degrees(),
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    /// One local-moving phase. Returns the community of each node and
    /// whether any node moved.
    fn local_moves(&self, two_m: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let n = self.len();
        let mut community: Vec<usize> = (0..n).collect();
        let mut tot: Vec<f64> = self.degree.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut links = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut any_move = false;
        loop {
            let mut moved = false;
            for &node in &order {
                let own = community[node];
                let k = self.degree[node];
                for &(nb, w) in &self.adj[node] {
                    let c = community[nb];
                    if links[c] == 0.0 {
                        touched.push(c);
                    }
                    links[c] += w;
                }
                tot[own] -= k;
                let gain = |c: usize, links: &[f64]| links[c] - tot[c] * k / two_m;
                let own_gain = gain(own, &links);
                let mut best = own;
                let mut best_gain = own_gain;
                touched.sort_unstable();
                for &c in &touched {
                    let g = gain(c, &links);
                    if g > best_gain + 1e-12 || (g >= best_gain - 1e-12 && c < best && best != own) {
                        best = c;
                        best_gain = g;
                    }
                }
                if best_gain <= own_gain + 1e-12 {
                    best = own;
                }
                tot[best] += k;
                if best != own {
                    community[node] = best;
                    moved = true;
                    any_move = true;
                }
                for &c in &touched {
                    links[c] = 0.0;
                }
                touched.clear();
            }
            if !moved {
                break;
            }
        }
        (renumber(&community), any_move)
    }

    fn aggregate(&self, community: &[usize]) -> WorkGraph {
        let k = community.iter().max().map_or(0, |c| c + 1);
        let mut self_loops = vec![0.0; k];
        let mut degree = vec![0.0; k];
        let mut between: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for u in 0..self.len() {
            let cu = community[u];
            self_loops[cu] += self.self_loops[u];
            degree[cu] += self.degree[u];
            for &(v, w) in &self.adj[u] {
                let cv = community[v];
                if u < v {
                    if cu == cv {
                        self_loops[cu] += w;
                    } else {
                        *between.entry((cu.min(cv), cu.max(cv))).or_insert(0.0) += w;
                    }
                }
            }
        }
        let mut adj = vec![Vec::new(); k];
        for ((a, b), w) in between {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        WorkGraph {
            adj,
            self_loops,
            degree,
        }
    }
}

fn renumber(community: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    community
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Two-phase Louvain (local moves then aggregation) at resolution 1.
pub fn louvain_partition(graph: &CoOccurrenceGraph, seed: u64) -> Result<LouvainResult> {
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::Empty("co-occurrence graph"));
    }
    let singletons: Vec<usize> = (0..n).collect();
    let mut phase_modularity = vec![modularity(graph, &singletons)?];
    let two_m = 2.0 * graph.total_weight() as f64;
    if two_m == 0.0 {
        return Ok(LouvainResult {
            modularity: phase_modularity[0],
            partition: singletons,
            phase_modularity,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = WorkGraph::from_graph(graph);
    let mut membership = singletons;
    loop {
        let (community, moved) = work.local_moves(two_m, &mut rng);
        if !moved {
            break;
        }
        for c in membership.iter_mut() {
            *c = community[*c];
        }
        membership = renumber(&membership);
        phase_modularity.push(modularity(graph, &membership)?);
        work = work.aggregate(&community);
    }
    Ok(LouvainResult {
        modularity: *phase_modularity.last().expect("non-empty"),
        partition: membership,
        phase_modularity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub sides: BTreeMap<String, Side>,
    pub target_ratio: f64,
    /// Fraction of items on the train side.
    pub achieved_ratio: f64,
    pub dropped: usize,
    pub modularity: f64,
}

impl SplitAssignment {
    pub fn side(&self, id: &str) -> Option<Side> {
        self.sides.get(id).copied()
    }

    pub fn items_on(&self, side: Side) -> impl Iterator<Item = &str> {
        self.sides
            .iter()
            .filter(move |(_, s)| **s == side)
            .map(|(id, _)| id.as_str())
    }

    pub fn count(&self, side: Side) -> usize {
        self.items_on(side).count()
    }
}

/// Item attribute used to balance the sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyOn {
    Season,
    ProductType,
    Category,
}

impl StratifyOn {
    fn value<'a>(&self, item: &'a Item) -> &'a str {
        match self {
            StratifyOn::Season => item.season.as_deref().unwrap_or(""),
            StratifyOn::ProductType => &item.product_type,
            StratifyOn::Category => &item.category,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub target_ratio: f64,
    pub stratify_on: Option<StratifyOn>,
    pub stratify_weight: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            target_ratio: 0.76,
            stratify_on: Some(StratifyOn::Season),
            stratify_weight: 0.1,
        }
    }
}

/// Greedily packs communities (largest first) onto the side whose item
/// count is furthest below its target, penalising attribute imbalance.
/// `attributes[i]` is the stratification value of item `i` of a community
/// member list; pass an empty slice to disable stratification.
pub fn assemble_split_by_index(
    communities: &[Vec<usize>],
    attributes: &[&str],
    options: SplitOptions,
) -> Result<Vec<Side>> {
    let non_empty: Vec<&Vec<usize>> = communities.iter().filter(|c| !c.is_empty()).collect();
    if non_empty.len() < 2 {
        return Err(Error::Split(
            "only one community: every item is coupled to every other; reduce data coupling (e.g. split by department or drop hub items)".into(),
        ));
    }
    if !(options.target_ratio > 0.0 && options.target_ratio < 1.0) {
        return Err(Error::Config("split ratio must be in (0, 1)".into()));
    }
    let n_items: usize = non_empty.iter().map(|c| c.len()).sum();
    let total = n_items as f64;
    let targets = [options.target_ratio * total, (1.0 - options.target_ratio) * total];

    let stratify = !attributes.is_empty() && options.stratify_weight > 0.0;
    let mut value_ids: HashMap<&str, usize> = HashMap::new();
    let attr_of: Vec<usize> = attributes
        .iter()
        .map(|a| {
            let next = value_ids.len();
            *value_ids.entry(a).or_insert(next)
        })
        .collect();
    let n_values = value_ids.len();
    // Per side, per attribute value: assigned item counts.
    let mut value_fill = vec![vec![0.0; n_values]; 2];

    let mut order: Vec<usize> = (0..communities.len()).filter(|&c| !communities[c].is_empty()).collect();
    order.sort_by(|&a, &b| communities[b].len().cmp(&communities[a].len()).then(a.cmp(&b)));

    let mut fill = [0.0f64; 2];
    let mut sides = vec![Side::Train; attributes.len().max(communities.iter().flatten().max().map_or(0, |m| m + 1))];
    for c in order {
        let members = &communities[c];
        let size = members.len() as f64;
        let mut counts = vec![0.0; n_values];
        if stratify {
            for &i in members {
                counts[attr_of[i]] += 1.0;
            }
        }
        let score = |side: usize| -> f64 {
            let deficit = (targets[side] - fill[side]) / total;
            if !stratify {
                return deficit;
            }
            // Deviation of each value's train share from the target ratio,
            // normalised by the item total, after the hypothetical move.
            let mut imbalance = 0.0;
            for v in 0..n_values {
                let mut train = value_fill[0][v];
                let mut test = value_fill[1][v];
                if side == 0 {
                    train += counts[v];
                } else {
                    test += counts[v];
                }
                imbalance += (train - options.target_ratio * (train + test)).abs();
            }
            deficit - options.stratify_weight * imbalance / total
        };
        let side = if score(1) > score(0) { 1 } else { 0 };
        fill[side] += size;
        for v in 0..n_values {
            value_fill[side][v] += counts[v];
        }
        for &i in members {
            sides[i] = if side == 0 { Side::Train } else { Side::Test };
        }
    }
    // Greedy packing can leave a side empty when one community exceeds the
    // other side's whole target; the smallest community then moves over.
    if fill[0] == 0.0 || fill[1] == 0.0 {
        let empty = if fill[0] == 0.0 { Side::Train } else { Side::Test };
        let smallest = (0..communities.len())
            .filter(|&c| !communities[c].is_empty())
            .min_by_key(|&c| (communities[c].len(), std::cmp::Reverse(c)))
            .expect("at least two communities");
        for &i in &communities[smallest] {
            sides[i] = empty;
        }
    }
    Ok(sides)
}

/// Splits `items` given their community labels.
pub fn assemble_split(
    communities: &HashMap<String, usize>,
    items: &[&Item],
    options: SplitOptions,
) -> Result<SplitAssignment> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut next_singleton = communities.values().max().map_or(0, |m| m + 1);
    for (i, item) in items.iter().enumerate() {
        let c = match communities.get(&item.id) {
            Some(&c) => c,
            None => {
                // Items without co-occurrences form their own community.
                next_singleton += 1;
                next_singleton - 1
            }
        };
        groups.entry(c).or_default().push(i);
    }
    let communities: Vec<Vec<usize>> = groups.into_values().collect();
    let attributes: Vec<&str> = match options.stratify_on {
        Some(attr) => items.iter().map(|it| attr.value(it)).collect(),
        None => Vec::new(),
    };
    let sides = assemble_split_by_index(&communities, &attributes, options)?;
    let assignment: BTreeMap<String, Side> = items
        .iter()
        .zip(sides)
        .map(|(it, s)| (it.id.clone(), s))
        .collect();
    let train = assignment.values().filter(|s| **s == Side::Train).count();
    Ok(SplitAssignment {
        achieved_ratio: train as f64 / assignment.len() as f64,
        sides: assignment,
        target_ratio: options.target_ratio,
        dropped: 0,
        modularity: f64::NAN,
    })
}

/// Outfits whose items all sit on one side go to that side; the rest are dropped.
pub fn assign_outfits(outfits: &[Outfit], split: &SplitAssignment) -> Result<(OutfitSet, OutfitSet, usize)> {
    let (mut train, mut test, mut dropped) = (Vec::new(), Vec::new(), 0);
    for outfit in outfits {
        let mut sides = outfit.item_ids().map(|id| {
            split
                .side(id)
                .ok_or_else(|| Error::UnknownItem(id.to_string()))
        });
        let first = sides.next().expect("outfits have a hero")?;
        let mut same = true;
        for s in sides {
            same &= s? == first;
        }
        match (same, first) {
            (true, Side::Train) => train.push(outfit.clone()),
            (true, Side::Test) => test.push(outfit.clone()),
            (false, _) => dropped += 1,
        }
    }
    Ok((train, test, dropped))
}

/// Result of the full graph -> Louvain -> assembly -> assignment pipeline.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub assignment: SplitAssignment,
    pub train: OutfitSet,
    pub test: OutfitSet,
    pub louvain: LouvainResult,
}

impl DatasetSplit {
    /// Items appearing on both sides; empty by construction.
    pub fn leaked_items(&self) -> Vec<String> {
        let train: std::collections::HashSet<&str> = self.train.iter().flat_map(|o| o.item_ids()).collect();
        let mut leaked: Vec<String> = self
            .test
            .iter()
            .flat_map(|o| o.item_ids())
            .filter(|id| train.contains(id))
            .map(str::to_string)
            .collect();
        leaked.sort();
        leaked.dedup();
        leaked
    }

    /// Fraction of kept outfits on the train side.
    pub fn outfit_ratio(&self) -> f64 {
        let kept = self.train.len() + self.test.len();
        if kept == 0 {
            0.0
        } else {
            self.train.len() as f64 / kept as f64
        }
    }
}

pub fn split_dataset(catalog: &Catalog, outfits: &[Outfit], options: SplitOptions, seed: u64) -> Result<DatasetSplit> {
    let mut graph = build_graph(outfits);
    for item in catalog.items() {
        graph.add_node(&item.id);
    }
    let louvain = louvain_partition(&graph, seed)?;
    let items: Vec<&Item> = catalog.items().iter().collect();
    let mut assignment = assemble_split(&louvain.by_id(&graph), &items, options)?;
    let (train, test, dropped) = assign_outfits(outfits, &assignment)?;
    assignment.dropped = dropped;
    assignment.modularity = louvain.modularity;
    Ok(DatasetSplit {
        assignment,
        train,
        test,
        louvain,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    target_ratio: f64,
    achieved_ratio: f64,
    dropped: usize,
    modularity: f64,
    train_items: usize,
    test_items: usize,
}

#[derive(Serialize, Deserialize)]
struct SplitLine {
    id: String,
    side: Side,
}

/// Writes a summary header line followed by one `(id, side)` line per item.
pub fn save_split(split: &SplitAssignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = SplitHeader {
        target_ratio: split.target_ratio,
        achieved_ratio: split.achieved_ratio,
        dropped: split.dropped,
        modularity: split.modularity,
        train_items: split.count(Side::Train),
        test_items: split.count(Side::Test),
    };
    let mut write = |s: String| writeln!(out, "{s}").map_err(|e| Error::io(path, e));
    write(serde_json::to_string(&header).expect("header serialises"))?;
    for (id, side) in &split.sides {
        write(serde_json::to_string(&SplitLine { id: id.clone(), side: *side }).expect("line serialises"))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize| move |e: serde_json::Error| Error::Malformed { line, message: e.to_string() };
    let (_, header) = lines.next().ok_or(Error::Empty("split file"))?;
    let header: SplitHeader = serde_json::from_str(&header.map_err(|e| Error::io(path, e))?).map_err(parse_err(1))?;
    let mut sides = BTreeMap::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SplitLine = serde_json::from_str(&line).map_err(parse_err(i + 1))?;
        sides.insert(rec.id, rec.side);
    }
    Ok(SplitAssignment {
        sides,
        target_ratio: header.target_ratio,
        achieved_ratio: header.achieved_ratio,
        dropped: header.dropped,
        modularity: header.modularity,
    })
}
