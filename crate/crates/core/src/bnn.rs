//! Baseline geo-locator: L2-normalized bag-of-words histograms searched with
//! a randomized KD-forest.
//!
//! Each tree splits on a dimension drawn uniformly from the five
//! highest-variance dimensions of the node's points, at their median. A
//! search descends every tree, then keeps popping the closest unexplored
//! branch from one priority queue shared by all trees until `max_checks`
//! leaves have been evaluated. Branches whose cell lies farther than the
//! current k-th best are dropped. A histogram reached again through another
//! tree is not compared twice.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::vocab::VisualVocabulary;

pub const DEFAULT_TREES: usize = 4;
pub const LEAF_SIZE: usize = 8;
pub const SPLIT_CANDIDATES: usize = 5;
pub const DEFAULT_CHECKS: usize = 64;

/// Queued branch: bound, tree, node and slot of its cell offsets.
type Branch = (OrderedFloat<f64>, usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct BowHistogram {
    pub image_id: String,
    pub vector: Vec<f32>,
    /// Set when the image had no features; `vector` is then all zeros.
    pub empty: bool,
}

impl BowHistogram {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Word counts of `features` under single assignment, L2-normalized.
pub fn bow_histogram(features: &FeatureSet, vocab: &VisualVocabulary) -> BowHistogram {
    let mut counts = vec![0f64; vocab.k()];
    for d in features.descriptors() {
        counts[vocab.assign(d) as usize] += 1.0;
    }
    histogram_from_counts(&features.image_id, &counts)
}

pub fn histogram_from_counts(image_id: &str, counts: &[f64]) -> BowHistogram {
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    let empty = norm == 0.0;
    let vector = counts
        .iter()
        .map(|c| if empty { 0.0 } else { (c / norm) as f32 })
        .collect();
    BowHistogram {
        image_id: image_id.to_string(),
        vector,
        empty,
    }
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f32,
        /// Points with `v <= value` go left when set, `v < value` otherwise.
        left_inclusive: bool,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    /// Point ids, grouped by leaf.
    order: Vec<u32>,
}

impl Tree {
    fn goes_left(node_dim_value: f32, value: f32, left_inclusive: bool) -> bool {
        if left_inclusive {
            node_dim_value <= value
        } else {
            node_dim_value < value
        }
    }
}

/// Result of a nearest-neighbour search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub sq_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BnnOutcome {
    Found {
        image_id: String,
        distance: f64,
    },
    /// The query histogram was empty.
    Abstain,
}

#[derive(Debug, Clone)]
pub struct KdForest {
    points: Vec<BowHistogram>,
    trees: Vec<Tree>,
    dim: usize,
}

impl KdForest {
    pub fn build(points: Vec<BowHistogram>, seed: u64) -> Result<Self> {
        Self::build_with_trees(points, DEFAULT_TREES, seed)
    }

    pub fn build_with_trees(points: Vec<BowHistogram>, n_trees: usize, seed: u64) -> Result<Self> {
        let dim = points.first().map_or(0, BowHistogram::dim);
        if let Some(p) = points.iter().find(|p| p.dim() != dim) {
            return Err(Error::Data(format!(
                "histogram {} has dimension {}, expected {dim}",
                p.image_id,
                p.dim()
            )));
        }
        if n_trees == 0 {
            return Err(Error::Config("a forest needs at least one tree".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..n_trees).map(|_| build_tree(&points, dim, &mut rng)).collect();
        Ok(KdForest { points, trees, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[BowHistogram] {
        &self.points
    }

    /// Approximate `k` nearest neighbours after at most `max_checks` leaf
    /// evaluations, closest first (ties by index).
    pub fn knn(&self, query: &[f32], k: usize, max_checks: usize) -> Result<Vec<Neighbor>> {
        if self.points.is_empty() {
            return Err(Error::Data("search in an empty forest".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Config(format!(
                "query dimension {} does not match forest dimension {}",
                query.len(),
                self.dim
            )));
        }
        let k = k.max(1);
        let max_checks = max_checks.max(1);
        let mut visited = vec![false; self.points.len()];
        let mut leaves = 0usize;
        let mut seen = 0usize;
        // max-heap of the best k so far
        let mut best: BinaryHeap<(OrderedFloat<f64>, usize)> = BinaryHeap::new();
        // Each queued branch carries the per-dimension distances from the
        // query to its cell, so its bound is the exact squared distance to
        // the cell rather than a sum that can count a dimension twice.
        let mut cells: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut queue: BinaryHeap<Reverse<Branch>> = BinaryHeap::new();
        for t in 0..self.trees.len() {
            cells.push(Vec::new());
            queue.push(Reverse((OrderedFloat(0.0), t, 0, t)));
        }
        let worst = |best: &BinaryHeap<(OrderedFloat<f64>, usize)>| {
            if best.len() < k {
                f64::INFINITY
            } else {
                best.peek().map_or(f64::INFINITY, |b| b.0 .0)
            }
        };
        'search: while let Some(Reverse((bound, t, start, slot))) = queue.pop() {
            // the queue is ordered, so nothing left can improve the result
            if bound.0 > worst(&best) {
                break;
            }
            let offsets = std::mem::take(&mut cells[slot]);
            let bound = bound.0;
            let tree = &self.trees[t];
            let mut node = start;
            loop {
                match tree.nodes[node] {
                    Node::Split {
                        dim,
                        value,
                        left_inclusive,
                        left,
                        right,
                    } => {
                        let q = query[dim];
                        let (near, far) = if Tree::goes_left(q, value, left_inclusive) {
                            (left, right)
                        } else {
                            (right, left)
                        };
                        let diff = (q - value).abs() as f64;
                        let pos = offsets.iter().position(|o| o.0 == dim);
                        let old = pos.map_or(0.0, |i| offsets[i].1);
                        let off = old.max(diff);
                        let far_bound = bound - old * old + off * off;
                        if far_bound <= worst(&best) {
                            let mut far_offsets = offsets.clone();
                            match pos {
                                Some(i) => far_offsets[i].1 = off,
                                None => far_offsets.push((dim, off)),
                            }
                            cells.push(far_offsets);
                            queue.push(Reverse((OrderedFloat(far_bound), t, far, cells.len() - 1)));
                        }
                        node = near;
                    }
                    Node::Leaf { start, end } => {
                        for &id in &tree.order[start..end] {
                            let id = id as usize;
                            if visited[id] {
                                continue;
                            }
                            visited[id] = true;
                            seen += 1;
                            let d = sq_dist(query, &self.points[id].vector);
                            best.push((OrderedFloat(d), id));
                            if best.len() > k {
                                best.pop();
                            }
                        }
                        leaves += 1;
                        if leaves >= max_checks || seen == self.points.len() {
                            break 'search;
                        }
                        break;
                    }
                }
            }
        }
        let mut out: Vec<Neighbor> = best
            .into_iter()
            .map(|(d, index)| Neighbor { index, sq_dist: d.0 })
            .collect();
        out.sort_by(|a, b| a.sq_dist.total_cmp(&b.sq_dist).then(a.index.cmp(&b.index)));
        Ok(out)
    }

    /// Top-one neighbour of a query histogram.
    pub fn search(&self, query: &BowHistogram, max_checks: usize) -> Result<BnnOutcome> {
        if query.empty {
            if self.points.is_empty() {
                return Err(Error::Data("search in an empty forest".into()));
            }
            return Ok(BnnOutcome::Abstain);
        }
        let nn = self.knn(&query.vector, 1, max_checks)?;
        let best = nn[0];
        Ok(BnnOutcome::Found {
            image_id: self.points[best.index].image_id.clone(),
            distance: best.sq_dist.sqrt(),
        })
    }
}

/// Top-one search; see [`KdForest::search`].
pub fn bnn_search(forest: &KdForest, query: &BowHistogram, max_checks: usize) -> Result<BnnOutcome> {
    forest.search(query, max_checks)
}

fn build_tree(points: &[BowHistogram], dim: usize, rng: &mut ChaCha8Rng) -> Tree {
    let mut order: Vec<u32> = (0..points.len() as u32).collect();
    let mut nodes = Vec::new();
    if points.is_empty() {
        nodes.push(Node::Leaf { start: 0, end: 0 });
        return Tree { nodes, order };
    }
    build_node(points, dim, &mut order, 0, points.len(), &mut nodes, rng);
    Tree { nodes, order }
}

fn build_node(
    points: &[BowHistogram],
    dim: usize,
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let id = nodes.len();
    nodes.push(Node::Leaf { start, end });
    if end - start <= LEAF_SIZE {
        return id;
    }
    let slice = &order[start..end];
    let n = slice.len() as f64;
    let mut mean = vec![0f64; dim];
    for &p in slice {
        for (m, v) in mean.iter_mut().zip(&points[p as usize].vector) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; dim];
    for &p in slice {
        for ((s, v), m) in var.iter_mut().zip(&points[p as usize].vector).zip(&mean) {
            let d = *v as f64 - m;
            *s += d * d;
        }
    }
    let mut dims: Vec<usize> = (0..dim).filter(|&d| var[d] > 0.0).collect();
    if dims.is_empty() {
        // identical points
        return id;
    }
    dims.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    dims.truncate(SPLIT_CANDIDATES);
    let first = rng.random_range(0..dims.len());
    // try the drawn dimension first, then the remaining candidates
    for attempt in 0..dims.len() {
        let d = dims[(first + attempt) % dims.len()];
        let mut values: Vec<f32> = order[start..end]
            .iter()
            .map(|&p| points[p as usize].vector[d])
            .collect();
        let mid = values.len() / 2;
        let (_, median, _) = values.select_nth_unstable_by(mid, f32::total_cmp);
        let median = *median;
        let count_lt = values.iter().filter(|v| **v < median).count();
        let count_le = values.iter().filter(|v| **v <= median).count();
        let left_inclusive = if count_lt > 0 {
            false
        } else if count_le < values.len() {
            true
        } else {
            continue;
        };
        let seg = &mut order[start..end];
        // stable partition keeps construction deterministic
        let (mut l, mut r): (Vec<u32>, Vec<u32>) = seg
            .iter()
            .partition(|&&p| Tree::goes_left(points[p as usize].vector[d], median, left_inclusive));
        let split = start + l.len();
        l.append(&mut r);
        seg.copy_from_slice(&l);
        let left = build_node(points, dim, order, start, split, nodes, rng);
        let right = build_node(points, dim, order, split, end, nodes, rng);
        nodes[id] = Node::Split {
            dim: d,
            value: median,
            left_inclusive,
            left,
            right,
        };
        return id;
    }
    id
}
