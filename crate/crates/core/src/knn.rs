//! Euclidean k-nearest-neighbor search: brute force, or a forest of
//! random-projection trees with exact re-ranking of the candidates.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Backend {
    Exact,
    Forest {
        trees: usize,
        leaf_size: usize,
        /// Minimum number of candidates gathered before re-ranking; `0`
        /// means `trees * leaf_size`.
        search_k: usize,
    },
}

impl Backend {
    pub const fn default_forest() -> Self {
        Backend::Forest {
            trees: 16,
            leaf_size: 32,
            search_k: 0,
        }
    }
}

/// A neighbor: row index and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Orders by distance, then by insertion index.
fn by_distance(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub struct KnnIndex {
    dim: usize,
    rows: Vec<f32>,
    backend: Backend,
    trees: Vec<Tree>,
}

impl KnnIndex {
    /// `rows` is row-major with `dim` columns.
    pub fn build(dim: usize, rows: Vec<f32>, backend: Backend, seed: u64) -> Self {
        assert!(dim > 0 && rows.len() % dim == 0, "row buffer does not match dimension");
        let mut index = Self {
            dim,
            rows,
            backend,
            trees: Vec::new(),
        };
        if let Backend::Forest { trees, leaf_size, .. } = backend {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let all: Vec<usize> = (0..index.len()).collect();
            index.trees = (0..trees)
                .map(|_| {
                    let mut tree = Tree { nodes: Vec::new() };
                    index.grow(&mut tree, all.clone(), leaf_size.max(1), &mut rng);
                    tree
                })
                .collect();
        }
        index
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    fn grow(&self, tree: &mut Tree, items: Vec<usize>, leaf_size: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = tree.nodes.len();
        if items.len() <= leaf_size {
            tree.nodes.push(Node::Leaf(items));
            return id;
        }
        tree.nodes.push(Node::Leaf(Vec::new()));

        // Hyperplane bisecting two random members.
        let a = items[rng.gen_range(0..items.len())];
        let mut b = items[rng.gen_range(0..items.len())];
        for _ in 0..8 {
            if b != a && self.row(a) != self.row(b) {
                break;
            }
            b = items[rng.gen_range(0..items.len())];
        }
        let (ra, rb) = (self.row(a), self.row(b));
        let normal: Vec<f64> = ra.iter().zip(rb).map(|(&x, &y)| f64::from(x) - f64::from(y)).collect();
        let offset = -ra
            .iter()
            .zip(rb)
            .zip(&normal)
            .map(|((&x, &y), n)| n * (f64::from(x) + f64::from(y)) / 2.0)
            .sum::<f64>();
        let (mut left, mut right): (Vec<usize>, Vec<usize>) =
            items.iter().partition(|&&i| margin(&normal, offset, self.row(i)) < 0.0);
        if left.is_empty() || right.is_empty() {
            // Coincident points: split arbitrarily.
            let mut shuffled = items;
            shuffled.shuffle(rng);
            right = shuffled.split_off(shuffled.len() / 2);
            left = shuffled;
            let l = self.grow(tree, left, leaf_size, rng);
            let r = self.grow(tree, right, leaf_size, rng);
            tree.nodes[id] = Node::Split {
                normal: vec![0.0; self.dim],
                offset: 0.0,
                left: l,
                right: r,
            };
            return id;
        }
        let l = self.grow(tree, left, leaf_size, rng);
        let r = self.grow(tree, right, leaf_size, rng);
        tree.nodes[id] = Node::Split {
            normal,
            offset,
            left: l,
            right: r,
        };
        id
    }

    /// The `k` nearest rows, nearest first; equal distances keep row order.
    pub fn knn(&self, query: &[f32], k: usize) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        match self.backend {
            Backend::Exact => self.rerank(query, 0..self.len(), k),
            Backend::Forest {
                trees,
                leaf_size,
                search_k,
            } => {
                let budget = if search_k == 0 { trees * leaf_size } else { search_k }.max(k);
                let candidates = self.forest_candidates(query, budget);
                self.rerank(query, candidates.into_iter(), k)
            }
        }
    }

    fn rerank(&self, query: &[f32], candidates: impl Iterator<Item = usize>, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = candidates
            .map(|index| Neighbor {
                index,
                distance: euclidean(query, self.row(index)),
            })
            .collect();
        all.sort_by(by_distance);
        all.truncate(k);
        all
    }

    /// Best-first descent of all trees at once, ordered by the smallest
    /// margin seen along the path, until `budget` candidates are found.
    fn forest_candidates(&self, query: &[f32], budget: usize) -> Vec<usize> {
        let mut heap = BinaryHeap::new();
        for t in 0..self.trees.len() {
            heap.push(Pending {
                priority: f64::INFINITY,
                tree: t,
                node: 0,
            });
        }
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        while let Some(Pending { priority, tree, node }) = heap.pop() {
            if out.len() >= budget {
                break;
            }
            match &self.trees[tree].nodes[node] {
                Node::Leaf(items) => {
                    for &i in items {
                        if !std::mem::replace(&mut seen[i], true) {
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let m = margin(normal, *offset, query);
                    heap.push(Pending {
                        priority: priority.min(m),
                        tree,
                        node: *right,
                    });
                    heap.push(Pending {
                        priority: priority.min(-m),
                        tree,
                        node: *left,
                    });
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn margin(normal: &[f64], offset: f64, x: &[f32]) -> f64 {
    normal.iter().zip(x).map(|(n, &v)| n * f64::from(v)).sum::<f64>() + offset
}

struct Pending {
    priority: f64,
    tree: usize,
    node: usize,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}
