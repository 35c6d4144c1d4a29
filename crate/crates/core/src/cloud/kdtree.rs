//! Exact k-nearest-neighbour and radius search in 3D.
//!
//! Ordering is total: neighbours compare by squared distance, then by index,
//! so results are deterministic even with duplicate points.

use crate::linalg::{dist2, Vec3};

const LEAF_SIZE: usize = 8;
/// Below this many points queries scan exhaustively.
pub const BRUTE_FORCE_BELOW: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Sorted candidate list of bounded length.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    fn offer(&mut self, d2: f64, idx: usize) {
        if self.items.len() == self.k && !better((d2, idx), self.items[self.k - 1]) {
            return;
        }
        let pos = self
            .items
            .iter()
            .position(|&it| better((d2, idx), it))
            .unwrap_or(self.items.len());
        self.items.insert(pos, (d2, idx));
        self.items.truncate(self.k);
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vec3]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if points.len() >= BRUTE_FORCE_BELOW {
            let n = points.len();
            tree.build_node(0, n);
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = (start + end) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            pts[i][axis].total_cmp(&pts[j][axis])
        });
        let value = pts[self.order[mid]][axis];
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `q`, nearest first. `k` is clamped to the
    /// number of points.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best = Best {
            k,
            items: Vec::with_capacity(k + 1),
        };
        if self.nodes.is_empty() {
            for (i, p) in self.points.iter().enumerate() {
                best.offer(dist2(q, p), i);
            }
        } else {
            self.knn_node(0, q, &mut best);
        }
        best.items
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn knn_node(&self, node: usize, q: &Vec3, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    best.offer(dist2(q, &self.points[i]), i);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, best);
                // `<=` keeps equal-distance candidates with lower indices.
                if diff * diff <= best.worst() {
                    self.knn_node(far, q, best);
                }
            }
        }
    }

    /// All points within `radius` of `q` (inclusive), sorted by index.
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            for (i, p) in self.points.iter().enumerate() {
                if dist2(q, p) <= r2 {
                    out.push(i);
                }
            }
        } else {
            self.within_node(0, q, r2, &mut out);
            out.sort_unstable();
        }
        out
    }

    fn within_node(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if dist2(q, &self.points[i]) <= r2 {
                        out.push(i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.within_node(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.within_node(right, q, r2, out);
                }
            }
        }
    }
}
