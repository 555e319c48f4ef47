//! Nearest-neighbour search over 3D points and the node interpolation table.

/// Distance under which a Gaussian is considered to coincide with a node.
pub const SNAP_DISTANCE: f32 = 1e-8;

const LEAF_SIZE: usize = 8;

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f32,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree. Queries break distance ties by the smaller point index.
pub struct KdTree<'a> {
    points: &'a [[f32; 3]],
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [[f32; 3]]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = (start + end) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
        let value = points[self.order[mid] as usize][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Up to `K` nearest points as `(squared distance, index)`, ascending.
    pub fn nearest<const K: usize>(&self, q: &[f32; 3]) -> ([(f32, u32); K], usize) {
        let mut best = [(f32::INFINITY, u32::MAX); K];
        let mut found = 0;
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best, &mut found);
        }
        (best, found.min(K))
    }

    fn search<const K: usize>(&self, node: usize, q: &[f32; 3], best: &mut [(f32, u32); K], found: &mut usize) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(q, &self.points[i as usize]), i);
                    insert(best, cand);
                    *found += 1;
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best, found);
                // Equal distances must still be visited for the index tie-break.
                if diff * diff <= best[K - 1].0 {
                    self.search(far, q, best, found);
                }
            }
        }
    }
}

fn less(a: (f32, u32), b: (f32, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn insert<const K: usize>(best: &mut [(f32, u32); K], cand: (f32, u32)) {
    if !less(cand, best[K - 1]) {
        return;
    }
    let mut i = K - 1;
    while i > 0 && less(cand, best[i - 1]) {
        best[i] = best[i - 1];
        i -= 1;
    }
    best[i] = cand;
}

/// Three nearest nodes and normalized inverse-distance weights for every
/// Gaussian. A Gaussian within [`SNAP_DISTANCE`] of a node gets weight 1 on
/// it. With fewer than three nodes the missing slots repeat the nearest node
/// with weight 0.
pub fn knn_table(positions: &[[f32; 3]], node_gaussian_index: &[u32]) -> (Vec<[u32; 3]>, Vec<[f32; 3]>) {
    if node_gaussian_index.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let node_pos: Vec<[f32; 3]> = node_gaussian_index.iter().map(|&g| positions[g as usize]).collect();
    let tree = KdTree::new(&node_pos);
    let mut idx = Vec::with_capacity(positions.len());
    let mut wts = Vec::with_capacity(positions.len());
    for p in positions {
        let (best, found) = tree.nearest::<3>(p);
        let mut nodes = [best[0].1; 3];
        for j in 0..found {
            nodes[j] = best[j].1;
        }
        let d0 = best[0].0.sqrt();
        let weights = if d0 <= SNAP_DISTANCE {
            [1.0, 0.0, 0.0]
        } else {
            let mut alpha = [0f64; 3];
            for j in 0..found {
                alpha[j] = 1.0 / (best[j].0 as f64).sqrt();
            }
            let total: f64 = alpha.iter().sum();
            alpha.map(|a| (a / total) as f32)
        };
        idx.push(nodes);
        wts.push(weights);
    }
    (idx, wts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[[f32; 3]], q: &[f32; 3], k: usize) -> Vec<u32> {
        let mut all: Vec<(f32, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(q, p), i as u32))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn kdtree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f32; 3]> = (0..1000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..300 {
            let q = [rng.random(), rng.random(), rng.random()];
            let (best, found) = tree.nearest::<3>(&q);
            assert_eq!(found, 3);
            let got: Vec<u32> = best.iter().map(|b| b.1).collect();
            assert_eq!(got, brute_knn(&pts, &q, 3));
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let tree = KdTree::new(&pts);
        let (best, _) = tree.nearest::<3>(&[0.0, 0.0, 0.0]);
        assert_eq!(best.map(|b| b.1), [0, 1, 2]);
    }

    #[test]
    fn node_snaps_to_itself() {
        let pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.3, 0.3, 0.0]];
        let (idx, w) = knn_table(&pos, &[0, 1, 2]);
        assert_eq!(idx[1][0], 1);
        assert_eq!(w[1], [1.0, 0.0, 0.0]);
        let s: f32 = w[3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fewer_than_three_nodes() {
        let pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.1, 0.0]];
        let (idx, w) = knn_table(&pos, &[0, 1]);
        assert_eq!(idx[2][2], idx[2][0]);
        assert_eq!(w[2][2], 0.0);
        assert!((w[2].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
