//! Exact nearest-neighbour queries over static 3D point sets.

use std::cmp::Ordering;

use nalgebra::Vector3;

use crate::scalar::Real;

const LEAF_SIZE: usize = 12;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node<T> {
    /// Range into the tree-ordered point arrays.
    start: u32,
    end: u32,
    axis: u8,
    split: T,
    left: u32,
    right: u32,
}

/// Bucketed kd-tree. Points are copied in tree order for cache locality;
/// queries are exact and ties are broken by the smaller input index.
#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Vector3<T>>,
    index: Vec<usize>,
    nodes: Vec<Node<T>>,
}

fn closer<T: Real>(a: (T, usize), b: (T, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[Vector3<T>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            Self::build(points, &mut order, 0, &mut nodes);
        }
        Self { points: order.iter().map(|&i| points[i]).collect(), index: order, nodes }
    }

    fn build(points: &[Vector3<T>], order: &mut [usize], offset: usize, nodes: &mut Vec<Node<T>>) -> u32 {
        let id = nodes.len();
        nodes.push(Node { start: offset as u32, end: (offset + order.len()) as u32, axis: 0, split: T::zero(), left: NONE, right: NONE });
        if order.len() <= LEAF_SIZE {
            return id as u32;
        }
        // split along the widest extent
        let mut lo = points[order[0]];
        let mut hi = lo;
        for &i in order.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let split = points[order[mid]][axis];
        let (l, r) = order.split_at_mut(mid);
        let left = Self::build(points, l, offset, nodes);
        let right = Self::build(points, r, offset + mid, nodes);
        let n = &mut nodes[id];
        n.axis = axis as u8;
        n.split = split;
        n.left = left;
        n.right = right;
        id as u32
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point to `query` as `(index, distance)`.
    pub fn nearest(&self, query: &Vector3<T>) -> Option<(usize, T)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (T::lit(f64::INFINITY), usize::MAX);
        self.nearest_rec(0, query, &mut best);
        Some((best.1, best.0.sqrt()))
    }

    fn nearest_rec(&self, node: u32, q: &Vector3<T>, best: &mut (T, usize)) {
        let n = &self.nodes[node as usize];
        if n.left == NONE {
            for k in n.start as usize..n.end as usize {
                let c = ((self.points[k] - q).norm_squared(), self.index[k]);
                if closer(c, *best) {
                    *best = c;
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < T::zero() { (n.left, n.right) } else { (n.right, n.left) };
        self.nearest_rec(near, q, best);
        if diff * diff <= best.0 {
            self.nearest_rec(far, q, best);
        }
    }

    /// The `k` nearest points as `(index, distance)`, closest first.
    pub fn knn(&self, query: &Vector3<T>, k: usize) -> Vec<(usize, T)> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        // sorted ascending by (dist², index)
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut best);
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn knn_rec(&self, node: u32, q: &Vector3<T>, k: usize, best: &mut Vec<(T, usize)>) {
        let n = &self.nodes[node as usize];
        if n.left == NONE {
            for j in n.start as usize..n.end as usize {
                let c = ((self.points[j] - q).norm_squared(), self.index[j]);
                if best.len() == k && !closer(c, best[k - 1]) {
                    continue;
                }
                let pos = best.partition_point(|b| closer(*b, c));
                best.insert(pos, c);
                best.truncate(k);
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < T::zero() { (n.left, n.right) } else { (n.right, n.left) };
        self.knn_rec(near, q, k, best);
        if best.len() < k || diff * diff <= best[k - 1].0 {
            self.knn_rec(far, q, k, best);
        }
    }
}
