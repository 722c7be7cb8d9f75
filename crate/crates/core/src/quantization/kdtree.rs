use std::collections::HashMap;

use super::squared_distance;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Node {
    id: usize,
    point: Vec<f64>,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

/// Exact nearest-neighbour kd-tree over identified points.
///
/// Each internal node splits on the axis of maximum spread at the median
/// point: the left subtree holds points on or below the split value, the right
/// subtree holds points strictly above it. Equidistant neighbours resolve to
/// the lowest id. Removing a point rebuilds only the subtree rooted at it.
#[derive(Debug, Clone)]
pub struct KdTree {
    root: Option<Box<Node>>,
    dim: usize,
    points: HashMap<usize, Vec<f64>>,
}

fn build_subtree(mut pts: Vec<(usize, Vec<f64>)>) -> Option<Box<Node>> {
    if pts.is_empty() {
        return None;
    }
    let dim = pts[0].1.len();
    let axis = (0..dim)
        .map(|a| {
            let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.1[a]), hi.max(p.1[a]))
            });
            (a, hi - lo)
        })
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0;
    pts.sort_by(|a, b| a.1[axis].total_cmp(&b.1[axis]).then(a.0.cmp(&b.0)));
    let mut mid = pts.len() / 2;
    // Points equal to the split value must stay on the left.
    while mid + 1 < pts.len() && pts[mid + 1].1[axis] == pts[mid].1[axis] {
        mid += 1;
    }
    let right: Vec<_> = pts.split_off(mid + 1);
    let (id, point) = pts.pop().expect("median exists");
    Some(Box::new(Node {
        id,
        point,
        axis,
        left: build_subtree(pts),
        right: build_subtree(right),
    }))
}

fn collect(node: Option<Box<Node>>, out: &mut Vec<(usize, Vec<f64>)>) {
    if let Some(n) = node {
        let Node {
            id,
            point,
            left,
            right,
            ..
        } = *n;
        out.push((id, point));
        collect(left, out);
        collect(right, out);
    }
}

impl KdTree {
    pub fn build(points: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.1.len())
            .ok_or_else(|| Error::InvalidArgument("kd-tree needs at least one point".into()))?;
        let mut index = HashMap::with_capacity(points.len());
        for (id, p) in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "kd-tree point",
                    expected: dim,
                    actual: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("kd-tree point {id}")));
            }
            if index.insert(*id, p.clone()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate point id {id}")));
            }
        }
        Ok(Self {
            root: build_subtree(points),
            dim,
            points: index,
        })
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

    pub fn contains(&self, id: usize) -> bool {
        self.points.contains_key(&id)
    }

    /// Nearest point to `query` as `(squared distance, id)`.
    pub fn nearest(&self, query: &[f64]) -> Result<(f64, usize)> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "kd-tree query",
                expected: self.dim,
                actual: query.len(),
            });
        }
        let root = self.root.as_deref().ok_or(Error::EmptyCandidates)?;
        let mut best = (f64::INFINITY, usize::MAX);
        Self::search(root, query, &mut best);
        Ok(best)
    }

    fn search(node: &Node, q: &[f64], best: &mut (f64, usize)) {
        let d = squared_distance(&node.point, q);
        if d < best.0 || (d == best.0 && node.id < best.1) {
            *best = (d, node.id);
        }
        let diff = q[node.axis] - node.point[node.axis];
        let (near, far) = if diff <= 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            Self::search(n, q, best);
        }
        // `<=` so an equidistant point with a smaller id is still visited.
        if diff * diff <= best.0 {
            if let Some(f) = far {
                Self::search(f, q, best);
            }
        }
    }

    /// A copy of the tree with point `id` removed.
    pub fn remove(&self, id: usize) -> Result<Self> {
        let mut next = self.clone();
        next.remove_in_place(id)?;
        Ok(next)
    }

    pub fn remove_in_place(&mut self, id: usize) -> Result<()> {
        let target = self.points.remove(&id).ok_or(Error::MissingIndex(id))?;
        let mut slot = &mut self.root;
        loop {
            let node = slot
                .as_deref()
                .expect("indexed point must be present in the tree");
            if node.id == id {
                break;
            }
            let go_left = target[node.axis] <= node.point[node.axis];
            let node = slot.as_mut().expect("checked above");
            slot = if go_left { &mut node.left } else { &mut node.right };
        }
        let removed = slot.take().expect("found above");
        let mut survivors = Vec::new();
        collect(removed.left, &mut survivors);
        collect(removed.right, &mut survivors);
        *slot = build_subtree(survivors);
        Ok(())
    }

    /// Checks the split ordering at every node.
    pub fn is_consistent(&self) -> bool {
        fn walk(node: &Node, bounds: &mut Vec<(usize, f64, bool)>, seen: &mut usize) -> bool {
            *seen += 1;
            for &(axis, split, left) in bounds.iter() {
                let v = node.point[axis];
                if (left && v > split) || (!left && v <= split) {
                    return false;
                }
            }
            let split = node.point[node.axis];
            let mut ok = true;
            if let Some(l) = &node.left {
                bounds.push((node.axis, split, true));
                ok &= walk(l, bounds, seen);
                bounds.pop();
            }
            if let Some(r) = &node.right {
                bounds.push((node.axis, split, false));
                ok &= walk(r, bounds, seen);
                bounds.pop();
            }
            ok
        }
        let mut seen = 0;
        let ok = match &self.root {
            None => true,
            Some(r) => walk(r, &mut Vec::new(), &mut seen),
        };
        ok && seen == self.points.len()
    }
}
