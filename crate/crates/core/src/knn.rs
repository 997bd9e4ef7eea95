//! Exact k-nearest-neighbour lookup over embedding rows.
//!
//! A balanced kd-tree built once by median splits; queries are exact
//! Euclidean k-NN restricted to an allow mask fixed at build time.
//! Distance ties break toward the lower token id, so results are fully
//! deterministic. The tree is immutable after construction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One query hit: token id and Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<S> {
    pub id: usize,
    pub distance: S,
}

struct TreeNode {
    /// Index into `points` of the pivot stored at this node.
    point: usize,
    /// Split dimension (depth mod dims).
    dim: usize,
    left: Option<usize>,
    right: Option<usize>,
}

pub struct KnnIndex<S> {
    dims: usize,
    /// Allowed rows only, copied out of the source table.
    points: Vec<Vec<S>>,
    /// Token id of each stored point.
    ids: Vec<usize>,
    nodes: Vec<TreeNode>,
    root: Option<usize>,
}

impl<S: Scalar> KnnIndex<S> {
    /// Builds the index over the rows of `table` whose `allowed` entry is
    /// true. Disallowed rows are never stored and can never be returned.
    pub fn build(table: &Tensor<S>, allowed: &[bool]) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::shape("knn_build", format!("{:?}", table.shape())));
        }
        if allowed.len() != table.rows() {
            return Err(Error::invalid(format!(
                "allow mask has {} entries for {} rows",
                allowed.len(),
                table.rows()
            )));
        }
        let mut points = Vec::new();
        let mut ids = Vec::new();
        for (i, &ok) in allowed.iter().enumerate() {
            if ok {
                points.push(table.row(i).to_vec());
                ids.push(i);
            }
        }
        if points.is_empty() {
            return Err(Error::invalid("knn index over empty allowed set"));
        }
        let dims = table.cols();
        let mut index = KnnIndex {
            dims,
            points,
            ids,
            nodes: Vec::new(),
            root: None,
        };
        let mut order: Vec<usize> = (0..index.points.len()).collect();
        index.root = index.build_rec(&mut order, 0);
        Ok(index)
    }

    fn build_rec(&mut self, order: &mut [usize], depth: usize) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let dim = depth % self.dims;
        // Median by (coordinate, token id); the sort keys are total because
        // embedding coordinates are finite.
        order.sort_unstable_by(|&a, &b| {
            let ca = self.points[a][dim];
            let cb = self.points[b][dim];
            ca.partial_cmp(&cb)
                .expect("finite coordinates")
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        let mid = order.len() / 2;
        let point = order[mid];
        let node_idx = self.nodes.len();
        self.nodes.push(TreeNode {
            point,
            dim,
            left: None,
            right: None,
        });
        // Children are built after the parent is pushed; the borrow of
        // `order` is split around the pivot.
        let (left_slice, rest) = order.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        let left = self.build_rec(left_slice, depth + 1);
        let right = self.build_rec(right_slice, depth + 1);
        self.nodes[node_idx].left = left;
        self.nodes[node_idx].right = right;
        Some(node_idx)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact k nearest stored points to `query`, ascending by distance,
    /// ties by lower token id.
    pub fn query(&self, query: &[S], k: usize) -> Result<Vec<Neighbor<S>>> {
        if query.len() != self.dims {
            return Err(Error::shape(
                "knn_query",
                format!("query dim {} vs index dim {}", query.len(), self.dims),
            ));
        }
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(format!(
                "k = {} outside [1, {}]",
                k,
                self.points.len()
            )));
        }
        // Best-so-far kept as a sorted vec; k is small (tens), insertion
        // cost is negligible next to distance evaluations.
        let mut best: Vec<(S, usize, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root, query, k, &mut best);
        Ok(best
            .into_iter()
            .map(|(d2, id, _)| Neighbor {
                id,
                distance: d2.sqrt(),
            })
            .collect())
    }

    fn dist2(&self, p: usize, query: &[S]) -> S {
        self.points[p]
            .iter()
            .zip(query)
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }

    fn search(
        &self,
        node: Option<usize>,
        query: &[S],
        k: usize,
        best: &mut Vec<(S, usize, usize)>,
    ) {
        let Some(idx) = node else { return };
        let n = &self.nodes[idx];
        let p = n.point;
        let d2 = self.dist2(p, query);
        let key = (d2, self.ids[p], p);
        let pos = best
            .binary_search_by(|&(bd, bid, _)| {
                bd.partial_cmp(&key.0)
                    .expect("finite distance")
                    .then_with(|| bid.cmp(&key.1))
            })
            .unwrap_or_else(|e| e);
        best.insert(pos, key);
        if best.len() > k {
            best.pop();
        }

        let delta = query[n.dim] - self.points[p][n.dim];
        let (near, far) = if delta < S::zero() {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, k, best);
        // The far half-space can only be pruned when the splitting plane is
        // strictly farther than the current worst hit; equality must be
        // visited so tie-breaking on ids stays exact.
        let plane2 = delta * delta;
        if best.len() < k || plane2 <= best[best.len() - 1].0 {
            self.search(far, query, k, best);
        }
    }

    /// Structural audit: every point in a subtree satisfies the half-space
    /// constraints of all its ancestors' splitting planes.
    pub fn audit(&self) -> bool {
        fn rec<S: Scalar>(
            index: &KnnIndex<S>,
            node: Option<usize>,
            constraints: &mut Vec<(usize, S, bool)>,
        ) -> bool {
            let Some(idx) = node else { return true };
            let n = &index.nodes[idx];
            let point = &index.points[n.point];
            for &(dim, bound, is_upper) in constraints.iter() {
                let c = point[dim];
                if is_upper {
                    if c > bound {
                        return false;
                    }
                } else if c < bound {
                    return false;
                }
            }
            let pivot = index.points[n.point][n.dim];
            constraints.push((n.dim, pivot, true));
            let left_ok = rec(index, n.left, constraints);
            constraints.pop();
            constraints.push((n.dim, pivot, false));
            let right_ok = rec(index, n.right, constraints);
            constraints.pop();
            left_ok && right_ok
        }
        let mut constraints = Vec::new();
        rec(self, self.root, &mut constraints)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_from;

    fn random_table(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed, &[]);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data)
    }

    /// Brute-force oracle: full scan, same distance formula, same tie rule.
    fn brute_force(table: &Tensor<f64>, allowed: &[bool], query: &[f64], k: usize) -> Vec<Neighbor<f64>> {
        let mut all: Vec<(f64, usize)> = (0..table.rows())
            .filter(|&i| allowed[i])
            .map(|i| {
                let d2: f64 = table
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                (d2, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        all.truncate(k);
        all.into_iter()
            .map(|(d2, id)| Neighbor {
                id,
                distance: d2.sqrt(),
            })
            .collect()
    }

    #[test]
    fn self_query_returns_self_at_distance_zero() {
        let table = random_table(64, 8, 3);
        let allowed = vec![true; 64];
        let index = KnnIndex::build(&table, &allowed).unwrap();
        for i in [0usize, 17, 63] {
            let hits = index.query(table.row(i), 1).unwrap();
            assert_eq!(hits[0].id, i);
            assert_eq!(hits[0].distance, 0.0);
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let table = random_table(300, 10, 4);
        let mut allowed = vec![true; 300];
        allowed[0] = false;
        allowed[1] = false;
        allowed[2] = false;
        let index = KnnIndex::build(&table, &allowed).unwrap();
        let mut rng = rng_from(5, &[]);
        for _ in 0..50 {
            let query: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = index.query(&query, 15).unwrap();
            let want = brute_force(&table, &allowed, &query, 15);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.id, w.id);
                assert_eq!(g.distance, w.distance);
            }
        }
    }

    #[test]
    fn duplicate_points_tie_break_on_lower_id() {
        // Rows 5 and 9 are identical; a query at that point must list 5 first.
        let mut table = random_table(12, 4, 6);
        let dup: Vec<f64> = table.row(5).to_vec();
        table.row_mut(9).copy_from_slice(&dup);
        let allowed = vec![true; 12];
        let index = KnnIndex::build(&table, &allowed).unwrap();
        let hits = index.query(&dup, 2).unwrap();
        assert_eq!(hits[0].id, 5);
        assert_eq!(hits[1].id, 9);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[1].distance, 0.0);
    }

    #[test]
    fn excluded_rows_are_never_returned() {
        let table = random_table(40, 6, 7);
        let allowed: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        let index = KnnIndex::build(&table, &allowed).unwrap();
        let mut rng = rng_from(8, &[]);
        for _ in 0..20 {
            let query: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for hit in index.query(&query, 10).unwrap() {
                assert!(hit.id % 3 != 0);
            }
        }
    }

    #[test]
    fn structure_satisfies_ancestor_planes() {
        let table = random_table(500, 5, 9);
        let allowed = vec![true; 500];
        let index = KnnIndex::build(&table, &allowed).unwrap();
        assert!(index.audit());
    }

    #[test]
    fn rejects_empty_allowed_set_and_bad_k() {
        let table = random_table(10, 3, 10);
        assert!(KnnIndex::build(&table, &[false; 10]).is_err());
        let index = KnnIndex::build(&table, &[true; 10]).unwrap();
        assert!(index.query(&[0.0; 3], 0).is_err());
        assert!(index.query(&[0.0; 3], 11).is_err());
        assert!(index.query(&[0.0; 2], 3).is_err());
    }
}
