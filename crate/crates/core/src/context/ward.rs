//! Ward-linkage agglomeration via the nearest-neighbor chain.
//!
//! Dissimilarities are kept as the increase in within-cluster sum of squares
//! caused by a merge, so the merge costs of a full dendrogram add up to the
//! total sum of squares. Memory is one condensed `n(n-1)/2` matrix, which
//! limits practical use to about 10^4 points.

use crate::error::{Error, Result};

use super::gmm::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Representative points of the two merged clusters.
    pub a: usize,
    pub b: usize,
    /// Increase of the within-cluster sum of squares.
    pub cost: f64,
}

/// Full dendrogram with merges sorted by non-decreasing cost.
#[derive(Debug, Clone)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn ward_linkage(data: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("cannot cluster an empty dataset"));
    }
    let mut dist = vec![0.0; n * (n - 1) / 2];
    for i in 0..n {
        for j in i + 1..n {
            dist[condensed_index(n, i, j)] = 0.5 * sq_dist(&data[i], &data[j]);
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while merges.len() + 1 < n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster remains"));
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            // Prefer the previous chain element on ties so the chain terminates.
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| dist[condensed_index(n, a, p)]);
            for c in 0..n {
                if c == a || !active[c] {
                    continue;
                }
                let d = dist[condensed_index(n, a, c)];
                if d < best_d {
                    best_d = d;
                    best = Some(c);
                }
            }
            let b = best.expect("at least two active clusters");
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (keep, gone) = (a.min(b), a.max(b));
                let (sa, sb) = (size[keep] as f64, size[gone] as f64);
                for k in 0..n {
                    if !active[k] || k == keep || k == gone {
                        continue;
                    }
                    let sk = size[k] as f64;
                    let d_ak = dist[condensed_index(n, keep, k)];
                    let d_bk = dist[condensed_index(n, gone, k)];
                    dist[condensed_index(n, keep, k)] =
                        ((sa + sk) * d_ak + (sb + sk) * d_bk - sk * best_d) / (sa + sb + sk);
                }
                size[keep] += size[gone];
                active[gone] = false;
                merges.push(Merge {
                    a: keep,
                    b: gone,
                    cost: best_d,
                });
                break;
            }
            chain.push(b);
        }
    }

    // Stable sort keeps children before parents on equal cost.
    merges.sort_by(|x, y| x.cost.total_cmp(&y.cost));
    Ok(Dendrogram { n, merges })
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
}

impl Dendrogram {
    /// Flat labels with `k` clusters, numbered by first appearance.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::invalid(format!(
                "cannot cut {} points into {k} clusters",
                self.n
            )));
        }
        let mut uf = UnionFind((0..self.n).collect());
        for m in &self.merges[..self.n - k] {
            let (ra, rb) = (uf.find(m.a), uf.find(m.b));
            uf.0[ra.max(rb)] = ra.min(rb);
        }
        let mut relabel = vec![usize::MAX; self.n];
        let mut next = 0;
        Ok((0..self.n)
            .map(|i| {
                let r = uf.find(i);
                if relabel[r] == usize::MAX {
                    relabel[r] = next;
                    next += 1;
                }
                relabel[r]
            })
            .collect())
    }
}
