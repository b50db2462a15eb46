//! Weighted multivariate empirical CDFs evaluated at all target points at
//! once: fast sum updating in one dimension, presorted divide-and-conquer
//! for d > 1.
//!
//! For a sign vector `delta` the engine computes, for every target `z`,
//!
//! ```text
//! F_j = sum_i w_i * prod_k [ x_{k,i} <= z_{k,j} ]   when delta_k = +1
//!                          [ x_{k,i} >  z_{k,j} ]   when delta_k = -1
//! ```
//!
//! which is `F(delta z, delta; delta x, w)` with the generalized inequality
//! operator (strict on -1 components). The strict/non-strict mix makes the
//! 2^d orthants around any target disjoint, ties included, so correctness on
//! ties is carried entirely by the operator and never by sort order.
//!
//! The divide-and-conquer schedule (sort orders of every half-block by the
//! next coordinate, plus tie-group boundaries) depends only on the points.
//! It is built once and reused across every MVM call; one schedule serves
//! all 2^d sign vectors because a descending walk of an ascending order
//! realizes the strict-operator semantics exactly.

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Block size below which recursion switches to direct pairwise
/// accumulation. Configurable; has no effect on results.
pub const DEFAULT_BASE_CASE: usize = 64;

/// One of the 2^d generalized-inequality orthant selectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector {
    signs: Vec<i8>,
}

impl SignVector {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.is_empty() {
            return Err(Error::InvalidParameter("sign vector must have dimension >= 1".into()));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidParameter("sign vector components must be +1 or -1".into()));
        }
        Ok(Self { signs })
    }

    pub fn all_plus(d: usize) -> Self {
        Self { signs: vec![1; d] }
    }

    /// Sign vector number `index` (0..2^d) in the fixed lexicographic
    /// enumeration: bit k of `index` set means component k is -1.
    pub fn from_index(index: usize, d: usize) -> Self {
        let signs = (0..d).map(|k| if index >> k & 1 == 1 { -1 } else { 1 }).collect();
        Self { signs }
    }

    /// All 2^d sign vectors in the fixed enumeration order.
    pub fn enumerate(d: usize) -> impl Iterator<Item = SignVector> {
        (0..1usize << d).map(move |i| SignVector::from_index(i, d))
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }
}

/// Node of the divide-and-conquer schedule.
///
/// `class` assigns each element to one side of every ancestor cross split
/// (bit q keyed on coordinate `bit_coords[q]`); empty means dual-role. At
/// traversal time the sign vector decides which class acts as source and
/// which as target.
enum Node {
    /// Last coordinate: tie-grouped linear sweep.
    Sweep {
        coord: usize,
        order: Vec<u32>,
        /// End offsets of tie groups in `order`.
        groups: Vec<u32>,
        class: Vec<u8>,
        bit_coords: Vec<u8>,
    },
    /// Small block: direct pairwise accumulation over coords `coord..d`.
    Pairwise {
        coord: usize,
        ids: Vec<u32>,
        class: Vec<u8>,
        bit_coords: Vec<u8>,
    },
    /// Every element tied on `coord`; pairs pass only under the non-strict
    /// operator, so the child is visited only when delta[coord] = +1.
    SingleGroup { coord: usize, child: Box<Node> },
    /// Tie-boundary split: halves are strictly separated on the split
    /// coordinate, so cross pairs need no further check on it.
    Split {
        left: Box<Node>,
        right: Box<Node>,
        cross: Box<Node>,
    },
}

/// Presorted schedule for a fixed point set: per-coordinate stable sort
/// permutations plus the divide-and-conquer merge schedule. Owns a
/// column-major copy of the coordinates; depends on points only, so it is
/// built once and shared across all MVM calls and sign vectors.
pub struct PresortIndex {
    coords: Vec<f64>, // column-major over n_total elements
    n_total: usize,
    d: usize,
    /// Number of source elements (= weight vector length).
    n_src: usize,
    /// Number of target elements (= output length).
    n_tgt: usize,
    /// False: every element is both source and target (data presort).
    /// True: ids < n_src are sources, the rest targets (merged presort).
    split_roles: bool,
    perms: Vec<Vec<u32>>,
    root: Node,
    base: usize,
}

fn stable_perm(values: &[f64]) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..values.len() as u32).collect();
    perm.sort_unstable_by(|&a, &b| {
        values[a as usize]
            .total_cmp(&values[b as usize])
            .then(a.cmp(&b))
    });
    perm
}

/// Tie-group end offsets of `ids` under coordinate `coord`.
fn tie_groups(coords: &[f64], n_total: usize, coord: usize, ids: &[u32]) -> Vec<u32> {
    let col = &coords[coord * n_total..(coord + 1) * n_total];
    let mut groups = Vec::new();
    let mut i = 1;
    while i < ids.len() {
        if col[ids[i] as usize] != col[ids[i - 1] as usize] {
            groups.push(i as u32);
        }
        i += 1;
    }
    groups.push(ids.len() as u32);
    groups
}

struct Builder<'a> {
    coords: &'a [f64],
    n_total: usize,
    d: usize,
    /// Global stable rank of each element per coordinate (unique keys, so
    /// subset resorts are deterministic integer sorts).
    ranks: Vec<Vec<u32>>,
    base: usize,
}

impl Builder<'_> {
    fn resort(&self, ids: &mut [u32], class: &mut [u8], coord: usize) {
        let rank = &self.ranks[coord];
        if class.is_empty() {
            ids.sort_unstable_by_key(|&id| rank[id as usize]);
        } else {
            let mut zipped: Vec<(u32, u8)> =
                ids.iter().copied().zip(class.iter().copied()).collect();
            zipped.sort_unstable_by_key(|&(id, _)| rank[id as usize]);
            for (i, (id, cl)) in zipped.into_iter().enumerate() {
                ids[i] = id;
                class[i] = cl;
            }
        }
    }

    /// `ids` must arrive sorted by coordinate `c`.
    fn build(&self, mut ids: Vec<u32>, mut class: Vec<u8>, bit_coords: Vec<u8>, c: usize) -> Node {
        if c == self.d - 1 {
            let groups = tie_groups(self.coords, self.n_total, c, &ids);
            return Node::Sweep { coord: c, order: ids, groups, class, bit_coords };
        }
        if ids.len() <= self.base {
            return Node::Pairwise { coord: c, ids, class, bit_coords };
        }
        let groups = tie_groups(self.coords, self.n_total, c, &ids);
        if groups.len() == 1 {
            self.resort(&mut ids, &mut class, c + 1);
            let child = self.build(ids, class, bit_coords, c + 1);
            return Node::SingleGroup { coord: c, child: Box::new(child) };
        }
        // Split at the tie boundary nearest the middle.
        let mid = ids.len() as i64 / 2;
        let split = groups[..groups.len() - 1]
            .iter()
            .min_by_key(|&&g| (i64::from(g) - mid).abs())
            .copied()
            .unwrap() as usize;

        let bits = bit_coords.len();
        let mut cross_ids = ids.clone();
        let mut cross_class = if class.is_empty() { vec![0u8; ids.len()] } else { class.clone() };
        for cl in cross_class[split..].iter_mut() {
            *cl |= 1 << bits;
        }
        let mut cross_bits = bit_coords.clone();
        cross_bits.push(c as u8);
        self.resort(&mut cross_ids, &mut cross_class, c + 1);
        let cross = self.build(cross_ids, cross_class, cross_bits, c + 1);

        let right_ids = ids.split_off(split);
        let right_class = if class.is_empty() { Vec::new() } else { class.split_off(split) };
        let left = self.build(ids, class, bit_coords.clone(), c);
        let right = self.build(right_ids, right_class, bit_coords, c);
        Node::Split { left: Box::new(left), right: Box::new(right), cross: Box::new(cross) }
    }
}

fn build_index(
    coords: Vec<f64>,
    n_total: usize,
    d: usize,
    n_src: usize,
    n_tgt: usize,
    split_roles: bool,
    base: usize,
) -> PresortIndex {
    let perms: Vec<Vec<u32>> =
        (0..d).map(|k| stable_perm(&coords[k * n_total..(k + 1) * n_total])).collect();
    let ranks: Vec<Vec<u32>> = perms
        .iter()
        .map(|perm| {
            let mut rank = vec![0u32; n_total];
            for (pos, &id) in perm.iter().enumerate() {
                rank[id as usize] = pos as u32;
            }
            rank
        })
        .collect();
    let builder = Builder { coords: &coords, n_total, d, ranks, base };
    let root = builder.build(perms[0].clone(), Vec::new(), Vec::new(), 0);
    PresortIndex { coords, n_total, d, n_src, n_tgt, split_roles, perms, root, base }
}

/// Builds the presort schedule for MVM at the data points themselves
/// (every point is both source and target).
pub fn build_presort(data: &Dataset) -> Result<PresortIndex> {
    build_presort_with_base(data, DEFAULT_BASE_CASE)
}

/// Same as [`build_presort`] with an explicit base-case threshold.
pub fn build_presort_with_base(data: &Dataset, base: usize) -> Result<PresortIndex> {
    let n = data.len();
    let d = data.dim();
    Ok(build_index(data.coords().to_vec(), n, d, n, n, false, base.max(1)))
}

/// Builds a merged schedule: dataset points act as sources, `targets`
/// (row-major) as evaluation points. Exposed for prediction at external
/// points.
pub fn build_presort_merged(data: &Dataset, targets: &[Vec<f64>]) -> Result<PresortIndex> {
    let n = data.len();
    let d = data.dim();
    let m = targets.len();
    if m == 0 {
        return Err(Error::InvalidParameter("at least one evaluation point is required".into()));
    }
    let n_total = n + m;
    let mut coords = vec![0.0; n_total * d];
    for k in 0..d {
        coords[k * n_total..k * n_total + n].copy_from_slice(data.coord(k));
    }
    for (j, z) in targets.iter().enumerate() {
        if z.len() != d {
            return Err(Error::DimensionMismatch { context: "evaluation point", expected: d, got: z.len() });
        }
        for (k, &v) in z.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "evaluation points (row index)", index: j });
            }
            coords[k * n_total + n + j] = v;
        }
    }
    Ok(build_index(coords, n_total, d, n, m, true, DEFAULT_BASE_CASE))
}

struct Walk<'a> {
    coords: &'a [f64],
    n_total: usize,
    d: usize,
    n_src: usize,
    split_roles: bool,
    delta: &'a [i8],
    weights: &'a [f64],
    ncols: usize,
    out: &'a mut [f64],
    compensated: bool,
    acc: Vec<f64>,
    comp: Vec<f64>,
}

impl Walk<'_> {
    #[inline]
    fn coord_of(&self, k: usize, id: u32) -> f64 {
        self.coords[k * self.n_total + id as usize]
    }

    #[inline]
    fn global_src(&self, id: u32) -> bool {
        !self.split_roles || (id as usize) < self.n_src
    }

    #[inline]
    fn global_tgt(&self, id: u32) -> bool {
        !self.split_roles || (id as usize) >= self.n_src
    }

    #[inline]
    fn tgt_slot(&self, id: u32) -> usize {
        if self.split_roles { id as usize - self.n_src } else { id as usize }
    }

    /// Class byte that acts as source under the current sign vector: the
    /// upper half of a split on coordinate `c` supplies sources exactly when
    /// delta_c = -1 (strict "greater than").
    fn src_class(&self, bit_coords: &[u8]) -> u8 {
        let mut m = 0u8;
        for (q, &c) in bit_coords.iter().enumerate() {
            if self.delta[c as usize] < 0 {
                m |= 1 << q;
            }
        }
        m
    }

    #[inline]
    fn accumulate(&mut self, id: u32) {
        let w = &self.weights[id as usize * self.ncols..(id as usize + 1) * self.ncols];
        if self.compensated {
            for c in 0..self.ncols {
                let y = w[c] - self.comp[c];
                let t = self.acc[c] + y;
                self.comp[c] = (t - self.acc[c]) - y;
                self.acc[c] = t;
            }
        } else {
            for c in 0..self.ncols {
                self.acc[c] += w[c];
            }
        }
    }

    #[inline]
    fn emit(&mut self, id: u32) {
        let slot = self.tgt_slot(id) * self.ncols;
        for c in 0..self.ncols {
            self.out[slot + c] += self.acc[c];
        }
    }

    fn walk(&mut self, node: &Node) {
        match node {
            Node::Sweep { coord, order, groups, class, bit_coords } => {
                self.sweep(*coord, order, groups, class, bit_coords)
            }
            Node::Pairwise { coord, ids, class, bit_coords } => {
                self.pairwise(*coord, ids, class, bit_coords)
            }
            Node::SingleGroup { coord, child } => {
                if self.delta[*coord] > 0 {
                    self.walk(child);
                }
            }
            Node::Split { left, right, cross } => {
                self.walk(left);
                self.walk(right);
                self.walk(cross);
            }
        }
    }

    fn sweep(&mut self, coord: usize, order: &[u32], groups: &[u32], class: &[u8], bit_coords: &[u8]) {
        let has_class = !class.is_empty();
        let src_c = self.src_class(bit_coords);
        let tgt_c = if has_class { src_c ^ ((1u8 << bit_coords.len()) - 1) } else { 0 };
        for v in self.acc.iter_mut() {
            *v = 0.0;
        }
        for v in self.comp.iter_mut() {
            *v = 0.0;
        }
        if self.delta[coord] > 0 {
            // Non-strict: a tied source counts for a tied target, so each
            // group's sources are absorbed before its targets are served.
            let mut start = 0usize;
            for &end in groups {
                let end = end as usize;
                for pos in start..end {
                    let id = order[pos];
                    if (!has_class || class[pos] == src_c) && self.global_src(id) {
                        self.accumulate(id);
                    }
                }
                for pos in start..end {
                    let id = order[pos];
                    if (!has_class || class[pos] == tgt_c) && self.global_tgt(id) {
                        self.emit(id);
                    }
                }
                start = end;
            }
        } else {
            // Strict: walk descending; tied sources must not count, so each
            // group's targets are served before its sources are absorbed.
            let mut end = order.len();
            for g in (0..groups.len()).rev() {
                let start = if g == 0 { 0 } else { groups[g - 1] as usize };
                for pos in start..end {
                    let id = order[pos];
                    if (!has_class || class[pos] == tgt_c) && self.global_tgt(id) {
                        self.emit(id);
                    }
                }
                for pos in start..end {
                    let id = order[pos];
                    if (!has_class || class[pos] == src_c) && self.global_src(id) {
                        self.accumulate(id);
                    }
                }
                end = start;
            }
        }
    }

    fn pairwise(&mut self, coord: usize, ids: &[u32], class: &[u8], bit_coords: &[u8]) {
        let has_class = !class.is_empty();
        let src_c = self.src_class(bit_coords);
        let tgt_c = if has_class { src_c ^ ((1u8 << bit_coords.len()) - 1) } else { 0 };
        for (jp, &jd) in ids.iter().enumerate() {
            if !self.global_tgt(jd) || (has_class && class[jp] != tgt_c) {
                continue;
            }
            for v in self.acc.iter_mut() {
                *v = 0.0;
            }
            'src: for (ip, &id) in ids.iter().enumerate() {
                if !self.global_src(id) || (has_class && class[ip] != src_c) {
                    continue;
                }
                for k in coord..self.d {
                    let xi = self.coord_of(k, id);
                    let xj = self.coord_of(k, jd);
                    let ok = if self.delta[k] > 0 { xi <= xj } else { xi > xj };
                    if !ok {
                        continue 'src;
                    }
                }
                let w = &self.weights[id as usize * self.ncols..(id as usize + 1) * self.ncols];
                for c in 0..self.ncols {
                    self.acc[c] += w[c];
                }
            }
            let slot = self.tgt_slot(jd) * self.ncols;
            for c in 0..self.ncols {
                self.out[slot + c] += self.acc[c];
            }
        }
    }
}

impl PresortIndex {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_sources(&self) -> usize {
        self.n_src
    }

    pub fn n_targets(&self) -> usize {
        self.n_tgt
    }

    pub fn base_case(&self) -> usize {
        self.base
    }

    /// Stable sort permutation of the elements by coordinate `k`.
    pub fn permutation(&self, k: usize) -> &[u32] {
        &self.perms[k]
    }

    pub(crate) fn coord(&self, k: usize) -> &[f64] {
        &self.coords[k * self.n_total..(k + 1) * self.n_total]
    }

    /// Block variant: `weights` holds `ncols` interleaved columns per source
    /// (`weights[i * ncols + c]`), `out` accumulates the same layout per
    /// target. All columns share one schedule traversal.
    pub fn weighted_cdf_block(
        &self,
        delta: &SignVector,
        weights: &[f64],
        ncols: usize,
        out: &mut [f64],
        compensated: bool,
    ) -> Result<()> {
        if delta.len() != self.d {
            return Err(Error::DimensionMismatch { context: "sign vector", expected: self.d, got: delta.len() });
        }
        if ncols == 0 {
            return Err(Error::InvalidParameter("ncols must be >= 1".into()));
        }
        if weights.len() != self.n_src * ncols {
            return Err(Error::DimensionMismatch {
                context: "weights",
                expected: self.n_src * ncols,
                got: weights.len(),
            });
        }
        if out.len() != self.n_tgt * ncols {
            return Err(Error::DimensionMismatch {
                context: "cdf output",
                expected: self.n_tgt * ncols,
                got: out.len(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite { context: "weights", index: i / ncols });
            }
        }
        let mut walk = Walk {
            coords: &self.coords,
            n_total: self.n_total,
            d: self.d,
            n_src: self.n_src,
            split_roles: self.split_roles,
            delta: delta.signs(),
            weights,
            ncols,
            out,
            compensated,
            acc: vec![0.0; ncols],
            comp: vec![0.0; ncols],
        };
        walk.walk(&self.root);
        Ok(())
    }

    /// `F(delta z, delta; delta x, w)` for every target point.
    pub fn weighted_cdf(&self, delta: &SignVector, weights: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_tgt];
        self.weighted_cdf_block(delta, weights, 1, &mut out, true)?;
        Ok(out)
    }
}

/// Free-function form of [`PresortIndex::weighted_cdf`].
pub fn weighted_cdf_multi(
    presort: &PresortIndex,
    delta: &SignVector,
    weights: &[f64],
) -> Result<Vec<f64>> {
    presort.weighted_cdf(delta, weights)
}

/// One-pass weighted empirical CDF on pre-sorted 1-D data:
/// `out[j] = sum_i weights[i] * [sorted_x[i] <= eval_points[j]]`.
///
/// Fast sum updating: both inputs are walked once, O(N + M).
pub fn weighted_cdf_1d(sorted_x: &[f64], weights: &[f64], eval_points: &[f64]) -> Result<Vec<f64>> {
    if sorted_x.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "weights",
            expected: sorted_x.len(),
            got: weights.len(),
        });
    }
    if sorted_x.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Unsorted("sorted_x"));
    }
    if eval_points.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Unsorted("eval_points"));
    }
    let mut out = Vec::with_capacity(eval_points.len());
    let mut acc = 0.0f64;
    let mut comp = 0.0f64;
    let mut i = 0;
    for &z in eval_points {
        while i < sorted_x.len() && sorted_x[i] <= z {
            let y = weights[i] - comp;
            let t = acc + y;
            comp = (t - acc) - y;
            acc = t;
            i += 1;
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    /// O(N^2) evaluation of the orthant ECDF definition, the oracle for the
    /// divide-and-conquer path.
    fn naive_cdf(data: &Dataset, delta: &SignVector, weights: &[f64]) -> Vec<f64> {
        let n = data.len();
        let d = data.dim();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            'src: for i in 0..n {
                for k in 0..d {
                    let xi = data.coord(k)[i];
                    let xj = data.coord(k)[j];
                    let ok = if delta.signs()[k] > 0 { xi <= xj } else { xi > xj };
                    if !ok {
                        continue 'src;
                    }
                }
                s += weights[i];
            }
            out[j] = s;
        }
        out
    }

    fn random_dataset(rng: &mut ChaCha20Rng, n: usize, d: usize, with_ties: bool) -> Dataset {
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if with_ties {
                            // Heavily quantized coordinates force tie groups.
                            (rng.gen_range(0..7) as f64) * 0.25
                        } else {
                            rng.gen::<f64>()
                        }
                    })
                    .collect()
            })
            .collect();
        let y = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Dataset::from_columns(&cols, y).unwrap()
    }

    #[test]
    fn presort_identity_and_reversal() {
        let ds = Dataset::from_rows(
            &[vec![0.0], vec![1.0], vec![2.0]],
            vec![0.0; 3],
        )
        .unwrap();
        let ps = build_presort(&ds).unwrap();
        assert_eq!(ps.permutation(0), &[0, 1, 2]);

        let ds = Dataset::from_rows(
            &[vec![4.0], vec![3.0], vec![2.0], vec![1.0], vec![0.0]],
            vec![0.0; 5],
        )
        .unwrap();
        let ps = build_presort(&ds).unwrap();
        assert_eq!(ps.permutation(0), &[4, 3, 2, 1, 0]);
    }

    #[test]
    fn presort_sorts_every_coordinate() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ds = random_dataset(&mut rng, 1000, 3, false);
        let ps = build_presort(&ds).unwrap();
        for k in 0..3 {
            let col = ds.coord(k);
            let perm = ps.permutation(k);
            assert!(perm.windows(2).all(|w| col[w[0] as usize] <= col[w[1] as usize]));
        }
    }

    #[test]
    fn cdf_1d_basics() {
        let x = [0.0, 0.5, 1.0, 1.0, 2.0];
        let w = [0.2; 5];
        let out = weighted_cdf_1d(&x, &w, &[-1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(out[0], 0.0); // below min: empty set
        assert!((out[1] - 0.2).abs() < 1e-15);
        assert!((out[2] - 0.8).abs() < 1e-15); // ties included
        assert!((out[3] - 1.0).abs() < 1e-15); // full mass at max
        assert!(weighted_cdf_1d(&[1.0, 0.0], &w[..2], &[0.0]).is_err());
        assert!(weighted_cdf_1d(&x, &w[..3], &[0.0]).is_err());
    }

    #[test]
    fn cdf_1d_matches_naive() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 200;
        let mut x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        x.sort_by(f64::total_cmp);
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let z = x.clone();
        let fast = weighted_cdf_1d(&x, &w, &z).unwrap();
        for (j, &zj) in z.iter().enumerate() {
            let naive: f64 = x.iter().zip(&w).filter(|(xi, _)| **xi <= zj).map(|(_, wi)| wi).sum();
            assert!(
                (fast[j] - naive).abs() <= 1e-13 * naive.abs().max(1.0),
                "j={j}: {} vs {}",
                fast[j],
                naive
            );
        }
    }

    #[test]
    fn multi_cdf_matches_naive_oracle() {
        // 20 random instances, d in {1,2,3}, continuous and tie-heavy data.
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for case in 0..20 {
            let d = case % 3 + 1;
            let n = [37, 64, 65, 128, 300, 500][case % 6];
            let with_ties = case % 2 == 0;
            let ds = random_dataset(&mut rng, n, d, with_ties);
            let ps = build_presort(&ds).unwrap();
            let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            for delta in SignVector::enumerate(d) {
                let fast = ps.weighted_cdf(&delta, &w).unwrap();
                let naive = naive_cdf(&ds, &delta, &w);
                for j in 0..n {
                    assert!(
                        (fast[j] - naive[j]).abs() <= 1e-12 * naive[j].abs().max(1.0),
                        "case {case} d={d} n={n} ties={with_ties} delta={:?} j={j}: {} vs {}",
                        delta.signs(),
                        fast[j],
                        naive[j]
                    );
                }
            }
        }
    }

    #[test]
    fn small_base_case_exercises_deep_recursion() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for d in [2usize, 3] {
            let ds = random_dataset(&mut rng, 200, d, true);
            let ps = build_presort_with_base(&ds, 2).unwrap();
            let w: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() - 0.3).collect();
            for delta in SignVector::enumerate(d) {
                let fast = ps.weighted_cdf(&delta, &w).unwrap();
                let naive = naive_cdf(&ds, &delta, &w);
                for j in 0..200 {
                    assert!(
                        (fast[j] - naive[j]).abs() <= 1e-12 * naive[j].abs().max(1.0),
                        "d={d} delta={:?} j={j}",
                        delta.signs()
                    );
                }
            }
        }
    }

    #[test]
    fn orthant_partition_property() {
        // The 2^d orthants partition the source set for every target,
        // including duplicated points, so the CDFs sum to sum(w).
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for d in 1..=3usize {
            let ds = random_dataset(&mut rng, 257, d, true);
            let ps = build_presort(&ds).unwrap();
            let w: Vec<f64> = (0..257).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect();
            let total: f64 = w.iter().sum();
            let abs_total: f64 = w.iter().map(|v| v.abs()).sum();
            let mut sums = vec![0.0; 257];
            for delta in SignVector::enumerate(d) {
                let f = ps.weighted_cdf(&delta, &w).unwrap();
                for (s, v) in sums.iter_mut().zip(&f) {
                    *s += v;
                }
            }
            for (j, &s) in sums.iter().enumerate() {
                assert!(
                    (s - total).abs() <= 1e-12 * abs_total.max(1.0),
                    "d={d} j={j}: orthants sum to {s}, expected {total}"
                );
            }
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ds = random_dataset(&mut rng, 100, 2, false);
        let ps = build_presort(&ds).unwrap();
        let w = vec![0.0; 100];
        for delta in SignVector::enumerate(2) {
            assert!(ps.weighted_cdf(&delta, &w).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn presort_reuse_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let ds = random_dataset(&mut rng, 150, 2, false);
        let shared = build_presort(&ds).unwrap();
        let delta = SignVector::from_index(2, 2);
        for _ in 0..100 {
            let w: Vec<f64> = (0..150).map(|_| rng.gen::<f64>()).collect();
            let reused = shared.weighted_cdf(&delta, &w).unwrap();
            let fresh = build_presort(&ds).unwrap().weighted_cdf(&delta, &w).unwrap();
            assert_eq!(reused, fresh);
        }
    }

    #[test]
    fn merged_presort_evaluates_external_targets() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let ds = random_dataset(&mut rng, 120, 2, true);
        let targets: Vec<Vec<f64>> = (0..35)
            .map(|i| {
                if i % 3 == 0 {
                    ds.point(i) // exercise source/target coordinate ties
                } else {
                    vec![rng.gen::<f64>() * 1.5, rng.gen::<f64>() * 1.5]
                }
            })
            .collect();
        let ps = build_presort_merged(&ds, &targets).unwrap();
        assert_eq!(ps.n_sources(), 120);
        assert_eq!(ps.n_targets(), 35);
        let w: Vec<f64> = (0..120).map(|_| rng.gen::<f64>() - 0.4).collect();
        for delta in SignVector::enumerate(2) {
            let fast = ps.weighted_cdf(&delta, &w).unwrap();
            for (j, z) in targets.iter().enumerate() {
                let mut s = 0.0;
                'src: for i in 0..120 {
                    for k in 0..2 {
                        let xi = ds.coord(k)[i];
                        let ok = if delta.signs()[k] > 0 { xi <= z[k] } else { xi > z[k] };
                        if !ok {
                            continue 'src;
                        }
                    }
                    s += w[i];
                }
                assert!(
                    (fast[j] - s).abs() <= 1e-12 * s.abs().max(1.0),
                    "delta={:?} j={j}: {} vs {}",
                    delta.signs(),
                    fast[j],
                    s
                );
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ds = random_dataset(&mut rng, 10, 2, false);
        let ps = build_presort(&ds).unwrap();
        let w = vec![1.0; 10];
        assert!(ps.weighted_cdf(&SignVector::all_plus(3), &w).is_err());
        assert!(ps.weighted_cdf(&SignVector::all_plus(2), &w[..5]).is_err());
        assert!(SignVector::new(vec![1, 0]).is_err());
        assert!(SignVector::new(vec![]).is_err());
    }
}

