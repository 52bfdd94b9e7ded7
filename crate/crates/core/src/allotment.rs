//! Allotments: partitions of `R^d` into one unbounded cell `J_0` and bounded
//! axis-aligned boxes `J_1, …, J_m`, each with a representative point.
//!
//! Every allotment here lives on a rectangular grid. Bounded cells are a
//! subset ("active" grid cells) of that grid; `J_0` is everything else.
//! Cells are half-open, `(lo, hi]` along every axis, so each point of `R^d`
//! belongs to exactly one cell.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::model::WeightFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct Allotment {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    counts: Vec<usize>,
    edges: Vec<Vec<f64>>,
    /// Grid flat index → cell index (0 when the grid cell is part of `J_0`).
    /// `None` when every grid cell is active.
    lookup: Option<Vec<u32>>,
    /// Cell `j ≥ 1` → grid flat index, stored at `j - 1`.
    grid_of_cell: Vec<usize>,
    /// Representatives `a_0, …, a_m`, flattened.
    reps: Vec<f64>,
    /// Volume of cell `j ≥ 1`, stored at `j - 1`.
    volumes: Vec<f64>,
}

fn edge(lo: f64, hi: f64, count: usize, k: usize) -> f64 {
    if k == count {
        hi
    } else {
        lo + (hi - lo) * (k as f64) / (count as f64)
    }
}

impl Allotment {
    /// Assemble and validate an allotment on the grid `(lo, hi]` with
    /// `counts` cells per axis. `active` lists the grid flat indices (axis 0
    /// varies fastest) of the bounded cells, or `None` for all of them.
    /// `reps[0]` is `a_0`; `reps[j]` must lie in the `j`-th active cell.
    pub fn from_parts(
        lo: Vec<f64>,
        hi: Vec<f64>,
        counts: Vec<usize>,
        active: Option<Vec<usize>>,
        reps: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 {
            return Err(Error::InvalidInput("zero-dimensional grid".into()));
        }
        check_dim(dim, hi.len())?;
        check_dim(dim, counts.len())?;
        check_finite(&lo)?;
        check_finite(&hi)?;
        for a in 0..dim {
            if !(lo[a] < hi[a]) {
                return Err(Error::InvalidInput(format!(
                    "degenerate extent ({}, {}] on axis {a}",
                    lo[a], hi[a]
                )));
            }
            if counts[a] == 0 {
                return Err(Error::InvalidInput(format!("zero cell count on axis {a}")));
            }
        }
        let total: usize = counts.iter().product();
        let edges: Vec<Vec<f64>> = (0..dim)
            .map(|a| (0..=counts[a]).map(|k| edge(lo[a], hi[a], counts[a], k)).collect())
            .collect();
        for (a, e) in edges.iter().enumerate() {
            if e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidInput(format!("cells on axis {a} have zero width")));
            }
        }
        let (lookup, grid_of_cell) = match active {
            None => (None, (0..total).collect()),
            Some(list) => {
                let mut lookup = vec![0u32; total];
                for (i, &g) in list.iter().enumerate() {
                    if g >= total {
                        return Err(Error::InvalidInput(format!("grid index {g} out of range")));
                    }
                    if lookup[g] != 0 {
                        return Err(Error::InvalidInput(format!("grid index {g} listed twice")));
                    }
                    lookup[g] = (i + 1) as u32;
                }
                (Some(lookup), list)
            }
        };
        let m = grid_of_cell.len();
        if reps.len() != m + 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} representatives, got {}",
                m + 1,
                reps.len()
            )));
        }
        let mut flat = Vec::with_capacity((m + 1) * dim);
        for r in &reps {
            check_dim(dim, r.len())?;
            check_finite(r)?;
            flat.extend_from_slice(r);
        }
        let volumes = grid_of_cell
            .iter()
            .map(|&g| {
                let mut rest = g;
                (0..dim)
                    .map(|a| {
                        let k = rest % counts[a];
                        rest /= counts[a];
                        edges[a][k + 1] - edges[a][k]
                    })
                    .product()
            })
            .collect();
        let allot = Self {
            dim,
            lo,
            hi,
            counts,
            edges,
            lookup,
            grid_of_cell,
            reps: flat,
            volumes,
        };
        for j in 0..=m {
            if allot.locate(allot.rep(j)) != j {
                return Err(Error::InvalidInput(format!(
                    "representative {:?} does not lie in cell {j}",
                    allot.rep(j)
                )));
            }
        }
        Ok(allot)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of bounded cells `m`.
    pub fn size(&self) -> usize {
        self.grid_of_cell.len()
    }

    /// `m + 1`, the number of states of the coarse chain.
    pub fn cell_count(&self) -> usize {
        self.size() + 1
    }

    pub fn grid_lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn grid_hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn grid_counts(&self) -> &[usize] {
        &self.counts
    }

    /// Representative `a_j`.
    pub fn rep(&self, j: usize) -> &[f64] {
        &self.reps[j * self.dim..(j + 1) * self.dim]
    }

    pub fn representatives(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.reps.chunks_exact(self.dim)
    }

    /// Index of the unique cell containing `x`.
    #[inline]
    pub fn locate(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for a in 0..self.dim {
            let e = &self.edges[a];
            let k = e.partition_point(|&v| v < x[a]);
            if k == 0 || k >= e.len() {
                return 0;
            }
            flat += (k - 1) * stride;
            stride *= self.counts[a];
        }
        match &self.lookup {
            None => flat + 1,
            Some(l) => l[flat] as usize,
        }
    }

    /// `a_{locate(x)}`.
    pub fn representative(&self, x: &[f64]) -> &[f64] {
        self.rep(self.locate(x))
    }

    fn grid_index(&self, mut flat: usize, a: usize) -> usize {
        for b in 0..a {
            flat /= self.counts[b];
        }
        flat % self.counts[a]
    }

    /// Bounds `(lo, hi]` of bounded cell `j ≥ 1`.
    pub fn cell_bounds(&self, j: usize) -> (Vec<f64>, Vec<f64>) {
        assert!(j >= 1 && j <= self.size(), "cell {j} is not a bounded cell");
        let flat = self.grid_of_cell[j - 1];
        (0..self.dim)
            .map(|a| {
                let k = self.grid_index(flat, a);
                (self.edges[a][k], self.edges[a][k + 1])
            })
            .unzip()
    }

    #[inline]
    fn cell_axis(&self, j: usize, a: usize) -> (f64, f64) {
        let k = self.grid_index(self.grid_of_cell[j - 1], a);
        (self.edges[a][k], self.edges[a][k + 1])
    }

    /// Lebesgue volume of bounded cell `j ≥ 1`.
    #[inline]
    pub fn volume(&self, j: usize) -> f64 {
        self.volumes[j - 1]
    }

    /// Membership test straight from the cell bounds, independent of `locate`.
    pub fn contains(&self, j: usize, x: &[f64]) -> bool {
        if j == 0 {
            return (1..=self.size()).all(|i| !self.contains(i, x));
        }
        (0..self.dim).all(|a| {
            let (l, h) = self.cell_axis(j, a);
            l < x[a] && x[a] <= h
        })
    }

    /// Uniform draw from bounded cell `j ≥ 1`.
    #[inline]
    pub fn sample_in_cell<R: Rng + ?Sized>(&self, j: usize, rng: &mut R, out: &mut [f64]) {
        let flat = self.grid_of_cell[j - 1];
        let mut rest = flat;
        for a in 0..self.dim {
            let k = rest % self.counts[a];
            rest /= self.counts[a];
            let (l, h) = (self.edges[a][k], self.edges[a][k + 1]);
            let u: f64 = rng.random();
            out[a] = h - u * (h - l);
        }
    }

    /// Replace `a_0`; the point must lie in `J_0`.
    pub fn with_unbounded_representative(mut self, a0: &[f64]) -> Result<Self> {
        check_dim(self.dim, a0.len())?;
        check_finite(a0)?;
        if self.locate(a0) != 0 {
            return Err(Error::InvalidInput(format!("{a0:?} is not in the unbounded cell")));
        }
        self.reps[..self.dim].copy_from_slice(a0);
        Ok(self)
    }

    /// Plain-text description: grid bounds and counts, active cells and
    /// representatives. Numbers use the shortest exact decimal form, so
    /// [`Allotment::from_text`] reproduces the allotment bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = String::from("allotment\n");
        let _ = writeln!(s, "dim {}", self.dim);
        for a in 0..self.dim {
            let _ = writeln!(s, "axis {:?} {:?} {}", self.lo[a], self.hi[a], self.counts[a]);
        }
        match &self.lookup {
            None => s.push_str("active all\n"),
            Some(_) => {
                let _ = write!(s, "active {}", self.grid_of_cell.len());
                for g in &self.grid_of_cell {
                    let _ = write!(s, " {g}");
                }
                s.push('\n');
            }
        }
        for (j, r) in self.representatives().enumerate() {
            let _ = write!(s, "rep {j}");
            for v in r {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Parse(format!("line {line}: {what}"));
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |expect: &str| -> Result<(usize, Vec<&str>)> {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end, wanted `{expect}`")))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks[0] != expect {
                return Err(bad(n, &format!("expected `{expect}`, found `{}`", toks[0])));
            }
            Ok((n, toks))
        };
        let num = |n: usize, t: &str| t.parse::<f64>().map_err(|_| bad(n, &format!("bad number `{t}`")));
        let int = |n: usize, t: &str| t.parse::<usize>().map_err(|_| bad(n, &format!("bad integer `{t}`")));

        next("allotment")?;
        let (n, t) = next("dim")?;
        let dim = int(n, t.get(1).ok_or_else(|| bad(n, "missing dimension"))?)?;
        let (mut lo, mut hi, mut counts) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..dim {
            let (n, t) = next("axis")?;
            if t.len() != 4 {
                return Err(bad(n, "axis needs lo, hi, count"));
            }
            lo.push(num(n, t[1])?);
            hi.push(num(n, t[2])?);
            counts.push(int(n, t[3])?);
        }
        let (n, t) = next("active")?;
        let active = match t.get(1) {
            Some(&"all") => None,
            Some(c) => {
                let c = int(n, c)?;
                if t.len() != c + 2 {
                    return Err(bad(n, "active count does not match list"));
                }
                Some(t[2..].iter().map(|v| int(n, v)).collect::<Result<Vec<_>>>()?)
            }
            None => return Err(bad(n, "missing active list")),
        };
        let m = active
            .as_ref()
            .map_or_else(|| counts.iter().product(), |a: &Vec<usize>| a.len());
        let mut reps = Vec::with_capacity(m + 1);
        for j in 0..=m {
            let (n, t) = next("rep")?;
            if t.len() != dim + 2 || int(n, t[1])? != j {
                return Err(bad(n, &format!("malformed representative {j}")));
            }
            reps.push(t[2..].iter().map(|v| num(n, v)).collect::<Result<Vec<_>>>()?);
        }
        Self::from_parts(lo, hi, counts, active, reps)
    }
}

/// `m` equal half-open intervals partitioning `(lo, hi]`, centers as
/// representatives and `a_0 = lo`.
pub fn build_1d(lo: f64, hi: f64, m: usize) -> Result<Allotment> {
    build_boxes(&[lo], &[hi], &[m], None)
}

/// Equal boxes partitioning `(lo, hi]` with `counts` boxes per axis. Box
/// centers are the representatives; `a_0` defaults to the midpoint of the
/// face `x_0 = lo_0`.
pub fn build_boxes(lo: &[f64], hi: &[f64], counts: &[usize], a0: Option<Vec<f64>>) -> Result<Allotment> {
    check_dim(lo.len(), hi.len())?;
    check_dim(lo.len(), counts.len())?;
    for a in 0..lo.len() {
        if !(lo[a] < hi[a]) {
            return Err(Error::InvalidInput(format!(
                "degenerate box ({}, {}] on axis {a}",
                lo[a], hi[a]
            )));
        }
    }
    let a0 = a0.unwrap_or_else(|| {
        let mut p: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        p[0] = lo[0];
        p
    });
    let mut reps = vec![a0];
    let total: usize = counts.iter().product();
    let edges: Vec<Vec<f64>> = (0..lo.len())
        .map(|a| (0..=counts[a]).map(|k| edge(lo[a], hi[a], counts[a], k)).collect())
        .collect();
    for flat in 0..total {
        let mut rest = flat;
        reps.push(
            (0..lo.len())
                .map(|a| {
                    let k = rest % counts[a];
                    rest /= counts[a];
                    let (l, h) = (edges[a][k], edges[a][k + 1]);
                    l + 0.5 * (h - l)
                })
                .collect(),
        );
    }
    Allotment::from_parts(lo.to_vec(), hi.to_vec(), counts.to_vec(), None, reps)
}

/// W-mesh and W-radius of an allotment, estimated by deterministic probing.
///
/// `geometric` is exact. `ratio` is a probed supremum, so a lower estimate;
/// `radius` is a probed infimum, so an upper estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshReport {
    pub geometric: f64,
    pub ratio: f64,
    pub mesh: f64,
    pub radius: f64,
    pub ratio_is_lower_estimate: bool,
    pub radius_is_upper_estimate: bool,
}

/// Calls `f` on every point of the tensor grid with `res` equally spaced
/// points per axis spanning `[lo_a, hi_a]` (endpoints included).
fn for_each_probe(lo: &[f64], hi: &[f64], res: usize, buf: &mut [f64], f: &mut impl FnMut(&[f64])) {
    let d = lo.len();
    let mut idx = vec![0usize; d];
    loop {
        for a in 0..d {
            buf[a] = lo[a] + (hi[a] - lo[a]) * (idx[a] as f64) / ((res - 1) as f64);
        }
        f(buf);
        let mut a = 0;
        loop {
            if a == d {
                return;
            }
            idx[a] += 1;
            if idx[a] < res {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Calls `f` on every point of the Cartesian product of `lists`.
fn for_each_product(lists: &[Vec<f64>], buf: &mut [f64], f: &mut impl FnMut(&[f64])) {
    let d = lists.len();
    if lists.iter().any(|l| l.is_empty()) {
        return;
    }
    let mut idx = vec![0usize; d];
    loop {
        for a in 0..d {
            buf[a] = lists[a][idx[a]];
        }
        f(buf);
        let mut a = 0;
        loop {
            if a == d {
                return;
            }
            idx[a] += 1;
            if idx[a] < lists[a].len() {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Probed infimum of `W` over `J_0`, plus the best probe that actually lies
/// in `J_0` (a candidate for `a_0`).
fn probe_unbounded<W: WeightFunction>(
    allot: &Allotment,
    w: &W,
    res: usize,
) -> (f64, Option<(Vec<f64>, f64)>) {
    let d = allot.dim;
    let mut buf = vec![0.0; d];
    let mut inf = f64::INFINITY;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let visit = |p: &[f64], inf: &mut f64, best: &mut Option<(Vec<f64>, f64)>| {
        let v = w.value(p);
        if v < *inf {
            *inf = v;
        }
        if best.as_ref().is_none_or(|b| v < b.1) && allot.locate(p) == 0 {
            *best = Some((p.to_vec(), v));
        }
        v
    };

    // Inactive grid cells inside the grid box.
    if let Some(lookup) = &allot.lookup {
        let (mut clo, mut chi) = (vec![0.0; d], vec![0.0; d]);
        for (flat, &cell) in lookup.iter().enumerate() {
            if cell != 0 {
                continue;
            }
            let mut rest = flat;
            for a in 0..d {
                let k = rest % allot.counts[a];
                rest /= allot.counts[a];
                clo[a] = allot.edges[a][k];
                chi[a] = allot.edges[a][k + 1];
            }
            for_each_probe(&clo, &chi, res, &mut buf, &mut |p| {
                visit(p, &mut inf, &mut best);
            });
        }
    }

    // Outer faces of the grid box, then rays leaving each face point.
    let face_lists: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let e = &allot.edges[a];
            let mut pts = Vec::with_capacity(allot.counts[a] * res);
            for k in 0..allot.counts[a] {
                for t in 0..res {
                    pts.push(e[k] + (e[k + 1] - e[k]) * (t as f64) / ((res - 1) as f64));
                }
            }
            pts
        })
        .collect();
    for a in 0..d {
        let cell_width = (allot.hi[a] - allot.lo[a]) / allot.counts[a] as f64;
        for (side, face) in [(-1.0, allot.lo[a]), (1.0, allot.hi[a].next_up())] {
            let mut lists = face_lists.clone();
            lists[a] = vec![face];
            let mut ray = vec![0.0; d];
            for_each_product(&lists, &mut buf, &mut |p| {
                let v0 = visit(p, &mut inf, &mut best);
                // Walk outward until W is well above the running infimum.
                ray.copy_from_slice(p);
                let mut step = cell_width;
                let mut v = v0;
                for _ in 0..64 {
                    if v > 10.0 * inf || !v.is_finite() {
                        break;
                    }
                    ray[a] = face + side * step;
                    v = visit(&ray, &mut inf, &mut best);
                    step *= 2.0;
                }
            });
        }
    }
    (inf, best)
}

/// Geometric term, probed ratio term and probed radius of `allot` for `w`.
/// `probe` is the number of probe points per axis per cell (≥ 2).
pub fn mesh_and_radius<W: WeightFunction>(allot: &Allotment, w: &W, probe: usize) -> Result<MeshReport> {
    if probe < 2 {
        return Err(Error::InvalidInput("probe resolution must be at least 2".into()));
    }
    check_dim(allot.dim, w.dim())?;
    let d = allot.dim;
    let mut buf = vec![0.0; d];
    let mut geometric: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    for j in 1..=allot.size() {
        let (lo, hi) = allot.cell_bounds(j);
        let a = allot.rep(j);
        let far: f64 = (0..d)
            .map(|i| {
                let r = (lo[i] - a[i]).abs().max((hi[i] - a[i]).abs());
                r * r
            })
            .sum::<f64>()
            .sqrt();
        geometric = geometric.max(far);
        let wa = w.value(a);
        for_each_probe(&lo, &hi, probe, &mut buf, &mut |y| {
            ratio = ratio.max(wa / w.value(y) - 1.0);
        });
    }
    let (radius, _) = probe_unbounded(allot, w, probe);
    ratio = ratio.max(w.value(allot.rep(0)) / radius - 1.0);
    Ok(MeshReport {
        geometric,
        ratio,
        mesh: geometric.max(ratio),
        radius,
        ratio_is_lower_estimate: true,
        radius_is_upper_estimate: true,
    })
}

/// Tuning of the exhaustive-sequence construction.
#[derive(Debug, Clone, Copy)]
pub struct ExhaustiveOptions {
    /// Probe points per axis per cube when estimating oscillation.
    pub probe: usize,
    /// Sublevel sets reaching beyond this distance are treated as unbounded.
    pub max_extent: f64,
    pub max_halvings: u32,
}

impl Default for ExhaustiveOptions {
    fn default() -> Self {
        Self {
            probe: 8,
            max_extent: 1e6,
            max_halvings: 40,
        }
    }
}

/// Bounding box of `{W < level}`, grown from the anchors until every face
/// probes at or above `level`.
fn sublevel_box<W: WeightFunction>(w: &W, anchors: &[Vec<f64>], level: f64, opts: &ExhaustiveOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = w.dim();
    let mut lo: Vec<f64> = (0..d)
        .map(|a| anchors.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min) - 1.0)
        .collect();
    let mut hi: Vec<f64> = (0..d)
        .map(|a| anchors.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max) + 1.0)
        .collect();
    let face_res = 65;
    let mut buf = vec![0.0; d];
    loop {
        let mut grew = false;
        for a in 0..d {
            for upper in [false, true] {
                let mut flo = lo.clone();
                let mut fhi = hi.clone();
                let at = if upper { hi[a] } else { lo[a] };
                flo[a] = at;
                fhi[a] = at;
                let res = if d == 1 { 2 } else { face_res };
                let mut below = false;
                for_each_probe(&flo, &fhi, res, &mut buf, &mut |p| {
                    below |= w.value(p) < level;
                });
                if below {
                    let step = (0.25 * (hi[a] - lo[a])).max(1.0);
                    if upper {
                        hi[a] += step;
                    } else {
                        lo[a] -= step;
                    }
                    grew = true;
                }
            }
            if hi[a] - lo[a] > opts.max_extent {
                return Err(Error::UnboundedSublevelSet { level });
            }
        }
        if !grew {
            return Ok((lo, hi));
        }
    }
}

/// An exhaustive sequence of allotments with respect to `w`, one per level
/// `r_1 < r_2 < …`.
///
/// Level `n` covers `{W < r_n}` by lattice cubes of side `ε_n`, a power of
/// two no larger than `ε_{n-1}` and halved until the probed oscillation of
/// `W` over every kept cube is below `1/n`. Cube centers are the bounded
/// representatives; `a_0` is the probed minimizer of `W` over `J_0`.
pub fn build_exhaustive_sequence<W: WeightFunction>(
    w: &W,
    levels: &[f64],
    opts: ExhaustiveOptions,
) -> Result<Vec<Allotment>> {
    if levels.is_empty() {
        return Err(Error::InvalidInput("no levels given".into()));
    }
    if levels.windows(2).any(|p| !(p[0] < p[1])) || levels.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidInput("levels must be finite and strictly increasing".into()));
    }
    if opts.probe < 2 {
        return Err(Error::InvalidInput("probe resolution must be at least 2".into()));
    }
    let anchors = w.anchors();
    let inf_w = anchors.iter().map(|p| w.value(p)).fold(f64::INFINITY, f64::min);
    if !(levels[0] > inf_w) {
        return Err(Error::InvalidInput(format!(
            "first level {} does not exceed inf W ≈ {inf_w}",
            levels[0]
        )));
    }

    let d = w.dim();
    let mut eps = 1.0f64;
    let mut out = Vec::with_capacity(levels.len());
    let mut buf = vec![0.0; d];
    for (i, &level) in levels.iter().enumerate() {
        let n = (i + 1) as f64;
        let (blo, bhi) = sublevel_box(w, &anchors, level, &opts)?;
        let mut halvings = 0;
        let (glo, counts, kept) = loop {
            let glo: Vec<i64> = blo.iter().map(|v| (v / eps).floor() as i64 - 1).collect();
            let ghi: Vec<i64> = bhi.iter().map(|v| (v / eps).ceil() as i64 + 1).collect();
            let counts: Vec<usize> = glo.iter().zip(&ghi).map(|(l, h)| (h - l) as usize).collect();
            let total: usize = counts.iter().product();
            let mut kept = Vec::new();
            let mut worst: f64 = 0.0;
            let (mut clo, mut chi) = (vec![0.0; d], vec![0.0; d]);
            for flat in 0..total {
                let mut rest = flat;
                for a in 0..d {
                    let k = rest % counts[a];
                    rest /= counts[a];
                    clo[a] = (glo[a] + k as i64) as f64 * eps;
                    chi[a] = clo[a] + eps;
                }
                let (mut wmin, mut wmax) = (f64::INFINITY, f64::NEG_INFINITY);
                for_each_probe(&clo, &chi, opts.probe, &mut buf, &mut |p| {
                    let v = w.value(p);
                    wmin = wmin.min(v);
                    wmax = wmax.max(v);
                });
                if wmin < level {
                    kept.push(flat);
                    worst = worst.max(wmax - wmin);
                }
            }
            if worst < 1.0 / n {
                break (glo, counts, kept);
            }
            halvings += 1;
            if halvings > opts.max_halvings {
                return Err(Error::InvalidInput(format!(
                    "oscillation of W at level {level} did not fall below 1/{n}"
                )));
            }
            eps *= 0.5;
        };
        let lo: Vec<f64> = glo.iter().map(|&l| l as f64 * eps).collect();
        let hi: Vec<f64> = glo
            .iter()
            .zip(&counts)
            .map(|(&l, &c)| (l + c as i64) as f64 * eps)
            .collect();
        let mut reps = Vec::with_capacity(kept.len() + 1);
        // Placeholder a_0 outside the grid; replaced by the probed minimizer.
        reps.push(lo.iter().map(|v| v - 1.0).collect::<Vec<f64>>());
        for &flat in &kept {
            let mut rest = flat;
            reps.push(
                (0..d)
                    .map(|a| {
                        let k = rest % counts[a];
                        rest /= counts[a];
                        lo[a] + (k as f64 + 0.5) * eps
                    })
                    .collect(),
            );
        }
        let allot = Allotment::from_parts(lo, hi, counts, Some(kept), reps)?;
        let (_, best) = probe_unbounded(&allot, w, opts.probe);
        let (a0, _) = best.ok_or_else(|| Error::InvalidInput("no probe landed in J_0".into()))?;
        out.push(allot.with_unbounded_representative(&a0)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DriftFunction, TargetModel};
    use crate::rng;

    fn double_well() -> TargetModel {
        TargetModel::univariate(&[(0.4, -3.0, 1.0), (0.6, 4.0, 0.5)]).unwrap()
    }

    struct Constant(usize);
    impl WeightFunction for Constant {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, _: &[f64]) -> f64 {
            1.0
        }
    }

    #[test]
    fn interval_allotment_layout() {
        let a = build_1d(-8.0, 7.0, 30).unwrap();
        assert_eq!(a.size(), 30);
        assert_eq!(a.rep(0), &[-8.0]);
        assert_eq!(a.rep(1), &[-7.75]);
        for j in 1..=30 {
            assert_eq!(a.volume(j), 0.5);
            let (lo, hi) = a.cell_bounds(j);
            assert_eq!(a.rep(j)[0], 0.5 * (lo[0] + hi[0]));
            if j < 30 {
                assert_eq!(hi[0].to_bits(), a.cell_bounds(j + 1).0[0].to_bits());
            }
        }
        let one = build_1d(0.0, 1.0, 1).unwrap();
        assert_eq!(one.size(), 1);
        assert_eq!(one.cell_bounds(1), (vec![0.0], vec![1.0]));
        assert_eq!(one.rep(1), &[0.5]);
        assert!(build_1d(1.0, 1.0, 3).is_err());
        assert!(build_1d(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn box_allotment_layout() {
        let a = build_boxes(&[-7.0, -4.0], &[6.0, 4.0], &[3, 2], None).unwrap();
        assert_eq!(a.size(), 6);
        assert_eq!(a.rep(0), &[-7.0, 0.0]);
        let total: f64 = (1..=6).map(|j| a.volume(j)).sum();
        assert_eq!(total, 13.0 * 8.0);
        let single = build_boxes(&[0.0, 0.0], &[2.0, 4.0], &[1, 1], None).unwrap();
        assert_eq!(single.rep(1), &[1.0, 2.0]);
        assert!(build_boxes(&[0.0, 1.0], &[1.0, 1.0], &[1, 1], None).is_err());
        assert!(build_boxes(&[0.0], &[1.0], &[2], Some(vec![0.5])).is_err());
    }

    #[test]
    fn locate_and_representative() {
        let a = build_1d(-8.0, 7.0, 30).unwrap();
        assert_eq!(a.locate(&[-8.1]), 0);
        assert_eq!(a.locate(&[-8.0]), 0);
        assert_eq!(a.locate(&[-7.9]), 1);
        assert_eq!(a.locate(&[-7.5]), 1);
        assert_eq!(a.locate(&[7.0]), 30);
        assert_eq!(a.locate(&[7.0f64.next_up()]), 0);
        assert_eq!(a.representative(&[-7.9]), &[-7.75]);
        for j in 0..=30 {
            assert_eq!(a.representative(a.rep(j)), a.rep(j));
        }
        let report = mesh_and_radius(&a, &Constant(1), 4).unwrap();
        let mut r = rng::stream(1, 0);
        for _ in 0..10_000 {
            let x = [r.random_range(-9.0..8.0)];
            if a.locate(&x) != 0 {
                assert!((x[0] - a.representative(&x)[0]).abs() <= report.geometric);
            }
        }
    }

    #[test]
    fn partition_claims_each_point_once() {
        let allots = [
            build_1d(-8.0, 7.0, 30).unwrap(),
            build_boxes(&[-7.0, -4.0], &[6.0, 4.0], &[3, 2], None).unwrap(),
        ];
        let mut r = rng::stream(2, 0);
        for a in &allots {
            for _ in 0..100_000 {
                let x: Vec<f64> = (0..a.dim()).map(|_| r.random_range(-10.0..10.0)).collect();
                let owners: Vec<usize> = (0..=a.size()).filter(|&j| a.contains(j, &x)).collect();
                assert_eq!(owners, vec![a.locate(&x)]);
            }
        }
    }

    #[test]
    fn geometric_and_constant_weight_mesh() {
        let a = build_1d(-8.0, 7.0, 30).unwrap();
        let rep = mesh_and_radius(&a, &Constant(1), 64).unwrap();
        assert_eq!(rep.geometric, 0.25);
        assert_eq!(rep.ratio, 0.0);
        assert_eq!(rep.radius, 1.0);
        assert!(mesh_and_radius(&a, &Constant(1), 1).is_err());
    }

    #[test]
    fn radius_is_boundary_minimum() {
        let m = double_well();
        let v = DriftFunction::new(&m, 0.25).unwrap();
        let a = build_1d(-8.0, 7.0, 30).unwrap();
        let rep = mesh_and_radius(&a, &v, 64).unwrap();
        let expected = v.value(&[-8.0]).min(v.value(&[7.0]));
        // Dense-grid check over J_0 ∩ [-30, 30].
        let grid_min = (0..=600_000)
            .map(|i| -30.0 + 60.0 * i as f64 / 600_000.0)
            .filter(|&x| a.locate(&[x]) == 0)
            .map(|x| v.value(&[x]))
            .fold(f64::INFINITY, f64::min);
        assert!((rep.radius - expected).abs() <= 1e-12 * expected);
        assert!(grid_min >= expected * (1.0 - 1e-12));
        assert!(rep.mesh >= rep.geometric && rep.mesh >= rep.ratio);
    }

    #[test]
    fn refinement_does_not_increase_mesh() {
        let m = double_well();
        let v = DriftFunction::new(&m, 0.25).unwrap();
        let mut prev = f64::INFINITY;
        for cells in [15, 30, 60, 120, 240] {
            let rep = mesh_and_radius(&build_1d(-8.0, 7.0, cells).unwrap(), &v, 64).unwrap();
            assert!(rep.mesh <= prev, "m={cells}: {} > {prev}", rep.mesh);
            prev = rep.mesh;
        }
    }

    #[test]
    fn ratio_term_can_grow_when_a_midpoint_moves_toward_a_peak() {
        let v = DriftFunction::new(&double_well(), 0.25).unwrap();
        let hi = 3.9482308444961753;
        let coarse = mesh_and_radius(&build_1d(-2.0, hi, 29).unwrap(), &v, 64).unwrap();
        let fine = mesh_and_radius(&build_1d(-2.0, hi, 58).unwrap(), &v, 64).unwrap();
        assert!(fine.ratio > coarse.ratio && fine.geometric < coarse.geometric);
    }

    #[test]
    fn exhaustive_sequence_for_double_well() {
        let m = double_well();
        let v = DriftFunction::new(&m, 0.25).unwrap();
        let levels: Vec<f64> = (1..=6).map(|n| 2f64.powi(n)).collect();
        let seq = build_exhaustive_sequence(&v, &levels, ExhaustiveOptions::default()).unwrap();
        assert_eq!(seq.len(), 6);
        let reports: Vec<MeshReport> = seq
            .iter()
            .map(|a| mesh_and_radius(a, &v, 16).unwrap())
            .collect();
        for (n, (r, level)) in reports.iter().zip(&levels).enumerate() {
            assert!(r.radius >= *level, "level {n}: radius {} < {level}", r.radius);
        }
        for w in reports.windows(2) {
            assert!(w[1].mesh <= w[0].mesh);
            assert!(w[1].radius >= w[0].radius);
        }
        for w in reports[1..].windows(2) {
            assert!(w[1].mesh < w[0].mesh);
        }
        for a in &seq {
            assert_eq!(a.locate(a.rep(0)), 0);
        }
    }

    #[test]
    fn exhaustive_rejects_degenerate_input() {
        assert!(matches!(
            build_exhaustive_sequence(&Constant(1), &[2.0, 4.0], ExhaustiveOptions::default()),
            Err(Error::UnboundedSublevelSet { .. })
        ));
        assert!(build_exhaustive_sequence(&Constant(1), &[1.0], ExhaustiveOptions::default()).is_err());
        let v = DriftFunction::new(&double_well(), 0.25).unwrap();
        assert!(build_exhaustive_sequence(&v, &[4.0, 2.0], ExhaustiveOptions::default()).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = DriftFunction::new(&double_well(), 0.25).unwrap();
        let allots = [
            build_1d(-8.0, 7.0, 30).unwrap(),
            build_boxes(&[-7.0, -4.0], &[6.0, 4.0], &[3, 2], None).unwrap(),
            build_exhaustive_sequence(&v, &[2.0, 4.0], ExhaustiveOptions::default())
                .unwrap()
                .pop()
                .unwrap(),
        ];
        for a in allots {
            let back = Allotment::from_text(&a.to_text()).unwrap();
            assert_eq!(back, a);
        }
        assert!(Allotment::from_text("allotment\ndim 1\naxis 0 1 2\nactive all\nrep 0 0\n").is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn random_boxes_partition_space(
            lo in proptest::collection::vec(-10.0f64..0.0, 2),
            width in proptest::collection::vec(0.5f64..10.0, 2),
            counts in proptest::collection::vec(1usize..8, 2),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
            let a = build_boxes(&lo, &hi, &counts, None).unwrap();
            let mut r = rng::stream(seed, 0);
            for _ in 0..2000 {
                let x: Vec<f64> = (0..2).map(|_| r.random_range(-12.0..12.0)).collect();
                let owners: Vec<usize> = (0..=a.size()).filter(|&j| a.contains(j, &x)).collect();
                proptest::prop_assert_eq!(owners, vec![a.locate(&x)]);
            }
            let total: f64 = (1..=a.size()).map(|j| a.volume(j)).sum();
            proptest::prop_assert!((total - width[0] * width[1]).abs() <= 1e-9 * total);
        }

        #[test]
        fn doubling_cells_halves_geometric_term(lo in -12.0f64..-2.0, hi in 2.0f64..12.0, m in 2usize..200) {
            let v = DriftFunction::new(&double_well(), 0.25).unwrap();
            let coarse = mesh_and_radius(&build_1d(lo, hi, m).unwrap(), &v, 16).unwrap();
            let fine = mesh_and_radius(&build_1d(lo, hi, 2 * m).unwrap(), &v, 16).unwrap();
            proptest::prop_assert!((2.0 * fine.geometric - coarse.geometric).abs() <= 1e-12 * coarse.geometric);
        }

        #[test]
        fn doubling_cells_does_not_increase_mesh(m in 6usize..400) {
            let v = DriftFunction::new(&double_well(), 0.25).unwrap();
            let coarse = mesh_and_radius(&build_1d(-8.0, 7.0, m).unwrap(), &v, 64).unwrap();
            let fine = mesh_and_radius(&build_1d(-8.0, 7.0, 2 * m).unwrap(), &v, 64).unwrap();
            proptest::prop_assert!(fine.mesh <= coarse.mesh, "{} > {}", fine.mesh, coarse.mesh);
        }
    }
}
