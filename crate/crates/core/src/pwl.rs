//! Concave nondecreasing functions on the balance box, stored as minima of affine
//! pieces, plus sandwich fitting from sampled values and supergradients.

use std::ops::Deref;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SLOPE_TOL: f64 = 1e-9;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// A nonnegative balance per buyer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BalanceVector(Vec<f64>);

impl BalanceVector {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::input(format!("balances must be finite and nonnegative: {b:?}")));
        }
        Ok(Self(b))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for BalanceVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinePiece {
    pub slope: Vec<f64>,
    pub intercept: f64,
}

impl AffinePiece {
    pub fn value(&self, b: &[f64]) -> f64 {
        self.intercept + self.slope.iter().zip(b).map(|(a, x)| a * x).sum::<f64>()
    }

    pub(crate) fn same_as(&self, other: &AffinePiece) -> bool {
        close(self.intercept, other.intercept, 1e-9)
            && self.slope.iter().zip(&other.slope).all(|(a, b)| close(*a, *b, 1e-9))
    }
}

/// `b -> min_l (slope_l . b + intercept_l)` with a per-coordinate domain box `[0, B_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPwl")]
pub struct PwlConcaveFn {
    pieces: Vec<AffinePiece>,
    #[serde(rename = "box")]
    domain: Vec<f64>,
}

#[derive(Deserialize)]
struct RawPwl {
    pieces: Vec<AffinePiece>,
    #[serde(rename = "box")]
    domain: Vec<f64>,
}

impl TryFrom<RawPwl> for PwlConcaveFn {
    type Error = Error;
    fn try_from(raw: RawPwl) -> Result<Self> {
        PwlConcaveFn::new(raw.pieces, raw.domain)
    }
}

impl PwlConcaveFn {
    pub fn new(pieces: Vec<AffinePiece>, domain: Vec<f64>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::input("piecewise-linear function needs at least one piece"));
        }
        if domain.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::input(format!("bad domain box {domain:?}")));
        }
        for p in &pieces {
            if p.slope.len() != domain.len() {
                return Err(Error::input("piece slope length does not match the domain box"));
            }
            if !p.intercept.is_finite() || p.slope.iter().any(|a| !a.is_finite()) {
                return Err(Error::input("non-finite piece"));
            }
        }
        Ok(Self { pieces, domain })
    }

    pub fn constant(value: f64, domain: Vec<f64>) -> Self {
        let k = domain.len();
        Self { pieces: vec![AffinePiece { slope: vec![0.0; k], intercept: value }], domain }
    }

    pub fn zero(domain: Vec<f64>) -> Self {
        Self::constant(0.0, domain)
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    pub fn domain(&self) -> &[f64] {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn eval(&self, b: &[f64]) -> f64 {
        self.pieces.iter().map(|p| p.value(b)).fold(f64::INFINITY, f64::min)
    }

    /// Index of the piece attaining the minimum at `b`; among near-ties the
    /// lexicographically smallest slope wins.
    pub fn active_piece(&self, b: &[f64]) -> usize {
        let v = self.eval(b);
        let tol = 1e-12 * (1.0 + v.abs());
        let mut best: Option<usize> = None;
        for (l, p) in self.pieces.iter().enumerate() {
            if p.value(b) <= v + tol {
                best = match best {
                    None => Some(l),
                    Some(q) => {
                        let ord = p
                            .slope
                            .iter()
                            .zip(&self.pieces[q].slope)
                            .map(|(a, c)| a.total_cmp(c))
                            .find(|o| o.is_ne());
                        if ord == Some(std::cmp::Ordering::Less) {
                            Some(l)
                        } else {
                            Some(q)
                        }
                    }
                };
            }
        }
        best.expect("nonempty pieces")
    }

    pub fn supergradient(&self, b: &[f64]) -> &[f64] {
        &self.pieces[self.active_piece(b)].slope
    }

    /// Coordinates with a nonzero box extent.
    pub fn active_dims(&self) -> Vec<usize> {
        active_dims(&self.domain)
    }

    /// Vertices of the hypograph of the function restricted to the box, with values.
    /// Every maximum of `self - g` over the box for concave `g` is attained at one of them.
    pub fn vertices(&self) -> Vec<(Vec<f64>, f64)> {
        envelope_vertices(&self.pieces, &self.domain)
    }

    /// Maximum over the box.
    pub fn max_on_box(&self) -> f64 {
        self.vertices().iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Drops pieces that are not active anywhere on the box.
    pub fn pruned(&self) -> Self {
        let verts = self.vertices();
        let keep: Vec<AffinePiece> = self
            .pieces
            .iter()
            .filter(|p| verts.iter().any(|(b, v)| p.value(b) <= v + 1e-9 * (1.0 + v.abs())))
            .cloned()
            .collect();
        if keep.is_empty() {
            return self.clone();
        }
        Self { pieces: keep, domain: self.domain.clone() }
    }
}

pub(crate) fn active_dims(domain: &[f64]) -> Vec<usize> {
    (0..domain.len()).filter(|i| domain[*i] > 0.0).collect()
}

fn dedupe_pieces(pieces: Vec<AffinePiece>) -> Vec<AffinePiece> {
    let mut out: Vec<AffinePiece> = Vec::with_capacity(pieces.len());
    for p in pieces {
        if !out.iter().any(|q| q.same_as(&p)) {
            out.push(p);
        }
    }
    out
}

/// Hypograph vertices inside the box of `min_l pieces_l`, computed on the active
/// coordinates. Each candidate fixes `d + 1` constraints among piece ties and box faces.
fn envelope_vertices(pieces: &[AffinePiece], domain: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let k = domain.len();
    let act = active_dims(domain);
    let d = act.len();
    let eval = |b: &[f64]| pieces.iter().map(|p| p.value(b)).fold(f64::INFINITY, f64::min);
    if d == 0 {
        let b = vec![0.0; k];
        let v = eval(&b);
        return vec![(b, v)];
    }
    // constraint rows over (b_active, z): coefficient vector and rhs
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(pieces.len() + 2 * d);
    for p in pieces {
        let mut r: Vec<f64> = act.iter().map(|i| -p.slope[*i]).collect();
        r.push(1.0);
        rows.push((r, p.intercept));
    }
    let n_pieces = rows.len();
    for (pos, i) in act.iter().enumerate() {
        let mut r = vec![0.0; d + 1];
        r[pos] = 1.0;
        rows.push((r.clone(), 0.0));
        rows.push((r, domain[*i]));
    }
    let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
    for combo in (0..rows.len()).combinations(d + 1) {
        if combo[0] >= n_pieces {
            continue;
        }
        let m = DMatrix::from_fn(d + 1, d + 1, |r, c| rows[combo[r]].0[c]);
        let rhs = DVector::from_iterator(d + 1, combo.iter().map(|r| rows[*r].1));
        let Some(sol) = m.lu().solve(&rhs) else { continue };
        if sol.iter().any(|x| !x.is_finite()) {
            continue;
        }
        let mut b = vec![0.0; k];
        let mut inside = true;
        for (pos, i) in act.iter().enumerate() {
            let x = sol[pos];
            let tol = 1e-9 * (1.0 + domain[*i]);
            if x < -tol || x > domain[*i] + tol {
                inside = false;
                break;
            }
            b[*i] = x.clamp(0.0, domain[*i]);
        }
        if !inside {
            continue;
        }
        let v = eval(&b);
        if sol[d] > v + 1e-9 * (1.0 + v.abs()) {
            continue;
        }
        if !out.iter().any(|(q, _)| q.iter().zip(&b).all(|(x, y)| close(*x, *y, 1e-12))) {
            out.push((b, v));
        }
    }
    out.sort_by(|a, b| a.0.iter().zip(&b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    out
}

/// Minimum of the tangent planes `value + slope . (b' - b)`.
pub fn fit_upper(points: &[(Vec<f64>, f64, Vec<f64>)], domain: &[f64]) -> Result<PwlConcaveFn> {
    if points.is_empty() {
        return Err(Error::input("fit_upper needs at least one point"));
    }
    let mut pieces = Vec::with_capacity(points.len());
    for (b, v, g) in points {
        if b.len() != domain.len() || g.len() != domain.len() {
            return Err(Error::input("tangent point dimension does not match the domain box"));
        }
        if !v.is_finite() || g.iter().any(|a| !a.is_finite() || *a < -SLOPE_TOL) {
            return Err(Error::input(format!("bad supergradient {g:?} at {b:?}")));
        }
        let slope: Vec<f64> = g.iter().map(|a| a.max(0.0)).collect();
        let intercept = v - slope.iter().zip(b).map(|(a, x)| a * x).sum::<f64>();
        pieces.push(AffinePiece { slope, intercept });
    }
    PwlConcaveFn::new(dedupe_pieces(pieces), domain.to_vec())
}

/// Upper concave hull of the sampled points, interpolating every point on the hull.
pub fn fit_lower(points: &[(Vec<f64>, f64)], domain: &[f64]) -> Result<PwlConcaveFn> {
    let mut hull = ConcaveHull::new(domain.len());
    hull.insert(points)?;
    Ok(hull.to_fn(domain))
}

/// Incrementally maintained upper concave hull of `(b, y)` samples.
///
/// Facets are the planes through affinely independent `(r + 1)`-subsets that lie
/// above every sample, where `r` is the affine rank of the sample locations. A facet
/// of the enlarged set that uses no new point was already a facet, so inserts only
/// search subsets containing a new point.
#[derive(Clone, Debug)]
pub(crate) struct ConcaveHull {
    k: usize,
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    rank: usize,
    facets: Vec<AffinePiece>,
}

impl ConcaveHull {
    pub(crate) fn new(k: usize) -> Self {
        Self { k, points: Vec::new(), values: Vec::new(), rank: 0, facets: Vec::new() }
    }

    pub(crate) fn insert(&mut self, batch: &[(Vec<f64>, f64)]) -> Result<()> {
        let first_new = self.points.len();
        for (b, y) in batch {
            if b.len() != self.k || !y.is_finite() || b.iter().any(|x| !x.is_finite()) {
                return Err(Error::input("bad hull point"));
            }
            if let Some(j) = self.points.iter().position(|p| p.iter().zip(b).all(|(x, z)| close(*x, *z, 1e-12))) {
                if !close(self.values[j], *y, 1e-9) {
                    return Err(Error::input(format!(
                        "duplicate balance {b:?} with conflicting values {} and {y}",
                        self.values[j]
                    )));
                }
                continue;
            }
            self.points.push(b.clone());
            self.values.push(*y);
        }
        if self.points.is_empty() {
            return Err(Error::input("fit_lower needs at least one point"));
        }
        if self.points.len() == first_new {
            return Ok(());
        }
        let (basis, origin) = affine_basis(&self.points);
        let rank = basis.len();
        let full = rank == self.k;
        if rank != self.rank || !full || first_new == 0 {
            self.rank = rank;
            self.facets = hull_facets(&self.points, &self.values, &basis, &origin, 0);
        } else {
            let y = &self.values;
            let pts = &self.points;
            self.facets.retain(|f| pts[first_new..].iter().zip(&y[first_new..]).all(|(p, v)| f.value(p) >= v - 1e-9 * (1.0 + v.abs())));
            let fresh = hull_facets(pts, y, &basis, &origin, first_new);
            self.facets.extend(fresh);
            self.facets = dedupe_pieces(std::mem::take(&mut self.facets));
        }
        Ok(())
    }

    pub(crate) fn to_fn(&self, domain: &[f64]) -> PwlConcaveFn {
        PwlConcaveFn { pieces: self.facets.clone(), domain: domain.to_vec() }
    }
}

/// Orthonormal basis of the affine span of `points`, or the unit vectors when the
/// span is the whole space, together with the origin used for reduced coordinates.
fn affine_basis(points: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = points[0].len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in &points[1..] {
        let mut v: Vec<f64> = p.iter().zip(&points[0]).map(|(a, b)| a - b).collect();
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for e in &basis {
            let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(e).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 * (1.0 + scale) {
            basis.push(v.into_iter().map(|a| a / norm).collect());
            if basis.len() == k {
                break;
            }
        }
    }
    if basis.len() == k {
        let unit = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        return (unit, vec![0.0; k]);
    }
    (basis, points[0].clone())
}

/// Facets spanned by subsets that contain at least one point with index `>= first_new`.
fn hull_facets(
    points: &[Vec<f64>],
    values: &[f64],
    basis: &[Vec<f64>],
    origin: &[f64],
    first_new: usize,
) -> Vec<AffinePiece> {
    let k = origin.len();
    let r = basis.len();
    let reduced: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            basis
                .iter()
                .map(|e| e.iter().zip(p.iter().zip(origin)).map(|(a, (x, o))| a * (x - o)).sum())
                .collect()
        })
        .collect();
    let to_piece = |a_red: &[f64], c_red: f64| {
        let mut slope = vec![0.0; k];
        for (e, a) in basis.iter().zip(a_red) {
            slope.iter_mut().zip(e).for_each(|(s, x)| *s += a * x);
        }
        let intercept = c_red - slope.iter().zip(origin).map(|(a, o)| a * o).sum::<f64>();
        AffinePiece { slope, intercept }
    };
    if r == 0 {
        return vec![to_piece(&[], values[0])];
    }
    let n = points.len();
    let mut out: Vec<AffinePiece> = Vec::new();
    let mut consider = |combo: &[usize]| {
        let m = DMatrix::from_fn(r + 1, r + 1, |row, c| if c < r { reduced[combo[row]][c] } else { 1.0 });
        let rhs = DVector::from_iterator(r + 1, combo.iter().map(|j| values[*j]));
        let Some(sol) = m.lu().solve(&rhs) else { return };
        if sol.iter().any(|x| !x.is_finite() || x.abs() > 1e12) {
            return;
        }
        let plane = |q: &[f64]| sol[r] + q.iter().zip(sol.iter()).map(|(a, b)| a * b).sum::<f64>();
        // reject near-singular subsets that do not actually interpolate their points
        if combo.iter().any(|j| !close(plane(&reduced[*j]), values[*j], 1e-9)) {
            return;
        }
        if (0..n).all(|j| plane(&reduced[j]) >= values[j] - 1e-9 * (1.0 + values[j].abs())) {
            let a_red: Vec<f64> = sol.iter().take(r).copied().collect();
            let piece = to_piece(&a_red, sol[r]);
            if !out.iter().any(|q| q.same_as(&piece)) {
                out.push(piece);
            }
        }
    };
    if r == 1 && first_new == 0 {
        // monotone chain on the single reduced coordinate
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| reduced[*a][0].total_cmp(&reduced[*b][0]));
        let mut chain: Vec<usize> = Vec::new();
        for &j in &order {
            while chain.len() >= 2 {
                let (a, b) = (chain[chain.len() - 2], chain[chain.len() - 1]);
                let (xa, xb, xj) = (reduced[a][0], reduced[b][0], reduced[j][0]);
                let cross = (xb - xa) * (values[j] - values[a]) - (values[b] - values[a]) * (xj - xa);
                if cross >= -1e-12 * (1.0 + values[j].abs()) {
                    chain.pop();
                } else {
                    break;
                }
            }
            chain.push(j);
        }
        for w in chain.windows(2) {
            consider(w);
        }
        return out;
    }
    for combo in (0..n).combinations(r + 1) {
        if *combo.last().unwrap() >= first_new {
            consider(&combo);
        }
    }
    out
}

/// One evaluator call: an upper value with a supergradient and a matching lower value.
#[derive(Clone, Debug)]
pub struct SandwichSample {
    pub upper: f64,
    pub supergradient: Vec<f64>,
    pub lower: f64,
}

#[derive(Clone, Debug)]
pub struct SandwichOptions {
    pub kappa: f64,
    /// Gap already present between the upper and lower evaluators, added to the target.
    pub inherited_gap: f64,
    pub max_samples: usize,
    pub max_rounds: usize,
    pub batch: usize,
}

impl SandwichOptions {
    pub fn new(kappa: f64) -> Self {
        Self { kappa, inherited_gap: 0.0, max_samples: 400, max_rounds: 80, batch: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SandwichFit {
    pub lower: PwlConcaveFn,
    pub upper: PwlConcaveFn,
    /// Exact maximum of `upper - lower` over the box.
    pub max_gap: f64,
    pub target_gap: f64,
    pub max_value: f64,
    pub samples: usize,
    pub rounds: usize,
    pub converged: bool,
}

impl SandwichFit {
    /// Reference piece budget `(k / kappa) * log2(2 + range)` for reporting.
    pub fn piece_budget(&self, kappa: f64) -> f64 {
        let k = self.upper.active_dims().len().max(1) as f64;
        let range = self.upper.domain().iter().fold(0.0f64, |a, b| a.max(*b));
        k / kappa.max(1e-12) * (2.0 + range).log2()
    }
}

fn corners(domain: &[f64]) -> Vec<Vec<f64>> {
    let act = active_dims(domain);
    (0..1usize << act.len())
        .map(|mask| {
            let mut b = vec![0.0; domain.len()];
            for (bit, i) in act.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    b[*i] = domain[*i];
                }
            }
            b
        })
        .collect()
}

/// Samples the evaluator at the box corners and then at the vertices of the current
/// upper envelope where the gap to the lower hull is largest, until the exact gap
/// over the box is within `inherited_gap + kappa * max value`.
pub fn adaptive_sandwich<F>(mut evaluator: F, domain: &[f64], opts: &SandwichOptions) -> Result<SandwichFit>
where
    F: FnMut(&[f64]) -> Result<SandwichSample>,
{
    if !(opts.kappa > 0.0) {
        return Err(Error::input("kappa must be positive"));
    }
    let mut tangents: Vec<(Vec<f64>, f64, Vec<f64>)> = Vec::new();
    let mut hull = ConcaveHull::new(domain.len());
    let mut pending = corners(domain);
    let mut upper: Option<PwlConcaveFn> = None;
    let mut lower: Option<PwlConcaveFn> = None;
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut lows = Vec::with_capacity(pending.len());
        for b in &pending {
            let s = evaluator(b)?;
            if s.supergradient.len() != domain.len() {
                return Err(Error::input("evaluator returned a supergradient of the wrong length"));
            }
            if let (Some(u), Some(l)) = (&upper, &lower) {
                let (uv, lv) = (u.eval(b), l.eval(b));
                if s.upper > uv + 1e-7 * (1.0 + uv.abs()) {
                    return Err(Error::NonConcave(format!(
                        "upper value {} at {b:?} exceeds the tangent envelope {uv}",
                        s.upper
                    )));
                }
                if s.lower < lv - 1e-7 * (1.0 + lv.abs()) {
                    return Err(Error::NonConcave(format!(
                        "lower value {} at {b:?} is below the hull {lv}",
                        s.lower
                    )));
                }
            }
            tangents.push((b.clone(), s.upper, s.supergradient));
            lows.push((b.clone(), s.lower.min(s.upper)));
        }
        hull.insert(&lows)?;
        let full = fit_upper(&tangents, domain)?;
        for (b, v, _) in &tangents[tangents.len() - lows.len()..] {
            let env = full.eval(b);
            if env < v - 1e-7 * (1.0 + v.abs()) {
                return Err(Error::NonConcave(format!("tangent envelope {env} at {b:?} is below the sampled value {v}")));
            }
        }
        let u = full.pruned();
        let l = hull.to_fn(domain);
        let max_value = tangents.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
        let target = opts.inherited_gap + opts.kappa * max_value.max(0.0) + 1e-9;
        let mut gaps: Vec<(f64, Vec<f64>)> =
            u.vertices().into_iter().map(|(b, v)| (v - l.eval(&b), b)).collect();
        gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| {
            a.1.iter().zip(&b.1).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        }));
        if let Some((g, b)) = gaps.last() {
            if *g < -1e-7 * (1.0 + max_value.abs()) {
                return Err(Error::NonConcave(format!("lower hull exceeds the tangent envelope by {} at {b:?}", -g)));
            }
        }
        let max_gap = gaps.first().map(|g| g.0).unwrap_or(0.0).max(0.0);
        let sampled = |b: &[f64]| tangents.iter().any(|t| t.0.iter().zip(b).all(|(x, y)| close(*x, *y, 1e-12)));
        pending = gaps
            .iter()
            .filter(|(g, b)| *g > target && !sampled(b))
            .take(opts.batch)
            .map(|(_, b)| b.clone())
            .collect();
        let converged = max_gap <= target;
        let exhausted = pending.is_empty()
            || rounds >= opts.max_rounds
            || tangents.len() + pending.len() > opts.max_samples;
        if converged || exhausted {
            return Ok(SandwichFit {
                lower: l,
                upper: u,
                max_gap,
                target_gap: target,
                max_value,
                samples: tangents.len(),
                rounds,
                converged,
            });
        }
        upper = Some(u);
        lower = Some(l);
    }
}

/// Sandwich fit for a single concave evaluator returning `(value, supergradient)`.
pub fn adaptive_approximate<F>(mut evaluator: F, kappa: f64, domain: &[f64]) -> Result<(PwlConcaveFn, PwlConcaveFn)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let fit = adaptive_sandwich(
        |b| {
            let (v, g) = evaluator(b)?;
            Ok(SandwichSample { upper: v, supergradient: g, lower: v })
        },
        domain,
        &SandwichOptions::new(kappa),
    )?;
    Ok((fit.lower, fit.upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn piece(slope: &[f64], intercept: f64) -> AffinePiece {
        AffinePiece { slope: slope.to_vec(), intercept }
    }

    #[test]
    fn terminal_zero_function() {
        let f = PwlConcaveFn::zero(vec![3.0, 2.0]);
        assert_eq!(f.eval(&[1.0, 2.0]), 0.0);
        assert_eq!(f.eval(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn min_of_two_lines() {
        let f = PwlConcaveFn::new(vec![piece(&[1.0], 0.0), piece(&[0.0], 2.0)], vec![5.0]).unwrap();
        assert_eq!(f.eval(&[1.0]), 1.0);
        assert_eq!(f.eval(&[5.0]), 2.0);
        assert_eq!(f.supergradient(&[1.0]), &[1.0]);
        // tie at b = 2: lexicographically smallest slope
        assert_eq!(f.supergradient(&[2.0]), &[0.0]);
    }

    #[test]
    fn eval_matches_brute_force_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pieces: Vec<AffinePiece> = (0..5)
            .map(|_| piece(&[rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)], rng.gen_range(-1.0..3.0)))
            .collect();
        let f = PwlConcaveFn::new(pieces.clone(), vec![4.0, 4.0]).unwrap();
        for _ in 0..100 {
            let b = [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)];
            let mut m = f64::INFINITY;
            for p in &pieces {
                m = m.min(p.intercept + p.slope[0] * b[0] + p.slope[1] * b[1]);
            }
            assert!((f.eval(&b) - m).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_hull_by_hand() {
        let f = fit_lower(&[(vec![0.0], 0.0), (vec![1.0], 1.0), (vec![2.0], 1.5)], &[2.0]).unwrap();
        let mut slopes: Vec<f64> = f.pieces().iter().map(|p| p.slope[0]).collect();
        slopes.sort_by(f64::total_cmp);
        assert_eq!(slopes, vec![0.5, 1.0]);
    }

    #[test]
    fn lower_hull_single_and_collinear() {
        let f = fit_lower(&[(vec![1.0, 2.0], 3.0)], &[4.0, 4.0]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.pieces()[0].slope, vec![0.0, 0.0]);
        assert_eq!(f.eval(&[0.0, 0.0]), 3.0);

        let g = fit_lower(&[(vec![0.0], 1.0), (vec![1.0], 2.0), (vec![3.0], 4.0), (vec![2.0], 3.0)], &[3.0]).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g.pieces()[0].slope[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lower_hull_rejects_conflicts() {
        assert!(fit_lower(&[(vec![1.0], 1.0), (vec![1.0], 2.0)], &[2.0]).is_err());
        assert!(fit_lower(&[], &[2.0]).is_err());
    }

    #[test]
    fn lower_hull_degenerate_in_two_dims() {
        // points on the diagonal only
        let pts = vec![(vec![0.0, 0.0], 0.0), (vec![1.0, 1.0], 2.0), (vec![2.0, 2.0], 3.0)];
        let f = fit_lower(&pts, &[2.0, 2.0]).unwrap();
        for (b, y) in &pts {
            assert!((f.eval(b) - y).abs() < 1e-9);
        }
    }

    #[test]
    fn upper_tangents_recover_pwl_source() {
        let f = fit_upper(&[(vec![1.0], 1.0, vec![1.0]), (vec![3.0], 2.0, vec![0.0])], &[4.0]).unwrap();
        assert_eq!(f.pieces(), &[piece(&[1.0], 0.0), piece(&[0.0], 2.0)]);
        let flat = fit_upper(&[(vec![2.0], 5.0, vec![0.0])], &[4.0]).unwrap();
        assert_eq!(flat.eval(&[0.0]), 5.0);
    }

    #[test]
    fn single_tangent_bounds_concave_source() {
        let src = |b: f64| (1.0 + b).ln();
        let f = fit_upper(&[(vec![0.0], src(0.0), vec![1.0])], &[5.0]).unwrap();
        for j in 0..50 {
            let b = 5.0 * j as f64 / 49.0;
            assert!(f.eval(&[b]) >= src(b));
        }
    }

    fn secant_source() -> PwlConcaveFn {
        fit_lower(&[(vec![0.0], 0.0), (vec![0.25], 0.4), (vec![1.0], 1.0), (vec![4.0], 1.8)], &[4.0]).unwrap()
    }

    fn pwl_evaluator(f: &PwlConcaveFn) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
        |b| Ok((f.eval(b), f.supergradient(b).to_vec()))
    }

    #[test]
    fn pwl_source_recovered_exactly() {
        let src = PwlConcaveFn::new(
            vec![piece(&[2.0], 0.0), piece(&[1.0], 1.0), piece(&[0.25], 2.5)],
            vec![6.0],
        )
        .unwrap();
        for kappa in [1e-9, 0.1] {
            let (lo, up) = adaptive_approximate(pwl_evaluator(&src), kappa, &[6.0]).unwrap();
            for j in 0..=60 {
                let b = [j as f64 * 0.1];
                assert!(lo.eval(&b) <= src.eval(&b) + 1e-9);
                assert!(up.eval(&b) >= src.eval(&b) - 1e-9);
            }
            if kappa < 1e-6 {
                for j in 0..=60 {
                    let b = [j as f64 * 0.1];
                    assert!((lo.eval(&b) - up.eval(&b)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn secant_envelope_gap_on_grid() {
        let src = secant_source();
        let (lo, up) = adaptive_approximate(pwl_evaluator(&src), 0.05, &[4.0]).unwrap();
        for j in 0..1000 {
            let b = [4.0 * j as f64 / 999.0];
            let (l, u, s) = (lo.eval(&b), up.eval(&b), src.eval(&b));
            assert!(l <= s + 1e-9 && s <= u + 1e-9);
            assert!(u - l <= 0.05 * 1.8 + 1e-9);
        }
    }

    #[test]
    fn loose_kappa_uses_few_pieces() {
        let src = |b: &[f64]| (1.0 + b[0]).sqrt() + (1.0 + b[1]).sqrt();
        let grad = |b: &[f64]| vec![0.5 / (1.0 + b[0]).sqrt(), 0.5 / (1.0 + b[1]).sqrt()];
        let (lo, up) = adaptive_approximate(|b| Ok((src(b), grad(b))), 1.0, &[3.0, 3.0]).unwrap();
        assert!(up.len() <= 4);
        let max = src(&[3.0, 3.0]);
        for i in 0..=10 {
            for j in 0..=10 {
                let b = [0.3 * i as f64, 0.3 * j as f64];
                assert!(up.eval(&b) - lo.eval(&b) <= max + 1e-9);
                assert!(lo.eval(&b) <= src(&b) + 1e-9 && src(&b) <= up.eval(&b) + 1e-9);
            }
        }
    }

    #[test]
    fn two_dim_smooth_source_sandwich() {
        let src = |b: &[f64]| (1.0 + b[0] + 0.5 * b[1]).ln() + 0.3 * (1.0 + b[1]).sqrt();
        let grad = |b: &[f64]| {
            let s = 1.0 / (1.0 + b[0] + 0.5 * b[1]);
            vec![s, 0.5 * s + 0.15 / (1.0 + b[1]).sqrt()]
        };
        let fit = adaptive_sandwich(
            |b| Ok(SandwichSample { upper: src(b), supergradient: grad(b), lower: src(b) }),
            &[2.0, 3.0],
            &SandwichOptions::new(0.02),
        )
        .unwrap();
        assert!(fit.converged, "{} > {}", fit.max_gap, fit.target_gap);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let b = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..3.0)];
            let (l, u, s) = (fit.lower.eval(&b), fit.upper.eval(&b), src(&b));
            assert!(l <= s + 1e-9 && s <= u + 1e-9);
            assert!(u - l <= fit.max_gap + 1e-9);
        }
    }

    #[test]
    fn detects_non_concave_evaluator() {
        let convex = |b: &[f64]| (b[0] * b[0], vec![2.0 * b[0]]);
        let r = adaptive_approximate(|b| Ok(convex(b)), 1e-3, &[2.0]);
        assert!(matches!(r, Err(Error::NonConcave(_))));
    }

    #[test]
    fn json_shape() {
        let f = PwlConcaveFn::new(vec![piece(&[1.0, 0.0], 0.5)], vec![2.0, 1.0]).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"pieces":[{"slope":[1.0,0.0],"intercept":0.5}],"box":[2.0,1.0]}"#);
        let back: PwlConcaveFn = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<PwlConcaveFn>(r#"{"pieces":[],"box":[1.0]}"#).is_err());
    }

    fn arb_monotone_fn() -> impl Strategy<Value = PwlConcaveFn> {
        proptest::collection::vec((0.0f64..2.0, 0.0f64..2.0, -1.0f64..3.0), 1..7).prop_map(|ps| {
            PwlConcaveFn::new(ps.into_iter().map(|(a, b, c)| piece(&[a, b], c)).collect(), vec![3.0, 3.0]).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn monotone_and_concave(f in arb_monotone_fn(), b in proptest::array::uniform2(0.0f64..3.0),
                                c in proptest::array::uniform2(0.0f64..3.0), d in proptest::array::uniform2(0.0f64..1.0),
                                theta in 0.0f64..1.0) {
            let up = [b[0] + d[0], b[1] + d[1]];
            prop_assert!(f.eval(&up) >= f.eval(&b) - 1e-12);
            let mix = [theta * b[0] + (1.0 - theta) * c[0], theta * b[1] + (1.0 - theta) * c[1]];
            prop_assert!(f.eval(&mix) >= theta * f.eval(&b) + (1.0 - theta) * f.eval(&c) - 1e-9);
        }

        #[test]
        fn fitted_pair_sandwiches_source(f in arb_monotone_fn(), seed in 0u64..1000) {
            let (lo, up) = adaptive_approximate(|b| Ok((f.eval(b), f.supergradient(b).to_vec())), 0.05, &[3.0, 3.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let b = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)];
                prop_assert!(lo.eval(&b) <= f.eval(&b) + 1e-8);
                prop_assert!(f.eval(&b) <= up.eval(&b) + 1e-8);
            }
        }

        #[test]
        fn hull_vertex_max_is_exact(f in arb_monotone_fn(), g in arb_monotone_fn()) {
            // max of f - g over the box is attained at a vertex of f
            let vmax = f.vertices().iter().map(|(b, v)| v - g.eval(b)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..=30 {
                for j in 0..=30 {
                    let b = [0.1 * i as f64, 0.1 * j as f64];
                    prop_assert!(f.eval(&b) - g.eval(&b) <= vmax + 1e-9);
                }
            }
        }
    }
}
