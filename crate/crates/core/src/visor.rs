//! Visors of a marked set under a PL map, their removal triples, minimal
//! removal intervals, and coherent target selection.
//!
//! Marked indices `j` are 1-based in every public type, matching the usual
//! z_1 < ... < z_n labelling.

use std::collections::BTreeSet;

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomcore::{q, serde_q, serde_qvec, Rational};
use crate::plmap::PLMap;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VisorError {
    #[error("marked points must be strictly increasing inside [0,1]")]
    InvalidMarkedSet,
    #[error("f is not strictly increasing on the marked set (at index {0})")]
    OrderHypothesisViolated(usize),
    #[error("{0} is not a visor")]
    NotAVisor(String),
    #[error("visor {0} is not removable")]
    NotRemovable(String),
    #[error("non-removable visor at {0}")]
    NonRemovableVisor(String),
    #[error("target selection failed: {0}")]
    TargetSelectionFailed(String),
    #[error("removal search is inconsistent at {0}")]
    Inconsistent(String),
}

/// Points z_1 < ... < z_n of [0,1].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarkedSet {
    #[serde(with = "serde_qvec")]
    points: Vec<Rational>,
}

impl MarkedSet {
    pub fn new(points: Vec<Rational>) -> Result<Self, VisorError> {
        let ok_range = points.iter().all(|z| *z >= Rational::zero() && *z <= Rational::one());
        let ok_order = points.windows(2).all(|w| w[0] < w[1]);
        if !ok_range || !ok_order {
            return Err(VisorError::InvalidMarkedSet);
        }
        Ok(MarkedSet { points })
    }

    pub fn points(&self) -> &[Rational] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// z_j for 1-based j.
    pub fn z(&self, j: usize) -> &Rational {
        &self.points[j - 1]
    }

    pub fn contains(&self, x: &Rational) -> bool {
        self.points.binary_search(x).is_ok()
    }

    /// True iff some marked point lies in the open interval (a, b).
    pub fn meets_open(&self, a: &Rational, b: &Rational) -> bool {
        let k = self.points.partition_point(|z| z <= a);
        k < self.points.len() && self.points[k] < *b
    }
}

/// Checks f(z_1) < ... < f(z_n).
pub fn check_order(f: &PLMap, z: &MarkedSet) -> Result<(), VisorError> {
    let vals: Vec<Rational> = z.points().iter().map(|x| f.eval_unchecked(x)).collect();
    for i in 1..vals.len() {
        if vals[i - 1] >= vals[i] {
            return Err(VisorError::OrderHypothesisViolated(i + 1));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RemovalTriple {
    #[serde(with = "serde_q")]
    pub a: Rational,
    #[serde(with = "serde_q")]
    pub b: Rational,
    #[serde(with = "serde_q")]
    pub c: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MinimalInterval {
    #[serde(with = "serde_q")]
    pub a: Rational,
    #[serde(with = "serde_q")]
    pub b: Rational,
    #[serde(with = "serde_q")]
    pub witness_c: Rational,
}

/// A maximal interval of visors for z_j. The interval is open except that
/// it contains 0 when `lo_closed` is set (only possible for j = 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisorComponent {
    pub j: usize,
    #[serde(with = "serde_q")]
    pub lo: Rational,
    #[serde(with = "serde_q")]
    pub hi: Rational,
    pub lo_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisorMember {
    #[serde(with = "serde_q")]
    pub v: Rational,
    pub j: usize,
    pub interval: MinimalInterval,
    #[serde(with = "crate::geomcore::serde_qopt")]
    pub target: Option<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisorFamily {
    /// sorted by v
    pub members: Vec<VisorMember>,
}

/// A cell of the visor set: a single point when `lo == hi`, otherwise the
/// open interval (lo, hi).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(with = "serde_q")]
    pub lo: Rational,
    #[serde(with = "serde_q")]
    pub hi: Rational,
}

impl Cell {
    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn representative(&self) -> Rational {
        (&self.lo + &self.hi) / Rational::from_integer(2.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovabilityReport {
    pub removable: bool,
    pub failing: Vec<Cell>,
}

/// The visor index j (1-based) of v, if v is a visor.
pub fn classify_visor(f: &PLMap, z: &MarkedSet, v: &Rational) -> Result<Option<usize>, VisorError> {
    check_order(f, z)?;
    Ok(visor_index(f, z, v))
}

fn visor_index(f: &PLMap, z: &MarkedSet, v: &Rational) -> Option<usize> {
    if z.contains(v) {
        return None;
    }
    let k = z.points().partition_point(|p| p < v);
    if k == z.len() {
        return None;
    }
    (f.eval_unchecked(v) > f.eval_unchecked(z.z(k + 1))).then_some(k + 1)
}

/// Maximal intervals of visors, labelled by their z_j.
pub fn visor_components(f: &PLMap, z: &MarkedSet) -> Result<Vec<VisorComponent>, VisorError> {
    check_order(f, z)?;
    let mut out = Vec::new();
    for j in 1..=z.len() {
        let hi = z.z(j).clone();
        let lo = if j == 1 { Rational::zero() } else { z.z(j - 1).clone() };
        if lo >= hi {
            continue;
        }
        let level = f.eval_unchecked(&hi);
        let mut cuts: BTreeSet<Rational> = f.level_crossings(&level, &lo, &hi).into_iter().collect();
        cuts.insert(lo.clone());
        cuts.insert(hi.clone());
        let cuts: Vec<Rational> = cuts.into_iter().collect();
        let mut current: Option<(Rational, Rational)> = None;
        for w in cuts.windows(2) {
            let mid = (&w[0] + &w[1]) / Rational::from_integer(2.into());
            if f.eval_unchecked(&mid) > level {
                current = match current {
                    Some((s, e)) if e == w[0] && f.eval_unchecked(&e) > level => Some((s, w[1].clone())),
                    Some((s, e)) => {
                        out.push(component(f, j, &level, s, e));
                        Some((w[0].clone(), w[1].clone()))
                    }
                    None => Some((w[0].clone(), w[1].clone())),
                };
            }
        }
        if let Some((s, e)) = current {
            out.push(component(f, j, &level, s, e));
        }
    }
    Ok(out)
}

fn component(f: &PLMap, j: usize, level: &Rational, lo: Rational, hi: Rational) -> VisorComponent {
    let lo_closed = j == 1 && lo.is_zero() && f.eval_unchecked(&lo) > *level;
    VisorComponent { j, lo, hi, lo_closed }
}

/// Truth values of the five removal conditions for the triple (a,b,c)
/// against the visor v of z_j.
pub fn removal_conditions(
    f: &PLMap,
    z: &MarkedSet,
    j: usize,
    v: &Rational,
    t: &RemovalTriple,
) -> [bool; 5] {
    let (a, b, c) = (&t.a, &t.b, &t.c);
    let c1 = a < v && v < b && z.z(j) < c;
    let c2 = !z.meets_open(a, b);
    let ordered = a <= b;
    let c3 = (a.is_zero() && !z.contains(&Rational::zero()))
        || (ordered && f.eval_unchecked(a) <= f.min_on(a, b));
    let c4 = c.is_one() || (ordered && f.eval_unchecked(c) >= f.max_on(a, b));
    let c5 = b > c || f.eval_unchecked(b) <= f.min_on(b, c);
    [c1, c2, c3, c4, c5]
}

/// True iff (a,b,c) removes the visor v.
pub fn removes(f: &PLMap, z: &MarkedSet, v: &Rational, t: &RemovalTriple) -> bool {
    match visor_index(f, z, v) {
        Some(j) => removal_conditions(f, z, j, v, t).iter().all(|&c| c),
        None => false,
    }
}

/// The bounds r, s, t for the visor v of z_j.
pub fn bounds_rst(f: &PLMap, z: &MarkedSet, j: usize, v: &Rational) -> (Rational, Rational, Rational) {
    let zj = z.z(j);
    let fz = f.eval_unchecked(zj);
    let fv = f.eval_unchecked(v);
    let zero = Rational::zero();
    let one = Rational::one();
    let r = f
        .level_crossings(&fz, &zero, v)
        .into_iter()
        .filter(|x| x < v)
        .next_back()
        .unwrap_or_else(Rational::zero);
    let s = f
        .level_crossings(&fz, v, zj)
        .into_iter()
        .find(|x| x > v)
        .expect("a visor lies above its marked level");
    let t = f
        .level_crossings(&fv, zj, &one)
        .into_iter()
        .find(|x| x > zj)
        .unwrap_or_else(Rational::one);
    (r, s, t)
}

/// Last point c* >= b such that f stays at or above f(b) on [b, c*].
fn stay_above_end(f: &PLMap, b: &Rational) -> Rational {
    let fb = f.eval_unchecked(b);
    for w in f.breakpoints().windows(2) {
        let (x0, y0) = &w[0];
        let (x1, y1) = &w[1];
        if x1 <= b {
            continue;
        }
        if *y1 < fb {
            let start = if x0 > b { x0.clone() } else { b.clone() };
            let ys = f.eval_unchecked(&start);
            if ys <= fb {
                return start;
            }
            return x0 + (&fb - y0) * (x1 - x0) / (y1 - y0);
        }
    }
    Rational::one()
}

/// Least and greatest c completing (a, b) to a removal triple for a visor of
/// z_j, assuming conditions (2) and (3) already hold.
fn c_range(f: &PLMap, z: &MarkedSet, j: usize, a: &Rational, b: &Rational) -> Option<(Rational, Rational)> {
    let zj = z.z(j);
    let cstar = stay_above_end(f, b);
    if cstar <= *zj {
        return None;
    }
    let m = f.max_on(a, b);
    let hits: Vec<Rational> = f
        .level_crossings(&m, zj, &cstar)
        .into_iter()
        .filter(|x| x > zj)
        .collect();
    let one_ok = cstar.is_one();
    let lo = hits.first().cloned().or_else(|| one_ok.then(Rational::one))?;
    let hi = if one_ok {
        Rational::one()
    } else if f.eval_unchecked(&cstar) >= m {
        cstar
    } else {
        hits.last().cloned()?
    };
    Some((lo, hi))
}

fn ab_ok(f: &PLMap, z: &MarkedSet, v: &Rational, a: &Rational, b: &Rational) -> bool {
    if !(a < v && v < b) || z.meets_open(a, b) {
        return false;
    }
    (a.is_zero() && !z.contains(&Rational::zero())) || f.eval_unchecked(a) <= f.min_on(a, b)
}

/// Order in which candidate endpoints are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchOrder {
    /// b from the left, a from the right, stopping at the first valid pair
    Inward,
    /// b from the right, a from the left, scanning every pair
    Outward,
}

struct Candidates {
    b: Vec<Rational>,
    /// shared left-endpoint pool; each b adds crossings at its own level
    a_pool: BTreeSet<Rational>,
    r: Rational,
}

impl Candidates {
    fn a_for(&self, f: &PLMap, v: &Rational, b: &Rational) -> Vec<Rational> {
        let mut pool = self.a_pool.clone();
        pool.extend(f.level_crossings(&f.eval_unchecked(b), &Rational::zero(), v));
        pool.into_iter().filter(|x| *x <= self.r && x < v).collect()
    }
}

fn candidates(f: &PLMap, z: &MarkedSet, j: usize, v: &Rational) -> Candidates {
    let (r, s, _t) = bounds_rst(f, z, j, v);
    let zj = z.z(j).clone();
    let zero = Rational::zero();
    let one = Rational::one();
    let mut pool: BTreeSet<Rational> = f.breakpoint_xs().cloned().collect();
    pool.extend(z.points().iter().cloned());
    pool.insert(zero.clone());
    pool.insert(one.clone());
    for level in [f.eval_unchecked(&zj), f.eval_unchecked(v)] {
        pool.extend(f.level_crossings(&level, &zero, &one));
    }
    pool.insert(r.clone());
    pool.insert(s.clone());
    let b = pool.iter().filter(|x| **x >= s && *x > v && **x <= zj).cloned().collect();
    Candidates { b, a_pool: pool, r }
}

/// All candidate pairs (a, b) that extend to a removal triple, with their
/// greatest c.
pub fn valid_pairs(f: &PLMap, z: &MarkedSet, v: &Rational) -> Result<Vec<RemovalTriple>, VisorError> {
    check_order(f, z)?;
    let j = visor_index(f, z, v).ok_or_else(|| VisorError::NotAVisor(v.to_string()))?;
    let cand = candidates(f, z, j, v);
    let mut out = Vec::new();
    for b in &cand.b {
        for a in cand.a_for(f, v, b) {
            if ab_ok(f, z, v, &a, b) {
                if let Some((_, c)) = c_range(f, z, j, &a, b) {
                    out.push(RemovalTriple { a, b: b.clone(), c });
                }
            }
        }
    }
    Ok(out)
}

fn minimal_with_order(
    f: &PLMap,
    z: &MarkedSet,
    j: usize,
    v: &Rational,
    order: SearchOrder,
) -> Result<Option<MinimalInterval>, VisorError> {
    let cand = candidates(f, z, j, v);
    let zj = z.z(j);
    let (a, b) = match order {
        SearchOrder::Inward => {
            // b ascending, a descending: by directedness the first valid pair
            // is the minimal one
            let mut found = None;
            'outer: for b in &cand.b {
                if stay_above_end(f, b) <= *zj {
                    continue;
                }
                for a in cand.a_for(f, v, b).iter().rev() {
                    if ab_ok(f, z, v, a, b) && c_range(f, z, j, a, b).is_some() {
                        found = Some((a.clone(), b.clone()));
                        break 'outer;
                    }
                }
            }
            match found {
                Some(p) => p,
                None => return Ok(None),
            }
        }
        SearchOrder::Outward => {
            let mut best_a: Option<Rational> = None;
            let mut best_b: Option<Rational> = None;
            for b in cand.b.iter().rev() {
                for a in &cand.a_for(f, v, b) {
                    if ab_ok(f, z, v, a, b) && c_range(f, z, j, a, b).is_some() {
                        if best_a.as_ref().map_or(true, |x| a > x) {
                            best_a = Some(a.clone());
                        }
                        if best_b.as_ref().map_or(true, |x| b < x) {
                            best_b = Some(b.clone());
                        }
                    }
                }
            }
            match (best_a, best_b) {
                (Some(a), Some(b)) => (a, b),
                _ => return Ok(None),
            }
        }
    };
    if !ab_ok(f, z, v, &a, &b) {
        return Err(VisorError::Inconsistent(v.to_string()));
    }
    let (lo, _) = c_range(f, z, j, &a, &b).ok_or_else(|| VisorError::Inconsistent(v.to_string()))?;
    Ok(Some(MinimalInterval { a, b, witness_c: lo }))
}

/// Minimal removal interval using a specific candidate visiting order.
pub fn minimal_removal_interval_ordered(
    f: &PLMap,
    z: &MarkedSet,
    v: &Rational,
    order: SearchOrder,
) -> Result<MinimalInterval, VisorError> {
    check_order(f, z)?;
    let j = visor_index(f, z, v).ok_or_else(|| VisorError::NotRemovable(v.to_string()))?;
    minimal_with_order(f, z, j, v, order)?.ok_or_else(|| VisorError::NotRemovable(v.to_string()))
}

/// The unique minimal [a_v, b_v] together with the least c completing it.
pub fn minimal_removal_interval(f: &PLMap, z: &MarkedSet, v: &Rational) -> Result<MinimalInterval, VisorError> {
    minimal_removal_interval_ordered(f, z, v, SearchOrder::Inward)
}

/// A removal triple for v, or None when v is not removable. The triple
/// returned is the minimal interval with its greatest target.
pub fn removal_search(f: &PLMap, z: &MarkedSet, v: &Rational) -> Result<Option<RemovalTriple>, VisorError> {
    check_order(f, z)?;
    let j = visor_index(f, z, v).ok_or_else(|| VisorError::NotAVisor(v.to_string()))?;
    let Some(mi) = minimal_with_order(f, z, j, v, SearchOrder::Inward)? else {
        return Ok(None);
    };
    let (_, c) = c_range(f, z, j, &mi.a, &mi.b).ok_or_else(|| VisorError::Inconsistent(v.to_string()))?;
    Ok(Some(RemovalTriple { a: mi.a, b: mi.b, c }))
}

/// Cells of the visor set on which removability and the minimal interval are
/// constant: every critical abscissa inside the visor set, and every open
/// gap between consecutive critical abscissae that consists of visors.
pub fn visor_cells(f: &PLMap, z: &MarkedSet) -> Result<Vec<Cell>, VisorError> {
    let comps = visor_components(f, z)?;
    let zero = Rational::zero();
    let one = Rational::one();
    let mut crit: BTreeSet<Rational> = f.breakpoint_xs().cloned().collect();
    crit.extend(z.points().iter().cloned());
    crit.insert(zero.clone());
    crit.insert(one.clone());
    for p in z.points() {
        crit.extend(f.level_crossings(&f.eval_unchecked(p), &zero, &one));
    }
    let mut cells = Vec::new();
    for c in &comps {
        let mut pts: Vec<Rational> = crit.iter().filter(|x| **x > c.lo && **x < c.hi).cloned().collect();
        pts.insert(0, c.lo.clone());
        pts.push(c.hi.clone());
        if c.lo_closed {
            cells.push(Cell { lo: c.lo.clone(), hi: c.lo.clone() });
        }
        for (i, w) in pts.windows(2).enumerate() {
            if i > 0 {
                cells.push(Cell { lo: w[0].clone(), hi: w[0].clone() });
            }
            cells.push(Cell { lo: w[0].clone(), hi: w[1].clone() });
        }
    }
    Ok(cells)
}

/// Decides whether every visor is removable, testing one representative per
/// cell of [`visor_cells`].
pub fn all_visors_removable(f: &PLMap, z: &MarkedSet) -> Result<RemovabilityReport, VisorError> {
    let mut failing = Vec::new();
    for cell in visor_cells(f, z)? {
        if removal_search(f, z, &cell.representative())?.is_none() {
            failing.push(cell);
        }
    }
    Ok(RemovabilityReport { removable: failing.is_empty(), failing })
}

/// Leftmost maximizer of f on [a, b].
fn argmax_on(f: &PLMap, a: &Rational, b: &Rational) -> Rational {
    let m = f.max_on(a, b);
    f.level_crossings(&m, a, b).into_iter().next().expect("maximum is attained")
}

/// One visor per distinct minimal interval, each a maximizer of f on its
/// interval. Targets are left unset.
pub fn choose_visor_family(f: &PLMap, z: &MarkedSet) -> Result<VisorFamily, VisorError> {
    let mut seen: BTreeSet<(Rational, Rational)> = BTreeSet::new();
    let mut members = Vec::new();
    for cell in visor_cells(f, z)? {
        let rep = cell.representative();
        let mi = match minimal_removal_interval(f, z, &rep) {
            Ok(mi) => mi,
            Err(VisorError::NotRemovable(_)) => return Err(VisorError::NonRemovableVisor(rep.to_string())),
            Err(e) => return Err(e),
        };
        if !seen.insert((mi.a.clone(), mi.b.clone())) {
            continue;
        }
        let v = argmax_on(f, &mi.a, &mi.b);
        let j = visor_index(f, z, &v).ok_or_else(|| VisorError::Inconsistent(v.to_string()))?;
        members.push(VisorMember { v, j, interval: mi, target: None });
    }
    members.sort_by(|x, y| x.v.cmp(&y.v));
    Ok(VisorFamily { members })
}

/// The greatest c such that (a_v, b_v, c) removes v.
pub fn max_target(f: &PLMap, z: &MarkedSet, v: &Rational, interval: &MinimalInterval) -> Result<Rational, VisorError> {
    check_order(f, z)?;
    let j = visor_index(f, z, v).ok_or_else(|| VisorError::NotRemovable(v.to_string()))?;
    if !ab_ok(f, z, v, &interval.a, &interval.b) {
        return Err(VisorError::NotRemovable(v.to_string()));
    }
    let (_, c) = c_range(f, z, j, &interval.a, &interval.b).ok_or_else(|| VisorError::NotRemovable(v.to_string()))?;
    let fv = f.eval_unchecked(v);
    for zp in z.points() {
        if fv > f.eval_unchecked(zp) && !clears(&c, zp) {
            return Err(VisorError::Inconsistent(format!("target {c} does not clear {zp}")));
        }
    }
    Ok(c)
}

/// True iff c is a target for the member: it completes the minimal interval
/// to a removal triple and lies beyond every marked point below f(v).
pub fn is_target(f: &PLMap, z: &MarkedSet, m: &VisorMember, c: &Rational) -> bool {
    let t = RemovalTriple { a: m.interval.a.clone(), b: m.interval.b.clone(), c: c.clone() };
    if !removes(f, z, &m.v, &t) {
        return false;
    }
    let fv = f.eval_unchecked(&m.v);
    z.points().iter().all(|zp| fv <= f.eval_unchecked(zp) || clears(c, zp))
}

/// c lies beyond the marked point zp. The right end c = 1 counts as clearing
/// every marked point, including zp = 1.
fn clears(c: &Rational, zp: &Rational) -> bool {
    c > zp || c.is_one()
}

/// u < v implies c_u < a_v or c_v <= c_u.
pub fn targets_coherent(family: &VisorFamily) -> bool {
    let ms = &family.members;
    for (i, u) in ms.iter().enumerate() {
        for v in &ms[i + 1..] {
            let (Some(cu), Some(cv)) = (&u.target, &v.target) else {
                return false;
            };
            if !(cu < &v.interval.a || cv <= cu) {
                return false;
            }
        }
    }
    true
}

/// Chooses targets in order of decreasing f(v) (ties by increasing v), so
/// that the coherence condition holds.
pub fn assign_targets(f: &PLMap, z: &MarkedSet, family: &VisorFamily) -> Result<VisorFamily, VisorError> {
    let mut members = family.members.clone();
    let mut order: Vec<usize> = (0..members.len()).collect();
    let fv: Vec<Rational> = members.iter().map(|m| f.eval_unchecked(&m.v)).collect();
    order.sort_by(|&x, &y| fv[y].cmp(&fv[x]).then(members[x].v.cmp(&members[y].v)));
    let mut done: Vec<usize> = Vec::new();
    for &k in &order {
        let best = max_target(f, z, &members[k].v, &members[k].interval)?;
        let left = done.iter().copied().filter(|&u| members[u].v < members[k].v).max_by(|&x, &y| members[x].v.cmp(&members[y].v));
        let right = done.iter().copied().filter(|&u| members[u].v > members[k].v).min_by(|&x, &y| members[x].v.cmp(&members[y].v));
        let case1 = left.filter(|&u0| {
            let cu0 = members[u0].target.as_ref().unwrap();
            done.iter().all(|&w| members[w].v <= members[k].v || cu0 < &members[w].interval.a)
        });
        let chosen = if let Some(u0) = case1 {
            let cu0 = members[u0].target.clone().unwrap();
            if best <= cu0 {
                best
            } else {
                cu0
            }
        } else if let Some(v0) = right {
            let av0 = &members[v0].interval.a;
            if best < *av0 {
                best
            } else {
                members[v0].target.clone().unwrap()
            }
        } else {
            best
        };
        if !is_target(f, z, &members[k], &chosen) {
            return Err(VisorError::TargetSelectionFailed(format!(
                "{} is not a target for the visor at {}",
                chosen, members[k].v
            )));
        }
        members[k].target = Some(chosen);
        done.push(k);
    }
    let out = VisorFamily { members };
    if !targets_coherent(&out) {
        return Err(VisorError::TargetSelectionFailed("coherence check failed".into()));
    }
    Ok(out)
}

/// The map with breakpoints (0,1/2), (1/4,1), (1/2,1/4), (5/8,3/8), (3/4,0),
/// (1,1), whose visors for {1/2} cannot be removed.
pub fn blocked_example() -> PLMap {
    PLMap::new(vec![
        (q(0, 1), q(1, 2)),
        (q(1, 4), q(1, 1)),
        (q(1, 2), q(1, 4)),
        (q(5, 8), q(3, 8)),
        (q(3, 4), q(0, 1)),
        (q(1, 1), q(1, 1)),
    ])
    .expect("valid map")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomcore::qi;

    fn zs(v: &[(i64, i64)]) -> MarkedSet {
        MarkedSet::new(v.iter().map(|&(a, b)| q(a, b)).collect()).unwrap()
    }

    #[test]
    fn classify_examples() {
        let t4 = PLMap::tent(4);
        assert_eq!(classify_visor(&t4, &zs(&[(5, 8)]), &q(1, 4)), Ok(Some(1)));
        assert_eq!(classify_visor(&t4, &zs(&[(5, 8)]), &q(1, 16)), Ok(None));
        assert_eq!(classify_visor(&PLMap::identity(), &zs(&[(1, 2)]), &q(1, 4)), Ok(None));
        // f(1/4) = 1 > f(3/4) = 1 fails, so the order hypothesis is violated
        assert_eq!(
            classify_visor(&t4, &zs(&[(1, 4), (3, 4)]), &q(1, 8)),
            Err(VisorError::OrderHypothesisViolated(2))
        );
    }

    #[test]
    fn component_examples() {
        let c = visor_components(&PLMap::tent(4), &zs(&[(5, 8)])).unwrap();
        assert_eq!(c, vec![VisorComponent { j: 1, lo: q(1, 8), hi: q(3, 8), lo_closed: false }]);
        assert!(visor_components(&PLMap::identity(), &zs(&[(1, 2)])).unwrap().is_empty());
        let c = visor_components(&blocked_example(), &zs(&[(1, 2)])).unwrap();
        assert_eq!(c, vec![VisorComponent { j: 1, lo: qi(0), hi: q(1, 2), lo_closed: true }]);
    }

    #[test]
    fn removal_examples() {
        let t4 = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let t = removal_search(&t4, &z, &q(1, 4)).unwrap().unwrap();
        assert!(removes(&t4, &z, &q(1, 4), &t));
        let given = RemovalTriple { a: qi(0), b: q(1, 2), c: q(3, 4) };
        assert!(removes(&t4, &z, &q(1, 4), &given));
        assert_eq!(removal_search(&blocked_example(), &zs(&[(1, 2)]), &q(1, 4)), Ok(None));
        assert!(matches!(removal_search(&t4, &z, &q(1, 16)), Err(VisorError::NotAVisor(_))));
    }

    #[test]
    fn tooth_flanked_by_zeros() {
        // v = 5/8 sits in the tooth [1/2, 3/4] of tent(8) with no marked point
        let t8 = PLMap::tent(8);
        let z = zs(&[(13, 16)]);
        let mi = minimal_removal_interval(&t8, &z, &q(5, 8)).unwrap();
        assert_eq!((mi.a, mi.b), (q(1, 2), q(3, 4)));
        let t = RemovalTriple { a: q(1, 2), b: q(3, 4), c: qi(1) };
        assert!(removes(&t8, &z, &q(5, 8), &t));
    }

    #[test]
    fn minimal_interval_example() {
        let t4 = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let mi = minimal_removal_interval(&t4, &z, &q(1, 4)).unwrap();
        assert_eq!(mi, MinimalInterval { a: qi(0), b: q(1, 2), witness_c: q(3, 4) });
        assert_eq!(max_target(&t4, &z, &q(1, 4), &mi), Ok(qi(1)));
        assert!(matches!(
            minimal_removal_interval(&blocked_example(), &zs(&[(1, 2)]), &q(1, 4)),
            Err(VisorError::NotRemovable(_))
        ));
    }

    #[test]
    fn max_target_before_dip() {
        // after b = 1/2 the map climbs to 1 at 5/8, then dips below f(b) = 1/8
        // after 7/8; the last point at height >= f(v) = 3/4 is 11/16 + ...
        let f = PLMap::new(vec![
            (qi(0), qi(0)),
            (q(1, 4), q(3, 4)),
            (q(1, 2), q(1, 8)),
            (q(5, 8), qi(1)),
            (q(3, 4), q(1, 4)),
            (q(7, 8), q(1, 8)),
            (qi(1), qi(0)),
        ])
        .unwrap();
        let z = zs(&[(9, 16)]);
        let v = q(1, 4);
        assert_eq!(classify_visor(&f, &z, &v), Ok(Some(1)));
        let mi = minimal_removal_interval(&f, &z, &v).unwrap();
        // f(1/24) = 1/8 = f(1/2), so the left end moves off 0
        assert_eq!((mi.a.clone(), mi.b.clone()), (q(1, 24), q(1, 2)));
        // f = 3/4 on the falling branch from (5/8,1) to (3/4,1/4): x = 5/8 + (1/4)/(3/4)/8
        assert_eq!(max_target(&f, &z, &v, &mi), Ok(q(5, 8) + q(1, 24)));
    }

    #[test]
    fn all_removable_examples() {
        let r = all_visors_removable(&PLMap::tent(4), &zs(&[(5, 8)])).unwrap();
        assert!(r.removable);
        let r = all_visors_removable(&blocked_example(), &zs(&[(1, 2)])).unwrap();
        assert!(!r.removable);
        assert!(r.failing.iter().all(|c| c.lo >= qi(0) && c.hi <= q(1, 2)));
        assert!(r.failing.iter().any(|c| c.is_point() && c.lo == qi(0)));
        assert!(all_visors_removable(&PLMap::identity(), &zs(&[(1, 2)])).unwrap().removable);
    }

    #[test]
    fn family_examples() {
        let t4 = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let fam = choose_visor_family(&t4, &z).unwrap();
        assert_eq!(fam.members.len(), 1);
        assert_eq!(fam.members[0].v, q(1, 4));
        assert_eq!((fam.members[0].interval.a.clone(), fam.members[0].interval.b.clone()), (qi(0), q(1, 2)));
        let fam = assign_targets(&t4, &z, &fam).unwrap();
        assert_eq!(fam.members[0].target, Some(qi(1)));
        assert!(choose_visor_family(&PLMap::identity(), &zs(&[(1, 2)])).unwrap().members.is_empty());
        assert!(matches!(
            choose_visor_family(&blocked_example(), &zs(&[(1, 2)])),
            Err(VisorError::NonRemovableVisor(_))
        ));
    }

    #[test]
    fn two_member_targets_are_coherent() {
        // two teeth left of the marked point; the left one is taller
        let f = PLMap::new(vec![
            (qi(0), qi(0)),
            (q(1, 8), qi(1)),
            (q(1, 4), qi(0)),
            (q(3, 8), q(3, 4)),
            (q(1, 2), qi(0)),
            (q(3, 4), q(1, 2)),
            (q(7, 8), q(7, 8)),
            (qi(1), q(1, 4)),
        ])
        .unwrap();
        let z = zs(&[(3, 4)]);
        let fam = assign_targets(&f, &z, &choose_visor_family(&f, &z).unwrap()).unwrap();
        assert_eq!(fam.members.len(), 2);
        let (u, v) = (&fam.members[0], &fam.members[1]);
        assert_eq!(u.v, q(1, 8));
        assert_eq!(v.v, q(3, 8));
        let (cu, cv) = (u.target.clone().unwrap(), v.target.clone().unwrap());
        assert!(cu >= v.interval.a);
        assert!(cv <= cu);
        assert!(targets_coherent(&fam));
    }
}
