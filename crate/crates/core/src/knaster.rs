//! Inverse systems of interval maps: threads, composant evidence from
//! extrema between coordinates, bounded index-set search, and the
//! self-map instance built from a tent factorization.

use num_traits::One;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomcore::{serde_qvec, Rational};
use crate::plmap::{Branch, PLMap};
use crate::tentfactor::{branch_fixed_point, build_s, check_shift_removability, choose_patterns, FactorError, PatternPlan};
use crate::visor::{MarkedSet, RemovabilityReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnasterError {
    #[error("coordinate {0} is not available for this thread")]
    DepthUnavailable(usize),
    #[error("thread condition fails at level {0}")]
    InconsistentThread(usize),
    #[error("bonding map f_{0} is not an open map")]
    NotOpen(usize),
    #[error("empty periodic tail")]
    EmptyTail,
    #[error("no index sets found within horizon {0}")]
    NotFoundWithinHorizon(usize),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

/// Bonding maps f_1, f_2, ...: an explicit prefix followed by a repeating
/// cycle. f_i maps coordinate i+1 onto coordinate i.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InverseSystem {
    prefix: Vec<PLMap>,
    cycle: Vec<PLMap>,
}

impl InverseSystem {
    pub fn constant(f: PLMap) -> Self {
        InverseSystem { prefix: Vec::new(), cycle: vec![f] }
    }

    pub fn periodic(prefix: Vec<PLMap>, cycle: Vec<PLMap>) -> Result<Self, KnasterError> {
        if cycle.is_empty() {
            return Err(KnasterError::EmptyTail);
        }
        Ok(InverseSystem { prefix, cycle })
    }

    /// f_i, 1-based.
    pub fn map(&self, i: usize) -> &PLMap {
        assert!(i >= 1, "bonding maps are indexed from 1");
        let i = i - 1;
        if i < self.prefix.len() {
            &self.prefix[i]
        } else {
            &self.cycle[(i - self.prefix.len()) % self.cycle.len()]
        }
    }

    /// Checks that every generated map is open.
    pub fn require_open(&self) -> Result<(), KnasterError> {
        for i in 1..=self.prefix.len() + self.cycle.len() {
            if !self.map(i).is_open_interval_map().open {
                return Err(KnasterError::NotOpen(i));
            }
        }
        Ok(())
    }

    /// f_i ∘ ... ∘ f_{k-1} as an explicit map (identity when i >= k).
    pub fn composed(&self, i: usize, k: usize) -> PLMap {
        let mut g = PLMap::identity();
        for l in i..k {
            g = PLMap::compose(&g, self.map(l));
        }
        g
    }
}

/// A point of the inverse limit given by its coordinates x_1, x_2, ...:
/// an explicit prefix, then an optional repeating cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ILPoint {
    #[serde(with = "serde_qvec")]
    prefix: Vec<Rational>,
    #[serde(with = "serde_qvec")]
    cycle: Vec<Rational>,
}

impl ILPoint {
    pub fn constant(c: Rational) -> Self {
        ILPoint { prefix: Vec::new(), cycle: vec![c] }
    }

    pub fn explicit(prefix: Vec<Rational>) -> Self {
        ILPoint { prefix, cycle: Vec::new() }
    }

    pub fn eventually_periodic(prefix: Vec<Rational>, cycle: Vec<Rational>) -> Self {
        ILPoint { prefix, cycle }
    }

    fn raw(&self, i: usize) -> Option<&Rational> {
        let i = i.checked_sub(1)?;
        if i < self.prefix.len() {
            return Some(&self.prefix[i]);
        }
        if self.cycle.is_empty() {
            return None;
        }
        Some(&self.cycle[(i - self.prefix.len()) % self.cycle.len()])
    }
}

/// x_i, checking f_i(x_{i+1}) = x_i whenever x_{i+1} is known.
pub fn coordinate(sys: &InverseSystem, p: &ILPoint, i: usize) -> Result<Rational, KnasterError> {
    let x = p.raw(i).ok_or(KnasterError::DepthUnavailable(i))?;
    if let Some(next) = p.raw(i + 1) {
        if sys.map(i).eval(next).ok().as_ref() != Some(x) {
            return Err(KnasterError::InconsistentThread(i));
        }
    }
    Ok(x.clone())
}

fn ordered(x: Rational, y: Rational) -> (Rational, Rational) {
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

/// Number of levels i <= horizon with an extremum of f_i strictly between
/// x_{i+1} and y_{i+1}.
pub fn composant_evidence(sys: &InverseSystem, p: &ILPoint, q: &ILPoint, horizon: usize) -> Result<u64, KnasterError> {
    let mut count = 0;
    for i in 1..=horizon {
        coordinate(sys, p, i)?;
        coordinate(sys, q, i)?;
        let (lo, hi) = ordered(coordinate(sys, p, i + 1)?, coordinate(sys, q, i + 1)?);
        if lo < hi && !sys.map(i).interior_extrema(&lo, &hi).is_empty() {
            count += 1;
        }
    }
    Ok(count)
}

/// Strict extrema of maps[0] ∘ ... ∘ maps[last] in (lo, hi), counted lap by
/// lap through the innermost map and capped at `cap`. Assumes no map has a
/// plateau.
fn count_extrema(maps: &[&PLMap], lo: &Rational, hi: &Rational, cap: u64) -> u64 {
    let Some((g, rest)) = maps.split_last() else {
        return 0;
    };
    if lo >= hi || cap == 0 {
        return 0;
    }
    let turns = g.interior_extrema(lo, hi);
    let mut count = turns.len() as u64;
    if rest.is_empty() || count >= cap {
        return count.min(cap);
    }
    let mut ends = Vec::with_capacity(turns.len() + 2);
    ends.push(lo.clone());
    ends.extend(turns);
    ends.push(hi.clone());
    for w in ends.windows(2) {
        let (a, b) = ordered(g.eval_unchecked(&w[0]), g.eval_unchecked(&w[1]));
        count += count_extrema(rest, &a, &b, cap - count);
        if count >= cap {
            return cap;
        }
    }
    count
}

fn maps_between(sys: &InverseSystem, i: usize, k: usize) -> Vec<&PLMap> {
    (i..k).map(|l| sys.map(l)).collect()
}

/// Extrema of f_i ∘ ... ∘ f_{k-1} strictly between x and y.
pub fn extrema_between_composed(sys: &InverseSystem, i: usize, k: usize, x: &Rational, y: &Rational) -> u64 {
    let (lo, hi) = ordered(x.clone(), y.clone());
    count_extrema(&maps_between(sys, i, k), &lo, &hi, u64::MAX)
}

/// Whether f_j ∘ ... ∘ f_{k-1} is increasing at x_k, read off the local
/// branches along the thread.
fn composite_increasing_at(sys: &InverseSystem, p: &ILPoint, j: usize, k: usize) -> Result<bool, KnasterError> {
    let mut up = true;
    for l in j..k {
        let x = coordinate(sys, p, l + 1)?;
        match sys.map(l).branch_at(&x) {
            Ok(Branch::Increasing) => {}
            Ok(Branch::Decreasing) => up = !up,
            _ => return Ok(false),
        }
    }
    Ok(up)
}

fn eval_chain(maps: &[&PLMap], x: &Rational) -> Rational {
    maps.iter().rev().fold(x.clone(), |acc, f| f.eval_unchecked(&acc))
}

struct IndexSearch<'a> {
    sys: &'a InverseSystem,
    points: &'a [ILPoint],
    horizon: usize,
    i_max: usize,
}

impl IndexSearch<'_> {
    fn coords(&self, i: usize, j: usize) -> Result<Vec<Rational>, KnasterError> {
        self.points[..i].iter().map(|p| coordinate(self.sys, p, j)).collect()
    }

    fn injective(&self, i: usize, j: usize) -> Result<bool, KnasterError> {
        let mut c = self.coords(i, j)?;
        c.sort();
        Ok(c.windows(2).all(|w| w[0] < w[1]))
    }

    /// Conditions (3) and (4) between members jj < j.
    fn pair_ok(&self, i: usize, jj: usize, j: usize) -> Result<bool, KnasterError> {
        let lo = self.coords(i, jj)?;
        let hi = self.coords(i, j)?;
        for a in 0..i {
            for b in 0..i {
                if (lo[a] < lo[b]) != (hi[a] < hi[b]) {
                    return Ok(false);
                }
            }
        }
        for p in &self.points[..i] {
            if !composite_increasing_at(self.sys, p, jj, j)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Conditions (5) and (6) for a member j after the first member j1.
    fn extrema_ok(&self, i: usize, j1: usize, j: usize) -> Result<bool, KnasterError> {
        let maps = maps_between(self.sys, j1, j);
        let mut c = self.coords(i, j)?;
        c.sort();
        let need5 = 4 * i as u64;
        for w in c.windows(2) {
            if count_extrema(&maps, &w[0], &w[1], need5) < need5 {
                return Ok(false);
            }
        }
        let need6 = 2 * i as u64;
        let one = Rational::one();
        for z in &c {
            if count_extrema(&maps, z, &one, need6) >= need6 {
                continue;
            }
            let monotone_up = count_extrema(&maps, z, &one, 1) == 0 && eval_chain(&maps, z) < eval_chain(&maps, &one);
            if !monotone_up {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn level(&self, i: usize, pool: &[usize], out: &mut Vec<Vec<usize>>) -> Result<bool, KnasterError> {
        if i > self.i_max {
            return Ok(true);
        }
        let mut cands = Vec::new();
        for &j in pool {
            if self.injective(i, j)? {
                cands.push(j);
            }
        }
        for (s, &j1) in cands.iter().enumerate() {
            let mut set = vec![j1];
            for &j in &cands[s + 1..] {
                let mut ok = self.extrema_ok(i, j1, j)?;
                for &jj in &set {
                    if !ok {
                        break;
                    }
                    ok = self.pair_ok(i, jj, j)?;
                }
                if ok {
                    set.push(j);
                }
            }
            if set.len() < 2 {
                continue;
            }
            out.push(set.clone());
            if self.level(i + 1, &set[1..], out)? {
                return Ok(true);
            }
            out.pop();
        }
        Ok(false)
    }
}

/// Prefixes J_1 ⊇ ... ⊇ J_{i_max} of the index sets, each with at least two
/// members, drawn from indices 2..=horizon.
pub fn find_index_sets(
    sys: &InverseSystem,
    points: &[ILPoint],
    i_max: usize,
    horizon: usize,
) -> Result<Vec<Vec<usize>>, KnasterError> {
    if i_max > points.len() {
        return Err(KnasterError::NotFoundWithinHorizon(horizon));
    }
    let search = IndexSearch { sys, points, horizon, i_max };
    let pool: Vec<usize> = (2..=search.horizon).collect();
    let mut out = Vec::new();
    if search.level(1, &pool, &mut out)? {
        Ok(out)
    } else {
        Err(KnasterError::NotFoundWithinHorizon(horizon))
    }
}

/// The self-map f = s ∘ T_{2n-1} with fixed points z_i' = s(z_i).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleInstance {
    pub n: usize,
    pub k: u32,
    pub m: u64,
    pub plan: PatternPlan,
    #[serde(with = "serde_qvec")]
    pub z: Vec<Rational>,
    pub s: PLMap,
    pub f: PLMap,
    #[serde(with = "serde_qvec")]
    pub zprime: Vec<Rational>,
    pub report: RemovabilityReport,
}

impl ExampleInstance {
    pub fn zprime_set(&self) -> MarkedSet {
        MarkedSet::new(self.zprime.clone()).expect("fixed points are increasing")
    }
}

/// Least k with 2^{k-1} >= 1 + n^2.
pub fn example_k(n: usize) -> u32 {
    let need = 1 + (n as u64) * (n as u64);
    let mut k = 1;
    while 1u64 << (k - 1) < need {
        k += 1;
    }
    k
}

pub fn build_example_instance(n: usize) -> Result<ExampleInstance, KnasterError> {
    let k = example_k(n.max(1));
    let m = 1u64 << k;
    let plan = choose_patterns(m, n)?;
    let mut z = Vec::with_capacity(n);
    for (idx, p) in plan.patterns.iter().enumerate() {
        let (lo, hi) = p.rising_half(idx as u64 + 1);
        z.push(branch_fixed_point(m, &lo, &hi)?);
    }
    let zs = MarkedSet::new(z.clone()).map_err(|_| KnasterError::InconsistentThread(0))?;
    let inst = build_s(m, &zs, &plan)?;
    let ell = 2 * n as u64 - 1;
    let f = PLMap::compose(&inst.s, &PLMap::tent(ell));
    let zprime = inst.images();
    for (i, x) in zprime.iter().enumerate() {
        if f.eval_unchecked(x) != *x {
            return Err(KnasterError::InconsistentThread(i + 1));
        }
    }
    let zp = MarkedSet::new(zprime.clone()).map_err(|_| KnasterError::InconsistentThread(0))?;
    let report = check_shift_removability(&inst, ell, &zp)?;
    Ok(ExampleInstance { n, k, m, plan: inst.plan, z, s: inst.s, f, zprime, report })
}
