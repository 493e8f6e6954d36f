//! Factoring T_m through T_{2n-1}: sawtooth pattern placement, fixed points
//! on increasing branches, and the map s with T_{2n-1} ∘ s = T_m.

use num_bigint::BigInt;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomcore::{q, qi, serde_q, serde_qvec, Rational};
use crate::plmap::{Branch, PLMap};
use crate::visor::{all_visors_removable, MarkedSet, RemovabilityReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FactorError {
    #[error("T_{m} has {available} teeth, {needed} are needed")]
    InsufficientTeeth { m: u64, needed: u64, available: u64 },
    #[error("no fixed point of the map on the increasing branch [{0}, {1}]")]
    NoFixedPointOnBranch(String, String),
    #[error("hypothesis violated: {clause} (index {index})")]
    HypothesisViolated { clause: String, index: usize },
    #[error("constructed factor fails its check: {0}")]
    InvariantFailed(String),
}

fn violated(clause: impl Into<String>, index: usize) -> FactorError {
    FactorError::HypothesisViolated { clause: clause.into(), index }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternCase {
    /// 2i-1 full teeth, s is a single tooth on the pattern
    A,
    /// n - 1/2 teeth ending at 1, s is linear onto [0,1] on the pattern
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    #[serde(with = "serde_q")]
    pub lo: Rational,
    #[serde(with = "serde_q")]
    pub hi: Rational,
    /// number of linear pieces of T_m on the pattern (twice the teeth)
    pub pieces: u64,
    pub case: PatternCase,
}

impl Pattern {
    fn piece_width(&self) -> Rational {
        (&self.hi - &self.lo) / Rational::from_integer(BigInt::from(self.pieces))
    }

    /// First half of the i-th tooth (i is 1-based).
    pub fn rising_half(&self, i: u64) -> (Rational, Rational) {
        let w = self.piece_width();
        let k = |j: u64| &self.lo + &w * Rational::from_integer(BigInt::from(j));
        (k(2 * i - 2), k(2 * i - 1))
    }

    /// The half-tooth [hi - w, hi] of a pattern with an odd piece count.
    pub fn half_tooth(&self) -> (Rational, Rational) {
        (&self.hi - self.piece_width(), self.hi.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternPlan {
    pub m: u64,
    #[serde(with = "serde_qvec")]
    pub a: Vec<Rational>,
    pub patterns: Vec<Pattern>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorInstance {
    pub m: u64,
    pub n: usize,
    pub z: MarkedSet,
    pub plan: PatternPlan,
    pub s: PLMap,
}

impl FactorInstance {
    /// s(z_i) for every marked point.
    pub fn images(&self) -> Vec<Rational> {
        self.z.points().iter().map(|x| self.s.eval_unchecked(x)).collect()
    }
}

/// Leftmost packing of patterns with 1, 3, ..., 2n-1 teeth, after skipping
/// the first tooth of T_m.
pub fn choose_patterns(m: u64, n: usize) -> Result<PatternPlan, FactorError> {
    let n64 = n as u64;
    let needed = 1 + n64 * n64;
    let available = m / 2;
    if n == 0 || needed > available {
        return Err(FactorError::InsufficientTeeth { m, needed, available });
    }
    let mq = |j: u64| Rational::new(BigInt::from(j), BigInt::from(m));
    let mut pos = 2u64;
    let mut a = vec![mq(pos)];
    let mut patterns = Vec::with_capacity(n);
    for i in 1..=n64 {
        let pieces = 2 * (2 * i - 1);
        let lo = mq(pos);
        pos += pieces;
        let hi = mq(pos);
        a.push(hi.clone());
        patterns.push(Pattern { lo, hi, pieces, case: PatternCase::A });
    }
    Ok(PatternPlan { m, a, patterns })
}

/// The fixed point of f on [lo, hi], where f must be linear and increasing.
pub fn fixed_point_on_branch(f: &PLMap, lo: &Rational, hi: &Rational) -> Result<Rational, FactorError> {
    let none = || FactorError::NoFixedPointOnBranch(lo.to_string(), hi.to_string());
    if lo >= hi {
        return Err(none());
    }
    if f.breakpoint_xs().any(|x| x > lo && x < hi) {
        return Err(none());
    }
    let (ylo, yhi) = (f.eval_unchecked(lo), f.eval_unchecked(hi));
    if ylo >= yhi {
        return Err(none());
    }
    let slope = (&yhi - &ylo) / (hi - lo);
    if slope.is_one() {
        // identity on the branch: every point is fixed, report the left end
        return if ylo == *lo { Ok(lo.clone()) } else { Err(none()) };
    }
    // ylo + slope (x - lo) = x
    let x = (&ylo - &slope * lo) / (Rational::one() - &slope);
    if &x >= lo && &x <= hi {
        Ok(x)
    } else {
        Err(none())
    }
}

/// Fixed point of T_m on an increasing branch.
pub fn branch_fixed_point(m: u64, lo: &Rational, hi: &Rational) -> Result<Rational, FactorError> {
    fixed_point_on_branch(&PLMap::tent(m), lo, hi)
}

fn check_plan(m: u64, z: &MarkedSet, plan: &PatternPlan) -> Result<(), FactorError> {
    let n = z.len();
    if n == 0 || plan.patterns.len() != n || plan.m != m {
        return Err(violated("one pattern per marked point", n));
    }
    let tm = PLMap::tent(m);
    for (k, p) in plan.patterns.iter().enumerate() {
        let i = k as u64 + 1;
        let info = tm
            .is_sawtooth(&p.lo, &p.hi)
            .ok_or_else(|| violated("pattern is a sawtooth pattern of T_m", k + 1))?;
        if info.pieces != p.pieces || !info.height.is_one() {
            return Err(violated("pattern piece count and height 1", k + 1));
        }
        match p.case {
            PatternCase::A => {
                if p.pieces != 2 * (2 * i - 1) {
                    return Err(violated("pattern i has 2i-1 teeth", k + 1));
                }
                let (lo, hi) = p.rising_half(i);
                let zi = z.z(k + 1);
                if !(zi > &lo && zi < &hi) {
                    return Err(violated("z_i in the first half of the i-th tooth of P_i", k + 1));
                }
            }
            PatternCase::B => {
                if k + 1 != n || !p.hi.is_one() || p.pieces != 2 * n as u64 - 1 {
                    return Err(violated("half-tooth pattern is the last one, ends at 1, has n - 1/2 teeth", k + 1));
                }
                let (lo, hi) = p.half_tooth();
                let zi = z.z(k + 1);
                if !(zi > &lo && zi <= &hi) {
                    return Err(violated("z_n in the half-tooth of P_n", k + 1));
                }
            }
        }
    }
    for w in plan.patterns.windows(2) {
        if w[0].hi > w[1].lo {
            return Err(violated("patterns have disjoint interiors, left to right", 0));
        }
    }
    Ok(())
}

/// Builds s = s_{m,Z} and verifies T_{2n-1} ∘ s = T_m together with the
/// position and branch properties at every z_i.
pub fn build_s(m: u64, z: &MarkedSet, plan: &PatternPlan) -> Result<FactorInstance, FactorError> {
    check_plan(m, z, plan)?;
    let n = z.len();
    let odd = 2 * n as i64 - 1;
    let base = Rational::from_integer(BigInt::from(odd));
    let inside = |x: &Rational| plan.patterns.iter().any(|p| x > &p.lo && x < &p.hi);
    let mut pts: Vec<(Rational, Rational)> = Vec::new();
    for j in 0..=m {
        let x = Rational::new(BigInt::from(j), BigInt::from(m));
        if inside(&x) {
            continue;
        }
        let y = if j % 2 == 1 { Rational::one() / &base } else { Rational::zero() };
        pts.push((x, y));
    }
    for (k, p) in plan.patterns.iter().enumerate() {
        match p.case {
            PatternCase::A => {
                let h = q(2 * k as i64 + 1, odd);
                let mid = (&p.lo + &p.hi) / qi(2);
                pts.push((mid, h));
            }
            PatternCase::B => {
                // endpoints already present: (lo, 0) and (1, 1/(2n-1)) is
                // replaced by (1, 1)
                pts.retain(|(x, _)| !x.is_one());
                pts.push((Rational::one(), Rational::one()));
            }
        }
    }
    pts.sort_by(|a, b| a.0.cmp(&b.0));
    let s = PLMap::new(pts).map_err(|e| FactorError::InvariantFailed(e.to_string()))?;
    let inst = FactorInstance { m, n, z: z.clone(), plan: plan.clone(), s };
    verify_factor(&inst)?;
    Ok(inst)
}

/// Re-checks every property of a factor instance exactly.
pub fn verify_factor(inst: &FactorInstance) -> Result<(), FactorError> {
    let n = inst.n;
    let odd = 2 * n as u64 - 1;
    let t_odd = PLMap::tent(odd);
    if !PLMap::compose(&t_odd, &inst.s).canonical_equal(&PLMap::tent(inst.m)) {
        return Err(FactorError::InvariantFailed("T_{2n-1} ∘ s differs from T_m".into()));
    }
    for (k, img) in inst.images().iter().enumerate() {
        let i = k as i64 + 1;
        let lo = q(2 * i - 2, odd as i64);
        let hi = q(2 * i - 1, odd as i64);
        if !(img >= &lo && img <= &hi) {
            return Err(FactorError::InvariantFailed(format!("s(z_{i}) = {img} outside [{lo}, {hi}]")));
        }
        if inst.s.branch_at(inst.z.z(k + 1)).ok() != Some(Branch::Increasing) {
            return Err(FactorError::InvariantFailed(format!("s is not increasing at z_{i}")));
        }
        if t_odd.branch_at(img).ok() != Some(Branch::Increasing) {
            return Err(FactorError::InvariantFailed(format!("T_{odd} is not increasing at s(z_{i})")));
        }
    }
    Ok(())
}

/// Decides removability of every Z'-visor under s ∘ T_ell after checking
/// T_ell(z_i') = z_i with T_ell increasing at z_i'.
pub fn check_shift_removability(
    inst: &FactorInstance,
    ell: u64,
    zp: &MarkedSet,
) -> Result<RemovabilityReport, FactorError> {
    if zp.len() != inst.n {
        return Err(violated("Z' has one point per marked point", 0));
    }
    let tl = PLMap::tent(ell);
    for (k, x) in zp.points().iter().enumerate() {
        if tl.eval_unchecked(x) != *inst.z.z(k + 1) {
            return Err(violated("T_ell(z_i') = z_i", k + 1));
        }
        if tl.branch_at(x).ok() != Some(Branch::Increasing) {
            return Err(violated("T_ell increasing at z_i'", k + 1));
        }
    }
    let f = PLMap::compose(&inst.s, &tl);
    all_visors_removable(&f, zp).map_err(|e| FactorError::InvariantFailed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zs(v: &[(i64, i64)]) -> MarkedSet {
        MarkedSet::new(v.iter().map(|&(a, b)| q(a, b)).collect()).unwrap()
    }

    #[test]
    fn pattern_examples() {
        let p = choose_patterns(16, 2).unwrap();
        assert_eq!(p.a, vec![q(1, 8), q(1, 4), q(5, 8)]);
        assert_eq!((p.patterns[0].lo.clone(), p.patterns[0].hi.clone()), (q(1, 8), q(1, 4)));
        assert_eq!((p.patterns[1].lo.clone(), p.patterns[1].hi.clone()), (q(1, 4), q(5, 8)));
        assert_eq!(p.patterns[1].pieces, 6);
        let p = choose_patterns(4, 1).unwrap();
        assert_eq!((p.patterns[0].lo.clone(), p.patterns[0].hi.clone()), (q(1, 2), qi(1)));
        assert_eq!(
            choose_patterns(4, 3),
            Err(FactorError::InsufficientTeeth { m: 4, needed: 10, available: 2 })
        );
    }

    #[test]
    fn fixed_point_examples() {
        assert_eq!(branch_fixed_point(16, &q(1, 8), &q(3, 16)), Ok(q(2, 15)));
        assert_eq!(branch_fixed_point(16, &q(3, 8), &q(7, 16)), Ok(q(2, 5)));
        assert_eq!(branch_fixed_point(2, &qi(0), &q(1, 2)), Ok(qi(0)));
        // decreasing branch
        assert!(branch_fixed_point(16, &q(3, 16), &q(1, 4)).is_err());
        // spans a turning point
        assert!(branch_fixed_point(16, &q(1, 8), &q(1, 4)).is_err());
    }

    #[test]
    fn s_for_two_points() {
        let plan = choose_patterns(16, 2).unwrap();
        let inst = build_s(16, &zs(&[(2, 15), (2, 5)]), &plan).unwrap();
        assert_eq!(inst.images(), vec![q(2, 45), q(4, 5)]);
        assert!(PLMap::compose(&PLMap::tent(3), &inst.s).canonical_equal(&PLMap::tent(16)));
    }

    #[test]
    fn s_collapses_for_one_point() {
        let plan = choose_patterns(4, 1).unwrap();
        let inst = build_s(4, &zs(&[(2, 3)]), &plan).unwrap();
        assert_eq!(inst.s, PLMap::tent(4));
    }

    #[test]
    fn s_rejects_misplaced_point() {
        let plan = choose_patterns(16, 2).unwrap();
        let err = build_s(16, &zs(&[(1, 5), (2, 5)]), &plan).unwrap_err();
        assert!(matches!(err, FactorError::HypothesisViolated { index: 1, .. }));
    }

    #[test]
    fn half_tooth_case() {
        // T_9 with n = 2: P_1 = [2/9, 4/9] (1 tooth), P_2 = [2/3, 1] (3 pieces)
        let plan = PatternPlan {
            m: 9,
            a: vec![q(2, 9), q(4, 9), qi(1)],
            patterns: vec![
                Pattern { lo: q(2, 9), hi: q(4, 9), pieces: 2, case: PatternCase::A },
                Pattern { lo: q(2, 3), hi: qi(1), pieces: 3, case: PatternCase::B },
            ],
        };
        let z1 = branch_fixed_point(9, &q(2, 9), &q(1, 3)).unwrap();
        assert_eq!(z1, q(1, 4));
        for z2 in [q(17, 18), qi(1)] {
            let z = MarkedSet::new(vec![z1.clone(), z2]).unwrap();
            let inst = build_s(9, &z, &plan).unwrap();
            assert!(PLMap::compose(&PLMap::tent(3), &inst.s).canonical_equal(&PLMap::tent(9)));
        }
        // the left end of the half-tooth is a turning point of T_9
        let z = MarkedSet::new(vec![z1, q(8, 9)]).unwrap();
        assert!(matches!(build_s(9, &z, &plan), Err(FactorError::HypothesisViolated { index: 2, .. })));
    }

    #[test]
    fn shift_removability() {
        let plan = choose_patterns(16, 2).unwrap();
        let inst = build_s(16, &zs(&[(2, 15), (2, 5)]), &plan).unwrap();
        let rep = check_shift_removability(&inst, 3, &zs(&[(2, 45), (4, 5)])).unwrap();
        assert!(rep.removable);
        let plan = choose_patterns(4, 1).unwrap();
        let inst = build_s(4, &zs(&[(2, 3)]), &plan).unwrap();
        assert!(check_shift_removability(&inst, 1, &zs(&[(2, 3)])).unwrap().removable);
        // T_3(4/9) = 2/3 but on a decreasing branch
        assert!(matches!(
            check_shift_removability(&inst, 3, &zs(&[(4, 9)])),
            Err(FactorError::HypothesisViolated { .. })
        ));
    }
}
