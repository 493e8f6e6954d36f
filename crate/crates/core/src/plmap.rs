//! Piecewise-linear self-maps of [0,1] with exact rational breakpoints.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomcore::{fmt_rational, parse_rational, qi, Rational};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlError {
    #[error("point {0} lies outside [0,1]")]
    OutOfDomain(String),
    #[error("invalid breakpoints: {0}")]
    InvalidBreakpoints(String),
    #[error("malformed map document: {0}")]
    Format(String),
}

/// A continuous piecewise-linear map [0,1] -> [0,1], stored in canonical
/// form (no interior breakpoint is collinear with its neighbours).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PLMapDoc", into = "PLMapDoc")]
pub struct PLMap {
    bps: Vec<(Rational, Rational)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Increasing,
    Decreasing,
    LocalMax,
    LocalMin,
    Constant,
    /// flat on the left, rising on the right
    FlatThenUp,
    FlatThenDown,
    UpThenFlat,
    DownThenFlat,
}

impl Branch {
    fn from_slopes(left: Option<Ordering>, right: Option<Ordering>) -> Branch {
        use Ordering::*;
        match (left, right) {
            (None, None) => Branch::Constant,
            (Some(s), None) | (None, Some(s)) => match s {
                Greater => Branch::Increasing,
                Less => Branch::Decreasing,
                Equal => Branch::Constant,
            },
            (Some(l), Some(r)) => match (l, r) {
                (Greater, Greater) => Branch::Increasing,
                (Less, Less) => Branch::Decreasing,
                (Greater, Less) => Branch::LocalMax,
                (Less, Greater) => Branch::LocalMin,
                (Equal, Equal) => Branch::Constant,
                (Equal, Greater) => Branch::FlatThenUp,
                (Equal, Less) => Branch::FlatThenDown,
                (Greater, Equal) => Branch::UpThenFlat,
                (Less, Equal) => Branch::DownThenFlat,
            },
        }
    }
}

/// Sawtooth pattern data: `pieces` linear pieces (so `pieces/2` teeth).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SawtoothInfo {
    pub a: Rational,
    pub b: Rational,
    pub pieces: u64,
    pub height: Rational,
    /// a + 2j(b-a)/pieces for every full tooth, then b if a half tooth remains
    pub boundaries: Vec<Rational>,
}

impl SawtoothInfo {
    /// Number of teeth, possibly a half-integer.
    pub fn teeth(&self) -> Rational {
        Rational::new(BigInt::from(self.pieces), BigInt::from(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenMapReport {
    pub open: bool,
    pub homeomorphism: bool,
}

fn in_unit(x: &Rational) -> bool {
    !x.is_negative() && *x <= Rational::one()
}

fn slope(p: &(Rational, Rational), r: &(Rational, Rational)) -> Rational {
    (&r.1 - &p.1) / (&r.0 - &p.0)
}

impl PLMap {
    /// Validates and canonicalizes a breakpoint list.
    pub fn new(bps: Vec<(Rational, Rational)>) -> Result<Self, PlError> {
        if bps.len() < 2 {
            return Err(PlError::InvalidBreakpoints("need at least two breakpoints".into()));
        }
        if !bps[0].0.is_zero() || !bps[bps.len() - 1].0.is_one() {
            return Err(PlError::InvalidBreakpoints("x must run from 0 to 1".into()));
        }
        for w in bps.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(PlError::InvalidBreakpoints(format!(
                    "x not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some(p) = bps.iter().find(|p| !in_unit(&p.1)) {
            return Err(PlError::InvalidBreakpoints(format!("value {} outside [0,1]", p.1)));
        }
        Ok(Self::canonical(bps))
    }

    fn canonical(bps: Vec<(Rational, Rational)>) -> Self {
        let mut out: Vec<(Rational, Rational)> = Vec::with_capacity(bps.len());
        for p in bps {
            while out.len() >= 2 {
                let n = out.len();
                if slope(&out[n - 2], &out[n - 1]) == slope(&out[n - 1], &p) {
                    out.pop();
                } else {
                    break;
                }
            }
            out.push(p);
        }
        PLMap { bps: out }
    }

    pub fn identity() -> Self {
        PLMap { bps: vec![(qi(0), qi(0)), (qi(1), qi(1))] }
    }

    pub fn breakpoints(&self) -> &[(Rational, Rational)] {
        &self.bps
    }

    pub fn breakpoint_xs(&self) -> impl Iterator<Item = &Rational> {
        self.bps.iter().map(|p| &p.0)
    }

    /// Index i of the piece [x_i, x_{i+1}] containing x (the left one at a
    /// breakpoint, except at 0).
    fn piece_index(&self, x: &Rational) -> usize {
        let k = self.bps.partition_point(|p| p.0 < *x);
        k.saturating_sub(1).min(self.bps.len() - 2)
    }

    pub fn eval(&self, x: &Rational) -> Result<Rational, PlError> {
        if !in_unit(x) {
            return Err(PlError::OutOfDomain(x.to_string()));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation for x already known to lie in [0,1].
    pub fn eval_unchecked(&self, x: &Rational) -> Rational {
        let i = self.piece_index(x);
        let (x0, y0) = &self.bps[i];
        let (x1, y1) = &self.bps[i + 1];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// f ∘ g.
    pub fn compose(f: &PLMap, g: &PLMap) -> PLMap {
        let mut xs: Vec<Rational> = Vec::new();
        for w in g.bps.windows(2) {
            let (x0, y0) = &w[0];
            let (x1, y1) = &w[1];
            xs.push(x0.clone());
            if y0 == y1 {
                continue;
            }
            let (lo, hi) = if y0 < y1 { (y0, y1) } else { (y1, y0) };
            let start = f.bps.partition_point(|p| p.0 <= *lo);
            let end = f.bps.partition_point(|p| p.0 < *hi);
            let mut mids: Vec<Rational> = f.bps[start..end]
                .iter()
                .map(|p| x0 + (&p.0 - y0) * (x1 - x0) / (y1 - y0))
                .collect();
            if y0 > y1 {
                mids.reverse();
            }
            xs.extend(mids);
        }
        xs.push(qi(1));
        let bps = xs
            .into_iter()
            .map(|x| {
                let y = f.eval_unchecked(&g.eval_unchecked(&x));
                (x, y)
            })
            .collect();
        Self::canonical(bps)
    }

    /// The m-tent map: 0 at j/m for even j, 1 for odd j.
    pub fn tent(m: u64) -> PLMap {
        assert!(m >= 1, "tent map needs m >= 1");
        let mb = BigInt::from(m);
        let bps = (0..=m)
            .map(|j| (Rational::new(BigInt::from(j), mb.clone()), qi((j % 2) as i64)))
            .collect();
        PLMap { bps }
    }

    pub fn canonical_equal(&self, other: &PLMap) -> bool {
        self.bps == other.bps
    }

    fn slope_sign(&self, i: usize) -> Ordering {
        self.bps[i + 1].1.cmp(&self.bps[i].1)
    }

    pub fn slope_at_piece(&self, i: usize) -> Rational {
        slope(&self.bps[i], &self.bps[i + 1])
    }

    pub fn num_pieces(&self) -> usize {
        self.bps.len() - 1
    }

    /// Strict local extrema of f lying in the open interval (lo, hi).
    pub fn interior_extrema(&self, lo: &Rational, hi: &Rational) -> Vec<Rational> {
        let mut out = Vec::new();
        for i in 1..self.bps.len() - 1 {
            let x = &self.bps[i].0;
            if x <= lo {
                continue;
            }
            if x >= hi {
                break;
            }
            if matches!(self.branch_at_index(i), Branch::LocalMax | Branch::LocalMin) {
                out.push(x.clone());
            }
        }
        out
    }

    /// Strict local extrema of f at breakpoints, with their values.
    pub fn extremum_points(&self) -> Vec<(Rational, Rational)> {
        (1..self.bps.len() - 1)
            .filter(|&i| matches!(self.branch_at_index(i), Branch::LocalMax | Branch::LocalMin))
            .map(|i| self.bps[i].clone())
            .collect()
    }

    fn branch_at_index(&self, i: usize) -> Branch {
        let left = (i > 0).then(|| self.slope_sign(i - 1));
        let right = (i + 1 < self.bps.len()).then(|| self.slope_sign(i));
        Branch::from_slopes(left, right)
    }

    /// Local shape of f at x from its one-sided slopes.
    pub fn branch_at(&self, x: &Rational) -> Result<Branch, PlError> {
        if !in_unit(x) {
            return Err(PlError::OutOfDomain(x.to_string()));
        }
        match self.bps.binary_search_by(|p| p.0.cmp(x)) {
            Ok(i) => Ok(self.branch_at_index(i)),
            Err(k) => {
                let s = self.slope_sign(k - 1);
                Ok(Branch::from_slopes(Some(s), Some(s)))
            }
        }
    }

    /// True when f is strictly increasing on a neighbourhood of x (one-sided
    /// at 0 and 1).
    pub fn increasing_at(&self, x: &Rational) -> bool {
        matches!(self.branch_at(x), Ok(Branch::Increasing))
    }

    pub fn is_open_interval_map(&self) -> OpenMapReport {
        let zero = Rational::zero();
        let one = Rational::one();
        let in01 = |y: &Rational| y.is_zero() || y.is_one();
        let no_flat = (0..self.num_pieces()).all(|i| self.slope_sign(i) != Ordering::Equal);
        let ends = in01(&self.bps[0].1) && in01(&self.bps[self.bps.len() - 1].1);
        let ext = self.extremum_points();
        let ext_ok = ext.iter().all(|(_, y)| in01(y));
        let min = self.bps.iter().map(|p| &p.1).min().unwrap();
        let max = self.bps.iter().map(|p| &p.1).max().unwrap();
        let onto = *min == zero && *max == one;
        let open = no_flat && ends && ext_ok && onto;
        OpenMapReport { open, homeomorphism: open && ext.is_empty() }
    }

    /// All x in [lo, hi] with f(x) = y. A plateau at level y contributes its
    /// endpoints clipped to [lo, hi].
    pub fn level_crossings(&self, y: &Rational, lo: &Rational, hi: &Rational) -> Vec<Rational> {
        let mut set: BTreeSet<Rational> = BTreeSet::new();
        if lo > hi {
            return Vec::new();
        }
        for w in self.bps.windows(2) {
            let (x0, y0) = &w[0];
            let (x1, y1) = &w[1];
            if x1 < lo || x0 > hi {
                continue;
            }
            if y0 == y1 {
                if y0 == y {
                    set.insert(x0.clone().max(lo.clone()));
                    set.insert(x1.clone().min(hi.clone()));
                }
                continue;
            }
            let (ylo, yhi) = if y0 < y1 { (y0, y1) } else { (y1, y0) };
            if y < ylo || y > yhi {
                continue;
            }
            let x = x0 + (y - y0) * (x1 - x0) / (y1 - y0);
            if &x >= lo && &x <= hi {
                set.insert(x);
            }
        }
        set.into_iter().collect()
    }

    /// Minimum of f over [lo, hi].
    pub fn min_on(&self, lo: &Rational, hi: &Rational) -> Rational {
        self.extreme_on(lo, hi, false)
    }

    /// Maximum of f over [lo, hi].
    pub fn max_on(&self, lo: &Rational, hi: &Rational) -> Rational {
        self.extreme_on(lo, hi, true)
    }

    fn extreme_on(&self, lo: &Rational, hi: &Rational, want_max: bool) -> Rational {
        let mut best = self.eval_unchecked(lo);
        let mut consider = |v: Rational| {
            if (want_max && v > best) || (!want_max && v < best) {
                best = v;
            }
        };
        consider(self.eval_unchecked(hi));
        for p in &self.bps {
            if &p.0 > lo && &p.0 < hi {
                consider(p.1.clone());
            }
        }
        best
    }

    /// Recognizes [a,b] as a sawtooth pattern of f.
    pub fn is_sawtooth(&self, a: &Rational, b: &Rational) -> Option<SawtoothInfo> {
        if !(a < b) || !in_unit(a) || !in_unit(b) {
            return None;
        }
        if !self.eval_unchecked(a).is_zero() {
            return None;
        }
        let inner: Vec<&(Rational, Rational)> =
            self.bps.iter().filter(|p| &p.0 > a && &p.0 < b).collect();
        let m = inner.len() as u64 + 1;
        let width = (b - a) / Rational::from_integer(BigInt::from(m));
        let height = self.eval_unchecked(&(a + &width));
        if !height.is_positive() || height > Rational::one() {
            return None;
        }
        for (j, p) in inner.iter().enumerate() {
            let j = j as u64 + 1;
            if p.0 != a + &width * Rational::from_integer(BigInt::from(j)) {
                return None;
            }
            let want = if j % 2 == 0 { Rational::zero() } else { height.clone() };
            if p.1 != want {
                return None;
            }
        }
        let want_end = if m % 2 == 0 { Rational::zero() } else { height.clone() };
        if self.eval_unchecked(b) != want_end {
            return None;
        }
        let mut boundaries: Vec<Rational> = (0..=m / 2)
            .map(|j| a + &width * Rational::from_integer(BigInt::from(2 * j)))
            .collect();
        if m % 2 == 1 {
            boundaries.push(b.clone());
        }
        Some(SawtoothInfo { a: a.clone(), b: b.clone(), pieces: m, height, boundaries })
    }

    /// Restricts the x-range to [lo, hi] and returns the breakpoints of the
    /// restriction, including both endpoints.
    pub fn restricted_points(&self, lo: &Rational, hi: &Rational) -> Vec<(Rational, Rational)> {
        let mut v = vec![(lo.clone(), self.eval_unchecked(lo))];
        for p in &self.bps {
            if &p.0 > lo && &p.0 < hi {
                v.push(p.clone());
            }
        }
        v.push((hi.clone(), self.eval_unchecked(hi)));
        v
    }

    pub fn to_doc(&self) -> PLMapDoc {
        PLMapDoc {
            breakpoints: self
                .bps
                .iter()
                .map(|(x, y)| [fmt_rational(x), fmt_rational(y)])
                .collect(),
        }
    }

    pub fn from_doc(doc: &PLMapDoc) -> Result<Self, PlError> {
        let mut bps = Vec::with_capacity(doc.breakpoints.len());
        for [x, y] in &doc.breakpoints {
            let x = parse_rational(x).map_err(|e| PlError::Format(e.to_string()))?;
            let y = parse_rational(y).map_err(|e| PlError::Format(e.to_string()))?;
            bps.push((x, y));
        }
        PLMap::new(bps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PlError> {
        let doc: PLMapDoc = serde_json::from_str(s).map_err(|e| PlError::Format(e.to_string()))?;
        Self::from_doc(&doc)
    }
}

impl From<PLMap> for PLMapDoc {
    fn from(f: PLMap) -> Self {
        f.to_doc()
    }
}

impl TryFrom<PLMapDoc> for PLMap {
    type Error = PlError;
    fn try_from(doc: PLMapDoc) -> Result<Self, PlError> {
        PLMap::from_doc(&doc)
    }
}

/// On-disk form of a map: `{"breakpoints": [["p/q","r/s"], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PLMapDoc {
    pub breakpoints: Vec<[String; 2]>,
}
