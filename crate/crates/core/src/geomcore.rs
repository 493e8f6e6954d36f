//! Exact rational scalars and planar predicates.
//!
//! All predicates are exact. Distances are squared so they stay in the
//! rational field; floats appear only as a pre-screen in the simplicity sweep.

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::ops::Bound::{Excluded, Unbounded};
use std::rc::Rc;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arbitrary-precision rational, always normalized by `num-rational`.
pub type Rational = BigRational;

/// Shorthand constructor for `n/d`.
pub fn q(n: i64, d: i64) -> Rational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Integer as a rational.
pub fn qi(n: i64) -> Rational {
    BigRational::from_integer(BigInt::from(n))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot parse rational from {0:?}")]
pub struct ParseRationalError(pub String);

/// Parses `"p/q"` or `"p"`. Whitespace is not accepted.
pub fn parse_rational(s: &str) -> Result<Rational, ParseRationalError> {
    let err = || ParseRationalError(s.to_string());
    if s.is_empty() || s.trim() != s {
        return Err(err());
    }
    match s.split_once('/') {
        Some((n, d)) => {
            let n = BigInt::from_str(n).map_err(|_| err())?;
            let d = BigInt::from_str(d).map_err(|_| err())?;
            if d.is_zero() {
                return Err(err());
            }
            Ok(BigRational::new(n, d))
        }
        None => Ok(BigRational::from_integer(BigInt::from_str(s).map_err(|_| err())?)),
    }
}

/// Canonical text form: `"p/q"` in lowest terms, or `"p"` for integers.
pub fn fmt_rational(x: &Rational) -> String {
    x.to_string()
}

/// Decimal approximation with `sig` significant digits, computed exactly
/// and rounded half away from zero. Used only for rendering.
pub fn to_decimal_sig(x: &Rational, sig: usize) -> String {
    if x.is_zero() {
        return "0".to_string();
    }
    let neg = x.is_negative();
    let a = x.abs();
    // find e with 10^e <= a < 10^(e+1)
    let ten = qi(10);
    let mut e: i64 = 0;
    let mut scaled = a.clone();
    while scaled >= ten {
        scaled /= &ten;
        e += 1;
    }
    while scaled < Rational::one() {
        scaled *= &ten;
        e -= 1;
    }
    // digits = round(a * 10^(sig-1-e))
    let shift = sig as i64 - 1 - e;
    let factor = BigRational::from_integer(num_traits::pow(BigInt::from(10), shift.unsigned_abs() as usize));
    let scaled = if shift >= 0 { a * factor } else { a / factor };
    let half = q(1, 2);
    let mut digits = (scaled + half).floor().to_integer();
    let mut shift = shift;
    if digits.to_string().len() > sig {
        // rounding carried into an extra digit
        digits /= 10;
        shift -= 1;
    }
    let ds = digits.to_string();
    let mut out = if shift <= 0 {
        let mut s = ds.clone();
        for _ in 0..(-shift) {
            s.push('0');
        }
        s
    } else {
        let shift = shift as usize;
        if ds.len() > shift {
            let (i, f) = ds.split_at(ds.len() - shift);
            format!("{i}.{f}")
        } else {
            format!("0.{}{}", "0".repeat(shift - ds.len()), ds)
        }
    };
    if out.contains('.') {
        while out.ends_with('0') {
            out.pop();
        }
        if out.ends_with('.') {
            out.pop();
        }
    }
    if neg {
        out.insert(0, '-');
    }
    out
}

/// Serde adapter storing a rational as its `"p/q"` string.
pub mod serde_q {
    use super::{fmt_rational, parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_rational(x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `Vec<Rational>`.
pub mod serde_qvec {
    use super::{fmt_rational, parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(xs: &[Rational], s: S) -> Result<S::Ok, S::Error> {
        xs.iter().map(fmt_rational).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter()
            .map(|s| parse_rational(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Serde adapter for `Option<Rational>`.
pub mod serde_qopt {
    use super::{fmt_rational, parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        x.as_ref().map(fmt_rational).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        match Option::<String>::deserialize(d)? {
            Some(s) => parse_rational(&s).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point2 {
    #[serde(with = "serde_q")]
    pub x: Rational,
    #[serde(with = "serde_q")]
    pub y: Rational,
}

impl Point2 {
    pub fn new(x: Rational, y: Rational) -> Self {
        Point2 { x, y }
    }

    pub fn from_i(x: (i64, i64), y: (i64, i64)) -> Self {
        Point2 { x: q(x.0, x.1), y: q(y.0, y.1) }
    }

    pub fn sub(&self, o: &Point2) -> Point2 {
        Point2::new(&self.x - &o.x, &self.y - &o.y)
    }

    pub fn add(&self, o: &Point2) -> Point2 {
        Point2::new(&self.x + &o.x, &self.y + &o.y)
    }

    pub fn scale(&self, t: &Rational) -> Point2 {
        Point2::new(&self.x * t, &self.y * t)
    }

    pub fn dist_sq(&self, o: &Point2) -> Rational {
        let d = self.sub(o);
        dot(&d, &d)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

pub fn dot(a: &Point2, b: &Point2) -> Rational {
    &a.x * &b.x + &a.y * &b.y
}

pub fn cross(a: &Point2, b: &Point2) -> Rational {
    &a.x * &b.y - &a.y * &b.x
}

/// Sign of the turn o -> a -> b.
pub fn orient(o: &Point2, a: &Point2, b: &Point2) -> Ordering {
    cross(&a.sub(o), &b.sub(o)).cmp(&Rational::zero())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub p: Point2,
    pub q: Point2,
}

impl Segment {
    pub fn new(p: Point2, q: Point2) -> Self {
        Segment { p, q }
    }

    /// Same segment with endpoints in lexicographic order.
    pub fn normalized(&self) -> Segment {
        if self.p <= self.q {
            self.clone()
        } else {
            Segment::new(self.q.clone(), self.p.clone())
        }
    }

    fn bbox(&self) -> BBox {
        BBox {
            xmin: self.p.x.clone().min(self.q.x.clone()),
            xmax: self.p.x.clone().max(self.q.x.clone()),
            ymin: self.p.y.clone().min(self.q.y.clone()),
            ymax: self.p.y.clone().max(self.q.y.clone()),
        }
    }

    pub fn contains_point(&self, pt: &Point2) -> bool {
        orient(&self.p, &self.q, pt) == Ordering::Equal && self.bbox().contains(pt)
    }
}

#[derive(Debug, Clone)]
struct BBox {
    xmin: Rational,
    xmax: Rational,
    ymin: Rational,
    ymax: Rational,
}

impl BBox {
    fn contains(&self, p: &Point2) -> bool {
        self.xmin <= p.x && p.x <= self.xmax && self.ymin <= p.y && p.y <= self.ymax
    }

    fn overlaps(&self, o: &BBox) -> bool {
        self.xmin <= o.xmax && o.xmin <= self.xmax && self.ymin <= o.ymax && o.ymin <= self.ymax
    }

    fn dist_sq(&self, o: &BBox) -> Rational {
        let gap = |lo1: &Rational, hi1: &Rational, lo2: &Rational, hi2: &Rational| {
            if hi1 < lo2 {
                lo2 - hi1
            } else if hi2 < lo1 {
                lo1 - hi2
            } else {
                Rational::zero()
            }
        };
        let dx = gap(&self.xmin, &self.xmax, &o.xmin, &o.xmax);
        let dy = gap(&self.ymin, &self.ymax, &o.ymin, &o.ymax);
        &dx * &dx + &dy * &dy
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntersectionKind {
    None,
    Point(Point2),
    Overlap(Segment),
}

/// Exact intersection of two closed segments. Overlaps are returned with
/// endpoints in lexicographic order so the result does not depend on
/// argument order.
pub fn seg_intersection(s1: &Segment, s2: &Segment) -> IntersectionKind {
    if !s1.bbox().overlaps(&s2.bbox()) {
        return IntersectionKind::None;
    }
    for (a, b) in [(s1, s2), (s2, s1)] {
        if a.p == a.q {
            return if b.contains_point(&a.p) { IntersectionKind::Point(a.p.clone()) } else { IntersectionKind::None };
        }
    }
    let d1 = s1.q.sub(&s1.p);
    let d2 = s2.q.sub(&s2.p);
    let denom = cross(&d1, &d2);
    let w = s2.p.sub(&s1.p);
    if denom.is_zero() {
        if !cross(&d1, &w).is_zero() {
            return IntersectionKind::None;
        }
        // collinear: order along the line lexicographically
        let a = s1.normalized();
        let b = s2.normalized();
        let lo = a.p.clone().max(b.p.clone());
        let hi = a.q.clone().min(b.q.clone());
        return match lo.cmp(&hi) {
            Ordering::Less => IntersectionKind::Overlap(Segment::new(lo, hi)),
            Ordering::Equal => IntersectionKind::Point(lo),
            Ordering::Greater => IntersectionKind::None,
        };
    }
    let t = cross(&w, &d2) / &denom;
    let u = cross(&w, &d1) / &denom;
    let zero = Rational::zero();
    let one = Rational::one();
    if t < zero || t > one || u < zero || u > one {
        return IntersectionKind::None;
    }
    IntersectionKind::Point(s1.p.add(&d1.scale(&t)))
}

/// Squared distance from a point to a closed segment.
pub fn point_seg_dist_sq(p: &Point2, s: &Segment) -> Rational {
    let d = s.q.sub(&s.p);
    let len = dot(&d, &d);
    if len.is_zero() {
        return p.dist_sq(&s.p);
    }
    let t = dot(&p.sub(&s.p), &d) / len;
    let t = t.max(Rational::zero()).min(Rational::one());
    p.dist_sq(&s.p.add(&d.scale(&t)))
}

/// Squared distance between two closed segments.
pub fn seg_dist_sq(s1: &Segment, s2: &Segment) -> Rational {
    if seg_intersection(s1, s2) != IntersectionKind::None {
        return Rational::zero();
    }
    [
        point_seg_dist_sq(&s1.p, s2),
        point_seg_dist_sq(&s1.q, s2),
        point_seg_dist_sq(&s2.p, s1),
        point_seg_dist_sq(&s2.q, s1),
    ]
    .into_iter()
    .min()
    .unwrap()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeomError {
    #[error("polyline needs at least 2 vertices")]
    TooFewVertices,
    #[error("consecutive vertices {0} and {1} coincide")]
    RepeatedVertex(usize, usize),
    #[error("closed loop is not simple")]
    InvalidLoop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Polyline {
    vertices: Vec<Point2>,
}

impl Polyline {
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeomError> {
        if vertices.len() < 2 {
            return Err(GeomError::TooFewVertices);
        }
        for i in 1..vertices.len() {
            if vertices[i] == vertices[i - 1] {
                return Err(GeomError::RepeatedVertex(i - 1, i));
            }
        }
        Ok(Polyline { vertices })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point2> {
        self.vertices
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.vertices
            .windows(2)
            .map(|w| Segment::new(w[0].clone(), w[1].clone()))
            .collect()
    }
}

/// Sweep-line state shared by the ordering keys.
struct SweepCtx {
    segs: Vec<SweepSeg>,
    x: RefCell<Rational>,
    xf: Cell<f64>,
    /// compare just right of x (insertions) or just left (removals)
    right: Cell<bool>,
}

/// A segment in sheared coordinates, left endpoint first.
struct SweepSeg {
    lx: Rational,
    ly: Rational,
    slope: Rational,
    lxf: f64,
    lyf: f64,
    slopef: f64,
}

impl SweepSeg {
    fn y_at(&self, x: &Rational) -> Rational {
        &self.ly + (x - &self.lx) * &self.slope
    }

    /// Float estimate and a generous error bound.
    fn y_at_f(&self, x: f64) -> (f64, f64) {
        let run = (x - self.lxf) * self.slopef;
        let y = self.lyf + run;
        (y, 1e-9 * (1.0 + self.lyf.abs() + run.abs()))
    }
}

#[derive(Clone)]
struct SweepKey {
    i: usize,
    ctx: Rc<SweepCtx>,
}

impl PartialEq for SweepKey {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for SweepKey {}

impl PartialOrd for SweepKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for SweepKey {
    fn cmp(&self, o: &Self) -> Ordering {
        if self.i == o.i {
            return Ordering::Equal;
        }
        let (a, b) = (&self.ctx.segs[self.i], &self.ctx.segs[o.i]);
        let (ya, ea) = a.y_at_f(self.ctx.xf.get());
        let (yb, eb) = b.y_at_f(self.ctx.xf.get());
        let by_y = if ya.is_finite() && yb.is_finite() && (ya - yb).abs() > ea + eb {
            ya.partial_cmp(&yb).unwrap_or(Ordering::Equal)
        } else {
            let x = self.ctx.x.borrow();
            a.y_at(&x).cmp(&b.y_at(&x))
        };
        if by_y != Ordering::Equal {
            return by_y;
        }
        let by_slope = if self.ctx.right.get() { a.slope.cmp(&b.slope) } else { b.slope.cmp(&a.slope) };
        by_slope.then(self.i.cmp(&o.i))
    }
}

fn to_f(x: &Rational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// A shear factor c such that x + c*y separates the endpoints of every
/// segment.
fn shear_factor(segs: &[Segment]) -> Rational {
    let candidates = [(0, 1), (1, 1021), (1, 65537), (3, 1021), (7, 4099), (1, 3)];
    for &(n, d) in &candidates {
        let c = q(n, d);
        if segs.iter().all(|s| !(&s.q.x - &s.p.x + &c * (&s.q.y - &s.p.y)).is_zero()) {
            return c;
        }
    }
    // at most one value of c per segment is bad, so a fresh denominator works
    let mut d = 65539i64;
    loop {
        let c = q(1, d);
        if segs.iter().all(|s| !(&s.q.x - &s.p.x + &c * (&s.q.y - &s.p.y)).is_zero()) {
            return c;
        }
        d += 2;
    }
}

fn pair_ok(segs: &[Segment], closed: bool, i: usize, j: usize) -> bool {
    let (i, j) = (i.min(j), i.max(j));
    let n = segs.len();
    let hit = seg_intersection(&segs[i], &segs[j]);
    if j == i + 1 {
        hit == IntersectionKind::Point(segs[i].q.clone())
    } else if closed && i == 0 && j == n - 1 && n > 2 {
        hit == IntersectionKind::Point(segs[i].p.clone())
    } else {
        hit == IntersectionKind::None
    }
}

/// Shamos-Hoey sweep: reports whether any pair of segments meets other
/// than consecutive ones at their shared vertex. Coordinates are sheared so
/// no segment is vertical; floats only pre-screen exact comparisons.
fn segments_simple(segs: &[Segment], closed: bool) -> bool {
    let n = segs.len();
    if n < 2 {
        return true;
    }
    if segs.iter().any(|s| s.p == s.q) {
        return false;
    }
    // each point may be an endpoint only of consecutive segments
    let mut ends: Vec<(&Point2, usize)> = segs.iter().enumerate().flat_map(|(i, s)| [(&s.p, i), (&s.q, i)]).collect();
    ends.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)));
    for g in ends.chunk_by(|a, b| a.0 == b.0) {
        match g.len() {
            1 => {}
            2 => {
                if !pair_ok(segs, closed, g[0].1, g[1].1) {
                    return false;
                }
            }
            _ => return false,
        }
    }
    let c = shear_factor(segs);
    let sheared = |p: &Point2| (&p.x + &c * &p.y, p.y.clone());
    let mut infos = Vec::with_capacity(n);
    // (point, segment, is_insert)
    let mut events: Vec<((Rational, Rational), usize, bool)> = Vec::with_capacity(2 * n);
    for (i, s) in segs.iter().enumerate() {
        let (a, b) = (sheared(&s.p), sheared(&s.q));
        let (l, r) = if a.0 < b.0 { (a, b) } else { (b, a) };
        let slope = (&r.1 - &l.1) / (&r.0 - &l.0);
        infos.push(SweepSeg { lxf: to_f(&l.0), lyf: to_f(&l.1), slopef: to_f(&slope), lx: l.0.clone(), ly: l.1.clone(), slope });
        events.push((l, i, true));
        events.push((r, i, false));
    }
    events.sort_by(|a, b| a.0.cmp(&b.0));
    let ctx = Rc::new(SweepCtx { segs: infos, x: RefCell::new(Rational::zero()), xf: Cell::new(0.0), right: Cell::new(false) });
    let key = |i: usize| SweepKey { i, ctx: Rc::clone(&ctx) };
    let mut status: BTreeSet<SweepKey> = BTreeSet::new();
    for group in events.chunk_by(|a, b| a.0 == b.0) {
        let x = &group[0].0 .0;
        *ctx.x.borrow_mut() = x.clone();
        ctx.xf.set(to_f(x));
        ctx.right.set(false);
        for (_, i, ins) in group {
            if *ins {
                continue;
            }
            let k = key(*i);
            let below = status.range(..k.clone()).next_back().map(|k| k.i);
            let above = status.range((Excluded(k.clone()), Unbounded)).next().map(|k| k.i);
            status.remove(&k);
            if let (Some(a), Some(b)) = (below, above) {
                if !pair_ok(segs, closed, a, b) {
                    return false;
                }
            }
        }
        ctx.right.set(true);
        for (_, i, ins) in group {
            if !*ins {
                continue;
            }
            let k = key(*i);
            let below = status.range(..k.clone()).next_back().map(|k| k.i);
            let above = status.range((Excluded(k.clone()), Unbounded)).next().map(|k| k.i);
            for other in [below, above].into_iter().flatten() {
                if !pair_ok(segs, closed, *i, other) {
                    return false;
                }
            }
            status.insert(k);
        }
    }
    true
}

/// True iff the open polyline has no self-intersections beyond shared
/// vertices of consecutive segments.
pub fn polyline_simple(p: &Polyline) -> bool {
    segments_simple(&p.segments(), false)
}

/// Result of a clearance query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Clearance {
    /// Fewer than three segments, so no non-adjacent pair exists.
    Infinite,
    Finite(Rational),
}

impl Clearance {
    pub fn finite(&self) -> Option<&Rational> {
        match self {
            Clearance::Infinite => None,
            Clearance::Finite(r) => Some(r),
        }
    }
}

fn clearance_of(segs: &[Segment], closed: bool) -> Clearance {
    let n = segs.len();
    let boxes: Vec<BBox> = segs.iter().map(Segment::bbox).collect();
    let mut best: Option<Rational> = None;
    for i in 0..n {
        for j in i + 2..n {
            if closed && i == 0 && j == n - 1 {
                continue;
            }
            if let Some(b) = &best {
                if boxes[i].dist_sq(&boxes[j]) >= *b {
                    continue;
                }
            }
            let d = seg_dist_sq(&segs[i], &segs[j]);
            if best.as_ref().map_or(true, |b| d < *b) {
                best = Some(d);
            }
        }
    }
    match best {
        Some(b) => Clearance::Finite(b),
        None => Clearance::Infinite,
    }
}

/// Minimum squared distance between non-adjacent segments.
pub fn min_clearance_sq(p: &Polyline) -> Clearance {
    clearance_of(&p.segments(), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Inside,
    OnBoundary,
    Outside,
}

/// Segments of a closed loop. A repeated final vertex equal to the first is
/// dropped.
pub fn loop_segments(lp: &Polyline) -> Vec<Segment> {
    let mut v = lp.vertices().to_vec();
    if v.len() > 1 && v.first() == v.last() {
        v.pop();
    }
    let n = v.len();
    (0..n)
        .map(|i| Segment::new(v[i].clone(), v[(i + 1) % n].clone()))
        .collect()
}

pub fn closed_loop_simple(lp: &Polyline) -> bool {
    let segs = loop_segments(lp);
    segs.len() >= 3 && segments_simple(&segs, true)
}

/// Classifies `pt` against the closed loop through the vertices of `lp`
/// (the closing edge from last to first vertex is implied).
pub fn point_vs_closed_curve(pt: &Point2, lp: &Polyline) -> Result<Location, GeomError> {
    if !closed_loop_simple(lp) {
        return Err(GeomError::InvalidLoop);
    }
    let segs = loop_segments(lp);
    Ok(classify_against_segments(pt, &segs))
}

/// Even-odd classification against a loop already known to be simple.
pub fn classify_against_segments(pt: &Point2, segs: &[Segment]) -> Location {
    if segs.iter().any(|s| s.contains_point(pt)) {
        return Location::OnBoundary;
    }
    let mut inside = false;
    for s in segs {
        let (a, b) = (&s.p, &s.q);
        if (a.y > pt.y) != (b.y > pt.y) {
            let t = (&pt.y - &a.y) / (&b.y - &a.y);
            let x = &a.x + t * (&b.x - &a.x);
            if x > pt.x {
                inside = !inside;
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}
