//! Arcs in the closed right half-plane that follow the graph of a PL map
//! while keeping the marked points on the boundary line and tucking every
//! visor under a target plateau.
//!
//! The construction works on a depth coordinate. The base graph of the
//! perturbed map sits at depth `D(x)`, each target below 1 gets a short
//! horizontal plateau, and the graph over a visor interval is redrawn with
//! reversed depth inside a slot under the plateau of its target. A final
//! shear in thin triangles around each mark moves the marks onto x = 0.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geomcore::{
    classify_against_segments, closed_loop_simple, fmt_rational, loop_segments, orient, parse_rational,
    polyline_simple, seg_intersection, serde_qvec, IntersectionKind, Location, Point2, Polyline, Rational,
    Segment,
};
use crate::plmap::PLMap;
use crate::visor::{assign_targets, check_order, choose_visor_family, MarkedSet, VisorError, VisorFamily, VisorMember};

type Q = Rational;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TuckError {
    #[error("no admissible perturbation for this eps")]
    InfeasiblePerturbation,
    #[error("non-removable visor at {0}")]
    NonRemovableVisor(String),
    #[error("f is not strictly increasing on the marked set (at index {0})")]
    OrderHypothesisViolated(usize),
    #[error("visor family is missing a target for {0}")]
    IncompleteFamily(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Visor(VisorError),
    #[error("arc construction failed: {0}")]
    ConstructionFailed(String),
}

impl From<VisorError> for TuckError {
    fn from(e: VisorError) -> Self {
        match e {
            VisorError::OrderHypothesisViolated(i) => TuckError::OrderHypothesisViolated(i),
            VisorError::NonRemovableVisor(v) | VisorError::NotRemovable(v) => TuckError::NonRemovableVisor(v),
            e => TuckError::Visor(e),
        }
    }
}

/// A continuous PL function on [0,1] with arbitrary rational values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlGraphDoc", into = "PlGraphDoc")]
pub struct PlGraph {
    pts: Vec<(Q, Q)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlGraphDoc {
    pub breakpoints: Vec<[String; 2]>,
}

impl From<PlGraph> for PlGraphDoc {
    fn from(g: PlGraph) -> Self {
        PlGraphDoc { breakpoints: g.pts.iter().map(|(x, y)| [fmt_rational(x), fmt_rational(y)]).collect() }
    }
}

impl TryFrom<PlGraphDoc> for PlGraph {
    type Error = TuckError;

    fn try_from(doc: PlGraphDoc) -> Result<Self, TuckError> {
        let mut pts = Vec::with_capacity(doc.breakpoints.len());
        for [x, y] in &doc.breakpoints {
            let x = parse_rational(x).map_err(|e| TuckError::InvalidGraph(e.to_string()))?;
            let y = parse_rational(y).map_err(|e| TuckError::InvalidGraph(e.to_string()))?;
            pts.push((x, y));
        }
        PlGraph::new(pts)
    }
}

impl PlGraph {
    pub fn new(pts: Vec<(Q, Q)>) -> Result<Self, TuckError> {
        if pts.len() < 2 || !pts[0].0.is_zero() || !pts[pts.len() - 1].0.is_one() {
            return Err(TuckError::InvalidGraph("x must run from 0 to 1".into()));
        }
        if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(TuckError::InvalidGraph("x must be strictly increasing".into()));
        }
        let mut out: Vec<(Q, Q)> = Vec::with_capacity(pts.len());
        for p in pts {
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
        Ok(PlGraph { pts: out })
    }

    pub fn from_map(f: &PLMap) -> Self {
        PlGraph { pts: f.breakpoints().to_vec() }
    }

    pub fn points(&self) -> &[(Q, Q)] {
        &self.pts
    }

    pub fn xs(&self) -> impl Iterator<Item = &Q> {
        self.pts.iter().map(|p| &p.0)
    }

    /// The graph as a map of [0,1], when all values lie in [0,1].
    pub fn to_map(&self) -> Option<PLMap> {
        PLMap::new(self.pts.clone()).ok()
    }

    fn piece(&self, x: &Q) -> usize {
        let k = self.pts.partition_point(|p| &p.0 <= x);
        k.clamp(1, self.pts.len() - 1) - 1
    }

    pub fn eval(&self, x: &Q) -> Q {
        let i = self.piece(x);
        let (p, r) = (&self.pts[i], &self.pts[i + 1]);
        &p.1 + (x - &p.0) * slope(p, r)
    }

    /// Slope of the piece just right of x (x < 1).
    fn slope_right(&self, x: &Q) -> Q {
        let i = self.piece(x);
        slope(&self.pts[i], &self.pts[i + 1])
    }

    /// Slope of the piece just left of x (x > 0).
    fn slope_left(&self, x: &Q) -> Q {
        let k = self.pts.partition_point(|p| &p.0 < x);
        let i = k.clamp(1, self.pts.len() - 1) - 1;
        slope(&self.pts[i], &self.pts[i + 1])
    }

    /// Largest squared gap to f, attained at a breakpoint of either graph.
    pub fn sup_dist_sq(&self, f: &PLMap) -> Q {
        let xs: BTreeSet<&Q> = self.xs().chain(f.breakpoint_xs()).collect();
        xs.into_iter()
            .map(|x| {
                let d = self.eval(x) - f.eval_unchecked(x);
                &d * &d
            })
            .max()
            .unwrap_or_else(Q::zero)
    }
}

fn slope(p: &(Q, Q), r: &(Q, Q)) -> Q {
    (&r.1 - &p.1) / (&r.0 - &p.0)
}

/// An interval of [0,1] with independently open or closed ends.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Iv {
    lo: Q,
    lo_closed: bool,
    hi: Q,
    hi_closed: bool,
}

impl Iv {
    fn new(lo: Q, lo_closed: bool, hi: Q, hi_closed: bool) -> Self {
        Iv { lo, lo_closed, hi, hi_closed }
    }

    fn is_empty(&self) -> bool {
        self.lo > self.hi || (self.lo == self.hi && !(self.lo_closed && self.hi_closed))
    }

    /// The parts of self outside r.
    fn minus(&self, r: &Iv) -> Vec<Iv> {
        let (hi, hi_closed) = match r.lo.cmp(&self.hi) {
            std::cmp::Ordering::Less => (r.lo.clone(), !r.lo_closed),
            std::cmp::Ordering::Greater => (self.hi.clone(), self.hi_closed),
            std::cmp::Ordering::Equal => (self.hi.clone(), self.hi_closed && !r.lo_closed),
        };
        let (lo, lo_closed) = match r.hi.cmp(&self.lo) {
            std::cmp::Ordering::Greater => (r.hi.clone(), !r.hi_closed),
            std::cmp::Ordering::Less => (self.lo.clone(), self.lo_closed),
            std::cmp::Ordering::Equal => (self.lo.clone(), self.lo_closed && !r.hi_closed),
        };
        [Iv::new(self.lo.clone(), self.lo_closed, hi, hi_closed), Iv::new(lo, lo_closed, self.hi.clone(), self.hi_closed)]
            .into_iter()
            .filter(|iv| !iv.is_empty())
            .collect()
    }
}

/// True iff g(x) > level (or < level when `above` is false) for every x of
/// the interval. Exact, since g is linear between breakpoints.
fn strictly_on(g: &PlGraph, iv: &Iv, level: &Q, above: bool) -> bool {
    if iv.is_empty() {
        return true;
    }
    let ok = |y: &Q| if above { y > level } else { y < level };
    if iv.lo == iv.hi {
        return ok(&g.eval(&iv.lo));
    }
    if g.xs().filter(|x| *x > &iv.lo && *x < &iv.hi).any(|x| !ok(&g.eval(x))) {
        return false;
    }
    let end_ok = |x: &Q, closed: bool, inward_slope: Q| {
        let y = g.eval(x);
        if ok(&y) {
            true
        } else if closed || &y != level {
            false
        } else if above {
            inward_slope.is_positive()
        } else {
            inward_slope.is_negative()
        }
    };
    end_ok(&iv.lo, iv.lo_closed, g.slope_right(&iv.lo)) && end_ok(&iv.hi, iv.hi_closed, -g.slope_left(&iv.hi))
}

/// The four properties a perturbed map must satisfy before the arc is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationChecks {
    /// (g - f)^2 < 3 eps^2 / 4 everywhere
    pub close: bool,
    /// strict minima at the interval ends and strict domination by the target
    pub minima: bool,
    /// g = f on the marked set
    pub fixed_marks: bool,
    /// g stays strictly below g(z_j) before z_j, off the visor intervals
    pub below_marks: bool,
}

impl PerturbationChecks {
    pub fn all(&self) -> bool {
        self.close && self.minima && self.fixed_marks && self.below_marks
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedMap {
    pub fprime: PlGraph,
    /// slope of the linear tilt; zero when f needed no change
    #[serde(with = "crate::geomcore::serde_q")]
    pub delta: Q,
}

/// Intervals removed from [z_{j-1}, z_j) when testing g below g(z_j).
fn excluded(z: &MarkedSet, m: &VisorMember) -> Iv {
    let (a, b) = (&m.interval.a, &m.interval.b);
    let closed_at_zero = a.is_zero() && !z.contains(a);
    Iv::new(a.clone(), closed_at_zero, b.clone(), false)
}

pub fn check_perturbation(f: &PLMap, z: &MarkedSet, family: &VisorFamily, eps: &Q, g: &PlGraph) -> PerturbationChecks {
    let close = g.sup_dist_sq(f) * Q::from_integer(4.into()) < eps * eps * Q::from_integer(3.into());
    let mut minima = true;
    for m in &family.members {
        let (a, b) = (&m.interval.a, &m.interval.b);
        let Some(c) = m.target.as_ref() else {
            minima = false;
            continue;
        };
        if (!a.is_zero() || z.contains(a)) && !strictly_on(g, &Iv::new(a.clone(), false, b.clone(), true), &g.eval(a), true) {
            minima = false;
        }
        if !strictly_on(g, &Iv::new(b.clone(), false, c.clone(), true), &g.eval(b), true) {
            minima = false;
        }
        if !c.is_one() && !strictly_on(g, &Iv::new(a.clone(), true, b.clone(), true), &g.eval(c), false) {
            minima = false;
        }
    }
    let fixed_marks = z.points().iter().all(|x| g.eval(x) == f.eval_unchecked(x));
    let mut below_marks = true;
    for j in 1..=z.len() {
        let lo = if j == 1 { Q::zero() } else { z.z(j - 1).clone() };
        let mut parts = vec![Iv::new(lo, true, z.z(j).clone(), false)];
        for m in &family.members {
            let r = excluded(z, m);
            parts = parts.iter().flat_map(|p| p.minus(&r)).collect();
        }
        let level = g.eval(z.z(j));
        if !parts.iter().all(|p| strictly_on(g, p, &level, false)) {
            below_marks = false;
        }
    }
    PerturbationChecks { close, minima, fixed_marks, below_marks }
}

/// Tilts f by a small linear term so that every weak inequality the arc
/// relies on becomes strict, then pulls the marked values back with an
/// increasing PL correction of the value axis.
pub fn perturb_map(f: &PLMap, z: &MarkedSet, family: &VisorFamily, eps: &Q) -> Result<PerturbedMap, TuckError> {
    if !eps.is_positive() {
        return Err(TuckError::InfeasiblePerturbation);
    }
    if let Some(m) = family.members.iter().find(|m| m.target.is_none()) {
        return Err(TuckError::IncompleteFamily(m.v.to_string()));
    }
    let plain = PlGraph::from_map(f);
    if check_perturbation(f, z, family, eps, &plain).all() {
        return Ok(PerturbedMap { fprime: plain, delta: Q::zero() });
    }
    let eta = eps / Q::from_integer(16.into());
    let tilted: Vec<(Q, Q)> = f.breakpoints().iter().map(|(x, y)| (x.clone(), y + &eta * x)).collect();
    // anchors (tilted value, original value) of the marked points
    let anchors: Vec<(Q, Q)> = z
        .points()
        .iter()
        .map(|x| {
            let y = f.eval_unchecked(x);
            (&y + &eta * x, y)
        })
        .collect();
    let correct = |y: &Q| -> Q {
        match anchors.len() {
            0 => y.clone(),
            _ => {
                let first = &anchors[0];
                let last = &anchors[anchors.len() - 1];
                if y <= &first.0 {
                    y - (&first.0 - &first.1)
                } else if y >= &last.0 {
                    y - (&last.0 - &last.1)
                } else {
                    let k = anchors.partition_point(|p| &p.0 <= y);
                    let (p, r) = (&anchors[k - 1], &anchors[k]);
                    &p.1 + (y - &p.0) * slope(p, r)
                }
            }
        }
    };
    let mut xs: BTreeSet<Q> = tilted.iter().map(|p| p.0.clone()).collect();
    for w in tilted.windows(2) {
        let ((x0, y0), (x1, y1)) = (&w[0], &w[1]);
        if y0 == y1 {
            continue;
        }
        for (u, _) in &anchors {
            let t = (u - y0) / (y1 - y0);
            if t.is_positive() && t < Q::one() {
                xs.insert(x0 + t * (x1 - x0));
            }
        }
    }
    let tilted = PlGraph::new(tilted)?;
    let g = PlGraph::new(xs.into_iter().map(|x| { let y = correct(&tilted.eval(&x)); (x, y) }).collect())?;
    if !check_perturbation(f, z, family, eps, &g).all() {
        return Err(TuckError::InfeasiblePerturbation);
    }
    Ok(PerturbedMap { fprime: g, delta: eta })
}

/// An injective polyline in x >= 0 with a parameter per vertex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HalfPlaneArcDoc", into = "HalfPlaneArcDoc")]
pub struct HalfPlaneArc {
    pub path: Polyline,
    pub params: Vec<Q>,
    /// (j, vertex index) with j 1-based
    pub marks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfPlaneArcDoc {
    pub vertices: Vec<Point2>,
    #[serde(with = "serde_qvec")]
    pub params: Vec<Q>,
    pub marks: Vec<(usize, usize)>,
}

impl From<HalfPlaneArc> for HalfPlaneArcDoc {
    fn from(a: HalfPlaneArc) -> Self {
        HalfPlaneArcDoc { vertices: a.path.into_vertices(), params: a.params, marks: a.marks }
    }
}

impl TryFrom<HalfPlaneArcDoc> for HalfPlaneArc {
    type Error = String;

    fn try_from(d: HalfPlaneArcDoc) -> Result<Self, String> {
        if d.params.len() != d.vertices.len() {
            return Err("one parameter per vertex is required".into());
        }
        if d.marks.iter().any(|&(_, i)| i >= d.vertices.len()) {
            return Err("mark index out of range".into());
        }
        let path = Polyline::new(d.vertices).map_err(|e| e.to_string())?;
        Ok(HalfPlaneArc { path, params: d.params, marks: d.marks })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    pub witness: Option<String>,
}

impl CheckResult {
    fn ok() -> Self {
        CheckResult { pass: true, witness: None }
    }

    fn fail(w: String) -> Self {
        CheckResult { pass: false, witness: Some(w) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcReport {
    /// params strictly increasing from 0 to 1
    pub params: CheckResult,
    /// conclusion (1): within eps of (0, f(t))
    pub closeness: CheckResult,
    /// conclusion (2): marks on the boundary line, everything else off it
    pub boundary: CheckResult,
    pub injective: CheckResult,
    /// conclusion (3): the rest of the arc stays out of each bounded region
    pub separation: CheckResult,
}

impl ArcReport {
    pub fn all_pass(&self) -> bool {
        self.params.pass && self.closeness.pass && self.boundary.pass && self.injective.pass && self.separation.pass
    }
}

fn lerp(p: &Point2, r: &Point2, t: &Q) -> Point2 {
    p.add(&r.sub(p).scale(t))
}

fn check_params(arc: &HalfPlaneArc) -> CheckResult {
    let ps = &arc.params;
    if ps.len() != arc.path.vertices().len() {
        return CheckResult::fail(format!("{} params for {} vertices", ps.len(), arc.path.vertices().len()));
    }
    if !ps[0].is_zero() || !ps[ps.len() - 1].is_one() {
        return CheckResult::fail(format!("params run from {} to {}", ps[0], ps[ps.len() - 1]));
    }
    match ps.windows(2).position(|w| w[0] >= w[1]) {
        Some(i) => CheckResult::fail(format!("params not increasing at vertex {}", i + 1)),
        None => CheckResult::ok(),
    }
}

fn check_closeness(f: &PLMap, eps: &Q, vs: &[Point2], ps: &[Q]) -> CheckResult {
    let eps2 = eps * eps;
    let far = |p: &Point2, t: &Q| {
        let target = Point2::new(Q::zero(), f.eval_unchecked(t));
        let d = p.dist_sq(&target);
        (d >= eps2).then(|| format!("point {} at parameter {} has squared distance {}", p, t, d))
    };
    for (p, t) in vs.iter().zip(ps) {
        if let Some(w) = far(p, t) {
            return CheckResult::fail(w);
        }
    }
    for i in 0..vs.len().saturating_sub(1) {
        let (t0, t1) = (&ps[i], &ps[i + 1]);
        if t0 >= t1 {
            continue;
        }
        for x in f.breakpoint_xs().filter(|x| *x > t0 && *x < t1) {
            let p = lerp(&vs[i], &vs[i + 1], &((x - t0) / (t1 - t0)));
            if let Some(w) = far(&p, x) {
                return CheckResult::fail(w);
            }
        }
    }
    CheckResult::ok()
}

fn check_boundary(f: &PLMap, z: &MarkedSet, arc: &HalfPlaneArc) -> CheckResult {
    let vs = arc.path.vertices();
    if arc.marks.len() != z.len() {
        return CheckResult::fail(format!("{} marks for {} marked points", arc.marks.len(), z.len()));
    }
    let mut marked = BTreeSet::new();
    for (k, &(j, i)) in arc.marks.iter().enumerate() {
        if j != k + 1 || i >= vs.len() {
            return CheckResult::fail(format!("mark entry ({j}, {i}) out of order"));
        }
        let want = Point2::new(Q::zero(), f.eval_unchecked(z.z(j)));
        if vs[i] != want || arc.params.get(i) != Some(z.z(j)) {
            return CheckResult::fail(format!("mark {j} at {} with parameter {:?}, expected {}", vs[i], arc.params.get(i), want));
        }
        marked.insert(i);
    }
    for (i, p) in vs.iter().enumerate() {
        if p.x.is_negative() || (p.x.is_zero() && !marked.contains(&i)) {
            return CheckResult::fail(format!("vertex {i} at {p} is not allowed on or beyond the boundary"));
        }
    }
    CheckResult::ok()
}

fn check_separation(arc: &HalfPlaneArc) -> CheckResult {
    let vs = arc.path.vertices();
    for w in arc.marks.windows(2) {
        let ((j, i0), (_, i1)) = (w[0], w[1]);
        if i0 >= i1 {
            return CheckResult::fail(format!("marks {j} and {} are not in arc order", j + 1));
        }
        let lp = match Polyline::new(vs[i0..=i1].to_vec()) {
            Ok(lp) if closed_loop_simple(&lp) => lp,
            _ => return CheckResult::fail(format!("the loop through marks {j} and {} is not simple", j + 1)),
        };
        let segs = loop_segments(&lp);
        for (k, p) in vs.iter().enumerate() {
            if k >= i0 && k <= i1 {
                continue;
            }
            let loc = classify_against_segments(p, &segs);
            if loc != Location::Outside {
                return CheckResult::fail(format!("vertex {k} at {p} is {loc:?} for the loop of marks {j} and {}", j + 1));
            }
        }
        let side = Segment::new(vs[i1].clone(), vs[i0].clone());
        for k in (0..vs.len() - 1).filter(|&k| k + 1 <= i0 || k >= i1) {
            let s = Segment::new(vs[k].clone(), vs[k + 1].clone());
            let allowed = if k + 1 == i0 {
                Some(vs[i0].clone())
            } else if k == i1 {
                Some(vs[i1].clone())
            } else {
                None
            };
            match seg_intersection(&s, &side) {
                IntersectionKind::None => {}
                IntersectionKind::Point(p) if Some(&p) == allowed.as_ref() => {}
                _ => return CheckResult::fail(format!("segment {k} meets the boundary side of marks {j} and {}", j + 1)),
            }
        }
    }
    CheckResult::ok()
}

/// Independent check of the three conclusions and injectivity.
pub fn verify_half_plane_arc(f: &PLMap, z: &MarkedSet, eps: &Q, arc: &HalfPlaneArc) -> ArcReport {
    let params = check_params(arc);
    let closeness = if params.pass || arc.params.len() == arc.path.vertices().len() {
        check_closeness(f, eps, arc.path.vertices(), &arc.params)
    } else {
        CheckResult::fail("parameters missing".into())
    };
    let boundary = check_boundary(f, z, arc);
    let injective = if polyline_simple(&arc.path) {
        CheckResult::ok()
    } else {
        CheckResult::fail("the polyline meets itself".into())
    };
    let separation = if boundary.pass { check_separation(arc) } else { CheckResult::fail("marks are invalid".into()) };
    ArcReport { params, closeness, boundary, injective, separation }
}

#[derive(Debug, Clone)]
struct Node {
    p: Point2,
    t: Q,
    mark: Option<usize>,
}

/// Depth coordinates and target slots for one (g, Z, family, eps).
struct Layout<'a> {
    g: &'a PlGraph,
    z: &'a MarkedSet,
    members: &'a [VisorMember],
    sigma: Q,
    lambda: Q,
    w: Q,
    /// targets below 1, sorted
    plateaus: Vec<Q>,
    /// (b', a') per member
    slots: Vec<(Q, Q)>,
}

impl<'a> Layout<'a> {
    fn new(g: &'a PlGraph, z: &'a MarkedSet, members: &'a [VisorMember], eps: &Q) -> Self {
        let targets: BTreeSet<Q> = members.iter().filter_map(|m| m.target.clone()).collect();
        let plateaus: Vec<Q> = targets.iter().filter(|c| !c.is_one()).cloned().collect();
        let mut lay = Layout {
            g,
            z,
            members,
            sigma: eps / Q::from_integer(8.into()),
            lambda: eps / Q::from_integer(4.into()),
            w: eps / Q::from_integer((8 * (targets.len() + 1)).into()),
            plateaus,
            slots: Vec::new(),
        };
        let mut groups: BTreeMap<Q, Vec<usize>> = BTreeMap::new();
        for (i, m) in members.iter().enumerate() {
            groups.entry(m.target.clone().expect("targets assigned")).or_default().push(i);
        }
        let mut slots = vec![(Q::zero(), Q::zero()); members.len()];
        for (c, mut idx) in groups {
            idx.sort_by(|&x, &y| members[y].v.cmp(&members[x].v));
            let base = lay.depth(&c);
            let den = Q::from_integer((2 * idx.len() + 1).into());
            for (k, &i) in idx.iter().enumerate() {
                let b = &base + &lay.w * Q::from_integer((2 * k + 1).into()) / &den;
                let a = &base + &lay.w * Q::from_integer((2 * k + 2).into()) / &den;
                slots[i] = (b, a);
            }
        }
        lay.slots = slots;
        lay
    }

    fn depth(&self, x: &Q) -> Q {
        let below = self.plateaus.partition_point(|c| c < x);
        &self.sigma + &self.lambda * x + &self.w * Q::from_integer(below.into())
    }

    fn mark_of(&self, x: &Q) -> Option<usize> {
        self.z.points().binary_search(x).ok().map(|i| i + 1)
    }

    fn base(&self, out: &mut Vec<Node>, lo: &Q, hi: &Q) {
        let mut xs: BTreeSet<Q> = self.g.xs().filter(|x| *x >= lo && *x <= hi).cloned().collect();
        xs.insert(lo.clone());
        xs.insert(hi.clone());
        xs.extend(self.z.points().iter().filter(|x| *x >= lo && *x <= hi).cloned());
        xs.extend(self.plateaus.iter().filter(|x| *x >= lo && *x <= hi).cloned());
        for x in xs {
            let y = self.g.eval(&x);
            let d = self.depth(&x);
            out.push(Node { p: Point2::new(d.clone(), y.clone()), t: x.clone(), mark: self.mark_of(&x) });
            if self.plateaus.binary_search(&x).is_ok() {
                out.push(Node { p: Point2::new(d + &self.w, y), t: x, mark: None });
            }
        }
    }

    fn hump(&self, out: &mut Vec<Node>, i: usize) {
        let (a, b) = (&self.members[i].interval.a, &self.members[i].interval.b);
        let (bp, ap) = &self.slots[i];
        let mut xs: BTreeSet<Q> = self.g.xs().filter(|x| *x > a && *x < b).cloned().collect();
        xs.insert(a.clone());
        xs.insert(b.clone());
        for x in xs {
            let rho = ap - (&x - a) * (ap - bp) / (b - a);
            out.push(Node { p: Point2::new(rho, self.g.eval(&x)), t: x, mark: None });
        }
    }

    /// The unsheared arc as a node list with nominal parameters.
    fn draft(&self, kappa: &Q) -> Vec<Node> {
        let mut out = Vec::new();
        let mut pos = Q::zero();
        let mut prev_b: Option<Q> = None;
        for (i, m) in self.members.iter().enumerate() {
            let a = &m.interval.a;
            if prev_b.as_ref() == Some(a) {
                if let Some(j) = self.mark_of(a) {
                    // two dip lanes let the arc reach the mark and come back
                    let y = self.g.eval(a);
                    let d = self.depth(a);
                    let bu = &self.slots[i - 1].0;
                    let av = &self.slots[i].1;
                    let mu = (av.clone().min(bu.clone()) - &d) / Q::from_integer(2.into());
                    let low = &y - kappa * Q::from_integer(2.into());
                    let mid = &y - kappa;
                    let pts = [
                        (bu.clone(), low.clone(), None),
                        (&d + &mu, low, None),
                        (d.clone(), y.clone(), Some(j)),
                        (&d + &mu, mid.clone(), None),
                        (av.clone(), mid, None),
                    ];
                    for (x, y, mark) in pts {
                        out.push(Node { p: Point2::new(x, y), t: a.clone(), mark });
                    }
                }
            } else if !(a.is_zero() && !self.z.contains(a)) {
                self.base(&mut out, &pos, a);
            }
            self.hump(&mut out, i);
            pos = m.interval.b.clone();
            prev_b = Some(pos.clone());
        }
        self.base(&mut out, &pos, &Q::one());
        out
    }
}

/// Spreads runs of equal nominal parameters around an anchor: the mark when
/// the run has one, the last vertex for the run at 1, else the first.
fn spread_params(nodes: &[Node], scale: &Q) -> Vec<Q> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut s = 0;
    for i in 1..=nodes.len() {
        if i == nodes.len() || nodes[i].t != nodes[s].t {
            runs.push((s, i));
            s = i;
        }
    }
    let max_run = runs.iter().map(|(s, e)| e - s).max().unwrap_or(1);
    let min_gap = runs
        .windows(2)
        .map(|w| &nodes[w[1].0].t - &nodes[w[0].0].t)
        .min()
        .unwrap_or_else(Q::one);
    let tau = min_gap / Q::from_integer((4 * (max_run + 1)).into()) * scale;
    let mut out = Vec::with_capacity(nodes.len());
    for &(s, e) in &runs {
        let t = &nodes[s].t;
        let anchor = (s..e)
            .find(|&i| nodes[i].mark.is_some())
            .unwrap_or(if t.is_one() { e - 1 } else { s });
        for i in s..e {
            let off = Q::from_integer((i as i64 - anchor as i64).into());
            out.push(t + &tau * off);
        }
    }
    out
}

fn in_triangle(p: &Point2, a: &Point2, b: &Point2, c: &Point2) -> bool {
    use std::cmp::Ordering::*;
    let o = [orient(a, b, p), orient(b, c, p), orient(c, a, p)];
    !(o.contains(&Less) && o.contains(&Greater))
}

/// True iff no segment meets the triangle with corners (0, y -+ delta) and
/// the apex, except segments through the apex leaving it outside the cone.
fn triangle_clear(vs: &[Point2], apex: &Point2, delta: &Q) -> bool {
    let a = Point2::new(Q::zero(), &apex.y - delta);
    let b = Point2::new(Q::zero(), &apex.y + delta);
    let edges = [Segment::new(a.clone(), b.clone()), Segment::new(b.clone(), apex.clone()), Segment::new(apex.clone(), a.clone())];
    for w in vs.windows(2) {
        let other = if &w[0] == apex {
            Some(&w[1])
        } else if &w[1] == apex {
            Some(&w[0])
        } else {
            None
        };
        if let Some(o) = other {
            let v = o.sub(apex);
            if !(!v.x.is_negative() || v.y.abs() * &apex.x > delta * v.x.abs()) {
                return false;
            }
            continue;
        }
        if in_triangle(&w[0], &a, &b, apex) || in_triangle(&w[1], &a, &b, apex) {
            return false;
        }
        let s = Segment::new(w[0].clone(), w[1].clone());
        if edges.iter().any(|e| seg_intersection(&s, e) != IntersectionKind::None) {
            return false;
        }
    }
    true
}

/// Moves every mark onto x = 0 by a shear X -> X - w(y), where w is a sum of
/// tent profiles in y, one per mark. Segments are split at the kinks of w.
fn shear(vs: Vec<Point2>, ps: Vec<Q>, marks: &[(usize, usize)], eps: &Q) -> Option<(Vec<Point2>, Vec<Q>, Vec<(usize, usize)>)> {
    let ys: Vec<Q> = marks.iter().map(|&(_, i)| vs[i].y.clone()).collect();
    let mut delta0 = ys.windows(2).map(|w| (&w[1] - &w[0]) / Q::from_integer(2.into())).min().unwrap_or_else(|| eps.clone());
    delta0 = delta0.min(eps.clone());
    let mut profile: Vec<(Q, Q, Q)> = Vec::new();
    for &(_, i) in marks {
        let apex = &vs[i];
        let mut d = delta0.clone();
        let mut tries = 0;
        while !triangle_clear(&vs, apex, &d) {
            tries += 1;
            if tries > 200 {
                return None;
            }
            d /= Q::from_integer(2.into());
        }
        profile.push((apex.y.clone(), d, apex.x.clone()));
    }
    let levels: BTreeSet<Q> = profile.iter().flat_map(|(y, d, _)| [y - d, y.clone(), y + d]).collect();
    let mut nv: Vec<Point2> = Vec::new();
    let mut np: Vec<Q> = Vec::new();
    let mut index_map = vec![0usize; vs.len()];
    for i in 0..vs.len() {
        index_map[i] = nv.len();
        nv.push(vs[i].clone());
        np.push(ps[i].clone());
        if i + 1 == vs.len() {
            break;
        }
        let (p, r) = (&vs[i], &vs[i + 1]);
        if p.y == r.y {
            continue;
        }
        let mut cuts: Vec<Q> = levels
            .iter()
            .map(|l| (l - &p.y) / (&r.y - &p.y))
            .filter(|s| s.is_positive() && s < &Q::one())
            .collect();
        cuts.sort();
        for s in cuts {
            nv.push(lerp(p, r, &s));
            np.push(&ps[i] + (&ps[i + 1] - &ps[i]) * s);
        }
    }
    let w = |y: &Q| -> Q {
        let mut total = Q::zero();
        for (yj, d, dj) in &profile {
            let off = (y - yj).abs();
            if &off < d {
                total += dj * (Q::one() - off / d);
            }
        }
        total
    };
    let nv = nv.into_iter().map(|p| Point2::new(&p.x - w(&p.y), p.y)).collect();
    let marks = marks.iter().map(|&(j, i)| (j, index_map[i])).collect();
    Some((nv, np, marks))
}

/// Builds an arc satisfying the three conclusions for (f, Z, eps).
pub fn build_half_plane_arc(f: &PLMap, z: &MarkedSet, eps: &Q) -> Result<HalfPlaneArc, TuckError> {
    if !eps.is_positive() {
        return Err(TuckError::InfeasiblePerturbation);
    }
    check_order(f, z)?;
    let family = assign_targets(f, z, &choose_visor_family(f, z)?)?;
    let pm = perturb_map(f, z, &family, eps)?;
    let layout = Layout::new(&pm.fprime, z, &family.members, eps);
    let mut kappa = eps / Q::from_integer(64.into());
    let mut scale = Q::one();
    let two = Q::from_integer(2.into());
    // the spread has to fall below eps divided by the slopes of f, so small
    // eps needs proportionally more rounds
    let rounds = 40 + (eps.denom().bits() as i64 - eps.numer().bits() as i64).max(0) as usize;
    for _ in 0..rounds {
        if let Some(arc) = attempt(f, z, eps, &layout, &kappa, &scale) {
            return Ok(arc);
        }
        kappa /= &two;
        scale /= &two;
    }
    Err(TuckError::ConstructionFailed("no admissible lane width or parameter spread".into()))
}

fn attempt(f: &PLMap, z: &MarkedSet, eps: &Q, layout: &Layout, kappa: &Q, scale: &Q) -> Option<HalfPlaneArc> {
    let nodes = layout.draft(kappa);
    let ps = spread_params(&nodes, scale);
    let vs: Vec<Point2> = nodes.iter().map(|n| n.p.clone()).collect();
    let path = Polyline::new(vs.clone()).ok()?;
    if !polyline_simple(&path) || !check_closeness(f, eps, &vs, &ps).pass {
        return None;
    }
    let marks: Vec<(usize, usize)> = nodes.iter().enumerate().filter_map(|(i, n)| n.mark.map(|j| (j, i))).collect();
    if marks.len() != z.len() {
        return None;
    }
    let (vs, ps, marks) = shear(vs, ps, &marks, eps)?;
    let arc = HalfPlaneArc { path: Polyline::new(vs).ok()?, params: ps, marks };
    verify_half_plane_arc(f, z, eps, &arc).all_pass().then_some(arc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomcore::q;
    use crate::visor::blocked_example;

    fn family(f: &PLMap, z: &MarkedSet) -> VisorFamily {
        assign_targets(f, z, &choose_visor_family(f, z).unwrap()).unwrap()
    }

    fn zs(v: &[(i64, i64)]) -> MarkedSet {
        MarkedSet::new(v.iter().map(|&(n, d)| q(n, d)).collect()).unwrap()
    }

    #[test]
    fn identity_needs_no_perturbation() {
        let f = PLMap::identity();
        let z = zs(&[(1, 2)]);
        let pm = perturb_map(&f, &z, &family(&f, &z), &q(1, 10)).unwrap();
        assert_eq!(pm.fprime, PlGraph::from_map(&f));
        assert!(pm.delta.is_zero());
    }

    #[test]
    fn tent4_perturbation_has_all_properties() {
        let f = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let fam = family(&f, &z);
        assert_eq!(fam.members.len(), 1);
        assert_eq!((&fam.members[0].interval.a, &fam.members[0].interval.b), (&q(0, 1), &q(1, 2)));
        assert_eq!(fam.members[0].target, Some(q(1, 1)));
        let plain = check_perturbation(&f, &z, &fam, &q(1, 10), &PlGraph::from_map(&f));
        // f(3/4) = f(1/2) = 0 breaks the strict minimum at b = 1/2
        assert!(plain.below_marks && !plain.minima);
        let pm = perturb_map(&f, &z, &fam, &q(1, 10)).unwrap();
        assert!(check_perturbation(&f, &z, &fam, &q(1, 10), &pm.fprime).all());
        assert_eq!(pm.fprime.eval(&q(5, 8)), q(1, 2));
        assert!(pm.fprime.eval(&q(3, 4)) > pm.fprime.eval(&q(1, 2)));
    }

    #[test]
    fn zero_eps_is_infeasible() {
        let f = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let fam = family(&f, &z);
        assert_eq!(perturb_map(&f, &z, &fam, &q(0, 1)), Err(TuckError::InfeasiblePerturbation));
        assert_eq!(build_half_plane_arc(&f, &z, &q(0, 1)), Err(TuckError::InfeasiblePerturbation));
    }

    #[test]
    fn interval_difference() {
        let base = Iv::new(q(0, 1), true, q(1, 1), false);
        let cut = Iv::new(q(1, 4), false, q(1, 2), false);
        let parts = base.minus(&cut);
        assert_eq!(parts, vec![Iv::new(q(0, 1), true, q(1, 4), true), Iv::new(q(1, 2), true, q(1, 1), false)]);
        let from_zero = Iv::new(q(0, 1), true, q(1, 2), false);
        assert_eq!(base.minus(&from_zero), vec![Iv::new(q(1, 2), true, q(1, 1), false)]);
    }

    #[test]
    fn strict_bounds_at_open_ends() {
        let g = PlGraph::from_map(&PLMap::identity());
        let open = Iv::new(q(0, 1), false, q(1, 1), true);
        assert!(strictly_on(&g, &open, &q(0, 1), true));
        let closed = Iv::new(q(0, 1), true, q(1, 1), true);
        assert!(!strictly_on(&g, &closed, &q(0, 1), true));
        let below = Iv::new(q(0, 1), true, q(1, 2), false);
        assert!(strictly_on(&g, &below, &q(1, 2), false));
    }

    #[test]
    fn identity_arc_touches_boundary_once() {
        let f = PLMap::identity();
        let z = zs(&[(1, 2)]);
        let arc = build_half_plane_arc(&f, &z, &q(1, 10)).unwrap();
        assert!(verify_half_plane_arc(&f, &z, &q(1, 10), &arc).all_pass());
        let on_axis: Vec<&Point2> = arc.path.vertices().iter().filter(|p| p.x.is_zero()).collect();
        assert_eq!(on_axis, vec![&Point2::new(q(0, 1), q(1, 2))]);
    }

    #[test]
    fn tent4_arc_verifies() {
        let f = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        for eps in [q(1, 10), q(1, 4), q(1, 16)] {
            let arc = build_half_plane_arc(&f, &z, &eps).unwrap();
            let report = verify_half_plane_arc(&f, &z, &eps, &arc);
            assert!(report.all_pass(), "{report:?}");
            // the arc starts inside the target slot beyond the end of the base graph
            let vs = arc.path.vertices();
            assert!(vs[0].x > vs[vs.len() - 1].x);
        }
    }

    #[test]
    fn blocked_map_is_rejected() {
        let z = zs(&[(1, 2)]);
        assert!(matches!(build_half_plane_arc(&blocked_example(), &z, &q(1, 10)), Err(TuckError::NonRemovableVisor(_))));
    }

    #[test]
    fn order_violation_is_reported() {
        let f = PLMap::tent(2);
        let z = zs(&[(1, 2), (3, 4)]);
        assert_eq!(build_half_plane_arc(&f, &z, &q(1, 10)), Err(TuckError::OrderHypothesisViolated(2)));
    }

    #[test]
    fn tampered_arcs_fail() {
        let f = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let eps = q(1, 10);
        let arc = build_half_plane_arc(&f, &z, &eps).unwrap();
        let mut vs = arc.path.vertices().to_vec();
        vs[1].x = q(-1, 100);
        let bad = HalfPlaneArc { path: Polyline::new(vs).unwrap(), ..arc.clone() };
        let r = verify_half_plane_arc(&f, &z, &eps, &bad);
        assert!(!r.boundary.pass);
        let shift = Point2::new(q(0, 1), &eps * q(2, 1));
        let moved: Vec<Point2> = arc.path.vertices().iter().map(|p| p.add(&shift)).collect();
        let bad = HalfPlaneArc { path: Polyline::new(moved).unwrap(), ..arc.clone() };
        let r = verify_half_plane_arc(&f, &z, &eps, &bad);
        assert!(!r.closeness.pass);
        assert!(r.closeness.witness.unwrap().contains("squared distance"));
    }

    #[test]
    fn arc_json_round_trip() {
        let f = PLMap::tent(4);
        let z = zs(&[(5, 8)]);
        let arc = build_half_plane_arc(&f, &z, &q(1, 4)).unwrap();
        let s = serde_json::to_string(&arc).unwrap();
        let back: HalfPlaneArc = serde_json::from_str(&s).unwrap();
        assert_eq!(arc, back);
    }
}
