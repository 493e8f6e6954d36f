//! Stagewise plane embeddings of an inverse limit of arcs.
//!
//! Stage 1 is a half-plane arc placed directly in the plane. Each later stage
//! draws the next half-plane arc inside a one-sided piecewise-affine tube
//! around the previous curve: picture height becomes the previous curve's
//! parameter, picture depth becomes the transverse tube coordinate. Marked
//! points never move once created, so a whisker reaching one from the free
//! side stays valid at every later stage as long as it misses the tubes.

use std::cmp::Ordering;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geomcore::{cross, dot, orient, polyline_simple, serde_q, serde_qvec, to_decimal_sig, closed_loop_simple, Point2, Polyline, Rational as Q};
use crate::plmap::PLMap;
use crate::tuck::{build_half_plane_arc, TuckError};
use crate::visor::{all_visors_removable, check_order, MarkedSet, VisorError};

pub const STAGE_SCHEMA: &str = "plembed.stage/1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbedError {
    #[error("precondition {clause} violated: {detail}")]
    PreconditionViolated { clause: u8, detail: String },
    #[error("non-removable visor: {0}")]
    NonRemovableVisor(String),
    #[error("tube too narrow: {0}")]
    TubeTooNarrow(String),
    #[error("arc construction failed: {0}")]
    Tuck(String),
    #[error("unknown export format {0:?}")]
    UnknownFormat(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed stage: {0}")]
    Malformed(String),
}

impl From<TuckError> for EmbedError {
    fn from(e: TuckError) -> Self {
        match e {
            TuckError::NonRemovableVisor(s) => EmbedError::NonRemovableVisor(s),
            other => EmbedError::Tuck(other.to_string()),
        }
    }
}

fn two_pow(k: u32) -> BigInt {
    BigInt::one() << k
}

/// Nearest multiple of 2^-k.
fn round_dyadic(x: &Q, k: u32) -> Q {
    let s = two_pow(k);
    let n: BigInt = x.numer() * &s * 2 + x.denom();
    let r = n.div_floor(&(x.denom() * 2));
    Q::new(r, s)
}

/// Largest 2^-k not exceeding x (x > 0).
fn dyadic_floor(x: &Q) -> Q {
    let mut h = Q::one();
    while h > *x {
        h /= Q::from_integer(BigInt::from(2));
    }
    while &h * Q::from_integer(BigInt::from(2)) <= *x {
        h *= Q::from_integer(BigInt::from(2));
    }
    h
}

fn half() -> Q {
    Q::new(BigInt::one(), BigInt::from(2))
}

fn f64_of(x: &Q) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Right-hand normal of a direction.
fn right_normal(d: &Point2) -> Point2 {
    Point2::new(d.y.clone(), -d.x.clone())
}

fn sup_norm(p: &Point2) -> Q {
    p.x.abs().max(p.y.abs())
}

/// Strictly right of d with the angle at least about 14 degrees.
fn comfortably_right(d: &Point2, m: &Point2) -> bool {
    let c = cross(d, m);
    if !c.is_negative() {
        return false;
    }
    &c * &c * Q::from_integer(BigInt::from(16)) >= dot(d, d) * dot(m, m)
}

fn strictly_right(d: &Point2, m: &Point2) -> bool {
    cross(d, m).is_negative()
}

fn normalize_offset(m: &Point2) -> Point2 {
    let n = sup_norm(m);
    let exact = m.scale(&(Q::one() / n));
    let rounded = Point2::new(round_dyadic(&exact.x, 24), round_dyadic(&exact.y, 24));
    if rounded.x.is_zero() && rounded.y.is_zero() {
        exact
    } else {
        rounded
    }
}

/// A transverse direction pointing right of both incident segments.
fn corner_offset(d1: &Point2, d2: &Point2) -> Option<Point2> {
    let n1 = right_normal(d1);
    let n2 = right_normal(d2);
    let sum = normalize_offset(&n1.scale(&(Q::one() / sup_norm(&n1))).add(&n2.scale(&(Q::one() / sup_norm(&n2)))));
    if strictly_right(d1, &sum) && strictly_right(d2, &sum) {
        return Some(sum);
    }
    let c = -dot(d1, d2);
    if !c.is_positive() {
        let m = n1.add(&n2);
        return Some(normalize_offset(&m));
    }
    let lo = &c / dot(d2, d2);
    let hi = dot(d1, d1) / &c;
    if lo >= hi {
        return None;
    }
    let r = (lo + hi) * half();
    let m = n1.add(&n2.scale(&r));
    let rounded = normalize_offset(&m);
    if strictly_right(d1, &rounded) && strictly_right(d2, &rounded) {
        Some(rounded)
    } else {
        Some(m.scale(&(Q::one() / sup_norm(&m))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One-sided tube: quad k spans spine vertices k and k+1 and their offsets
/// `spine[k] + halfwidth * offsets[k]`. The spine carries one short straight
/// extension at each end so heights slightly outside [0, 1] still land in
/// the corridor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tube {
    pub spine: Vec<Point2>,
    #[serde(with = "serde_qvec")]
    pub params: Vec<Q>,
    pub offsets: Vec<Point2>,
    #[serde(with = "serde_q")]
    pub halfwidth: Q,
    pub side: Side,
}

impl Tube {
    /// Builds the spine (curve plus end extensions) and offset directions.
    /// Fails only when two consecutive segments fold back onto each other.
    fn frame(curve: &[Point2], params: &[Q], shrink: u32) -> Result<(Vec<Point2>, Vec<Q>, Vec<Point2>), EmbedError> {
        let n = curve.len();
        if n < 2 {
            return Err(EmbedError::Malformed("curve needs two vertices".into()));
        }
        let gap = |i: usize| &params[i + 1] - &params[i];
        let e = dyadic_floor(&(gap(0).min(gap(n - 2)) * half())) / Q::from_integer(two_pow(shrink));
        let first = curve[0].sub(&curve[1].sub(&curve[0]).scale(&(&e / gap(0))));
        let last = curve[n - 1].add(&curve[n - 1].sub(&curve[n - 2]).scale(&(&e / gap(n - 2))));
        let mut spine = Vec::with_capacity(n + 2);
        spine.push(first);
        spine.extend(curve.iter().cloned());
        spine.push(last);
        let mut sp = Vec::with_capacity(n + 2);
        sp.push(-e.clone());
        sp.extend(params.iter().cloned());
        sp.push(Q::one() + e);
        let dirs: Vec<Point2> = spine.windows(2).map(|w| w[1].sub(&w[0])).collect();
        let mut offsets: Vec<Point2> = Vec::with_capacity(spine.len());
        offsets.push(normalize_offset(&right_normal(&dirs[0])));
        for k in 1..spine.len() - 1 {
            let (d1, d2) = (&dirs[k - 1], &dirs[k]);
            let prev = &offsets[k - 1];
            if comfortably_right(d1, prev) && comfortably_right(d2, prev) {
                offsets.push(prev.clone());
                continue;
            }
            match corner_offset(d1, d2) {
                Some(m) => offsets.push(m),
                None => return Err(EmbedError::TubeTooNarrow(format!("spine folds back at vertex {}", k))),
            }
        }
        let tail = normalize_offset(&right_normal(&dirs[dirs.len() - 1]));
        let last_prev = offsets[offsets.len() - 1].clone();
        offsets.push(if comfortably_right(&dirs[dirs.len() - 1], &last_prev) { last_prev } else { tail });
        Ok((spine, sp, offsets))
    }

    pub fn num_quads(&self) -> usize {
        self.spine.len() - 1
    }

    pub fn rail(&self, k: usize) -> Point2 {
        self.spine[k].add(&self.offsets[k].scale(&self.halfwidth))
    }

    /// The two triangles of quad k, both clockwise.
    pub fn triangles(&self, k: usize) -> [[Point2; 3]; 2] {
        let (p0, p1) = (self.spine[k].clone(), self.spine[k + 1].clone());
        let (r0, r1) = (self.rail(k), self.rail(k + 1));
        [[p0.clone(), p1, r1.clone()], [p0, r1, r0]]
    }

    /// Closed boundary: spine forward, rail backward.
    pub fn boundary(&self) -> Vec<Point2> {
        let mut b = self.spine.clone();
        for k in (0..self.spine.len()).rev() {
            b.push(self.rail(k));
        }
        b
    }

    /// Exact validity: every triangle clockwise and the boundary loop simple.
    /// Together these make the corridor map a homeomorphism onto the tube.
    pub fn validate(&self) -> Result<(), String> {
        if self.spine.len() != self.params.len() || self.spine.len() != self.offsets.len() {
            return Err("spine, params and offsets differ in length".into());
        }
        if !self.halfwidth.is_positive() {
            return Err("halfwidth must be positive".into());
        }
        if self.params.windows(2).any(|w| w[0] >= w[1]) {
            return Err("spine params must increase".into());
        }
        for k in 0..self.num_quads() {
            for (t, tri) in self.triangles(k).iter().enumerate() {
                if orient(&tri[0], &tri[1], &tri[2]) != Ordering::Less {
                    return Err(format!("triangle {} of quad {} is not clockwise", t, k));
                }
            }
        }
        let b = Polyline::new(self.boundary()).map_err(|e| e.to_string())?;
        if !closed_loop_simple(&b) {
            return Err("tube boundary is not simple".into());
        }
        Ok(())
    }

    fn quad_at(&self, s: &Q) -> Option<usize> {
        let n = self.params.len();
        if *s < self.params[0] || *s > self.params[n - 1] {
            return None;
        }
        let k = self.params.partition_point(|p| p <= s);
        Some(k.saturating_sub(1).min(n - 2))
    }

    /// Corridor map: transverse coordinate u (0 on the spine, 1 on the rail,
    /// negative on the free side) and spine parameter s.
    pub fn map(&self, u: &Q, s: &Q) -> Option<Point2> {
        let k = self.quad_at(s)?;
        Some(self.map_in(k, u, s))
    }

    fn map_in(&self, k: usize, u: &Q, s: &Q) -> Point2 {
        let lam = (s - &self.params[k]) / (&self.params[k + 1] - &self.params[k]);
        let d = self.spine[k + 1].sub(&self.spine[k]);
        let lo = if *u < lam { u.clone() } else { lam.clone() };
        let rest = u - &lo;
        let tr = self.offsets[k + 1].scale(&lo).add(&self.offsets[k].scale(&rest));
        self.spine[k].add(&d.scale(&lam)).add(&tr.scale(&self.halfwidth))
    }

    fn bent(&self, k: usize) -> bool {
        self.offsets[k] != self.offsets[k + 1]
    }

    fn narrowed(&self, h: Q) -> Tube {
        Tube { halfwidth: h, ..self.clone() }
    }

    /// Upper bound on the spine's speed |dP/ds|.
    fn speed_bound(&self) -> Q {
        let mut best = Q::zero();
        for k in 0..self.num_quads() {
            let d = self.spine[k + 1].sub(&self.spine[k]);
            let ds = &self.params[k + 1] - &self.params[k];
            let v = dot(&d, &d) / (&ds * &ds);
            if v > best {
                best = v;
            }
        }
        let mut l = Q::from_integer(BigInt::from(f64_of(&best).sqrt().ceil() as i64 + 1));
        while &l * &l < best {
            l *= Q::from_integer(BigInt::from(2));
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Whisker {
    /// schedule index of the point it reaches
    pub owner: usize,
    /// stage at which it was created
    pub created: usize,
    pub probe: Vec<Point2>,
}

impl Whisker {
    pub fn terminal(&self) -> &Point2 {
        self.probe.last().expect("probe has vertices")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMark {
    /// schedule index of the point
    pub point: usize,
    pub vertex: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StageDoc", into = "StageDoc")]
pub struct EmbeddingStage {
    pub index: usize,
    pub eps: Q,
    pub curve: Polyline,
    pub params: Vec<Q>,
    pub marks: Vec<StageMark>,
    pub tube: Tube,
    pub whiskers: Vec<Whisker>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDoc {
    pub schema: String,
    pub index: usize,
    #[serde(with = "serde_q")]
    pub eps: Q,
    pub vertices: Vec<Point2>,
    #[serde(with = "serde_qvec")]
    pub params: Vec<Q>,
    pub marks: Vec<StageMark>,
    pub tube: Tube,
    pub whiskers: Vec<Whisker>,
    /// sha256 of the document serialized with this field empty
    pub digest: String,
}

impl StageDoc {
    fn content_digest(&self) -> String {
        let blank = StageDoc { digest: String::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&blank).expect("stage serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{:02x}", b)).collect()
    }
}

impl From<EmbeddingStage> for StageDoc {
    fn from(s: EmbeddingStage) -> Self {
        let mut doc = StageDoc {
            schema: STAGE_SCHEMA.into(),
            index: s.index,
            eps: s.eps,
            vertices: s.curve.into_vertices(),
            params: s.params,
            marks: s.marks,
            tube: s.tube,
            whiskers: s.whiskers,
            digest: String::new(),
        };
        doc.digest = doc.content_digest();
        doc
    }
}

impl TryFrom<StageDoc> for EmbeddingStage {
    type Error = String;

    fn try_from(d: StageDoc) -> Result<Self, String> {
        if d.schema != STAGE_SCHEMA {
            return Err(format!("unsupported schema {:?}", d.schema));
        }
        if d.digest != d.content_digest() {
            return Err("digest does not match the content".into());
        }
        if d.params.len() != d.vertices.len() {
            return Err("one parameter per vertex is required".into());
        }
        if d.marks.iter().any(|m| m.vertex >= d.vertices.len()) {
            return Err("mark index out of range".into());
        }
        if d.whiskers.iter().any(|w| w.probe.len() < 2) {
            return Err("whisker probes need two vertices".into());
        }
        let t = &d.tube;
        if t.spine.len() < 2 || t.spine.len() != t.params.len() || t.spine.len() != t.offsets.len() {
            return Err("tube arrays differ in length".into());
        }
        let curve = Polyline::new(d.vertices).map_err(|e| e.to_string())?;
        Ok(EmbeddingStage { index: d.index, eps: d.eps, curve, params: d.params, marks: d.marks, tube: d.tube, whiskers: d.whiskers })
    }
}

impl EmbeddingStage {
    pub fn mark_point(&self, point: usize) -> Option<&Point2> {
        self.marks.iter().find(|m| m.point == point).map(|m| &self.curve.vertices()[m.vertex])
    }

    /// Curve position at parameter t in [0, 1].
    pub fn eval(&self, t: &Q) -> Point2 {
        let ps = &self.params;
        let vs = self.curve.vertices();
        let k = ps.partition_point(|p| p <= t);
        if k == 0 {
            return vs[0].clone();
        }
        if k >= ps.len() {
            return vs[vs.len() - 1].clone();
        }
        let lam = (t - &ps[k - 1]) / (&ps[k] - &ps[k - 1]);
        vs[k - 1].add(&vs[k].sub(&vs[k - 1]).scale(&lam))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessibilityCertificate {
    pub stage: usize,
    pub point: usize,
    pub probe: Vec<Point2>,
    pub pass: bool,
    /// (probe segment, tube quad) pairs meeting away from the terminal
    pub witnesses: Vec<(usize, usize)>,
}

/// Parameter interval of segment a->b inside a closed clockwise triangle.
fn clip_to_triangle(a: &Point2, b: &Point2, tri: &[Point2; 3]) -> Option<(Q, Q)> {
    let mut lo = Q::zero();
    let mut hi = Q::one();
    for i in 0..3 {
        let (e0, e1) = (&tri[i], &tri[(i + 1) % 3]);
        let e = e1.sub(e0);
        // inside means cross(e, x - e0) <= 0
        let oa = cross(&e, &a.sub(e0));
        let ob = cross(&e, &b.sub(e0));
        let slope = &ob - &oa;
        if slope.is_zero() {
            if oa.is_positive() {
                return None;
            }
            continue;
        }
        let root = -&oa / &slope;
        if slope.is_positive() {
            if root < hi {
                hi = root;
            }
        } else if root > lo {
            lo = root;
        }
        if lo > hi {
            return None;
        }
    }
    Some((lo, hi))
}

struct Boxf {
    x0: Q,
    x1: Q,
    y0: Q,
    y1: Q,
}

fn box_of<'a>(pts: impl IntoIterator<Item = &'a Point2>) -> Boxf {
    let mut it = pts.into_iter();
    let p = it.next().expect("nonempty");
    let mut b = Boxf { x0: p.x.clone(), x1: p.x.clone(), y0: p.y.clone(), y1: p.y.clone() };
    for p in it {
        if p.x < b.x0 {
            b.x0 = p.x.clone();
        }
        if p.x > b.x1 {
            b.x1 = p.x.clone();
        }
        if p.y < b.y0 {
            b.y0 = p.y.clone();
        }
        if p.y > b.y1 {
            b.y1 = p.y.clone();
        }
    }
    b
}

fn boxes_meet(a: &Boxf, b: &Boxf) -> bool {
    a.x0 <= b.x1 && b.x0 <= a.x1 && a.y0 <= b.y1 && b.y0 <= a.y1
}

fn certify(stage_index: usize, tube: &Tube, w: &Whisker) -> AccessibilityCertificate {
    let probe = &w.probe;
    let last = probe.len() - 2;
    let seg_boxes: Vec<Boxf> = probe.windows(2).map(|s| box_of(s.iter())).collect();
    let mut witnesses = Vec::new();
    let mut touched = false;
    for k in 0..tube.num_quads() {
        let tris = tube.triangles(k);
        let qbox = box_of(tris[0].iter().chain(tris[1].iter()));
        for (si, sb) in seg_boxes.iter().enumerate() {
            if !boxes_meet(sb, &qbox) {
                continue;
            }
            for tri in &tris {
                if let Some((lo, hi)) = clip_to_triangle(&probe[si], &probe[si + 1], tri) {
                    if si == last && lo.is_one() && hi.is_one() {
                        touched = true;
                    } else if witnesses.last() != Some(&(si, k)) {
                        witnesses.push((si, k));
                    }
                }
            }
        }
    }
    AccessibilityCertificate {
        stage: stage_index,
        point: w.owner,
        probe: probe.clone(),
        pass: witnesses.is_empty() && touched,
        witnesses,
    }
}

/// One certificate per whisker, each an exhaustive exact test of the probe
/// against every tube triangle.
pub fn access_certificates(stage: &EmbeddingStage) -> Vec<AccessibilityCertificate> {
    stage.whiskers.iter().map(|w| certify(stage.index, &stage.tube, w)).collect()
}

/// Tube around `curve` with the largest workable dyadic halfwidth not above
/// `cap`: valid, and every whisker certificate passing.
fn fit_tube(curve: &[Point2], params: &[Q], cap: &Q, whiskers: &[Whisker], stage: usize) -> Result<Tube, EmbedError> {
    let h = dyadic_floor(cap);
    // the halfwidth and the end extensions shrink together by 2^-shrink;
    // larger shrinks are almost always valid, so bisect on the exponent and
    // only accept a shrink that was actually checked
    let attempt = |shrink: u32| -> Result<Option<Tube>, EmbedError> {
        let (spine, sp, offsets) = Tube::frame(curve, params, shrink)?;
        let hw = &h / Q::from_integer(two_pow(shrink));
        let tube = Tube { spine, params: sp, offsets, halfwidth: hw, side: Side::Right };
        let ok = tube.validate().is_ok() && whiskers.iter().all(|w| certify(stage, &tube, w).pass);
        Ok(ok.then_some(tube))
    };
    if let Some(t) = attempt(0)? {
        return Ok(t);
    }
    let (mut bad, mut good) = (0u32, None);
    for s in [4u32, 8, 16, 32, 64, 128, 256, 512, 1024] {
        if let Some(t) = attempt(s)? {
            good = Some((s, t));
            break;
        }
        bad = s;
    }
    let (mut hi, mut best) = good.ok_or_else(|| EmbedError::TubeTooNarrow("no valid halfwidth found".into()))?;
    // each attempt costs a full validation, so stop within an eighth
    while hi - bad > (hi / 8).max(1) {
        let mid = (bad + hi) / 2;
        match attempt(mid)? {
            Some(t) => {
                hi = mid;
                best = t;
            }
            None => bad = mid,
        }
    }
    Ok(best)
}

/// Default halfwidth cap at stage i: keeps the next corridor inside the
/// next step budget eps_i / 2.
fn halfwidth_cap(eps: &Q) -> Q {
    eps / Q::from_integer(BigInt::from(16))
}

pub fn init_stage(f: &PLMap, z: &MarkedSet, eps: &Q) -> Result<EmbeddingStage, EmbedError> {
    let report = all_visors_removable(f, z).map_err(|e| EmbedError::PreconditionViolated { clause: 2, detail: e.to_string() })?;
    if !report.removable {
        return Err(EmbedError::NonRemovableVisor(format!("{} failing visor cells", report.failing.len())));
    }
    let arc = build_half_plane_arc(f, z, eps)?;
    let curve = arc.path.vertices().to_vec();
    let mut marks: Vec<StageMark> = arc.marks.iter().map(|&(j, v)| StageMark { point: j - 1, vertex: v }).collect();
    marks.sort_by_key(|m| m.point);
    let whiskers: Vec<Whisker> = marks
        .iter()
        .map(|m| {
            let p = curve[m.vertex].clone();
            let start = Point2::new(-Q::one(), p.y.clone());
            Whisker { owner: m.point, created: 1, probe: vec![start, p] }
        })
        .collect();
    let tube = fit_tube(&curve, &arc.params, &halfwidth_cap(eps), &whiskers, 1)?;
    let curve = Polyline::new(curve).map_err(|e| EmbedError::Malformed(e.to_string()))?;
    Ok(EmbeddingStage { index: 1, eps: eps.clone(), curve, params: arc.params, marks, tube, whiskers })
}

/// Images of the picture arc under the corridor map. Returns vertices,
/// params, and for each arc vertex its index in the output.
fn corridor_image(tube: &Tube, pic: &[(Q, Q)], tparams: &[Q], scale: &Q) -> Result<(Vec<Point2>, Vec<Q>, Vec<usize>), EmbedError> {
    let us: Vec<(Q, Q)> = pic.iter().map(|(x, y)| (x / scale, y.clone())).collect();
    let mut verts = Vec::new();
    let mut params = Vec::new();
    let mut at = Vec::with_capacity(us.len());
    let outside = || EmbedError::TubeTooNarrow("picture height leaves the corridor".into());
    let (u0, s0) = &us[0];
    verts.push(tube.map(u0, s0).ok_or_else(outside)?);
    params.push(tparams[0].clone());
    at.push(0);
    let sp = &tube.params;
    for i in 0..us.len() - 1 {
        let (ua, sa) = &us[i];
        let (ub, sb) = &us[i + 1];
        let du = ub - ua;
        let ds = sb - sa;
        let (smin, smax) = if sa <= sb { (sa, sb) } else { (sb, sa) };
        if *smin < sp[0] || *smax > sp[sp.len() - 1] {
            return Err(outside());
        }
        let lo = sp.partition_point(|p| p <= smin);
        let hi = sp.partition_point(|p| p < smax);
        let mut cuts: Vec<Q> = Vec::new();
        for sk in &sp[lo..hi] {
            cuts.push((sk - sa) / &ds);
        }
        let qlo = lo.saturating_sub(1);
        let qhi = hi.min(sp.len() - 1);
        for k in qlo..qhi {
            if !tube.bent(k) {
                continue;
            }
            let span = &sp[k + 1] - &sp[k];
            let den = &du - &ds / &span;
            if den.is_zero() {
                continue;
            }
            let mu = ((sa - &sp[k]) / &span - ua) / den;
            if !mu.is_positive() || mu >= Q::one() {
                continue;
            }
            let s = sa + &ds * &mu;
            if s >= sp[k] && s <= sp[k + 1] {
                cuts.push(mu);
            }
        }
        cuts.sort();
        cuts.dedup();
        let ta = &tparams[i];
        let dt = &tparams[i + 1] - ta;
        for mu in cuts {
            let u = ua + &du * &mu;
            let s = sa + &ds * &mu;
            verts.push(tube.map(&u, &s).ok_or_else(outside)?);
            params.push(ta + &dt * &mu);
        }
        verts.push(tube.map(ub, sb).ok_or_else(outside)?);
        params.push(tparams[i + 1].clone());
        at.push(verts.len() - 1);
    }
    Ok((verts, params, at))
}

/// Rounds unpinned vertices and params to the 2^-k grid, dropping vertices
/// that collapse onto a neighbour. Pinned vertices keep exact values.
fn snap(verts: Vec<Point2>, params: Vec<Q>, pinned: &[bool], k: Option<u32>) -> (Vec<Point2>, Vec<Q>, Vec<usize>) {
    let n = verts.len();
    let Some(k) = k else {
        return (verts, params, (0..n).collect());
    };
    let mut out_v: Vec<Point2> = Vec::with_capacity(n);
    let mut out_p: Vec<Q> = Vec::with_capacity(n);
    let mut index = vec![usize::MAX; n];
    for i in 0..n {
        let keep_exact = pinned[i] || i == 0 || i == n - 1;
        let v = if keep_exact { verts[i].clone() } else { Point2::new(round_dyadic(&verts[i].x, k), round_dyadic(&verts[i].y, k)) };
        let p = if keep_exact {
            params[i].clone()
        } else {
            let r = round_dyadic(&params[i], k);
            let above = out_p.last().map_or(true, |l| r > *l);
            if above && r < params[i + 1] {
                r
            } else {
                params[i].clone()
            }
        };
        if out_v.last() == Some(&v) {
            if keep_exact {
                // replace the unpinned neighbour
                let j = out_v.len() - 1;
                out_v[j] = v;
                out_p[j] = p;
                index[i] = j;
            }
            continue;
        }
        out_v.push(v);
        out_p.push(p);
        index[i] = out_v.len() - 1;
    }
    (out_v, out_p, index)
}

/// Grid size for snapping: well below the shortest edge.
fn snap_bits(verts: &[Point2]) -> u32 {
    let mut m = f64::INFINITY;
    for w in verts.windows(2) {
        let d = w[1].sub(&w[0]);
        let l = f64_of(&d.x).abs().max(f64_of(&d.y).abs());
        if l > 0.0 && l < m {
            m = l;
        }
    }
    let bits = if m.is_finite() && m > 0.0 { (-m.log2()).ceil().max(0.0) as u32 } else { 0 };
    bits + 24
}

fn precondition(clause: u8, detail: impl Into<String>) -> EmbedError {
    EmbedError::PreconditionViolated { clause, detail: detail.into() }
}

/// Next stage. Points of `z` whose image under `f` is a current mark
/// parameter continue that mark; any other point is newly scheduled and
/// gets a whisker from the free side of the current curve.
pub fn refine_stage(prev: &EmbeddingStage, f: &PLMap, z: &MarkedSet, eps: &Q) -> Result<EmbeddingStage, EmbedError> {
    if !eps.is_positive() {
        return Err(precondition(1, "eps must be positive"));
    }
    match check_order(f, z) {
        Ok(()) => {}
        Err(VisorError::OrderHypothesisViolated(i)) => return Err(precondition(2, format!("f is not increasing on the marked set at point {}", i))),
        Err(e) => return Err(precondition(2, e.to_string())),
    }
    let removable = all_visors_removable(f, z).map_err(|e| precondition(3, e.to_string()))?;
    if !removable.removable {
        return Err(precondition(3, format!("{} visor cells are not removable", removable.failing.len())));
    }
    prev.tube.validate().map_err(|e| precondition(4, format!("previous tube invalid: {}", e)))?;
    let images: Vec<Q> = z.points().iter().map(|x| f.eval_unchecked(x)).collect();
    let mut owner: Vec<Option<usize>> = vec![None; images.len()];
    for m in &prev.marks {
        let s = &prev.params[m.vertex];
        match images.iter().position(|y| y == s) {
            Some(j) => owner[j] = Some(m.point),
            None => return Err(precondition(4, format!("point {} has no continuation", m.point))),
        }
    }
    let mut next_point = prev.marks.iter().map(|m| m.point + 1).max().unwrap_or(0);
    let owners: Vec<usize> = owner
        .iter()
        .map(|o| {
            o.unwrap_or_else(|| {
                next_point += 1;
                next_point - 1
            })
        })
        .collect();

    let cap = eps / Q::from_integer(BigInt::from(8));
    let corridor = if prev.tube.halfwidth > cap {
        let mut t = prev.tube.narrowed(dyadic_floor(&cap));
        while t.validate().is_err() {
            t.halfwidth *= half();
        }
        t
    } else {
        prev.tube.clone()
    };
    let ext = &corridor.params[1] - &corridor.params[0];
    let speed = corridor.speed_bound();
    let mut eps_arc = dyadic_floor(&(ext.min(eps / (speed * Q::from_integer(BigInt::from(4))))));
    for _ in 0..8 {
        let arc = build_half_plane_arc(f, z, &eps_arc)?;
        let pic: Vec<(Q, Q)> = arc.path.vertices().iter().map(|p| (p.x.clone(), p.y.clone())).collect();
        let (verts, params, at) = corridor_image(&corridor, &pic, &arc.params, &eps_arc)?;
        let mut pinned = vec![false; verts.len()];
        for &(_, v) in &arc.marks {
            pinned[at[v]] = true;
        }
        // the exact image is simple; snapping can fold sharp spikes, so
        // refine the grid before giving up on it
        let base = snap_bits(&verts);
        let mut found = None;
        for bits in [Some(base), Some(base + 24), Some(base + 64), None] {
            let (v, p, index) = snap(verts.clone(), params.clone(), &pinned, bits);
            if let Ok(curve) = Polyline::new(v) {
                if polyline_simple(&curve) {
                    found = Some((curve, p, index));
                    break;
                }
            }
        }
        let Some((curve, params, index)) = found else {
            eps_arc *= half();
            continue;
        };
        let mut marks: Vec<StageMark> = arc.marks.iter().map(|&(j, v)| StageMark { point: owners[j - 1], vertex: index[at[v]] }).collect();
        marks.sort_by_key(|m| m.point);
        let mut whiskers = prev.whiskers.clone();
        for m in &marks {
            if prev.marks.iter().any(|pm| pm.point == m.point) {
                continue;
            }
            let s = &images[owners.iter().position(|&o| o == m.point).expect("owner")];
            let start = corridor.map(&-Q::one(), s).ok_or_else(|| EmbedError::TubeTooNarrow("new whisker".into()))?;
            whiskers.push(Whisker { owner: m.point, created: prev.index + 1, probe: vec![start, curve.vertices()[m.vertex].clone()] });
        }
        whiskers.sort_by_key(|w| w.owner);
        let candidate = EmbeddingStage { index: prev.index + 1, eps: eps.clone(), curve, params, marks, tube: corridor.clone(), whiskers };
        if !step_bound(prev, f, &candidate).pass {
            eps_arc *= half();
            continue;
        }
        let tube = fit_tube(candidate.curve.vertices(), &candidate.params, &halfwidth_cap(eps), &candidate.whiskers, candidate.index)?;
        return Ok(EmbeddingStage { tube, ..candidate });
    }
    Err(EmbedError::TubeTooNarrow("step bound not reached; try a smaller eps".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub detail: Option<String>,
}

impl Check {
    fn ok() -> Self {
        Check { pass: true, detail: None }
    }

    fn fail(d: String) -> Self {
        Check { pass: false, detail: Some(d) }
    }
}

/// Exact step bound |C'(t) - C(f(t))|^2 < eps^2. Both sides are piecewise
/// linear in t, so the squared gap is convex between consecutive
/// breakpoints: the vertices of C', the breakpoints of f, and the f-preimages
/// of the vertex parameters of C. Checking all of them covers every t.
pub fn step_bound(prev: &EmbeddingStage, f: &PLMap, next: &EmbeddingStage) -> Check {
    let eps_sq = &next.eps * &next.eps;
    let mut ts: Vec<Q> = next.params.clone();
    let bps = f.breakpoints();
    ts.extend(bps.iter().map(|(x, _)| x.clone()));
    for w in bps.windows(2) {
        let ((x0, y0), (x1, y1)) = (&w[0], &w[1]);
        if y0 == y1 {
            continue;
        }
        let (lo, hi) = if y0 < y1 { (y0, y1) } else { (y1, y0) };
        let a = prev.params.partition_point(|p| p <= lo);
        let b = prev.params.partition_point(|p| p < hi);
        let slope = (x1 - x0) / (y1 - y0);
        for s in &prev.params[a..b] {
            ts.push(x0 + (s - y0) * &slope);
        }
    }
    ts.sort();
    ts.dedup();
    for t in &ts {
        let d = next.eval(t).dist_sq(&prev.eval(&f.eval_unchecked(t)));
        if d >= eps_sq {
            return Check::fail(format!("squared gap {} at t = {} reaches eps^2", to_decimal_sig(&d, 6), t));
        }
    }
    Check::ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    pub vertices: usize,
    pub params: Check,
    pub injective: Check,
    pub marks: Check,
    pub tube: Check,
    pub step: Option<Check>,
    pub certificates: Vec<AccessibilityCertificate>,
}

impl StageReport {
    pub fn all_pass(&self) -> bool {
        self.params.pass
            && self.injective.pass
            && self.marks.pass
            && self.tube.pass
            && self.step.as_ref().map_or(true, |c| c.pass)
            && self.certificates.iter().all(|c| c.pass)
    }
}

/// Every stage-local invariant, plus the step bound when the previous stage
/// and bonding map are supplied.
pub fn verify_stage(stage: &EmbeddingStage, prev: Option<(&EmbeddingStage, &PLMap)>) -> StageReport {
    let ps = &stage.params;
    let params = if ps.len() != stage.curve.vertices().len() {
        Check::fail("one parameter per vertex is required".into())
    } else if !ps[0].is_zero() || !ps[ps.len() - 1].is_one() || ps.windows(2).any(|w| w[0] >= w[1]) {
        Check::fail("params must increase from 0 to 1".into())
    } else {
        Check::ok()
    };
    let injective = if polyline_simple(&stage.curve) { Check::ok() } else { Check::fail("curve self-intersects".into()) };
    let mut marks = Check::ok();
    for w in &stage.whiskers {
        match stage.mark_point(w.owner) {
            Some(p) if p == w.terminal() => {}
            _ => marks = Check::fail(format!("whisker of point {} does not end at its mark", w.owner)),
        }
    }
    let tube_matches = stage.tube.spine.len() == stage.curve.vertices().len() + 2
        && stage.tube.spine[1..stage.tube.spine.len() - 1] == *stage.curve.vertices()
        && stage.tube.params[1..stage.tube.params.len() - 1] == *stage.params;
    let tube = if !tube_matches {
        Check::fail("tube spine is not the curve".into())
    } else {
        match stage.tube.validate() {
            Ok(()) => Check::ok(),
            Err(e) => Check::fail(e),
        }
    };
    let step = prev.map(|(p, f)| step_bound(p, f, stage));
    StageReport {
        index: stage.index,
        vertices: stage.curve.vertices().len(),
        params,
        injective,
        marks,
        tube,
        step,
        certificates: access_certificates(stage),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// every point is marked from stage 1
    AllAtOnce,
    /// point j (0-based) first appears at stage j + 1
    OnePerStage,
}

/// Inputs for a full run: `maps[i]` is the bonding map used at stage i + 1,
/// `threads[j][i]` the level-(i + 1) coordinate of point j, so that
/// `maps[i](threads[j][i]) = threads[j][i - 1]`.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub maps: Vec<PLMap>,
    pub threads: Vec<Vec<Q>>,
    pub schedule: Schedule,
    pub eps1: Q,
}

impl PipelineSpec {
    /// Same map at every level with fixed points as constant threads.
    pub fn self_map(f: &PLMap, fixed: &[Q], depth: usize, eps1: Q, schedule: Schedule) -> Self {
        PipelineSpec {
            maps: vec![f.clone(); depth],
            threads: fixed.iter().map(|z| vec![z.clone(); depth]).collect(),
            schedule,
            eps1,
        }
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn eps_at(&self, i: usize) -> Q {
        &self.eps1 / Q::from_integer(two_pow(i as u32 - 1))
    }

    pub fn marked_at(&self, i: usize) -> Result<MarkedSet, EmbedError> {
        let count = match self.schedule {
            Schedule::AllAtOnce => self.threads.len(),
            Schedule::OnePerStage => i.min(self.threads.len()),
        };
        let mut pts: Vec<Q> = self.threads[..count].iter().map(|t| t[i - 1].clone()).collect();
        pts.sort();
        MarkedSet::new(pts).map_err(|e| precondition(1, e.to_string()))
    }
}

/// Runs all stages, stopping at the first failure.
pub fn run_pipeline(spec: &PipelineSpec) -> Result<Vec<EmbeddingStage>, EmbedError> {
    let mut stages: Vec<EmbeddingStage> = Vec::with_capacity(spec.depth());
    for i in 1..=spec.depth() {
        let z = spec.marked_at(i)?;
        let eps = spec.eps_at(i);
        let stage = match stages.last() {
            None => init_stage(&spec.maps[0], &z, &eps)?,
            Some(prev) => refine_stage(prev, &spec.maps[i - 1], &z, &eps)?,
        };
        stages.push(stage);
    }
    Ok(stages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Svg,
}

impl std::str::FromStr for ExportFormat {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, EmbedError> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "svg" => Ok(ExportFormat::Svg),
            other => Err(EmbedError::UnknownFormat(other.into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvgOptions {
    /// significant digits of every emitted coordinate
    pub precision: usize,
    /// width in pixels; height follows the aspect ratio
    pub width: u32,
}

impl Default for SvgOptions {
    fn default() -> Self {
        SvgOptions { precision: 12, width: 800 }
    }
}

pub fn export_stage(stage: &EmbeddingStage, format: ExportFormat, opts: &SvgOptions) -> String {
    match format {
        ExportFormat::Json => serde_json::to_string_pretty(stage).expect("stage serializes"),
        ExportFormat::Svg => stage_svg(stage, opts),
    }
}

pub fn stage_from_json(s: &str) -> Result<EmbeddingStage, EmbedError> {
    serde_json::from_str(s).map_err(|e| EmbedError::Malformed(e.to_string()))
}

fn stage_svg(stage: &EmbeddingStage, opts: &SvgOptions) -> String {
    let boundary = stage.tube.boundary();
    let all = stage.curve.vertices().iter().chain(boundary.iter()).chain(stage.whiskers.iter().flat_map(|w| w.probe.iter()));
    let b = box_of(all);
    let w = &b.x1 - &b.x0;
    let h = &b.y1 - &b.y0;
    let span = if w > h { w } else { h };
    let span = if span.is_zero() { Q::one() } else { span };
    let pad = &span / Q::from_integer(BigInt::from(20));
    let (x0, y1) = (&b.x0 - &pad, &b.y1 + &pad);
    let vw = &b.x1 - &b.x0 + &pad * Q::from_integer(BigInt::from(2));
    let vh = &b.y1 - &b.y0 + &pad * Q::from_integer(BigInt::from(2));
    let d = |x: &Q| to_decimal_sig(x, opts.precision);
    // y grows downward in SVG
    let pt = |p: &Point2| format!("{} {}", d(&(&p.x - &x0)), d(&(&y1 - &p.y)));
    let path = |pts: &[Point2]| {
        let mut s = String::new();
        for (i, p) in pts.iter().enumerate() {
            s.push_str(if i == 0 { "M" } else { " L" });
            s.push_str(&pt(p));
        }
        s
    };
    let stroke = &span / Q::from_integer(BigInt::from(400));
    let height = (vh.clone() / &vw * Q::from_integer(BigInt::from(opts.width))).ceil().to_integer();
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        opts.width,
        height,
        d(&vw),
        d(&vh)
    );
    let _ = writeln!(out, r##"<path class="tube" d="{} Z" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, path(&boundary));
    let _ = writeln!(out, r##"<path class="curve" d="{}" fill="none" stroke="#08306b" stroke-width="{}"/>"##, path(stage.curve.vertices()), d(&stroke));
    for wk in &stage.whiskers {
        let _ = writeln!(out, r##"<path class="whisker" d="{}" fill="none" stroke="#cb181d" stroke-width="{}"/>"##, path(&wk.probe), d(&stroke));
    }
    for m in &stage.marks {
        let p = &stage.curve.vertices()[m.vertex];
        let c = pt(p);
        let mut it = c.split(' ');
        let (cx, cy) = (it.next().unwrap_or("0"), it.next().unwrap_or("0"));
        let _ = writeln!(out, r##"<circle class="mark" cx="{}" cy="{}" r="{}" fill="#cb181d"/>"##, cx, cy, d(&(&stroke * Q::from_integer(BigInt::from(3)))));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomcore::q;
    use crate::visor::blocked_example;

    fn zs(v: &[Q]) -> MarkedSet {
        MarkedSet::new(v.to_vec()).unwrap()
    }

    fn identity_stage() -> EmbeddingStage {
        init_stage(&PLMap::identity(), &zs(&[q(1, 2)]), &q(1, 4)).unwrap()
    }

    #[test]
    fn identity_init_has_one_passing_whisker() {
        let s = identity_stage();
        assert_eq!(s.whiskers.len(), 1);
        assert_eq!(s.whiskers[0].created, 1);
        assert_eq!(s.mark_point(0), Some(&Point2::new(Q::zero(), q(1, 2))));
        let rep = verify_stage(&s, None);
        assert!(rep.all_pass(), "{:?}", rep);
        assert_eq!(rep.certificates.len(), 1);
    }

    #[test]
    fn blocked_map_is_rejected() {
        let err = init_stage(&blocked_example(), &zs(&[q(1, 2)]), &q(1, 4)).unwrap_err();
        assert!(matches!(err, EmbedError::NonRemovableVisor(_)));
    }

    #[test]
    fn refine_checks_order() {
        let prev = identity_stage();
        let err = refine_stage(&prev, &PLMap::tent(2), &zs(&[q(1, 4), q(3, 4)]), &q(1, 8)).unwrap_err();
        assert!(matches!(err, EmbedError::PreconditionViolated { clause: 2, .. }));
        let err = refine_stage(&prev, &PLMap::identity(), &zs(&[q(1, 2)]), &Q::zero()).unwrap_err();
        assert!(matches!(err, EmbedError::PreconditionViolated { clause: 1, .. }));
    }

    #[test]
    fn refine_requires_continuations() {
        let prev = identity_stage();
        // the mark at parameter 1/2 has no preimage in {1/4}
        let err = refine_stage(&prev, &PLMap::identity(), &zs(&[q(1, 4)]), &q(1, 8)).unwrap_err();
        assert!(matches!(err, EmbedError::PreconditionViolated { clause: 4, .. }));
    }

    #[test]
    fn identity_refine_keeps_marks_and_whiskers() {
        let prev = identity_stage();
        let next = refine_stage(&prev, &PLMap::identity(), &zs(&[q(1, 2)]), &q(1, 8)).unwrap();
        assert_eq!(next.index, 2);
        assert_eq!(next.whiskers, prev.whiskers);
        assert_eq!(next.mark_point(0), prev.mark_point(0));
        let rep = verify_stage(&next, Some((&prev, &PLMap::identity())));
        assert!(rep.all_pass(), "{:?}", rep);
        assert_eq!(rep.step, Some(Check::ok()));
    }

    #[test]
    fn rerouted_whisker_fails_with_witnesses() {
        let mut s = identity_stage();
        let t = s.whiskers[0].terminal().clone();
        // cross the whole tube before coming back to the mark
        let far = Point2::new(Q::one(), t.y.clone());
        s.whiskers[0].probe = vec![Point2::new(-Q::one(), t.y.clone()), far, Point2::new(Q::one(), &t.y + q(1, 64)), t];
        let certs = access_certificates(&s);
        assert!(!certs[0].pass);
        assert!(!certs[0].witnesses.is_empty());
        s.whiskers.clear();
        assert!(access_certificates(&s).is_empty());
    }

    #[test]
    fn json_round_trip_and_tamper() {
        let s = identity_stage();
        let text = export_stage(&s, ExportFormat::Json, &SvgOptions::default());
        assert!(text.contains(STAGE_SCHEMA));
        assert_eq!(stage_from_json(&text).unwrap(), s);
        // change one digit of the eps field
        let bad = text.replacen("\"1/4\"", "\"1/5\"", 1);
        assert_ne!(bad, text);
        assert!(matches!(stage_from_json(&bad), Err(EmbedError::Malformed(_))));
        let wrong_schema = text.replacen(STAGE_SCHEMA, "plembed.stage/0", 1);
        assert!(stage_from_json(&wrong_schema).is_err());
    }

    #[test]
    fn svg_has_every_layer() {
        let s = identity_stage();
        let svg = export_stage(&s, ExportFormat::Svg, &SvgOptions::default());
        assert!(svg.starts_with("<?xml"));
        assert!(svg.ends_with("</svg>\n"));
        for needle in ["class=\"tube\"", "class=\"curve\"", "class=\"whisker\"", "class=\"mark\"", "version=\"1.1\""] {
            assert!(svg.contains(needle), "missing {}", needle);
        }
        assert_eq!(svg, export_stage(&s, ExportFormat::Svg, &SvgOptions::default()));
    }

    #[test]
    fn unknown_format() {
        assert_eq!("png".parse::<ExportFormat>(), Err(EmbedError::UnknownFormat("png".into())));
        assert_eq!("svg".parse::<ExportFormat>(), Ok(ExportFormat::Svg));
    }

    #[test]
    fn one_point_per_stage() {
        let spec = PipelineSpec::self_map(&PLMap::identity(), &[q(1, 4), q(3, 4)], 3, q(1, 4), Schedule::OnePerStage);
        let stages = run_pipeline(&spec).unwrap();
        for (i, s) in stages.iter().enumerate() {
            assert_eq!(s.whiskers.len(), (i + 1).min(2));
            let prev = (i > 0).then(|| (&stages[i - 1], &spec.maps[i]));
            assert!(verify_stage(s, prev).all_pass());
        }
        // whiskers never change once created
        for w in &stages[0].whiskers {
            assert!(stages[1..].iter().all(|s| s.whiskers.contains(w)));
        }
        assert_eq!(stages[1].whiskers.iter().map(|w| w.created).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn dyadic_helpers() {
        assert_eq!(dyadic_floor(&q(3, 10)), q(1, 4));
        assert_eq!(dyadic_floor(&q(1, 4)), q(1, 4));
        assert_eq!(round_dyadic(&q(1, 3), 4), q(5, 16));
        assert_eq!(round_dyadic(&q(-1, 3), 4), q(-5, 16));
    }
}
