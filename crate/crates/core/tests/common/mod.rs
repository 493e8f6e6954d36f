//! Shared fixtures for the integration suites: random small instances and a
//! brute-force grid oracle for visor removal.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::Rng;

use plembed::geomcore::Rational;
use plembed::plmap::PLMap;
use plembed::visor::MarkedSet;

pub fn r(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

/// Random PL map with at most `max_bps` breakpoints whose coordinates have
/// denominators dividing some d <= `max_den`, plus a random marked set of
/// size <= 3 satisfying the order hypothesis. Returns None when the draw
/// cannot satisfy the hypothesis.
pub fn random_instance<R: Rng>(rng: &mut R, max_bps: usize, max_den: i64) -> Option<(PLMap, MarkedSet)> {
    let d = rng.gen_range(2..=max_den);
    let interior = rng.gen_range(0..=(max_bps - 2).min(d as usize - 1));
    let mut xs: Vec<i64> = (1..d).collect();
    xs.shuffle(rng);
    let mut xs: Vec<i64> = xs.into_iter().take(interior).collect();
    xs.sort();
    let mut pts = vec![(Rational::zero(), r(rng.gen_range(0..=d), d))];
    for x in xs {
        pts.push((r(x, d), r(rng.gen_range(0..=d), d)));
    }
    pts.push((Rational::one(), r(rng.gen_range(0..=d), d)));
    let f = PLMap::new(pts).ok()?;
    let n = rng.gen_range(1..=3usize);
    let mut zk: Vec<i64> = (0..=d).collect();
    zk.shuffle(rng);
    let mut zk: Vec<i64> = zk.into_iter().take(n).collect();
    zk.sort();
    let z: Vec<Rational> = zk.into_iter().map(|k| r(k, d)).collect();
    let vals: Vec<Rational> = z.iter().map(|x| f.eval_unchecked(x)).collect();
    if vals.windows(2).any(|w| w[0] >= w[1]) {
        return None;
    }
    Some((f, MarkedSet::new(z).ok()?))
}

/// Like [`random_instance`] but retries until the hypothesis holds and at
/// least one visor exists.
pub fn random_instance_with_visor<R: Rng>(rng: &mut R, max_bps: usize, max_den: i64) -> (PLMap, MarkedSet) {
    loop {
        if let Some((f, z)) = random_instance(rng, max_bps, max_den) {
            if !plembed::visor::visor_components(&f, &z).unwrap().is_empty() {
                return (f, z);
            }
        }
    }
}

/// lcm of every breakpoint and marked-point x denominator.
pub fn lcm_den(f: &PLMap, z: &MarkedSet) -> BigInt {
    let mut l = BigInt::one();
    for x in f.breakpoint_xs().chain(z.points().iter()) {
        l = l.lcm(x.denom());
    }
    l
}

/// Brute-force removal decisions over triples drawn from {k/D}.
///
/// Values of f at grid points are replaced by their ranks, so every
/// comparison in the removal conditions becomes an integer comparison.
pub struct GridOracle {
    pub den: i64,
    pts: Vec<Rational>,
    rank: Vec<u32>,
    zk: Vec<usize>,
    zrank: Vec<u32>,
    zero_marked: bool,
    // range_min[a][b], range_max[a][b] for a <= b
    range_min: Vec<Vec<u32>>,
    range_max: Vec<Vec<u32>>,
    f: PLMap,
    z: Vec<Rational>,
}

impl GridOracle {
    pub fn new(f: &PLMap, z: &MarkedSet, den: i64) -> Self {
        let n = den as usize;
        let pts: Vec<Rational> = (0..=den).map(|k| r(k, den)).collect();
        let vals: Vec<Rational> = pts.iter().map(|x| f.eval_unchecked(x)).collect();
        let mut sorted = vals.clone();
        sorted.sort();
        sorted.dedup();
        let rank: Vec<u32> = vals.iter().map(|v| sorted.binary_search(v).unwrap() as u32).collect();
        let zk: Vec<usize> = z
            .points()
            .iter()
            .map(|x| (x * Rational::from_integer(den.into())).to_integer().to_usize().unwrap())
            .collect();
        for (k, x) in zk.iter().zip(z.points()) {
            assert_eq!(&pts[*k], x, "marked point off the oracle grid");
        }
        let zrank = zk.iter().map(|&k| rank[k]).collect();
        let mut range_min = vec![vec![0u32; n + 1]; n + 1];
        let mut range_max = vec![vec![0u32; n + 1]; n + 1];
        for a in 0..=n {
            let (mut lo, mut hi) = (rank[a], rank[a]);
            for b in a..=n {
                lo = lo.min(rank[b]);
                hi = hi.max(rank[b]);
                range_min[a][b] = lo;
                range_max[a][b] = hi;
            }
        }
        GridOracle {
            den,
            pts,
            rank,
            zero_marked: zk.contains(&0),
            zk,
            zrank,
            range_min,
            range_max,
            f: f.clone(),
            z: z.points().to_vec(),
        }
    }

    /// Marked index (0-based) for which v is a visor, straight from the
    /// definition.
    pub fn visor_of(&self, v: &Rational) -> Option<usize> {
        let fv = self.f.eval_unchecked(v);
        let j = self.z.iter().position(|z| z >= v)?;
        if &self.z[j] == v {
            return None;
        }
        (fv > self.f.eval_unchecked(&self.z[j])).then_some(j)
    }

    fn pair_ok(&self, a: usize, b: usize, v: &Rational) -> bool {
        if !(self.pts[a] < *v && *v < self.pts[b]) {
            return false;
        }
        if self.zk.iter().any(|&k| a < k && k < b) {
            return false;
        }
        (a == 0 && !self.zero_marked) || self.rank[a] <= self.range_min[a][b]
    }

    fn c_ok(&self, a: usize, b: usize, c: usize, zj: usize) -> bool {
        if c <= zj {
            return false;
        }
        let n = self.den as usize;
        let cond4 = c == n || self.rank[c] >= self.range_max[a][b];
        let cond5 = b > c || self.rank[b] <= self.range_min[b][c];
        cond4 && cond5
    }

    /// Some removing grid triple, as indices into the grid.
    pub fn removing_triple(&self, v: &Rational) -> Option<(usize, usize, usize)> {
        let j = self.visor_of(v)?;
        let zj = self.zk[j];
        let n = self.den as usize;
        for a in 0..=n {
            for b in a + 1..=n {
                if !self.pair_ok(a, b, v) {
                    continue;
                }
                for c in (0..=n).rev() {
                    if self.c_ok(a, b, c, zj) {
                        return Some((a, b, c));
                    }
                }
            }
        }
        None
    }

    pub fn removable(&self, v: &Rational) -> bool {
        self.removing_triple(v).is_some()
    }

    /// (max a, min b) over all removing grid triples.
    pub fn minimal_pair(&self, v: &Rational) -> Option<(Rational, Rational)> {
        let j = self.visor_of(v)?;
        let zj = self.zk[j];
        let n = self.den as usize;
        let mut best: Option<(usize, usize)> = None;
        for a in 0..=n {
            for b in a + 1..=n {
                if !self.pair_ok(a, b, v) {
                    continue;
                }
                if (0..=n).any(|c| self.c_ok(a, b, c, zj)) {
                    best = Some(match best {
                        None => (a, b),
                        Some((ba, bb)) => (ba.max(a), bb.min(b)),
                    });
                }
            }
        }
        best.map(|(a, b)| (self.pts[a].clone(), self.pts[b].clone()))
    }

    /// Greatest grid c with (a, b, c) removing v, for grid a and b.
    pub fn max_c(&self, v: &Rational, a: &Rational, b: &Rational) -> Option<Rational> {
        let j = self.visor_of(v)?;
        let ia = self.pts.binary_search(a).ok()?;
        let ib = self.pts.binary_search(b).ok()?;
        if !self.pair_ok(ia, ib, v) {
            return None;
        }
        (0..=self.den as usize)
            .rev()
            .find(|&c| self.c_ok(ia, ib, c, self.zk[j]))
            .map(|c| self.pts[c].clone())
    }
}

/// Random rational strictly inside a visor component, sometimes off the
/// oracle grid.
pub fn random_visor<R: Rng>(rng: &mut R, f: &PLMap, z: &MarkedSet, den: i64) -> Option<Rational> {
    let comps = plembed::visor::visor_components(f, z).unwrap();
    let c = comps.choose(rng)?;
    if c.lo_closed && rng.gen_bool(0.1) {
        return Some(c.lo.clone());
    }
    let fine = den * 3;
    let cands: Vec<Rational> = (0..=fine)
        .map(|k| r(k, fine))
        .filter(|x| *x > c.lo && *x < c.hi)
        .collect();
    if cands.is_empty() || rng.gen_bool(0.2) {
        return Some((&c.lo + &c.hi) / Rational::from_integer(2.into()));
    }
    cands.choose(rng).cloned()
}

/// Exhaustive check that [a, b] has the minimal-interval shape: a = 0 or
/// f(a) = f(b), and f > f(b) on the open interval.
pub fn interval_shape_ok(f: &PLMap, a: &Rational, b: &Rational) -> bool {
    let fb = f.eval_unchecked(b);
    let fa = f.eval_unchecked(a);
    if !(a.is_zero() || fa == fb) {
        return false;
    }
    let mut pts = vec![a.clone()];
    pts.extend(f.breakpoint_xs().filter(|x| *x > a && *x < b).cloned());
    pts.push(b.clone());
    for p in &pts[1..pts.len() - 1] {
        if f.eval_unchecked(p) <= fb {
            return false;
        }
    }
    for w in pts.windows(2) {
        let mid = (&w[0] + &w[1]) / Rational::from_integer(2.into());
        if f.eval_unchecked(&mid) <= fb {
            return false;
        }
    }
    true
}

/// Range min/max in O(1) after O(D log D) preprocessing.
struct Sparse {
    min: Vec<Vec<u32>>,
    max: Vec<Vec<u32>>,
}

impl Sparse {
    fn new(v: &[u32]) -> Self {
        let mut min = vec![v.to_vec()];
        let mut max = vec![v.to_vec()];
        let mut w = 1;
        while 2 * w <= v.len() {
            let (pm, px) = (min.last().unwrap(), max.last().unwrap());
            let nm = (0..=v.len() - 2 * w).map(|i| pm[i].min(pm[i + w])).collect();
            let nx = (0..=v.len() - 2 * w).map(|i| px[i].max(px[i + w])).collect();
            min.push(nm);
            max.push(nx);
            w *= 2;
        }
        Sparse { min, max }
    }

    fn level(a: usize, b: usize) -> (usize, usize) {
        let k = (usize::BITS - 1 - (b - a + 1).leading_zeros()) as usize;
        (k, b + 1 - (1 << k))
    }

    /// min over [a, b], inclusive
    fn min(&self, a: usize, b: usize) -> u32 {
        let (k, s) = Self::level(a, b);
        self.min[k][a].min(self.min[k][s])
    }

    fn max(&self, a: usize, b: usize) -> u32 {
        let (k, s) = Self::level(a, b);
        self.max[k][a].max(self.max[k][s])
    }
}

/// Grid removal decision in roughly linear time per visor, for grids too
/// fine for [`GridOracle`]. For a fixed right end b the best left end is the
/// largest valid a, since max f on [a, b] only shrinks as a grows.
pub struct ScanOracle {
    den: usize,
    rank: Vec<u32>,
    zk: Vec<usize>,
    zero_marked: bool,
    sp: Sparse,
    f: PLMap,
    z: Vec<Rational>,
}

impl ScanOracle {
    pub fn new(f: &PLMap, z: &MarkedSet, den: i64) -> Self {
        let g = GridOracle::ranks_only(f, z, den);
        ScanOracle {
            den: den as usize,
            sp: Sparse::new(&g.0),
            rank: g.0,
            zero_marked: g.1.contains(&0),
            zk: g.1,
            f: f.clone(),
            z: z.points().to_vec(),
        }
    }

    pub fn removable(&self, v: &Rational) -> bool {
        let fv = self.f.eval_unchecked(v);
        let Some(j) = self.z.iter().position(|z| z >= v) else { return false };
        if self.z[j] == *v || fv <= self.f.eval_unchecked(&self.z[j]) {
            return false;
        }
        let n = self.den;
        let zj = self.zk[j];
        // grid indices strictly left / right of v
        let scaled = v * Rational::from_integer((n as i64).into());
        if scaled.is_zero() {
            return false;
        }
        let left = if scaled.is_integer() { scaled.to_integer().to_usize().unwrap() - 1 } else { scaled.floor().to_integer().to_usize().unwrap() };
        let right = left + if scaled.is_integer() { 2 } else { 1 };
        if zj + 1 > n {
            return false;
        }
        let a_floor = self.zk.iter().copied().filter(|&k| k <= left).max();
        // records: a <= left with rank[a] <= min(a..=left), nearest first
        let mut records = Vec::new();
        let mut run = u32::MAX;
        let stop = a_floor.unwrap_or(0);
        let mut a = left as isize;
        while a >= stop as isize {
            let r = self.rank[a as usize];
            if r <= run {
                records.push(a as usize);
                run = r;
            }
            a -= 1;
        }
        let zero_ok = !self.zero_marked && a_floor.is_none();
        let mut ri = 0;
        let mut mb = u32::MAX;
        for b in right..=zj {
            mb = mb.min(self.rank[b]);
            while ri < records.len() && self.rank[records[ri]] > mb {
                ri += 1;
            }
            let mut lefts = Vec::new();
            if ri < records.len() {
                lefts.push(records[ri]);
            }
            if zero_ok {
                lefts.push(0);
            }
            // last c >= b with min(b..=c) >= rank[b]
            let (mut lo, mut hi) = (b, n);
            while lo < hi {
                let mid = (lo + hi + 1) / 2;
                if self.sp.min(b, mid) >= self.rank[b] {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            let cstar = lo;
            if cstar <= zj {
                continue;
            }
            for a in lefts {
                let need = self.sp.max(a, b);
                if cstar == n || self.sp.max(zj + 1, cstar) >= need {
                    return true;
                }
            }
        }
        false
    }
}

impl GridOracle {
    /// Value ranks on the grid and grid indices of the marked points.
    fn ranks_only(f: &PLMap, z: &MarkedSet, den: i64) -> (Vec<u32>, Vec<usize>) {
        let vals: Vec<Rational> = (0..=den).map(|k| f.eval_unchecked(&r(k, den))).collect();
        let mut sorted = vals.clone();
        sorted.sort();
        sorted.dedup();
        let rank = vals.iter().map(|v| sorted.binary_search(v).unwrap() as u32).collect();
        let dq = Rational::from_integer(den.into());
        let zk = z
            .points()
            .iter()
            .map(|x| {
                let s = x * &dq;
                assert!(s.is_integer(), "marked point off the oracle grid");
                s.to_integer().to_usize().unwrap()
            })
            .collect();
        (rank, zk)
    }
}
