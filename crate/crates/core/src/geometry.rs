//! Box algebra kernel: corners, containment, projections, the three distance
//! families, and the analytic max-min intersection.
//!
//! Items are points, tags and relations are axis-aligned boxes given by a
//! center and a raw (pre-activation) offset. The effective half-width of a box
//! is `act(offset_raw)` per dimension, where `act` is ReLU, so raw offsets may
//! be negative and a box may degenerate to a point.
//!
//! Subgradient conventions used by the trainer:
//! - d|x|/dx at 0 is 0, and d max(x,0)/dx at 0 is 0;
//! - elementwise min/max over a set routes the full subgradient to the member
//!   with the lowest sequence index on ties.

use crate::error::{Error, Result};

/// Non-negative activation applied to raw offsets (ReLU).
#[inline]
pub fn act(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Derivative of [`act`]; zero at the kink.
#[inline]
pub fn act_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Sign with `sgn(0) = 0`, the subgradient of `|x|` at the kink.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A d-dimensional item embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub coords: Vec<f64>,
}

/// A d-dimensional box: center plus raw offset. The half-width per dimension
/// is `act(offset_raw)`, so `offset_raw` entries may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxEmbedding {
    pub center: Vec<f64>,
    pub offset_raw: Vec<f64>,
}

/// Lower and upper corners of a box, `lo <= hi` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Corners {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("{name} contains a non-finite entry")))
    }
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what}: dimension mismatch ({a} vs {b})")))
    }
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite("point", &coords)?;
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

impl BoxEmbedding {
    pub fn new(center: Vec<f64>, offset_raw: Vec<f64>) -> Result<Self> {
        check_finite("box center", &center)?;
        check_finite("box offset", &offset_raw)?;
        check_dims(center.len(), offset_raw.len(), "box")?;
        Ok(Self { center, offset_raw })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Effective half-width per dimension, `act(offset_raw)`.
    pub fn half_widths(&self) -> Vec<f64> {
        self.offset_raw.iter().map(|&o| act(o)).collect()
    }
}

/// Corner points of `b`: `hi = center + act(offset_raw)`, `lo = center - act(offset_raw)`.
pub fn box_corners(b: &BoxEmbedding) -> Result<Corners> {
    check_finite("box center", &b.center)?;
    check_finite("box offset", &b.offset_raw)?;
    let lo = b
        .center
        .iter()
        .zip(&b.offset_raw)
        .map(|(&c, &o)| c - act(o))
        .collect();
    let hi = b
        .center
        .iter()
        .zip(&b.offset_raw)
        .map(|(&c, &o)| c + act(o))
        .collect();
    Ok(Corners { lo, hi })
}

/// Closed containment: true iff `lo <= p <= hi` elementwise.
pub fn contains(b: &BoxEmbedding, p: &Point) -> Result<bool> {
    check_dims(b.dim(), p.dim(), "contains")?;
    let ok = p
        .coords
        .iter()
        .zip(b.center.iter().zip(&b.offset_raw))
        .all(|(&x, (&c, &o))| {
            let w = act(o);
            c - w <= x && x <= c + w
        });
    Ok(ok)
}

/// Point-to-point L1 distance.
pub fn dist_pp(a: &Point, c: &Point) -> Result<f64> {
    check_dims(a.dim(), c.dim(), "dist_pp")?;
    Ok(kernel::l1(&a.coords, &c.coords))
}

/// Translate a point by a relation box's center; the relation offset is
/// ignored because a point has no extent.
pub fn project_point(t: &Point, r: &BoxEmbedding) -> Result<Point> {
    check_dims(t.dim(), r.dim(), "project_point")?;
    let coords = t
        .coords
        .iter()
        .zip(&r.center)
        .map(|(&x, &c)| x + c)
        .collect();
    Ok(Point { coords })
}

/// Project a box by a relation box: translate the center and resize the
/// activated offset. The resulting raw offset may be negative per dimension
/// (relation offsets can narrow a box).
pub fn project_box(t: &BoxEmbedding, r: &BoxEmbedding) -> Result<BoxEmbedding> {
    check_dims(t.dim(), r.dim(), "project_box")?;
    let center = t
        .center
        .iter()
        .zip(&r.center)
        .map(|(&a, &b)| a + b)
        .collect();
    let offset_raw = t
        .offset_raw
        .iter()
        .zip(&r.offset_raw)
        .map(|(&a, &b)| act(a) + b)
        .collect();
    Ok(BoxEmbedding { center, offset_raw })
}

/// Box-to-box distance: center deviation plus activated-size deviation.
pub fn dist_bb(a: &BoxEmbedding, c: &BoxEmbedding) -> Result<f64> {
    check_dims(a.dim(), c.dim(), "dist_bb")?;
    Ok(kernel::dist_bb(
        &a.center,
        &a.offset_raw,
        &c.center,
        &c.offset_raw,
    ))
}

/// Distance from a point to the nearest boundary of a box; zero inside.
pub fn dist_out(p: &Point, b: &BoxEmbedding) -> Result<f64> {
    check_dims(p.dim(), b.dim(), "dist_out")?;
    let hw = b.half_widths();
    Ok(kernel::dist_out(&p.coords, &b.center, &hw))
}

/// Distance from the box center to the point clamped into the box.
pub fn dist_in(p: &Point, b: &BoxEmbedding) -> Result<f64> {
    check_dims(p.dim(), b.dim(), "dist_in")?;
    let hw = b.half_widths();
    Ok(kernel::dist_in(&p.coords, &b.center, &hw))
}

/// Point-to-box distance: outside part plus inside part.
pub fn dist_pb(p: &Point, b: &BoxEmbedding) -> Result<f64> {
    check_dims(p.dim(), b.dim(), "dist_pb")?;
    let hw = b.half_widths();
    Ok(kernel::dist_out(&p.coords, &b.center, &hw) + kernel::dist_in(&p.coords, &b.center, &hw))
}

/// Analytic intersection of a non-empty set of boxes: elementwise min of the
/// upper corners and max of the lower corners. An empty geometric intersection
/// degenerates to a zero-width box at the midpoint.
pub fn maxmin_intersect(boxes: &[BoxEmbedding]) -> Result<BoxEmbedding> {
    let first = boxes
        .first()
        .ok_or_else(|| Error::Contract("maxmin_intersect: empty box sequence".into()))?;
    let d = first.dim();
    for b in boxes {
        check_dims(b.dim(), d, "maxmin_intersect")?;
    }
    let mut hi_min = vec![f64::INFINITY; d];
    let mut lo_max = vec![f64::NEG_INFINITY; d];
    for b in boxes {
        for k in 0..d {
            let w = act(b.offset_raw[k]);
            let hi = b.center[k] + w;
            let lo = b.center[k] - w;
            if hi < hi_min[k] {
                hi_min[k] = hi;
            }
            if lo > lo_max[k] {
                lo_max[k] = lo;
            }
        }
    }
    let center = hi_min
        .iter()
        .zip(&lo_max)
        .map(|(&h, &l)| (h + l) / 2.0)
        .collect();
    let offset_raw = hi_min
        .iter()
        .zip(&lo_max)
        .map(|(&h, &l)| act(h - l) / 2.0)
        .collect();
    Ok(BoxEmbedding { center, offset_raw })
}

/// Unchecked slice kernels used on the hot training and ranking paths. Boxes
/// are passed as `(center, half_width)` with half-widths already activated.
pub mod kernel {
    use super::{act, sgn};

    #[inline]
    pub fn l1(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
    }

    /// Box-to-box distance on raw offsets (activates both sides).
    pub fn dist_bb(ca: &[f64], oa: &[f64], cb: &[f64], ob: &[f64]) -> f64 {
        let centers: f64 = l1(ca, cb);
        let sizes: f64 = oa
            .iter()
            .zip(ob)
            .map(|(&x, &y)| (act(x) - act(y)).abs())
            .sum();
        centers + sizes
    }

    /// Outside distance against a box given as center + activated half-width.
    pub fn dist_out(p: &[f64], cen: &[f64], hw: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..p.len() {
            let hi = cen[k] + hw[k];
            let lo = cen[k] - hw[k];
            if p[k] > hi {
                s += p[k] - hi;
            }
            if lo > p[k] {
                s += lo - p[k];
            }
        }
        s
    }

    /// Inside distance against a box given as center + activated half-width.
    pub fn dist_in(p: &[f64], cen: &[f64], hw: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..p.len() {
            let hi = cen[k] + hw[k];
            let lo = cen[k] - hw[k];
            let q = clamp(p[k], lo, hi);
            s += (cen[k] - q).abs();
        }
        s
    }

    #[inline]
    pub fn dist_pb(p: &[f64], cen: &[f64], hw: &[f64]) -> f64 {
        dist_out(p, cen, hw) + dist_in(p, cen, hw)
    }

    /// `min(hi, max(lo, x))` with the tie conventions of the module docs.
    #[inline]
    pub fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
        let m = if lo >= x { lo } else { x };
        if hi <= m {
            hi
        } else {
            m
        }
    }

    /// Accumulates the gradient of `dist_pb(p, box)` into the given buffers.
    /// `hw` must be the activated half-widths; `d_hw` receives the gradient
    /// with respect to those half-widths (callers chain through their own
    /// activation if the offset is raw). `scale` multiplies every term.
    pub fn dist_pb_backward(
        p: &[f64],
        cen: &[f64],
        hw: &[f64],
        scale: f64,
        d_p: &mut [f64],
        d_cen: &mut [f64],
        d_hw: &mut [f64],
    ) {
        for k in 0..p.len() {
            let hi = cen[k] + hw[k];
            let lo = cen[k] - hw[k];
            // outside part
            if p[k] > hi {
                d_p[k] += scale;
                d_cen[k] -= scale;
                d_hw[k] -= scale;
            }
            if lo > p[k] {
                d_p[k] -= scale;
                d_cen[k] += scale;
                d_hw[k] -= scale;
            }
            // inside part: |cen - clamp(p, lo, hi)|
            let m_is_lo = lo >= p[k];
            let m = if m_is_lo { lo } else { p[k] };
            let q_is_hi = hi <= m;
            let q = if q_is_hi { hi } else { m };
            let s = sgn(cen[k] - q) * scale;
            d_cen[k] += s;
            // -s flows into q
            if q_is_hi {
                d_cen[k] -= s;
                d_hw[k] -= s;
            } else if m_is_lo {
                d_cen[k] -= s;
                d_hw[k] += s;
            } else {
                d_p[k] -= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(xs: &[f64]) -> Point {
        Point::new(xs.to_vec()).unwrap()
    }

    fn b(c: &[f64], o: &[f64]) -> BoxEmbedding {
        BoxEmbedding::new(c.to_vec(), o.to_vec()).unwrap()
    }

    #[test]
    fn corners_activate_offsets() {
        let c = box_corners(&b(&[1.0, -2.0], &[0.5, -1.0])).unwrap();
        assert_eq!(c.lo, vec![0.5, -2.0]);
        assert_eq!(c.hi, vec![1.5, -2.0]);

        // all-nonpositive offsets degenerate to the center
        let c = box_corners(&b(&[3.0, -1.0], &[-2.0, 0.0])).unwrap();
        assert_eq!(c.lo, vec![3.0, -1.0]);
        assert_eq!(c.hi, vec![3.0, -1.0]);

        let c = box_corners(&b(&[0.0], &[3.0])).unwrap();
        assert_eq!(c.lo, vec![-3.0]);
        assert_eq!(c.hi, vec![3.0]);
    }

    #[test]
    fn corners_reject_non_finite() {
        let bad = BoxEmbedding {
            center: vec![f64::NAN],
            offset_raw: vec![0.0],
        };
        assert!(matches!(box_corners(&bad), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn containment_is_closed() {
        let unit = b(&[1.0], &[1.0]); // [0, 2]
        assert!(contains(&unit, &p(&[1.0])).unwrap());
        assert!(contains(&unit, &p(&[2.0])).unwrap());
        assert!(!contains(&unit, &p(&[2.1])).unwrap());
        assert!(contains(&unit, &p(&[0.0])).unwrap());
    }

    #[test]
    fn containment_dim_mismatch() {
        let unit = b(&[0.0], &[1.0]);
        assert!(matches!(
            contains(&unit, &p(&[0.0, 0.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn point_distance() {
        assert_eq!(dist_pp(&p(&[1.0, 2.0]), &p(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(dist_pp(&p(&[0.0, 0.0]), &p(&[1.0, -2.0])).unwrap(), 3.0);
        assert_eq!(dist_pp(&p(&[1.0]), &p(&[4.0])).unwrap(), 3.0);
    }

    #[test]
    fn point_projection_uses_center_only() {
        let r = b(&[0.0, 0.0], &[5.0, 5.0]);
        assert_eq!(project_point(&p(&[1.0, 1.0]), &r).unwrap().coords, vec![1.0, 1.0]);
        let r = b(&[-1.0, 3.0], &[0.0, 0.0]);
        assert_eq!(project_point(&p(&[1.0, 2.0]), &r).unwrap().coords, vec![0.0, 5.0]);
        let r = b(&[12.0], &[-7.0]);
        assert_eq!(project_point(&p(&[0.0]), &r).unwrap().coords, vec![12.0]);
    }

    #[test]
    fn box_projection() {
        // identity relation reproduces the box up to activation idempotence
        let t = b(&[1.0, 2.0], &[0.5, 3.0]);
        let r = b(&[0.0, 0.0], &[0.0, 0.0]);
        let out = project_box(&t, &r).unwrap();
        assert_eq!(out.center, t.center);
        assert_eq!(out.offset_raw, vec![0.5, 3.0]);

        let out = project_box(&b(&[1.0], &[2.0]), &b(&[1.0], &[-1.0])).unwrap();
        assert_eq!(out.center, vec![2.0]);
        assert_eq!(out.offset_raw, vec![1.0]);

        // activation floors the tag offset before the relation adjusts it
        let out = project_box(&b(&[0.0], &[-5.0]), &b(&[0.0], &[0.5])).unwrap();
        assert_eq!(out.offset_raw, vec![0.5]);
    }

    #[test]
    fn box_distance() {
        let a = b(&[0.5], &[1.0]);
        assert_eq!(dist_bb(&a, &a).unwrap(), 0.0);
        assert_eq!(dist_bb(&b(&[0.0], &[1.0]), &b(&[1.0], &[2.0])).unwrap(), 2.0);
        // negative raw offsets activate to zero width on both sides
        assert_eq!(dist_bb(&b(&[2.0], &[-1.0]), &b(&[2.0], &[-2.0])).unwrap(), 0.0);
    }

    #[test]
    fn outside_distance() {
        let unit = b(&[1.0], &[1.0]); // [0, 2]
        assert_eq!(dist_out(&p(&[1.5]), &unit).unwrap(), 0.0);
        assert_eq!(dist_out(&p(&[2.0]), &unit).unwrap(), 0.0);
        assert_eq!(dist_out(&p(&[3.0]), &unit).unwrap(), 1.0);
        let sq = b(&[1.0, 1.0], &[1.0, 1.0]); // [0,2]^2
        assert_eq!(dist_out(&p(&[3.0, -1.0]), &sq).unwrap(), 2.0);
    }

    #[test]
    fn inside_distance() {
        let unit = b(&[1.0], &[1.0]);
        assert_eq!(dist_in(&p(&[1.0]), &unit).unwrap(), 0.0);
        assert_eq!(dist_in(&p(&[1.5]), &unit).unwrap(), 0.5);
        // clamped to the near corner: distance equals the half-width
        assert_eq!(dist_in(&p(&[3.0]), &unit).unwrap(), 1.0);
    }

    #[test]
    fn point_box_distance() {
        let unit = b(&[1.0], &[1.0]);
        assert_eq!(dist_pb(&p(&[1.0]), &unit).unwrap(), 0.0);
        assert_eq!(dist_pb(&p(&[3.0]), &unit).unwrap(), 2.0);
        assert_eq!(dist_pb(&p(&[1.5]), &unit).unwrap(), 0.5);
    }

    #[test]
    fn maxmin_basic() {
        let a = b(&[1.0], &[1.0]); // [0,2]
        let one = maxmin_intersect(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.center, vec![1.0]);
        assert_eq!(one.offset_raw, vec![1.0]);

        let c = maxmin_intersect(&[a.clone(), b(&[2.0], &[1.0])]).unwrap(); // [0,2] ∩ [1,3]
        assert_eq!(c.center, vec![1.5]);
        assert_eq!(c.offset_raw, vec![0.5]);

        // disjoint intervals degenerate to a zero-width box at the midpoint
        let c = maxmin_intersect(&[b(&[0.5], &[0.5]), b(&[2.5], &[0.5])]).unwrap();
        assert_eq!(c.center, vec![1.5]);
        assert_eq!(c.offset_raw, vec![0.0]);
    }

    #[test]
    fn maxmin_handles_negative_centers() {
        // corners must not be activated: boxes live anywhere in space
        let c = maxmin_intersect(&[b(&[-5.0], &[1.0]), b(&[-4.5], &[1.0])]).unwrap();
        assert_eq!(c.center, vec![-4.75]);
        assert_eq!(c.offset_raw, vec![0.75]);
    }

    #[test]
    fn maxmin_empty_input_is_an_error() {
        assert!(matches!(maxmin_intersect(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn dist_pb_backward_matches_finite_differences() {
        // points inside, above, below, and mixed across dimensions
        let cen = vec![0.5, -1.0, 2.0];
        let hw = vec![0.4, 0.7, 0.2];
        let points = [
            vec![0.6, -1.1, 2.05],  // inside everywhere
            vec![1.5, -2.5, 2.0],   // above, below, inside
            vec![-0.5, -1.0, 3.0],  // below, center, above
        ];
        let h = 1e-6;
        for p in &points {
            let mut d_p = vec![0.0; 3];
            let mut d_cen = vec![0.0; 3];
            let mut d_hw = vec![0.0; 3];
            kernel::dist_pb_backward(p, &cen, &hw, 1.0, &mut d_p, &mut d_cen, &mut d_hw);
            for k in 0..3 {
                let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
                let fd_p = fd(&|e| {
                    let mut q = p.clone();
                    q[k] += e;
                    kernel::dist_pb(&q, &cen, &hw)
                });
                let fd_c = fd(&|e| {
                    let mut c = cen.clone();
                    c[k] += e;
                    kernel::dist_pb(p, &c, &hw)
                });
                let fd_w = fd(&|e| {
                    let mut w = hw.clone();
                    w[k] += e;
                    kernel::dist_pb(p, &cen, &w)
                });
                assert!((d_p[k] - fd_p).abs() < 1e-9, "p[{k}] {} vs {}", d_p[k], fd_p);
                assert!((d_cen[k] - fd_c).abs() < 1e-9, "cen[{k}] {} vs {}", d_cen[k], fd_c);
                assert!((d_hw[k] - fd_w).abs() < 1e-9, "hw[{k}] {} vs {}", d_hw[k], fd_w);
            }
        }
    }

    #[test]
    fn clamp_tie_convention() {
        // lo wins the inner max, hi wins the outer min
        assert_eq!(kernel::clamp(1.0, 1.0, 2.0), 1.0);
        assert_eq!(kernel::clamp(2.0, 0.0, 2.0), 2.0);
        assert_eq!(kernel::clamp(5.0, 0.0, 2.0), 2.0);
        assert_eq!(kernel::clamp(-1.0, 0.0, 2.0), 0.0);
    }

    #[test]
    fn signum_convention() {
        assert_eq!(sgn(0.0), 0.0);
        assert_eq!(sgn(-0.0), 0.0);
        assert_eq!(sgn(3.0), 1.0);
        assert_eq!(sgn(-0.5), -1.0);
        assert_eq!(act_prime(0.0), 0.0);
    }
}
