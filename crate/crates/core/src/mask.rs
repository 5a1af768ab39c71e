//! Binary image masks.

use nalgebra::Vector2;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![false; (width as usize) * (height as usize)] }
    }

    fn idx(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    pub fn get(&self, u: u32, v: u32) -> bool {
        u < self.width && v < self.height && self.data[self.idx(u, v)]
    }

    pub fn set(&mut self, u: u32, v: u32, value: bool) {
        if u < self.width && v < self.height {
            let i = self.idx(u, v);
            self.data[i] = value;
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// Inclusive bounding box `(u0, v0, u1, v1)` of the set pixels.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, x)| **x) {
            let (u, v) = ((i % self.width as usize) as u32, (i / self.width as usize) as u32);
            b = Some(match b {
                None => (u, v, u, v),
                Some((a, c, d, e)) => (a.min(u), c.min(v), d.max(u), e.max(v)),
            });
        }
        b
    }

    /// Copy of the window starting at `(u0, v0)`; parts outside the mask are unset.
    pub fn crop(&self, u0: u32, v0: u32, width: u32, height: u32) -> Mask {
        let mut out = Mask::new(width, height);
        for v in 0..height {
            for u in 0..width {
                if self.get(u0 + u, v0 + v) {
                    out.set(u, v, true);
                }
            }
        }
        out
    }

    /// Dilation with a `k`×`k` square element. Offsets span `-k/2 ..= (k-1)/2`,
    /// so `k = 1` is the identity.
    pub fn dilate(&self, k: u32) -> Mask {
        if k <= 1 {
            return self.clone();
        }
        let lo = -((k / 2) as i64);
        let hi = ((k - 1) / 2) as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        // separable: rows then columns
        let mut rows = vec![false; self.data.len()];
        for v in 0..h {
            for u in 0..w {
                if self.data[(v * w + u) as usize] {
                    for du in lo..=hi {
                        let x = u - du;
                        if (0..w).contains(&x) {
                            rows[(v * w + x) as usize] = true;
                        }
                    }
                }
            }
        }
        let mut out = Mask::new(self.width, self.height);
        for v in 0..h {
            for u in 0..w {
                if rows[(v * w + u) as usize] {
                    for dv in lo..=hi {
                        let y = v - dv;
                        if (0..h).contains(&y) {
                            out.data[(y * w + u) as usize] = true;
                        }
                    }
                }
            }
        }
        out
    }

    /// Fills a disc; pixel centers sit at integer coordinates.
    pub fn fill_disc<T: Real>(&mut self, c: Vector2<T>, r: T) {
        let (cx, cy, r) = (c.x.as_f64(), c.y.as_f64(), r.as_f64());
        let Some((u0, u1)) = clip_range(cx - r, cx + r, self.width) else { return };
        let Some((v0, v1)) = clip_range(cy - r, cy + r, self.height) else { return };
        for v in v0..=v1 {
            for u in u0..=u1 {
                let (dx, dy) = (u as f64 - cx, v as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.set(u, v, true);
                }
            }
        }
    }

    /// Fills the convex hull of `pts`.
    pub fn fill_convex_hull<T: Real>(&mut self, pts: &[Vector2<T>]) {
        let pts: Vec<(f64, f64)> = pts.iter().map(|p| (p.x.as_f64(), p.y.as_f64())).collect();
        let hull = convex_hull(&pts);
        if hull.is_empty() {
            return;
        }
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (x, y) in &hull {
            xmin = xmin.min(*x);
            xmax = xmax.max(*x);
            ymin = ymin.min(*y);
            ymax = ymax.max(*y);
        }
        let Some((u0, u1)) = clip_range(xmin, xmax, self.width) else { return };
        let Some((v0, v1)) = clip_range(ymin, ymax, self.height) else { return };
        let n = hull.len();
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = (u as f64, v as f64);
                let inside = n >= 3
                    && (0..n).all(|i| {
                        let (a, b) = (hull[i], hull[(i + 1) % n]);
                        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= -1e-12
                    });
                if inside {
                    self.set(u, v, true);
                }
            }
        }
    }
}

fn clip_range(lo: f64, hi: f64, size: u32) -> Option<(u32, u32)> {
    if !(lo.is_finite() && hi.is_finite()) || size == 0 {
        return None;
    }
    let a = lo.ceil().max(0.0);
    let b = hi.floor().min(size as f64 - 1.0);
    (a <= b).then_some((a as u32, b as u32))
}

/// Andrew's monotone chain, counter-clockwise, without collinear points.
pub fn convex_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = pts.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_matches_brute_force() {
        let mut m = Mask::new(20, 15);
        for (u, v) in [(0, 0), (5, 5), (19, 14), (10, 3)] {
            m.set(u, v, true);
        }
        for k in 1..6u32 {
            let d = m.dilate(k);
            let lo = -((k / 2) as i64);
            let hi = ((k - 1) / 2) as i64;
            for v in 0..15i64 {
                for u in 0..20i64 {
                    let mut expect = false;
                    for dv in lo..=hi {
                        for du in lo..=hi {
                            expect |= m.get((u + du).clamp(-1, 100) as u32, (v + dv).clamp(-1, 100) as u32)
                                && (0..20).contains(&(u + du))
                                && (0..15).contains(&(v + dv));
                        }
                    }
                    assert_eq!(d.get(u as u32, v as u32), expect, "k={k} ({u},{v})");
                }
            }
        }
        assert_eq!(m.dilate(3).count(), 4 + 9 + 4 + 9);
    }

    #[test]
    fn hull_fill_square() {
        let mut m = Mask::new(20, 20);
        let sq = [(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0), (4.0, 4.0)];
        m.fill_convex_hull(&sq.map(|(x, y)| Vector2::new(x, y)));
        assert_eq!(m.count(), 25);
        assert_eq!(convex_hull(&sq).len(), 4);
    }

    #[test]
    fn disc_and_clipping() {
        let mut m = Mask::new(10, 10);
        m.fill_disc(Vector2::new(0.0, 0.0), 1.0);
        assert_eq!(m.count(), 3);
        m.fill_disc(Vector2::new(-50.0, 3.0), 2.0);
        assert_eq!(m.count(), 3);
    }
}
