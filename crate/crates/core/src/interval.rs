//! Finite unions of closed intervals on a disk chart, kept sorted and disjoint.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    parts: Vec<[f64; 2]>,
}

impl IntervalSet {
    pub fn new() -> Self {
        IntervalSet { parts: Vec::new() }
    }

    pub fn single(lo: f64, hi: f64) -> Self {
        if hi > lo {
            IntervalSet { parts: vec![[lo, hi]] }
        } else {
            IntervalSet::new()
        }
    }

    /// Union of arbitrary (possibly overlapping, unsorted) intervals.
    pub fn from_unsorted(mut v: Vec<[f64; 2]>) -> Self {
        v.retain(|p| p[1] > p[0]);
        v.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut parts: Vec<[f64; 2]> = Vec::with_capacity(v.len());
        for p in v {
            match parts.last_mut() {
                Some(last) if p[0] <= last[1] => last[1] = last[1].max(p[1]),
                _ => parts.push(p),
            }
        }
        IntervalSet { parts }
    }

    pub fn parts(&self) -> &[[f64; 2]] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn measure(&self) -> f64 {
        // Pairwise summation keeps the total accurate for millions of tiny parts.
        fn sum(p: &[[f64; 2]]) -> f64 {
            if p.len() <= 8 {
                p.iter().map(|q| q[1] - q[0]).fold(0.0, |a, b| a + b)
            } else {
                let (a, b) = p.split_at(p.len() / 2);
                sum(a) + sum(b)
            }
        }
        sum(&self.parts)
    }

    pub fn contains(&self, x: f64) -> bool {
        let i = self.parts.partition_point(|p| p[1] < x);
        i < self.parts.len() && self.parts[i][0] <= x
    }

    /// Whether the closed interval [lo, hi] meets the set.
    pub fn intersects(&self, lo: f64, hi: f64) -> bool {
        let i = self.parts.partition_point(|p| p[1] < lo);
        i < self.parts.len() && self.parts[i][0] <= hi
    }

    /// Whether [lo, hi] lies inside one part.
    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        let i = self.parts.partition_point(|p| p[1] < lo);
        i < self.parts.len() && self.parts[i][0] <= lo && self.parts[i][1] >= hi
    }

    /// Set difference with a sorted list of pairwise disjoint intervals.
    pub fn subtract_sorted(&self, cuts: &[[f64; 2]]) -> IntervalSet {
        let mut out = Vec::with_capacity(self.parts.len() + cuts.len());
        let mut j = 0;
        for &[a, b] in &self.parts {
            let mut lo = a;
            while j < cuts.len() && cuts[j][1] <= lo {
                j += 1;
            }
            let mut k = j;
            while k < cuts.len() && cuts[k][0] < b {
                if cuts[k][0] > lo {
                    out.push([lo, cuts[k][0]]);
                }
                lo = lo.max(cuts[k][1]);
                if cuts[k][1] >= b {
                    break;
                }
                k += 1;
            }
            if lo < b {
                out.push([lo, b]);
            }
        }
        IntervalSet { parts: out }
    }

    pub fn subtract(&self, other: &IntervalSet) -> IntervalSet {
        self.subtract_sorted(&other.parts)
    }

    pub fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.parts.len() && j < other.parts.len() {
            let lo = self.parts[i][0].max(other.parts[j][0]);
            let hi = self.parts[i][1].min(other.parts[j][1]);
            if hi > lo {
                out.push([lo, hi]);
            }
            if self.parts[i][1] < other.parts[j][1] {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntervalSet { parts: out }
    }

    /// Enlarge every part by `r` on both sides, then clip to [lo, hi].
    pub fn dilate_clip(&self, r: f64, lo: f64, hi: f64) -> IntervalSet {
        let v = self
            .parts
            .iter()
            .map(|p| [(p[0] - r).max(lo), (p[1] + r).min(hi)])
            .collect();
        IntervalSet::from_unsorted(v)
    }
}

/// Order-preserving map from f64 to u64 (for ordered map keys).
pub fn ord_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn subtract_basic() {
        let s = IntervalSet::single(0.0, 1.0);
        let d = s.subtract_sorted(&[[0.1, 0.2], [0.5, 0.6], [0.9, 1.5]]);
        assert_eq!(d.parts(), &[[0.0, 0.1], [0.2, 0.5], [0.6, 0.9]]);
        assert!((d.measure() - 0.7).abs() < 1e-15);
        assert!(d.contains(0.3) && !d.contains(0.55));
        assert!(d.intersects(0.45, 0.55) && !d.intersects(0.52, 0.58));
    }

    #[test]
    fn ord_key_orders() {
        let v = [-2.0, -1e-300, -0.0, 0.0, 1e-300, 3.0];
        for w in v.windows(2) {
            assert!(ord_key(w[0]) <= ord_key(w[1]));
        }
    }

    proptest! {
        #[test]
        fn subtract_matches_pointwise(cuts in proptest::collection::vec((0.0f64..1.0, 0.0f64..0.1), 0..20), probes in proptest::collection::vec(0.0f64..1.0, 50)) {
            let cs = IntervalSet::from_unsorted(cuts.iter().map(|&(a, w)| [a, a + w]).collect());
            let base = IntervalSet::single(0.0, 1.0);
            let d = base.subtract(&cs);
            for x in probes {
                let in_cut = cs.parts().iter().any(|p| p[0] < x && x < p[1]);
                let on_edge = cs.parts().iter().any(|p| p[0] == x || p[1] == x);
                if !on_edge {
                    prop_assert_eq!(d.contains(x), !in_cut);
                }
            }
            prop_assert!((d.measure() + cs.intersect(&base).measure() - 1.0).abs() < 1e-12);
        }
    }
}
