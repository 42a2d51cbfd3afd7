//! Pareto dominance, nondominated sorting, crowding distance and the
//! hypervolume indicator. Everything here assumes minimization.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream, tag};

/// `a` dominates `b`: no worse in every objective and strictly better in one.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "objective vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dominates_unchecked(a, b))
}

#[inline]
pub(crate) fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// Indices (ascending) of rows not dominated by any other row.
/// Exact duplicates do not dominate each other and are all kept.
pub fn nondominated_filter(y: &[Vec<f64>]) -> Vec<usize> {
    // in lexicographic order every dominator precedes the rows it dominates,
    // and a dominated row's dominators are themselves dominated by the front
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&y[a], &y[b]).then(a.cmp(&b)));
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().rev().any(|&f| dominates_unchecked(&y[f], &y[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Nondominated sorting by the efficient non-dominated sort with
/// sequential search: rows are visited in lexicographic order, so a row can
/// only be dominated by rows already placed. Fronts are rank-ordered, indices
/// ascending within each front.
pub fn fast_nondominated_sort(y: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = y.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(&y[a], &y[b]).then(a.cmp(&b)));
    let two = y[0].len() == 2;
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    for &p in &order {
        let dominated_by = |front: &Vec<usize>| -> bool {
            if two {
                // in lexicographic order the last member has the smallest f2
                let last = &y[*front.last().expect("fronts are never empty")];
                last[1] < y[p][1] || (last[1] == y[p][1] && last[0] < y[p][0])
            } else {
                front.iter().rev().any(|&q| dominates_unchecked(&y[q], &y[p]))
            }
        };
        match fronts.iter().position(|f| !dominated_by(f)) {
            Some(r) => fronts[r].push(p),
            None => fronts.push(vec![p]),
        }
    }
    for f in &mut fronts {
        f.sort_unstable();
    }
    fronts
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// NSGA-II crowding distance of a mutually nondominated set. Boundary points
/// of each objective get infinity; exact duplicates after the first copy get 0.
pub fn crowding_distance(front: &[Vec<f64>]) -> Vec<f64> {
    let p = front.len();
    if p <= 2 {
        return vec![f64::INFINITY; p];
    }
    // first occurrence of every distinct vector
    let mut sorted: Vec<usize> = (0..p).collect();
    sorted.sort_by(|&a, &b| lex_cmp(&front[a], &front[b]).then(a.cmp(&b)));
    let mut is_dup = vec![false; p];
    for w in sorted.windows(2) {
        if front[w[0]] == front[w[1]] {
            is_dup[w[1]] = true;
        }
    }
    let unique: Vec<usize> = (0..p).filter(|&i| !is_dup[i]).collect();
    let mut dist = vec![0.0; p];
    if unique.len() <= 2 {
        for &u in &unique {
            dist[u] = f64::INFINITY;
        }
        return dist;
    }
    let k = front[0].len();
    let mut order = unique.clone();
    for m in 0..k {
        order.sort_by(|&a, &b| front[a][m].total_cmp(&front[b][m]).then(a.cmp(&b)));
        let lo = front[order[0]][m];
        let hi = front[order[order.len() - 1]][m];
        dist[order[0]] = f64::INFINITY;
        dist[order[order.len() - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..order.len() - 1 {
            let i = order[w];
            if dist[i].is_finite() {
                dist[i] += (front[order[w + 1]][m] - front[order[w - 1]][m]) / range;
            }
        }
    }
    for i in 0..p {
        if is_dup[i] {
            dist[i] = 0.0;
        }
    }
    dist
}

/// Result of a hypervolume computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypervolume {
    pub value: f64,
    /// Standard error of a Monte Carlo estimate; zero for exact results.
    pub std_error: f64,
    /// Points ignored because they do not strictly dominate the reference.
    pub excluded: usize,
}

/// Default Monte Carlo sample count for more than three objectives.
pub const HV_MC_SAMPLES: usize = 1_000_000;

/// Hypervolume dominated by `front` and bounded by `reference`.
///
/// Exact for up to three objectives, Monte Carlo (fixed seed, 10^6 samples)
/// beyond that.
pub fn hypervolume(front: &[Vec<f64>], reference: &[f64]) -> Result<Hypervolume> {
    let k = reference.len();
    if k == 0 {
        return Err(Error::invalid("empty reference point"));
    }
    if front.iter().any(|p| p.len() != k) {
        return Err(Error::invalid("front and reference point differ in length"));
    }
    if k > 3 {
        return hypervolume_monte_carlo(front, reference, HV_MC_SAMPLES, 0);
    }
    let (pts, excluded) = effective_front(front, reference);
    if excluded > 0 {
        log::debug!("hypervolume: {excluded} points do not dominate the reference and were ignored");
    }
    let value = match k {
        1 => pts.iter().map(|p| reference[0] - p[0]).fold(0.0, f64::max),
        2 => hv2(pts.iter().map(|p| (p[0], p[1])).collect(), reference[0], reference[1]),
        _ => hv3(&pts, reference),
    };
    Ok(Hypervolume {
        value,
        std_error: 0.0,
        excluded,
    })
}

/// Convenience wrapper returning only the value.
pub fn hypervolume_value(front: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    Ok(hypervolume(front, reference)?.value)
}

fn effective_front(front: &[Vec<f64>], reference: &[f64]) -> (Vec<Vec<f64>>, usize) {
    let mut excluded = 0;
    let pts = front
        .iter()
        .filter(|p| {
            let ok = p.iter().zip(reference).all(|(v, r)| v < r);
            if !ok {
                excluded += 1;
            }
            ok
        })
        .cloned()
        .collect();
    (pts, excluded)
}

/// Two-objective sweep over points sorted by the first objective.
fn hv2(mut pts: Vec<(f64, f64)>, r0: f64, r1: f64) -> f64 {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best = r1;
    let mut area = 0.0;
    for (f0, f1) in pts {
        if f1 < best {
            area += (r0 - f0) * (best - f1);
            best = f1;
        }
    }
    area
}

/// Three objectives: slice along the third objective and sweep each slab.
fn hv3(pts: &[Vec<f64>], reference: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a][2].total_cmp(&pts[b][2]));
    let mut volume = 0.0;
    let mut active: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (w, &i) in order.iter().enumerate() {
        active.push((pts[i][0], pts[i][1]));
        let top = order.get(w + 1).map_or(reference[2], |&j| pts[j][2]);
        let height = top - pts[i][2];
        if height > 0.0 {
            volume += height * hv2(active.clone(), reference[0], reference[1]);
        }
    }
    volume
}

/// Monte Carlo hypervolume over the box spanned by the front's ideal point
/// and the reference.
pub fn hypervolume_monte_carlo(
    front: &[Vec<f64>],
    reference: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Hypervolume> {
    let k = reference.len();
    if front.iter().any(|p| p.len() != k) {
        return Err(Error::invalid("front and reference point differ in length"));
    }
    let (pts, excluded) = effective_front(front, reference);
    if pts.is_empty() || samples == 0 {
        return Ok(Hypervolume {
            value: 0.0,
            std_error: 0.0,
            excluded,
        });
    }
    let ideal: Vec<f64> = (0..k)
        .map(|m| pts.iter().map(|p| p[m]).fold(f64::INFINITY, f64::min))
        .collect();
    let box_volume: f64 = ideal.iter().zip(reference).map(|(lo, hi)| hi - lo).product();
    const CHUNK: usize = 1 << 16;
    let chunks = samples.div_ceil(CHUNK);
    let hits: usize = par::map_range(chunks, |c| {
        let mut rng = stream(seed, tag::TEST + 1, c as u64);
        let count = CHUNK.min(samples - c * CHUNK);
        let mut z = vec![0.0; k];
        let mut h = 0usize;
        for _ in 0..count {
            for m in 0..k {
                z[m] = ideal[m] + rng.random::<f64>() * (reference[m] - ideal[m]);
            }
            if pts.iter().any(|p| p.iter().zip(&z).all(|(a, b)| a <= b)) {
                h += 1;
            }
        }
        h
    })
    .into_iter()
    .sum();
    let frac = hits as f64 / samples as f64;
    Ok(Hypervolume {
        value: frac * box_volume,
        std_error: box_volume * (frac * (1.0 - frac) / samples as f64).sqrt(),
        excluded,
    })
}

/// Nondominated designs and their objective vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl ParetoArchive {
    /// Keeps the nondominated rows of `(x, y)`.
    pub fn from_points(x: &[Vec<f64>], y: &[Vec<f64>]) -> Self {
        let idx = nondominated_filter(y);
        Self {
            x: idx.iter().map(|&i| x[i].clone()).collect(),
            y: idx.iter().map(|&i| y[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn hypervolume(&self, reference: &[f64]) -> Result<f64> {
        hypervolume_value(&self.y, reference)
    }
}

/// Componentwise worst value plus 10% of the observed range.
pub fn auto_reference(y: &[Vec<f64>]) -> Vec<f64> {
    let k = y.first().map_or(0, |r| r.len());
    (0..k)
        .map(|m| {
            let lo = y.iter().map(|r| r[m]).fold(f64::INFINITY, f64::min);
            let hi = y.iter().map(|r| r[m]).fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            let pad = if range > 0.0 { 0.1 * range } else { 0.1 * hi.abs().max(1.0) };
            hi + pad
        })
        .collect()
}

/// Inverted generational distance: mean distance from each reference point to
/// its nearest neighbour in `approx`.
pub fn igd(reference_front: &[Vec<f64>], approx: &[Vec<f64>]) -> f64 {
    if reference_front.is_empty() || approx.is_empty() {
        return f64::INFINITY;
    }
    let total: f64 = reference_front
        .iter()
        .map(|r| {
            approx
                .iter()
                .map(|a| a.iter().zip(r).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / reference_front.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dominance_cases() {
        assert!(dominates(&[1.0, 1.0], &[2.0, 2.0]).unwrap());
        assert!(!dominates(&[1.0, 2.0], &[2.0, 1.0]).unwrap());
        assert!(!dominates(&[1.0, 1.0], &[1.0, 1.0]).unwrap());
        assert!(dominates(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn filter_cases() {
        assert_eq!(nondominated_filter(&[vec![0.0, 0.0]]), vec![0]);
        assert_eq!(
            nondominated_filter(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]),
            vec![0, 1]
        );
        // duplicates are retained
        assert_eq!(nondominated_filter(&[vec![0.5, 0.5], vec![0.5, 0.5]]), vec![0, 1]);
    }

    /// Deb's O(K N^2) bookkeeping sort, kept as an oracle.
    fn deb_sort(y: &[Vec<f64>]) -> Vec<Vec<usize>> {
        let n = y.len();
        let mut count = vec![0usize; n];
        let mut dominated: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if dominates_unchecked(&y[i], &y[j]) {
                    dominated[i].push(j);
                    count[j] += 1;
                }
            }
        }
        let mut fronts = Vec::new();
        let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
        while !current.is_empty() {
            let mut next = Vec::new();
            for &i in &current {
                for &j in &dominated[i] {
                    count[j] -= 1;
                    if count[j] == 0 {
                        next.push(j);
                    }
                }
            }
            next.sort_unstable();
            fronts.push(current);
            current = next;
        }
        fronts
    }

    proptest! {
        #[test]
        fn filter_matches_pairwise_scan(
            pts in prop::collection::vec(prop::collection::vec(0u8..5, 3), 0..40),
        ) {
            let y: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let brute: Vec<usize> = (0..y.len())
                .filter(|&i| !y.iter().any(|o| dominates_unchecked(o, &y[i])))
                .collect();
            prop_assert_eq!(nondominated_filter(&y), brute);
        }

        #[test]
        fn sort_matches_bookkeeping_oracle(
            pts in prop::collection::vec(prop::collection::vec(0u8..5, 2), 0..40),
            pts3 in prop::collection::vec(prop::collection::vec(0u8..4, 3), 0..40),
        ) {
            // small integer grids force ties and duplicates
            let y: Vec<Vec<f64>> = pts.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            prop_assert_eq!(fast_nondominated_sort(&y), deb_sort(&y));
            let y3: Vec<Vec<f64>> = pts3.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            prop_assert_eq!(fast_nondominated_sort(&y3), deb_sort(&y3));
        }
    }

    #[test]
    fn sort_chain_and_antichain() {
        let chain = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(fast_nondominated_sort(&chain), vec![vec![0], vec![1], vec![2]]);
        let anti = vec![vec![0.0, 2.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        assert_eq!(fast_nondominated_sort(&anti), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn crowding_cases() {
        assert_eq!(crowding_distance(&[vec![0.0, 1.0]]), vec![f64::INFINITY]);
        assert_eq!(
            crowding_distance(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            vec![f64::INFINITY; 2]
        );
        let c = crowding_distance(&[vec![0.0, 2.0], vec![1.0, 1.0], vec![2.0, 0.0]]);
        assert!(c[0].is_infinite() && c[2].is_infinite());
        assert!((c[1] - 2.0).abs() < 1e-15);
        let d = crowding_distance(&[
            vec![0.0, 2.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![2.0, 0.0],
        ]);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn crowding_is_scale_invariant() {
        let f = vec![vec![0.0, 3.0], vec![0.4, 1.5], vec![1.0, 0.7], vec![2.0, 0.0]];
        let g: Vec<Vec<f64>> = f.iter().map(|p| vec![10.0 * p[0], 0.01 * p[1]]).collect();
        let (a, b) = (crowding_distance(&f), crowding_distance(&g));
        for (x, y) in a.iter().zip(&b) {
            assert!(x == y || (x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hypervolume_hand_cases() {
        assert_eq!(hypervolume_value(&[vec![0.0, 0.0]], &[1.0, 1.0]).unwrap(), 1.0);
        let hv = hypervolume_value(&[vec![0.2, 0.8], vec![0.8, 0.2]], &[1.0, 1.0]).unwrap();
        assert!((hv - 0.28).abs() < 1e-15);
        let with_dominated =
            hypervolume_value(&[vec![0.2, 0.8], vec![0.8, 0.2], vec![0.9, 0.9]], &[1.0, 1.0]).unwrap();
        assert_eq!(hv, with_dominated);
    }

    #[test]
    fn hypervolume_empty_and_excluded() {
        let r = hypervolume(&[vec![2.0, 0.0]], &[1.0, 1.0]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.excluded, 1);
        assert_eq!(hypervolume_value(&[], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn hypervolume_three_objectives_cube() {
        let hv = hypervolume_value(&[vec![0.0, 0.0, 0.0]], &[1.0, 2.0, 3.0]).unwrap();
        assert!((hv - 6.0).abs() < 1e-15);
        // two overlapping boxes: 1*1*0.5 + 0.5*0.5*1 - 0.5*0.5*0.5
        let hv = hypervolume_value(&[vec![0.0, 0.0, 0.5], vec![0.5, 0.5, 0.0]], &[1.0, 1.0, 1.0]).unwrap();
        assert!((hv - 0.625).abs() < 1e-15);
    }

    #[test]
    fn auto_reference_pads_range() {
        let r = auto_reference(&[vec![0.0, 10.0], vec![1.0, 0.0]]);
        assert_eq!(r, vec![1.1, 11.0]);
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 3)
    }

    proptest! {
        #[test]
        fn dominance_is_strict_partial_order(a in vec3(), b in vec3(), c in vec3()) {
            prop_assert!(!dominates_unchecked(&a, &a));
            prop_assert!(!(dominates_unchecked(&a, &b) && dominates_unchecked(&b, &a)));
            if dominates_unchecked(&a, &b) && dominates_unchecked(&b, &c) {
                prop_assert!(dominates_unchecked(&a, &c));
            }
        }

        #[test]
        fn filter_is_idempotent(pts in prop::collection::vec(vec3(), 1..40)) {
            let idx = nondominated_filter(&pts);
            let sub: Vec<Vec<f64>> = idx.iter().map(|&i| pts[i].clone()).collect();
            prop_assert_eq!(nondominated_filter(&sub), (0..sub.len()).collect::<Vec<_>>());
        }

        #[test]
        fn hypervolume_translation_invariant(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..20),
            shift in prop::collection::vec(-5.0f64..5.0, 2),
        ) {
            let r = [1.0, 1.0];
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + shift[0], p[1] + shift[1]]).collect();
            let a = hypervolume_value(&pts, &r).unwrap();
            let b = hypervolume_value(&moved, &[1.0 + shift[0], 1.0 + shift[1]]).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn hypervolume_monotone(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..20),
            extra in prop::collection::vec(0.0f64..1.0, 2),
        ) {
            let r = [1.0, 1.0];
            let before = hypervolume_value(&pts, &r).unwrap();
            let mut more = pts.clone();
            more.push(extra.clone());
            let after = hypervolume_value(&more, &r).unwrap();
            prop_assert!(after >= before);
            let covered = pts.iter().any(|p| p[0] <= extra[0] && p[1] <= extra[1]);
            if !covered {
                prop_assert!(after > before);
            }
        }
    }
}
