use super::contour::{Contour, Point};

/// Correspondence between a correction polyline and a closed predicted contour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMatch {
    /// Predicted vertex nearest the correction's first point.
    pub start: usize,
    /// Predicted vertex nearest the correction's last point.
    pub end: usize,
    /// Predicted vertex indices from `start` to `end`, in traversal order.
    pub chain: Vec<usize>,
    /// For each entry of `chain`, the index of its nearest correction point.
    pub nearest: Vec<usize>,
}

fn nearest_index(points: &[Point], p: Point) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in points.iter().enumerate() {
        let d = p.dist_sq(*q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn arc(n: usize, from: usize, to: usize, step_forward: bool) -> Vec<usize> {
    let mut out = vec![from];
    let mut i = from;
    while i != to {
        i = if step_forward { (i + 1) % n } else { (i + n - 1) % n };
        out.push(i);
    }
    out
}

fn arc_length(vertices: &[Point], chain: &[usize]) -> f64 {
    chain
        .windows(2)
        .map(|w| vertices[w[0]].dist(vertices[w[1]]))
        .sum()
}

/// Finds the stretch of `predicted` that a correction replaces.
///
/// The two predicted vertices nearest the correction's endpoints bound two
/// candidate arcs; the shorter (by arc length) wins. On an exact tie, the arc
/// containing the non-endpoint predicted vertex nearest to any correction
/// point wins, and failing that the forward arc. A closed correction (a full label) matches
/// the whole predicted contour.
pub fn match_segment(correction: &Contour, predicted: &Contour) -> SegmentMatch {
    assert!(correction.len() >= 2, "correction needs at least 2 points");
    assert!(predicted.closed && !predicted.is_empty(), "predicted contour must be closed");
    let pv = &predicted.vertices;
    let cv = &correction.vertices;
    let n = pv.len();

    let (start, end, chain) = if correction.closed {
        let start = nearest_index(pv, cv[0]);
        let chain: Vec<usize> = (0..n).map(|k| (start + k) % n).collect();
        (start, start, chain)
    } else {
        let start = nearest_index(pv, cv[0]);
        let end = nearest_index(pv, cv[cv.len() - 1]);
        if start == end {
            (start, end, vec![start])
        } else {
            let fwd = arc(n, start, end, true);
            let bwd = arc(n, start, end, false);
            let (lf, lb) = (arc_length(pv, &fwd), arc_length(pv, &bwd));
            let chain = if lf < lb {
                fwd
            } else if lb < lf {
                bwd
            } else {
                // vertex nearest to the correction; the shared endpoints cannot decide
                let mut best = (f64::INFINITY, start);
                for (i, p) in pv.iter().enumerate() {
                    if i == start || i == end {
                        continue;
                    }
                    for q in cv {
                        let d = p.dist_sq(*q);
                        if d < best.0 {
                            best = (d, i);
                        }
                    }
                }
                let anchor = best.1;
                let interior = |c: &[usize]| c[1..c.len() - 1].contains(&anchor);
                if !interior(&fwd) && interior(&bwd) {
                    bwd
                } else {
                    fwd
                }
            };
            (start, end, chain)
        }
    };

    let nearest = chain.iter().map(|&i| nearest_index(cv, pv[i])).collect();
    SegmentMatch { start, end, chain, nearest }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(n: usize, r: f64) -> Contour {
        Contour::closed(
            (0..n)
                .map(|i| {
                    let t = std::f64::consts::TAU * i as f64 / n as f64;
                    Point::new(50.0 + r * t.cos(), 50.0 + r * t.sin())
                })
                .collect(),
        )
    }

    #[test]
    fn overlapping_arc_maps_to_itself() {
        let c = circle(100, 20.0);
        let corr = Contour::open(c.vertices[10..=20].to_vec());
        let m = match_segment(&corr, &c);
        assert_eq!(m.chain, (10..=20).collect::<Vec<_>>());
        assert_eq!(m.nearest, (0..=10).collect::<Vec<_>>());
    }

    #[test]
    fn reversed_correction_walks_backward() {
        let c = circle(100, 20.0);
        let mut pts = c.vertices[10..=20].to_vec();
        pts.reverse();
        let m = match_segment(&Contour::open(pts), &c);
        assert_eq!(m.chain, (10..=20).rev().collect::<Vec<_>>());
    }

    #[test]
    fn wraps_around_index_zero() {
        let c = circle(100, 20.0);
        let pts = vec![c.vertices[95], c.vertices[0], c.vertices[3]];
        let m = match_segment(&Contour::open(pts), &c);
        assert_eq!(m.chain, vec![95, 96, 97, 98, 99, 0, 1, 2, 3]);
    }

    #[test]
    fn singleton_when_endpoints_share_a_vertex() {
        let c = circle(100, 20.0);
        let p = c.vertices[42];
        let pts = vec![p + Point::new(0.1, 0.0), p + Point::new(0.0, 0.1)];
        let m = match_segment(&Contour::open(pts), &c);
        assert_eq!(m.chain, vec![42]);
        assert_eq!(m.nearest.len(), 1);
    }

    #[test]
    fn tie_resolved_by_nearest_vertex() {
        // start and end opposite each other on a square: both arcs equal length
        let sq = Contour::closed(vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(0.0, 10.0),
        ]);
        // passes close to vertex 3 (0,10)
        let corr = Contour::open(vec![
            Point::new(0.0, 0.0),
            Point::new(0.5, 9.5),
            Point::new(10.0, 10.0),
        ]);
        let m = match_segment(&corr, &sq);
        assert_eq!(m.chain, vec![0, 3, 2]);
        let corr = Contour::open(vec![
            Point::new(0.0, 0.0),
            Point::new(9.5, 0.5),
            Point::new(10.0, 10.0),
        ]);
        assert_eq!(match_segment(&corr, &sq).chain, vec![0, 1, 2]);
    }

    #[test]
    fn closed_correction_covers_everything() {
        let c = circle(16, 10.0);
        let gt = circle(40, 11.0);
        let m = match_segment(&gt, &c);
        assert_eq!(m.chain.len(), 16);
    }
}
