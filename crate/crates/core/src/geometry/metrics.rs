use super::contour::{Contour, Point};

/// Directed Hausdorff distance, squared, using the early-break scan:
/// the inner loop stops once a point closer than the running maximum is found.
fn directed_sq(from: &[Point], to: &[Point]) -> f64 {
    let mut worst = 0.0f64;
    for &p in from {
        let mut best = f64::INFINITY;
        for &q in to {
            let d = p.dist_sq(q);
            if d < best {
                best = d;
                if best < worst {
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric Hausdorff distance between the vertex sets of two contours.
pub fn hausdorff(a: &Contour, b: &Contour) -> f64 {
    hausdorff_points(&a.vertices, &b.vertices)
}

pub fn hausdorff_points(a: &[Point], b: &[Point]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "hausdorff of an empty point set");
    directed_sq(a, b).max(directed_sq(b, a)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_distance_is_zero() {
        let c = Contour::closed(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 1.0),
            Point::new(2.0, 5.0),
        ]);
        assert_eq!(hausdorff(&c, &c), 0.0);
    }

    #[test]
    fn translation_three_four() {
        let c = Contour::closed(vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(0.0, 10.0),
        ]);
        let t = c.translate(Point::new(3.0, 4.0));
        assert_eq!(hausdorff(&c, &t), 5.0);
        assert_eq!(hausdorff(&t, &c), 5.0);
    }

    #[test]
    fn asymmetric_sets() {
        let a = [Point::new(0.0, 0.0)];
        let b = [Point::new(0.0, 0.0), Point::new(0.0, 7.0)];
        assert_eq!(hausdorff_points(&a, &b), 7.0);
        assert_eq!(hausdorff_points(&b, &a), 7.0);
    }
}
