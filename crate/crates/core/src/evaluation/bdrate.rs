use super::RateAccuracyCurve;
use crate::error::{Error, Result};

/// Bjontegaard delta rate of `test` against `anchor` in percent, with
/// top-1 accuracy as the quality axis. Negative means `test` needs fewer bits.
///
/// Curves with at least four distinct accuracies get a cubic fit of
/// `log10(bpp)` against accuracy; shorter curves use linear interpolation.
pub fn bd_rate(anchor: &RateAccuracyCurve, test: &RateAccuracyCurve) -> Result<f64> {
    let a = prepare(anchor)?;
    let t = prepare(test)?;
    let lo = a.first().unwrap().0.max(t.first().unwrap().0);
    let hi = a.last().unwrap().0.min(t.last().unwrap().0);
    if !(hi > lo) {
        return Err(Error::CurvesDisjoint);
    }
    let ia = mean_log_rate(&a, lo, hi, &anchor.pipeline);
    let it = mean_log_rate(&t, lo, hi, &test.pipeline);
    Ok((10f64.powf(it - ia) - 1.0) * 100.0)
}

/// (accuracy, log10 bpp) sorted by accuracy, equal accuracies collapsed to
/// the cheapest point.
fn prepare(curve: &RateAccuracyCurve) -> Result<Vec<(f64, f64)>> {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.points.len());
    for p in &curve.points {
        if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.accuracy.is_finite() {
            return Err(Error::InvalidInput(format!("curve {} has invalid point bpp={} acc={}", curve.pipeline, p.bpp, p.accuracy)));
        }
        pts.push((p.accuracy, p.bpp));
    }
    pts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    pts.dedup_by(|later, earlier| later.0 == earlier.0);
    if pts.len() < 2 {
        return Err(Error::InvalidInput(format!("curve {} needs at least 2 distinct accuracies", curve.pipeline)));
    }
    Ok(pts.into_iter().map(|(acc, bpp)| (acc, bpp.log10())).collect())
}

fn mean_log_rate(pts: &[(f64, f64)], lo: f64, hi: f64, name: &str) -> f64 {
    if pts.len() >= 4 {
        let coef = Cubic::fit(pts);
        (coef.integral(hi) - coef.integral(lo)) / (hi - lo)
    } else {
        log::warn!("curve {name} has {} points; using piecewise-linear BD-rate", pts.len());
        linear_integral(pts, lo, hi) / (hi - lo)
    }
}

/// Least-squares cubic in a centred, scaled variable for conditioning.
struct Cubic {
    c: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(pts: &[(f64, f64)]) -> Self {
        let n = pts.len() as f64;
        let center = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let scale = pts.iter().map(|p| (p.0 - center).abs()).fold(0.0, f64::max).max(1e-12);
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for &(x, y) in pts {
            let t = (x - center) / scale;
            let basis = [1.0, t, t * t, t * t * t];
            for i in 0..4 {
                atb[i] += basis[i] * y;
                for j in 0..4 {
                    ata[i][j] += basis[i] * basis[j];
                }
            }
        }
        Cubic { c: solve4(ata, atb), center, scale }
    }

    /// Antiderivative in the original accuracy variable.
    fn integral(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.scale;
        let c = &self.c;
        self.scale * (c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0)
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Exact integral over `[lo, hi]` of the linear interpolant through `pts`.
fn linear_integral(pts: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        let i = pts.partition_point(|p| p.0 <= x).clamp(1, pts.len() - 1);
        let (x0, y0) = pts[i - 1];
        let (x1, y1) = pts[i];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    };
    let mut knots = vec![lo];
    knots.extend(pts.iter().map(|p| p.0).filter(|&x| x > lo && x < hi));
    knots.push(hi);
    knots.windows(2).map(|w| 0.5 * (eval(w[0]) + eval(w[1])) * (w[1] - w[0])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::CurvePoint;
    use proptest::prelude::*;

    fn curve(name: &str, pts: &[(f64, f64)]) -> RateAccuracyCurve {
        RateAccuracyCurve {
            pipeline: name.into(),
            points: pts
                .iter()
                .enumerate()
                .map(|(i, &(bpp, accuracy))| CurvePoint { rate_point: i as u32 + 1, codec_param: 0, bpp, accuracy, psnr: 30.0 })
                .collect(),
        }
    }

    const ANCHOR: [(f64, f64); 5] = [(2.1, 0.82), (1.4, 0.79), (0.9, 0.74), (0.6, 0.66), (0.35, 0.52)];

    #[test]
    fn identical_curves_give_zero() {
        let c = curve("a", &ANCHOR);
        assert!(bd_rate(&c, &c).unwrap().abs() < 1e-9);
    }

    #[test]
    fn doubled_rate_gives_plus_hundred() {
        let a = curve("a", &ANCHOR);
        let doubled: Vec<_> = ANCHOR.iter().map(|&(b, acc)| (2.0 * b, acc)).collect();
        let r = bd_rate(&a, &curve("t", &doubled)).unwrap();
        assert!((r - 100.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn swap_negates_delta() {
        let a = curve("a", &ANCHOR);
        let t = curve("t", &[(1.9, 0.83), (1.2, 0.80), (0.7, 0.73), (0.5, 0.67), (0.3, 0.50)]);
        let r = bd_rate(&a, &t).unwrap();
        let delta = (1.0 + r / 100.0).log10();
        let swapped = bd_rate(&t, &a).unwrap();
        assert!((swapped - (10f64.powf(-delta) - 1.0) * 100.0).abs() < 0.01);
        assert!(r < 0.0);
    }

    #[test]
    fn disjoint_curves_rejected() {
        let a = curve("a", &ANCHOR);
        let t = curve("t", &[(1.0, 0.1), (0.8, 0.2), (0.5, 0.3), (0.2, 0.4)]);
        assert!(matches!(bd_rate(&a, &t), Err(Error::CurvesDisjoint)));
    }

    #[test]
    fn short_curves_use_linear_fallback() {
        // Linear in accuracy on log10(bpp): halving bits everywhere is exact.
        let a = curve("a", &[(1.0, 0.5), (0.1, 0.2)]);
        let t = curve("t", &[(0.5, 0.5), (0.05, 0.2)]);
        assert!((bd_rate(&a, &t).unwrap() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_accuracies_keep_cheapest() {
        let mut pts = ANCHOR.to_vec();
        pts.push((3.0, 0.82));
        let r = bd_rate(&curve("a", &ANCHOR), &curve("t", &pts)).unwrap();
        assert!(r.abs() < 1e-9);
    }

    #[test]
    fn linear_integral_of_line() {
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        assert!((linear_integral(&pts, 0.5, 1.5) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relabeling_ids_changes_nothing(shift in 1u32..50, k in 0.3f64..3.0) {
            let a = curve("a", &ANCHOR);
            let scaled: Vec<_> = ANCHOR.iter().map(|&(b, acc)| (k * b, acc)).collect();
            let t = curve("t", &scaled);
            let mut t2 = t.clone();
            for p in &mut t2.points { p.rate_point += shift; }
            let r = bd_rate(&a, &t).unwrap();
            prop_assert!((r - bd_rate(&a, &t2).unwrap()).abs() < 1e-12);
            prop_assert!((r - (k - 1.0) * 100.0).abs() < 0.01);
        }
    }
}
