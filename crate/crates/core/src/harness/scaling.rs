//! Power-law fits and horizontal shifts between loss curves.

use crate::error::{Error, Result};

/// `L(n) = c + a·n^(−b)` fitted to the points with `n ≥ burn_in`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// RMS of `L − fit` over the fitted points.
    pub residual: f64,
    pub burn_in: f64,
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.c + self.a * n.powf(-self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftEstimate {
    /// `s` such that `L_a(n) ≈ L_b(s·n)`: curve b needs `s` times the tokens
    /// to reach the loss curve a has at `n`.
    pub factor: f64,
    /// RMS loss difference at `factor`.
    pub residual: f64,
    /// Points of curve a compared at `factor`.
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 10;
pub const B_RANGE: (f64, f64) = (0.01, 2.0);
const B_GRID: usize = 600;

/// Default burn-in: the first 10% of the largest token count.
pub fn default_burn_in(series: &[(f64, f64)]) -> f64 {
    0.1 * series.iter().map(|p| p.0).fold(0.0, f64::max)
}

/// Exponent grid, geometric over [`B_RANGE`].
pub fn b_grid() -> Vec<f64> {
    let (lo, hi) = B_RANGE;
    let r = (hi / lo).ln();
    (0..B_GRID).map(|i| if i + 1 == B_GRID { hi } else { lo * (r * i as f64 / (B_GRID - 1) as f64).exp() }).collect()
}

/// Least squares for `L ≈ c + a·x` with `a, c ≥ 0`. Returns `(a, c, sse)`.
fn nonneg_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sse = |a: f64, c: f64| x.iter().zip(y).map(|(xi, yi)| (yi - c - a * xi).powi(2)).sum::<f64>();
    let mut candidates = vec![(0.0, 0.0)];
    let det = n * sxx - sx * sx;
    if det > 0.0 {
        let a = (n * sxy - sx * sy) / det;
        let c = (sy - a * sx) / n;
        if a >= 0.0 && c >= 0.0 {
            candidates.push((a, c));
        }
    }
    if sy >= 0.0 {
        candidates.push((0.0, sy / n));
    }
    if sxx > 0.0 && sxy >= 0.0 {
        candidates.push((sxy / sxx, 0.0));
    }
    candidates
        .into_iter()
        .map(|(a, c)| (a, c, sse(a, c)))
        .min_by(|p, q| p.2.total_cmp(&q.2))
        .expect("at least one candidate")
}

/// Grid search over `b` with closed-form `(a, c)` at each exponent.
pub fn fit_power_law(series: &[(f64, f64)], burn_in: f64) -> Result<PowerLawFit> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|p| p.0 >= burn_in && p.0 > 0.0).collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::Analysis(format!(
            "power-law fit needs {MIN_FIT_POINTS} points beyond burn-in {burn_in}, found {}",
            pts.len()
        )));
    }
    if pts.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Analysis("loss curve contains non-finite values".into()));
    }
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let mut best: Option<PowerLawFit> = None;
    for b in b_grid() {
        let x: Vec<f64> = pts.iter().map(|p| p.0.powf(-b)).collect();
        let (a, c, sse) = nonneg_line(&x, &y);
        let residual = (sse / pts.len() as f64).sqrt();
        // Ties keep the smaller exponent.
        if best.is_none_or(|f| residual < f.residual * (1.0 - 1e-9) - 1e-15) {
            best = Some(PowerLawFit { a, b, c, residual, burn_in, points: pts.len() });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Pool-adjacent-violators fit of a non-increasing sequence.
fn decreasing_fit(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Post-burn-in curve as `(ln n, monotone loss)`, sorted by tokens.
fn monotone(series: &[(f64, f64)], burn_in: f64) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = series.iter().copied().filter(|p| p.0 >= burn_in && p.0 > 0.0).collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let fitted = decreasing_fit(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
    pts.iter().zip(fitted).map(|(p, l)| (p.0.ln(), l)).collect()
}

fn interpolate(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let (first, last) = (curve.first()?, curve.last()?);
    if x < first.0 || x > last.0 {
        return None;
    }
    let i = curve.partition_point(|p| p.0 < x);
    if i < curve.len() && curve[i].0 == x {
        return Some(curve[i].1);
    }
    let (l, r) = (curve[i - 1], curve[i]);
    Some(l.1 + (r.1 - l.1) * (x - l.0) / (r.0 - l.0))
}

/// Token-axis shift between two curves. `burn_in_a` and `burn_in_b` are
/// token thresholds for each curve.
pub fn estimate_shift(
    curve_a: &[(f64, f64)],
    curve_b: &[(f64, f64)],
    burn_in_a: f64,
    burn_in_b: f64,
) -> Result<ShiftEstimate> {
    let a = monotone(curve_a, burn_in_a);
    let b = monotone(curve_b, burn_in_b);
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Analysis("shift estimation needs two points per curve beyond burn-in".into()));
    }
    let need = (a.len() / 2).max(2);
    // Mean squared difference at ln s, or None when too few points overlap.
    let objective = |ln_s: f64| -> Option<(f64, usize)> {
        let diffs: Vec<f64> = a.iter().filter_map(|&(x, l)| interpolate(&b, x + ln_s).map(|lb| lb - l)).collect();
        (diffs.len() >= need).then(|| (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64, diffs.len()))
    };
    let lo = b[0].0 - a[a.len() - 1].0;
    let hi = b[b.len() - 1].0 - a[0].0;
    const GRID: usize = 200;
    let step = (hi - lo) / GRID as f64;
    // Grid aligned so that ln s = 0 is a node whenever it lies in range.
    let offset = if lo <= 0.0 && hi >= 0.0 { -lo - (-lo / step).floor() * step } else { 0.0 };
    let mut best: Option<(f64, f64, usize)> = None;
    let consider = |x: f64, best: &mut Option<(f64, f64, usize)>| {
        if let Some((m, n)) = objective(x) {
            if best.is_none_or(|b| m < b.1) {
                *best = Some((x, m, n));
            }
        }
    };
    for i in 0..=GRID + 1 {
        let x = lo + offset + i as f64 * step;
        if x <= hi {
            consider(if x.abs() < step * 1e-9 { 0.0 } else { x }, &mut best);
        }
    }
    let Some((x0, _, _)) = best else {
        return Err(Error::Analysis("loss curves do not overlap after burn-in".into()));
    };
    // Golden-section refinement inside the neighbouring grid cells.
    let (mut l, mut r) = ((x0 - step).max(lo), (x0 + step).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let f = |x: f64| objective(x).map_or(f64::INFINITY, |v| v.0);
    let (mut c, mut d) = (r - g * (r - l), l + g * (r - l));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            r = d;
            d = c;
            fd = fc;
            c = r - g * (r - l);
            fc = f(c);
        } else {
            l = c;
            c = d;
            fc = fd;
            d = l + g * (r - l);
            fd = f(d);
        }
    }
    consider(0.5 * (l + r), &mut best);
    let (x, m, n) = best.expect("set above");
    Ok(ShiftEstimate { factor: x.exp(), residual: m.sqrt(), points: n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pava_pools_violations() {
        assert_eq!(decreasing_fit(&[3.0, 1.0, 2.0, 0.5]), vec![3.0, 1.5, 1.5, 0.5]);
        assert_eq!(decreasing_fit(&[1.0, 2.0, 3.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn grid_spans_range() {
        let g = b_grid();
        assert_eq!(g[0], 0.01);
        assert_eq!(*g.last().unwrap(), 2.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn too_few_points() {
        let s: Vec<(f64, f64)> = (1..=9).map(|i| (i as f64, 1.0)).collect();
        assert!(matches!(fit_power_law(&s, 0.0), Err(Error::Analysis(_))));
    }
}
