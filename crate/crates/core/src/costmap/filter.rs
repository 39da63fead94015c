use crate::grid::Grid;

/// Normalized 1D Gaussian kernel truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian blur with edge replication at the borders.
///
/// Each output is accumulated as `center + sum(w * (v - center))`, which equals
/// the plain weighted sum for a unit-sum kernel and keeps constant regions
/// bit-exact.
///
/// Panics if `sigma` is not positive.
pub fn gaussian_filter(grid: &Grid<f64>, sigma: f64) -> Grid<f64> {
    assert!(sigma > 0.0, "gaussian sigma must be positive, got {sigma}");
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (rows, cols) = grid.dims();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;

    let mut tmp = Grid::filled(rows, cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            let center = *grid.get(r, c);
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let cc = clamp(c as i64 + j as i64 - radius, cols);
                acc += w * (grid.get(r, cc) - center);
            }
            tmp.set(r, c, center + acc);
        }
    }
    let mut out = Grid::filled(rows, cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            let center = *tmp.get(r, c);
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let rr = clamp(r as i64 + j as i64 - radius, rows);
                acc += w * (tmp.get(rr, c) - center);
            }
            out.set(r, c, center + acc);
        }
    }
    out
}
