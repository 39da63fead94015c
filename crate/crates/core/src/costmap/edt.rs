//! Exact Euclidean distance transform (lower envelope of parabolas, one pass
//! per axis) and the signed distance field built on it.

use crate::grid::Grid;

const FAR: f64 = 1e20;

/// 1D squared distance transform of the sampled function `f`.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] = -inf stops the scan at k = 0.
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared distance (in cells) from every cell to the nearest `true` cell.
pub fn squared_edt(seeds: &Grid<bool>) -> Grid<f64> {
    let (rows, cols) = seeds.dims();
    let n = rows.max(cols);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut g = seeds.map(|&s| if s { 0.0 } else { FAR });

    for c in 0..cols {
        for r in 0..rows {
            f[r] = *g.get(r, c);
        }
        dt_1d(&f[..rows], &mut out[..rows], &mut v, &mut z);
        for r in 0..rows {
            g.set(r, c, out[r]);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            f[c] = *g.get(r, c);
        }
        dt_1d(&f[..cols], &mut out[..cols], &mut v, &mut z);
        for c in 0..cols {
            g.set(r, c, out[c]);
        }
    }
    g
}

/// Signed distance in meters: positive inside `mask`, negative outside, with
/// magnitude equal to the distance to the nearest cell center of opposite
/// value. A mask without both values yields all zeros.
pub fn signed_distance(mask: &Grid<bool>, resolution: f64) -> Grid<f64> {
    let any_true = mask.data().iter().any(|&m| m);
    let any_false = mask.data().iter().any(|&m| !m);
    if !(any_true && any_false) {
        return Grid::filled(mask.rows(), mask.cols(), 0.0);
    }
    let to_outside = squared_edt(&mask.map(|&m| !m));
    let to_inside = squared_edt(mask);
    Grid::from_fn(mask.rows(), mask.cols(), |r, c| {
        if *mask.get(r, c) {
            to_outside.get(r, c).sqrt() * resolution
        } else {
            -(to_inside.get(r, c).sqrt() * resolution)
        }
    })
}
