use super::ScalarField;

/// Bilinear sample of a field with its analytic spatial gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    /// d value / d(x, y) in units per meter.
    pub grad: [f64; 2],
    /// The query fell outside the cell-center hull and was clamped onto it.
    pub out_of_bounds: bool,
}

fn locate(u: f64, n: usize) -> (usize, f64, bool, bool) {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&u);
    let u = u.clamp(0.0, max);
    if n == 1 {
        return (0, 0.0, clamped, true);
    }
    let i = (u.floor() as usize).min(n - 2);
    (i, u - i as f64, clamped, false)
}

impl ScalarField {
    /// Bilinear interpolation over the four surrounding cell centers.
    ///
    /// Queries beyond the outermost cell centers are clamped onto them; the
    /// gradient component along a clamped axis is zero.
    pub fn sample(&self, x: f64, y: f64) -> Sample {
        let res = self.resolution;
        let u = (x - self.origin[0]) / res - 0.5;
        let v = (y - self.origin[1]) / res - 0.5;
        let (c0, fx, cx, single_c) = locate(u, self.values.cols());
        let (r0, fy, cy, single_r) = locate(v, self.values.rows());
        let c1 = if single_c { c0 } else { c0 + 1 };
        let r1 = if single_r { r0 } else { r0 + 1 };
        let g = &self.values;
        let (a00, a01, a10, a11) = (*g.get(r0, c0), *g.get(r0, c1), *g.get(r1, c0), *g.get(r1, c1));
        let value = (1.0 - fy) * ((1.0 - fx) * a00 + fx * a01) + fy * ((1.0 - fx) * a10 + fx * a11);
        let gx = if cx || single_c {
            0.0
        } else {
            ((1.0 - fy) * (a01 - a00) + fy * (a11 - a10)) / res
        };
        let gy = if cy || single_r {
            0.0
        } else {
            ((1.0 - fx) * (a10 - a00) + fx * (a11 - a01)) / res
        };
        Sample {
            value,
            grad: [gx, gy],
            out_of_bounds: cx || cy,
        }
    }
}
