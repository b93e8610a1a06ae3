//! Natural cubic spline with analytic first and second derivatives.

/// One-dimensional natural cubic spline over strictly increasing knots.
///
/// Two knots degenerate to linear interpolation; C² smoothness holds for
/// four or more.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots (natural boundary: zero at both ends).
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn fit(knots: &[f64], values: &[f64]) -> Self {
        assert_eq!(knots.len(), values.len());
        assert!(knots.len() >= 2, "spline needs at least two knots");
        for w in knots.windows(2) {
            assert!(w[1] > w[0], "knots must be strictly increasing");
        }
        let n = knots.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior tridiagonal system.
            let k = n - 2;
            let mut sub = vec![0.0; k];
            let mut diag = vec![0.0; k];
            let mut sup = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let h0 = knots[i + 1] - knots[i];
                let h1 = knots[i + 2] - knots[i + 1];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                sup[i] = h1 / 6.0;
                rhs[i] = (values[i + 2] - values[i + 1]) / h1 - (values[i + 1] - values[i]) / h0;
            }
            for i in 1..k {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - sup[i] * m[i + 2]) / diag[i];
            }
        }
        Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            m,
        }
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.knots.len();
        match self
            .knots
            .binary_search_by(|k| k.partial_cmp(&t).expect("finite knot"))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Value, first derivative, second derivative at `t` (clamped to the
    /// knot span).
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let t = t.clamp(self.knots[0], *self.knots.last().unwrap());
        let i = self.segment(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let value = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let deriv =
            (y1 - y0) / h - h / 6.0 * (3.0 * a * a - 1.0) * m0 + h / 6.0 * (3.0 * b * b - 1.0) * m1;
        let second = a * m0 + b * m1;
        (value, deriv, second)
    }
}
