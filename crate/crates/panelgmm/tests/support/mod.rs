//! Brute-force GMM oracle used by the acceptance suite.
//!
//! Everything here is deliberately independent of the library's linear
//! algebra: a naive row-major matrix type with triple-loop products and
//! Gauss-Jordan inversion, plus literal transcriptions of the estimator
//! formulas. The oracle consumes only raw panel values.

use panelgmm::PanelData;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            v: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            *m.at_mut(i, i) = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c);
            for (j, x) in row.iter().enumerate() {
                *m.at_mut(i, j) = *x;
            }
        }
        m
    }

    pub fn column(values: &[f64]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            v: values.to_vec(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.v[i * self.cols + j]
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "mul {}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    *out.at_mut(i, j) += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += *b;
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            v: self.v.iter().zip(&other.v).map(|(a, b)| a - b).collect(),
        }
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Mat {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Mat::identity(n);
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a.at(r, col).abs() > a.at(pivot, col).abs() {
                    pivot = r;
                }
            }
            assert!(a.at(pivot, col).abs() > 0.0, "singular matrix in oracle");
            if pivot != col {
                for j in 0..n {
                    let tmp = a.at(col, j);
                    *a.at_mut(col, j) = a.at(pivot, j);
                    *a.at_mut(pivot, j) = tmp;
                    let tmp = inv.at(col, j);
                    *inv.at_mut(col, j) = inv.at(pivot, j);
                    *inv.at_mut(pivot, j) = tmp;
                }
            }
            let d = a.at(col, col);
            for j in 0..n {
                *a.at_mut(col, j) /= d;
                *inv.at_mut(col, j) /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a.at(r, col);
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = a.at(col, j);
                    *a.at_mut(r, j) -= f * v;
                    let v = inv.at(col, j);
                    *inv.at_mut(r, j) -= f * v;
                }
            }
        }
        inv
    }

}

/// (T−1)×T first-difference pattern.
pub fn difference_mat(t: usize) -> Mat {
    let mut m = Mat::zeros(t - 1, t);
    for r in 0..t - 1 {
        *m.at_mut(r, r) = -1.0;
        *m.at_mut(r, r + 1) = 1.0;
    }
    m
}

/// (T−1)×T forward orthogonal deviations, transcribed literally as a
/// diagonal scale times the 1/−1/(T−r) pattern.
pub fn fod_mat(t: usize) -> Mat {
    let tf = t as f64;
    let mut pattern = Mat::zeros(t - 1, t);
    for r in 0..t - 1 {
        let rf = (r + 1) as f64;
        *pattern.at_mut(r, r) = 1.0;
        for c in r + 1..t {
            *pattern.at_mut(r, c) = -1.0 / (tf - rf);
        }
    }
    let mut scale = Mat::zeros(t - 1, t - 1);
    for r in 0..t - 1 {
        let rf = (r + 1) as f64;
        *scale.at_mut(r, r) = ((tf - rf) / (tf - rf + 1.0)).sqrt();
    }
    scale.mul(&pattern)
}

/// diag(K, I_T).
pub fn system_mat(k: &Mat, t: usize) -> Mat {
    let mut out = Mat::zeros(k.rows + t, 2 * t);
    for i in 0..k.rows {
        for j in 0..k.cols {
            *out.at_mut(i, j) = k.at(i, j);
        }
    }
    for i in 0..t {
        *out.at_mut(k.rows + i, t + i) = 1.0;
    }
    out
}

/// Levels outcome (y_{i1}..y_{iT}) read straight off the panel.
pub fn outcome(panel: &PanelData, i: usize) -> Mat {
    let t = panel.t_max();
    Mat::column(&(1..=t).map(|s| panel.y(i, s)).collect::<Vec<_>>())
}

/// Levels regressors with (y_{i,t−1}, x_it) in row t.
pub fn regressors(panel: &PanelData, i: usize) -> Mat {
    let t = panel.t_max();
    Mat::from_rows(
        (1..=t)
            .map(|s| vec![panel.y(i, s - 1), panel.x(i, s, 0)])
            .collect(),
    )
}

/// Block-diagonal recent-lags instrument matrix, built independently:
/// z_1 = (y_0, x_0, x_1); z_t = (y_{t−2}, y_{t−1}, x_{t−2}, x_{t−1}, x_t).
pub fn recent_lag_instruments(panel: &PanelData, i: usize) -> Mat {
    let t_max = panel.t_max();
    let blocks: Vec<Vec<f64>> = (1..=t_max - 1)
        .map(|t| {
            if t == 1 {
                vec![panel.y(i, 0), panel.x(i, 0, 0), panel.x(i, 1, 0)]
            } else {
                vec![
                    panel.y(i, t - 2),
                    panel.y(i, t - 1),
                    panel.x(i, t - 2, 0),
                    panel.x(i, t - 1, 0),
                    panel.x(i, t, 0),
                ]
            }
        })
        .collect();
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let mut z = Mat::zeros(t_max - 1, total);
    let mut offset = 0;
    for (r, block) in blocks.iter().enumerate() {
        for (j, v) in block.iter().enumerate() {
            *z.at_mut(r, offset + j) = *v;
        }
        offset += block.len();
    }
    z
}

/// System instruments diag(Z_1i, Z_2i) with Z_2i holding Δx_1 then
/// (Δy_{t−1}, Δx_t).
pub fn system_recent_lag_instruments(panel: &PanelData, i: usize) -> Mat {
    let t_max = panel.t_max();
    let z1 = recent_lag_instruments(panel, i);
    let mut level_blocks: Vec<Vec<f64>> = vec![vec![panel.x(i, 1, 0) - panel.x(i, 0, 0)]];
    for t in 2..=t_max {
        level_blocks.push(vec![
            panel.y(i, t - 1) - panel.y(i, t - 2),
            panel.x(i, t, 0) - panel.x(i, t - 1, 0),
        ]);
    }
    let m2: usize = level_blocks.iter().map(|b| b.len()).sum();
    let mut z = Mat::zeros(z1.rows + t_max, z1.cols + m2);
    for r in 0..z1.rows {
        for c in 0..z1.cols {
            *z.at_mut(r, c) = z1.at(r, c);
        }
    }
    let mut offset = z1.cols;
    for (r, block) in level_blocks.iter().enumerate() {
        for (j, v) in block.iter().enumerate() {
            *z.at_mut(z1.rows + r, offset + j) = *v;
        }
        offset += block.len();
    }
    z
}

/// Literal GMM sandwich: β = [X̃'Z W Z'X̃]⁻¹ X̃'Z W Z'ỹ with explicit
/// inverses throughout.
fn sandwich(xt: &[Mat], yt: &[Mat], z: &[Mat], w: &Mat) -> Vec<f64> {
    let m = w.rows;
    let k = xt[0].cols;
    let mut zx = Mat::zeros(m, k);
    let mut zy = Mat::zeros(m, 1);
    for ((xi, yi), zi) in xt.iter().zip(yt).zip(z) {
        zx.add_assign(&zi.t().mul(xi));
        zy.add_assign(&zi.t().mul(yi));
    }
    let xzw = zx.t().mul(w);
    let bread = xzw.mul(&zx).inverse();
    let meat = xzw.mul(&zy);
    let beta = bread.mul(&meat);
    beta.v
}

/// One-step estimate with weighting (Σ Z'·KK'·Z)⁻¹, by direct evaluation.
pub fn oracle_one_step(panel: &PanelData, k: &Mat) -> Vec<f64> {
    let n = panel.individuals();
    let kk = k.mul(&k.t());
    let mut xt = Vec::new();
    let mut yt = Vec::new();
    let mut z = Vec::new();
    for i in 0..n {
        let zi = recent_lag_instruments(panel, i);
        xt.push(k.mul(&regressors(panel, i)));
        yt.push(k.mul(&outcome(panel, i)));
        z.push(zi);
    }
    let m = z[0].cols;
    let mut target = Mat::zeros(m, m);
    for zi in &z {
        target.add_assign(&zi.t().mul(&kk).mul(zi));
    }
    sandwich(&xt, &yt, &z, &target.inverse())
}

/// Two-step estimate with weighting (Σ Z'ẽẽ'Z)⁻¹, residuals in levels.
pub fn oracle_two_step(panel: &PanelData, k: &Mat, initial: &[f64]) -> Vec<f64> {
    let n = panel.individuals();
    let beta0 = Mat::column(initial);
    let mut xt = Vec::new();
    let mut yt = Vec::new();
    let mut z = Vec::new();
    let m = recent_lag_instruments(panel, 0).cols;
    let mut target = Mat::zeros(m, m);
    for i in 0..n {
        let zi = recent_lag_instruments(panel, i);
        let e = outcome(panel, i).sub(&regressors(panel, i).mul(&beta0));
        let et = k.mul(&e);
        let zez = zi.t().mul(&et).mul(&et.t()).mul(&zi);
        target.add_assign(&zez);
        xt.push(k.mul(&regressors(panel, i)));
        yt.push(k.mul(&outcome(panel, i)));
        z.push(zi);
    }
    sandwich(&xt, &yt, &z, &target.inverse())
}

fn stack2(m: &Mat) -> Mat {
    let mut out = Mat::zeros(2 * m.rows, m.cols);
    for i in 0..m.rows {
        for j in 0..m.cols {
            *out.at_mut(i, j) = m.at(i, j);
            *out.at_mut(m.rows + i, j) = m.at(i, j);
        }
    }
    out
}

/// System one-step with weighting (Σ Z⁺'·diag(KK', I)·Z⁺)⁻¹.
pub fn oracle_system_one_step(panel: &PanelData, k: &Mat) -> Vec<f64> {
    let n = panel.individuals();
    let t = panel.t_max();
    let kp = system_mat(k, t);
    let kk = k.mul(&k.t());
    let mut lambda = Mat::identity(2 * t - 1);
    for i in 0..t - 1 {
        for j in 0..t - 1 {
            *lambda.at_mut(i, j) = kk.at(i, j);
        }
    }
    let mut xt = Vec::new();
    let mut yt = Vec::new();
    let mut z = Vec::new();
    let m = system_recent_lag_instruments(panel, 0).cols;
    let mut target = Mat::zeros(m, m);
    for i in 0..n {
        let zi = system_recent_lag_instruments(panel, i);
        target.add_assign(&zi.t().mul(&lambda).mul(&zi));
        xt.push(kp.mul(&stack2(&regressors(panel, i))));
        yt.push(kp.mul(&stack2(&outcome(panel, i))));
        z.push(zi);
    }
    sandwich(&xt, &yt, &z, &target.inverse())
}

/// System two-step with weighting (Σ Z⁺'ẽ⁺ẽ⁺'Z⁺)⁻¹.
pub fn oracle_system_two_step(panel: &PanelData, k: &Mat, initial: &[f64]) -> Vec<f64> {
    let n = panel.individuals();
    let t = panel.t_max();
    let kp = system_mat(k, t);
    let beta0 = Mat::column(initial);
    let mut xt = Vec::new();
    let mut yt = Vec::new();
    let mut z = Vec::new();
    let m = system_recent_lag_instruments(panel, 0).cols;
    let mut target = Mat::zeros(m, m);
    for i in 0..n {
        let zi = system_recent_lag_instruments(panel, i);
        let xp = stack2(&regressors(panel, i));
        let yp = stack2(&outcome(panel, i));
        let et = kp.mul(&yp.sub(&xp.mul(&beta0)));
        target.add_assign(&zi.t().mul(&et).mul(&et.t()).mul(&zi));
        xt.push(kp.mul(&xp));
        yt.push(kp.mul(&yp));
        z.push(zi);
    }
    sandwich(&xt, &yt, &z, &target.inverse())
}

/// Max-norm relative difference between coefficient vectors.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
