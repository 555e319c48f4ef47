//! Dense symmetric eigendecomposition and truncated SVD in f64.

use ndarray::{Array2, ArrayView2, Axis};

struct Sq {
    n: usize,
    a: Vec<f64>,
}

impl Sq {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.n + c]
    }
    #[inline]
    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.a[r * self.n + c] = v;
    }
}

/// Householder reduction to tridiagonal form, accumulating the transform in `v`.
fn tred2(v: &mut Sq, d: &mut [f64], e: &mut [f64]) {
    let n = v.n;
    for j in 0..n {
        d[j] = v.at(n - 1, j);
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v.set(j, i, f);
                g = e[j] + v.at(j, j) * f;
                for k in j + 1..i {
                    g += v.at(k, j) * d[k];
                    e[k] += v.at(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let val = v.at(k, j) - (f * e[k] + g * d[k]);
                    v.set(k, j, val);
                }
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        let vii = v.at(i, i);
        v.set(n - 1, i, vii);
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v.at(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.at(k, i + 1) * v.at(k, j);
                }
                for k in 0..=i {
                    let val = v.at(k, j) - g * d[k];
                    v.set(k, j, val);
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for j in 0..n {
        d[j] = v.at(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicit QL iterations on the tridiagonal matrix.
fn tql2(v: &mut Sq, d: &mut [f64], e: &mut [f64]) {
    let n = v.n;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            for _ in 0..200 {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let h = v.at(k, i + 1);
                        let vi = v.at(k, i);
                        v.set(k, i + 1, s * vi + c * h);
                        v.set(k, i, c * vi - s * h);
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

/// Eigenvalues in descending order and matching unit eigenvectors as columns.
pub fn sym_eigen(a: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    if n == 0 {
        return (Vec::new(), Array2::zeros((0, 0)));
    }
    let mut v = Sq {
        n,
        a: Vec::with_capacity(n * n),
    };
    for r in 0..n {
        for c in 0..n {
            v.a.push(0.5 * (a[[r, c]] + a[[c, r]]));
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v.at(r, order[c]));
    (values, vectors)
}

/// Leading `k` singular triplets of `x` (`rows x cols`).
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub singular_values: Vec<f64>,
    /// `rows x k`, orthonormal columns where the singular value is non-zero.
    pub u: Array2<f64>,
    /// `k x cols`, orthonormal rows.
    pub vt: Array2<f64>,
}

const NULL_REL: f64 = 1e-7;

/// Gram-Schmidt against the existing rows, filling zero rows of `vt` with unit
/// vectors orthogonal to everything before them.
fn complete_rows(vt: &mut Array2<f64>, fill: &[bool]) {
    let (k, d) = vt.dim();
    let mut candidate = 0usize;
    for i in 0..k {
        if !fill[i] {
            continue;
        }
        loop {
            assert!(candidate < d, "cannot complete an orthonormal basis");
            let mut v = vec![0.0; d];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in 0..k {
                    if j == i || (fill[j] && j > i) {
                        continue;
                    }
                    let row = vt.row(j);
                    let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(row.iter()).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                vt.row_mut(i).iter_mut().zip(&v).for_each(|(r, x)| *r = x / norm);
                break;
            }
        }
    }
}

/// Truncated SVD through the eigendecomposition of the smaller Gram matrix.
/// Directions with negligible singular value get a zero `u` column and an
/// arbitrary orthonormal completion in `vt`.
pub fn truncated_svd(x: ArrayView2<f64>, k: usize) -> TruncatedSvd {
    let (rows, cols) = x.dim();
    let k = k.min(rows.min(cols));
    let mut u = Array2::zeros((rows, k));
    let mut vt = Array2::zeros((k, cols));
    let mut sv = vec![0.0; k];
    if k == 0 {
        return TruncatedSvd {
            singular_values: sv,
            u,
            vt,
        };
    }
    let mut fill = vec![false; k];
    if cols <= rows {
        let (vals, vecs) = sym_eigen(x.t().dot(&x).view());
        let smax = vals[0].max(0.0).sqrt();
        for j in 0..k {
            let s = vals[j].max(0.0).sqrt();
            sv[j] = s;
            let v = vecs.column(j);
            vt.row_mut(j).assign(&v);
            if s > NULL_REL * smax && s > 0.0 {
                let uj = x.dot(&v) / s;
                u.column_mut(j).assign(&uj);
            }
        }
    } else {
        let (vals, vecs) = sym_eigen(x.dot(&x.t()).view());
        let smax = vals[0].max(0.0).sqrt();
        for j in 0..k {
            let s = vals[j].max(0.0).sqrt();
            sv[j] = s;
            if s > NULL_REL * smax && s > 0.0 {
                let uj = vecs.column(j);
                u.column_mut(j).assign(&uj);
                let v = x.t().dot(&uj) / s;
                vt.row_mut(j).assign(&v);
            } else {
                fill[j] = true;
            }
        }
        if fill.iter().any(|&f| f) {
            complete_rows(&mut vt, &fill);
        }
    }
    TruncatedSvd {
        singular_values: sv,
        u,
        vt,
    }
}

/// Column means of `x`.
pub fn column_means(x: ArrayView2<f64>) -> Vec<f64> {
    if x.nrows() == 0 {
        return vec![0.0; x.ncols()];
    }
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky
/// factorization. `None` when `a` is not positive definite.
pub fn cholesky_solve(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    assert_eq!(n, b.nrows(), "right-hand side has the wrong row count");
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    let mut x = b.to_owned();
    for mut col in x.columns_mut() {
        for i in 0..n {
            let mut v = col[i];
            for k in 0..i {
                v -= l[[i, k]] * col[k];
            }
            col[i] = v / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = col[i];
            for k in i + 1..n {
                v -= l[[k, i]] * col[k];
            }
            col[i] = v / l[[i, i]];
        }
    }
    Some(x)
}
