//! Comparison statistics: mean, sample SD, Pearson r, RMSE, polynomial fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

pub fn mean<T: Real>(xs: &[T]) -> Result<T> {
    if xs.is_empty() {
        return Err(Error::InsufficientData("mean of an empty sample".into()));
    }
    let sum = xs.iter().fold(T::zero(), |acc, &x| acc + x);
    Ok(sum / T::from_usize_lossy(xs.len()))
}

/// Sample standard deviation (n − 1 denominator), two-pass.
pub fn sample_sd<T: Real>(xs: &[T]) -> Result<T> {
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "standard deviation needs at least 2 values, got {}",
            xs.len()
        )));
    }
    if is_constant(xs) {
        return Ok(T::zero());
    }
    let m = mean(xs)?;
    let ss = xs.iter().fold(T::zero(), |acc, &x| acc + (x - m) * (x - m));
    Ok((ss / T::from_usize_lossy(xs.len() - 1)).sqrt())
}

/// Exact test, so rounding in the mean cannot invent spread.
fn is_constant<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

fn check_pair<T>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Sample Pearson correlation, clamped to [−1, 1].
pub fn pearson_r<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(Error::InsufficientData("correlation needs at least 2 pairs".into()));
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation);
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
        sxy = sxy + dx * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::UndefinedCorrelation);
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

pub fn rmse<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    if x.is_empty() {
        return Err(Error::InsufficientData("rmse of empty vectors".into()));
    }
    let ss = x
        .iter()
        .zip(y)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok((ss / T::from_usize_lossy(x.len())).sqrt())
}

/// `y = a·x² + b·x + c`; `a` is zero for linear fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub r_squared: T,
}

impl<T: Real> PolyFit<T> {
    pub fn predict(&self, x: T) -> T {
        (self.a * x + self.b) * x + self.c
    }
}

/// Least-squares polynomial fit of degree 1 or 2 via Householder QR.
pub fn fit_polynomial<T: Real>(x: &[T], y: &[T], degree: usize) -> Result<PolyFit<T>> {
    check_pair(x, y)?;
    if !(1..=2).contains(&degree) {
        return Err(Error::validation(format!("degree must be 1 or 2, got {degree}")));
    }
    let p = degree + 1;
    let mut distinct: Vec<T> = x.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite x"));
    distinct.dedup();
    if distinct.len() < p {
        return Err(Error::DegenerateFit(format!(
            "degree {degree} needs {p} distinct x values, got {}",
            distinct.len()
        )));
    }

    // Columns: x^degree .. x^0, scaled by their norms for conditioning.
    let n = x.len();
    let mut cols: Vec<Vec<T>> = (0..p)
        .map(|j| {
            let pow = degree - j;
            x.iter().map(|&v| v.powi(pow as i32)).collect()
        })
        .collect();
    let scale: Vec<T> = cols
        .iter()
        .map(|c| {
            let norm = c.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if norm == T::zero() {
                T::one()
            } else {
                norm
            }
        })
        .collect();
    for (c, &s) in cols.iter_mut().zip(&scale) {
        for v in c.iter_mut() {
            *v = *v / s;
        }
    }
    let mut rhs = y.to_vec();

    for k in 0..p {
        let norm = cols[k][k..].iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        if norm <= T::epsilon() * T::from_usize_lossy(n) {
            return Err(Error::DegenerateFit("design matrix is rank deficient".into()));
        }
        let alpha = if cols[k][k] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = cols[k][k..].to_vec();
        v[0] = v[0] - alpha;
        let vnorm2 = v.iter().fold(T::zero(), |acc, &e| acc + e * e);
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        let reflect = |col: &mut [T]| {
            let dot = v.iter().zip(col.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            let f = two * dot / vnorm2;
            for (c, &e) in col.iter_mut().zip(&v) {
                *c = *c - f * e;
            }
        };
        for col in cols.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut rhs[k..]);
    }

    let mut coef = vec![T::zero(); p];
    for i in (0..p).rev() {
        let mut s = rhs[i];
        for j in i + 1..p {
            s = s - cols[j][i] * coef[j];
        }
        let d = cols[i][i];
        if d.abs() <= T::epsilon() * T::from_usize_lossy(n) {
            return Err(Error::DegenerateFit("design matrix is rank deficient".into()));
        }
        coef[i] = s / d;
    }
    for (c, &s) in coef.iter_mut().zip(&scale) {
        *c = *c / s;
    }

    let (a, b, c) = match degree {
        1 => (T::zero(), coef[0], coef[1]),
        _ => (coef[0], coef[1], coef[2]),
    };
    let fit = PolyFit { a, b, c, r_squared: T::zero() };
    let my = mean(y)?;
    let ss_tot = y.iter().fold(T::zero(), |acc, &v| acc + (v - my) * (v - my));
    let ss_res = x
        .iter()
        .zip(y)
        .fold(T::zero(), |acc, (&xi, &yi)| {
            let r = yi - fit.predict(xi);
            acc + r * r
        });
    let r_squared = if ss_tot == T::zero() {
        T::one()
    } else {
        T::one() - ss_res / ss_tot
    };
    Ok(PolyFit { r_squared, ..fit })
}

/// Flags values with `|v − mean| > k·sd` (sample sd). A constant sample has no outliers.
pub fn detect_outliers<T: Real>(values: &[T], k: T) -> Result<Vec<bool>> {
    if k.is_nan() || k <= T::zero() {
        return Err(Error::validation("outlier threshold k must be positive"));
    }
    let sd = sample_sd(values)?;
    let m = mean(values)?;
    if sd == T::zero() {
        return Ok(vec![false; values.len()]);
    }
    Ok(values.iter().map(|&v| (v - m).abs() > k * sd).collect())
}
