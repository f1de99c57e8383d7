//! Central finite differences for coefficient derivatives.
//!
//! Built-in models supply analytic derivatives; these helpers back
//! user-defined models and serve as an independent check of the analytic
//! expressions. Default step 1e-5, accuracy O(step^2).

pub const DEFAULT_STEP: f64 = 1e-5;

/// d/dx_i of f, central difference.
pub fn partial(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += step;
    xm[i] -= step;
    (f(&xp) - f(&xm)) / (2.0 * step)
}

/// d²/dx_i dx_j of f, central difference stencil.
pub fn partial2(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, j: usize, step: f64) -> f64 {
    if i == j {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += step;
        xm[i] -= step;
        (f(&xp) - 2.0 * f(x) + f(&xm)) / (step * step)
    } else {
        let mut xpp = x.to_vec();
        let mut xpm = x.to_vec();
        let mut xmp = x.to_vec();
        let mut xmm = x.to_vec();
        xpp[i] += step;
        xpp[j] += step;
        xpm[i] += step;
        xpm[j] -= step;
        xmp[i] -= step;
        xmp[j] += step;
        xmm[i] -= step;
        xmm[j] -= step;
        (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * step * step)
    }
}

/// Divergence sum_i d(mu_i)/dx_i of a vector field.
pub fn divergence(mu: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> f64 {
    (0..x.len())
        .map(|i| partial(&|y: &[f64]| mu(y)[i], x, i, step))
        .sum()
}

/// Vector with j-th entry sum_i d(a_ij)/dx_i, where `a` returns the full
/// d x d matrix in row-major order.
pub fn grad_div_matrix(a: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Vec<f64> {
    let d = x.len();
    (0..d)
        .map(|j| {
            (0..d)
                .map(|i| partial(&|y: &[f64]| a(y)[i * d + j], x, i, step))
                .sum()
        })
        .collect()
}

/// sum_{i,j} d²(a_ij)/dx_i dx_j.
pub fn laplacian_matrix(a: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += partial2(&|y: &[f64]| a(y)[i * d + j], x, i, j, step);
        }
    }
    acc
}

/// Jacobian of a vector-valued map, rows indexed by output component.
pub fn jacobian(h: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], out_dim: usize, step: f64) -> Vec<f64> {
    let d = x.len();
    let mut jac = vec![0.0; out_dim * d];
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        let hp = h(&xp);
        let hm = h(&xm);
        for i in 0..out_dim {
            jac[i * d + j] = (hp[i] - hm[i]) / (2.0 * step);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_partials() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + 3.0 * x[1];
        let x = [1.5, -2.0];
        assert!((partial(&f, &x, 0, DEFAULT_STEP) - 2.0 * 1.5 * -2.0).abs() < 1e-7);
        assert!((partial(&f, &x, 1, DEFAULT_STEP) - (1.5 * 1.5 + 3.0)).abs() < 1e-7);
        assert!((partial2(&f, &x, 0, 1, DEFAULT_STEP) - 3.0).abs() < 1e-4);
        assert!((partial2(&f, &x, 0, 0, 1e-4) - (-4.0)).abs() < 1e-4);
    }

    #[test]
    fn divergence_of_linear_field() {
        let mu = |x: &[f64]| vec![-x[0], 2.0 * x[1], x[0] - x[2]];
        let x = [0.3, 0.7, -1.1];
        assert!((divergence(&mu, &x, DEFAULT_STEP) - 0.0).abs() < 1e-6);
    }
}
