//! Small dense optimization helpers used by the decomposition checks:
//! an adaptive Nelder-Mead simplex search and a Levenberg-Marquardt
//! least-squares refiner with a numeric Jacobian.

use nalgebra::{DMatrix, DVector};

pub(crate) struct NmOptions {
    pub max_iters: usize,
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            max_iters: 600,
            f_tol: 1e-14,
            initial_step: 0.5,
        }
    }
}

/// Adaptive Nelder-Mead minimization. Returns the best point and value.
pub(crate) fn nelder_mead<F>(f: F, x0: &[f64], opts: &NmOptions) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let dim = x0.len();
    let n = dim as f64;
    // adaptive coefficients (scale with dimension)
    let alpha = 1.0;
    let beta = 1.0 + 2.0 / n;
    let gamma = 0.75 - 1.0 / (2.0 * n);
    let delta = 1.0 - 1.0 / n;

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for i in 0..dim {
        let mut v = x0.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();

    for _ in 0..opts.max_iters {
        // order ascending by value
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let ordered: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let ordered_vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ordered_vals;

        if (values[dim] - values[0]).abs() <= opts.f_tol {
            break;
        }

        // centroid of all but worst
        let mut centroid = vec![0.0; dim];
        for v in simplex.iter().take(dim) {
            for (c, x) in centroid.iter_mut().zip(v.iter()) {
                *c += x / n;
            }
        }
        let worst = simplex[dim].clone();
        let mix = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst.iter())
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let reflected = mix(alpha);
        let f_r = f(&reflected);
        if f_r < values[0] {
            let expanded = mix(beta);
            let f_e = f(&expanded);
            if f_e < f_r {
                simplex[dim] = expanded;
                values[dim] = f_e;
            } else {
                simplex[dim] = reflected;
                values[dim] = f_r;
            }
            continue;
        }
        if f_r < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = f_r;
            continue;
        }
        let contracted = if f_r < values[dim] {
            mix(gamma)
        } else {
            mix(-gamma)
        };
        let f_c = f(&contracted);
        if f_c < values[dim].min(f_r) {
            simplex[dim] = contracted;
            values[dim] = f_c;
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].clone();
        for i in 1..=dim {
            for j in 0..dim {
                simplex[i][j] = best[j] + delta * (simplex[i][j] - best[j]);
            }
            values[i] = f(&simplex[i]);
        }
    }
    let mut best = 0;
    for i in 1..=dim {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best])
}

pub(crate) struct LmOptions {
    pub max_iters: usize,
    pub cost_tol: f64,
    pub step_tol: f64,
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iters: 80,
            cost_tol: 1e-30,
            step_tol: 1e-14,
            fd_step: 1e-7,
        }
    }
}

/// Levenberg-Marquardt on a residual vector with a central-difference
/// Jacobian. Returns the refined point and the final sum of squares.
pub(crate) fn levenberg_marquardt<R>(residual: R, x0: &[f64], opts: &LmOptions) -> (Vec<f64>, f64)
where
    R: Fn(&[f64]) -> Vec<f64>,
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut r = residual(&x);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut mu = 1e-3;

    for _ in 0..opts.max_iters {
        if cost <= opts.cost_tol {
            break;
        }
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, dim);
        for j in 0..dim {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += opts.fd_step;
            minus[j] -= opts.fd_step;
            let rp = residual(&plus);
            let rm = residual(&minus);
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * opts.fd_step);
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for d in 0..dim {
                damped[(d, d)] += mu * (1.0 + jtj[(d, d)]);
            }
            let Some(delta) = damped.clone().lu().solve(&(-&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let rc = residual(&cand);
            let cand_cost: f64 = rc.iter().map(|v| v * v).sum();
            if cand_cost < cost {
                let step_norm = delta.norm();
                x = cand;
                r = rc;
                cost = cand_cost;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if step_norm < opts.step_tol {
                    return (x, cost);
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (x, cost)
}
