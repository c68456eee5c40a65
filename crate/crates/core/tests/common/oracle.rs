//! Independent reference computations used by the test suites.
#![allow(dead_code)]

use deltallm_core::{Graph, Tensor, Var};

/// Central finite-difference check of `f` (a graph builder returning a scalar)
/// with respect to each input. Returns the worst norm-wise relative error
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)` over inputs.
pub fn fd_check<F>(inputs: &[Tensor], eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += eps;
            let plus = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * eps;
            let minus = eval(&xs);
            numeric[j] = (plus - minus) / (2.0 * eps);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Eigenvalues of a symmetric matrix by the classical two-sided Jacobi method,
/// sorted descending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<f64> = a.data().to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn gram_singular_values(w: &Tensor) -> Vec<f64> {
    let gram = if w.rows() >= w.cols() {
        naive_matmul(&w.transpose(), w)
    } else {
        naive_matmul(w, &w.transpose())
    };
    symmetric_eigenvalues(&gram).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// `-log softmax(row)[target]` computed without max-subtraction shortcuts.
pub fn brute_nll(row: &[f64], target: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    -(row[target].exp() / z).ln()
}

pub fn brute_kl(teacher: &[f64], student: &[f64]) -> f64 {
    let zt: f64 = teacher.iter().map(|x| x.exp()).sum();
    let zs: f64 = student.iter().map(|x| x.exp()).sum();
    teacher
        .iter()
        .zip(student)
        .map(|(t, s)| {
            let p = t.exp() / zt;
            let q = s.exp() / zs;
            p * (p / q).ln()
        })
        .sum()
}

/// Standard normal CDF via the complementary error function series.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc_reference(-x / std::f64::consts::SQRT_2)
}

/// erfc by adaptive Simpson integration of the Gaussian density; slow but independent.
fn erfc_reference(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) ∫_0^x e^{-t^2} dt
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }
    let f = |t: f64| (-t * t).exp();
    let erf = 2.0 / std::f64::consts::PI.sqrt() * simpson(&f, 0.0, x, 20_000);
    1.0 - erf
}

/// Inverse standard normal CDF by bisection on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
