//! Minimal three-point absolute pose.
//!
//! Depths along the three bearings satisfy the law-of-cosines system; with
//! `s2 = u s1`, `s3 = v s1` two conics in `(u, v)` remain. Eliminating `u`
//! with the resultant of the two quadratics gives a quartic in `v`; each
//! positive real root yields one candidate pose via absolute orientation.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::PoseSE3;

/// Polynomial coefficients, lowest degree first.
type Poly = Vec<f64>;

fn pmul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn psub(a: &[f64], b: &[f64]) -> Poly {
    let n = a.len().max(b.len());
    (0..n).map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).collect()
}

fn pscale(a: &[f64], s: f64) -> Poly {
    a.iter().map(|x| x * s).collect()
}

fn peval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots of a polynomial of degree <= 4 via companion-matrix eigenvalues,
/// polished with Newton steps.
fn real_roots(poly: &[f64]) -> Vec<f64> {
    let mut p = poly.to_vec();
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return vec![];
    }
    while p.len() > 1 && p.last().unwrap().abs() <= 1e-14 * scale {
        p.pop();
    }
    let deg = p.len() - 1;
    let roots: Vec<f64> = match deg {
        0 => vec![],
        1 => vec![-p[0] / p[1]],
        _ => {
            let lead = p[deg];
            let mut comp = nalgebra::DMatrix::<f64>::zeros(deg, deg);
            for i in 1..deg {
                comp[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                comp[(i, deg - 1)] = -p[i] / lead;
            }
            comp.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let dp: Poly = (1..p.len()).map(|i| p[i] * i as f64).collect();
    roots
        .into_iter()
        .map(|mut r| {
            for _ in 0..8 {
                let d = peval(&dp, r);
                if d == 0.0 {
                    break;
                }
                let step = peval(&p, r) / d;
                r -= step;
                if step.abs() < 1e-15 * (1.0 + r.abs()) {
                    break;
                }
            }
            r
        })
        .collect()
}

/// Rigid transform mapping `world[i]` onto `cam[i]` in the least-squares sense.
pub fn absolute_orientation(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<PoseSE3> {
    let n = world.len() as f64;
    let wc = world.iter().sum::<Vector3<f64>>() / n;
    let cc = cam.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (w - wc) * (c - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    if !r.iter().all(|x| x.is_finite()) {
        return None;
    }
    let t = cc - r * wc;
    Some(PoseSE3::from_rotation_matrix(&r, t))
}

/// Newton refinement of the three depths against the law-of-cosines system.
fn refine_depths(s: Vector3<f64>, d2: [f64; 3], c: [f64; 3]) -> Vector3<f64> {
    // pairs (0,1), (0,2), (1,2) with cosines c12, c13, c23
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s[0] * s[0] + s[1] * s[1] - 2.0 * c[0] * s[0] * s[1] - d2[0],
            s[0] * s[0] + s[2] * s[2] - 2.0 * c[1] * s[0] * s[2] - d2[1],
            s[1] * s[1] + s[2] * s[2] - 2.0 * c[2] * s[1] * s[2] - d2[2],
        )
    };
    let mut s = s;
    let mut r = residual(&s);
    for _ in 0..5 {
        let j = Matrix3::new(
            2.0 * s[0] - 2.0 * c[0] * s[1],
            2.0 * s[1] - 2.0 * c[0] * s[0],
            0.0,
            2.0 * s[0] - 2.0 * c[1] * s[2],
            0.0,
            2.0 * s[2] - 2.0 * c[1] * s[0],
            0.0,
            2.0 * s[1] - 2.0 * c[2] * s[2],
            2.0 * s[2] - 2.0 * c[2] * s[1],
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let next = s - step;
        let rn = residual(&next);
        if rn.norm() >= r.norm() {
            break;
        }
        s = next;
        r = rn;
    }
    s
}

/// Up to four poses consistent with three world points and their unit
/// bearing vectors in the camera frame.
pub fn solve(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<PoseSE3> {
    let f = bearings.map(|b| b.normalize());
    let c12 = f[0].dot(&f[1]);
    let c13 = f[0].dot(&f[2]);
    let c23 = f[1].dot(&f[2]);
    let d12 = (world[0] - world[1]).norm_squared();
    let d13 = (world[0] - world[2]).norm_squared();
    let d23 = (world[1] - world[2]).norm_squared();
    if d12 < 1e-18 || d13 < 1e-18 || d23 < 1e-18 {
        return vec![];
    }
    // Collinear world points admit a continuum of solutions.
    if (world[1] - world[0]).cross(&(world[2] - world[0])).norm_squared() < 1e-12 * d12 * d13 {
        return vec![];
    }

    // E1: a1 u^2 + b1 u + c1(v) = 0 and E2: a2 u^2 + b2(v) u + c2(v) = 0
    let a1 = d13;
    let b1 = -2.0 * d13 * c12;
    let c1: Poly = vec![d13 - d12, 2.0 * d12 * c13, -d12];
    let a2 = d23 - d12;
    let b2: Poly = vec![-2.0 * d23 * c12, 2.0 * d12 * c23];
    let c2: Poly = vec![d23, 0.0, -d12];

    // Resultant in u: (a1 c2 - a2 c1)^2 - (a1 b2 - a2 b1)(b1 c2 - b2 c1)
    let p = psub(&pscale(&c2, a1), &pscale(&c1, a2));
    let q = psub(&pscale(&b2, a1), &[a2 * b1]);
    let r = psub(&pscale(&c2, b1), &pmul(&b2, &c1));
    let quartic = psub(&pmul(&p, &p), &pmul(&q, &r));

    let mut poses = Vec::with_capacity(4);
    for v in real_roots(&quartic) {
        if !(v > 0.0) {
            continue;
        }
        // u from a2*E1 - a1*E2, linear in u
        let lin = peval(&q, v);
        if lin.abs() < 1e-14 {
            continue;
        }
        let u = peval(&p, v) / -lin;
        if !(u > 0.0) {
            continue;
        }
        let denom = 1.0 + u * u - 2.0 * u * c12;
        if !(denom > 0.0) {
            continue;
        }
        let s1 = (d12 / denom).sqrt();
        let s = refine_depths(Vector3::new(s1, u * s1, v * s1), [d12, d13, d23], [c12, c13, c23]);
        if s.iter().any(|x| !(*x > 0.0)) {
            continue;
        }
        let cam = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
        if let Some(pose) = absolute_orientation(world, &cam) {
            poses.push(pose);
        }
    }
    poses
}
