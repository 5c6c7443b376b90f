//! Two-variable projection QP `min 1/2 |u - u_des|^2  s.t.  a_j . u >= b_j`,
//! solved with a dual active-set method.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane<T> {
    pub a: [T; 2],
    pub b: T,
}

impl<T: Real> HalfPlane<T> {
    pub fn new(a: [T; 2], b: T) -> Self {
        Self { a, b }
    }

    /// `a . u - b`; nonnegative when satisfied.
    pub fn slack(&self, u: [T; 2]) -> T {
        self.a[0] * u[0] + self.a[1] * u[1] - self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals<T> {
    pub stationarity: T,
    pub primal: T,
    pub dual: T,
    pub complementarity: T,
}

impl<T: Real> KktResiduals<T> {
    pub fn max(&self) -> T {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub u: [T; 2],
    pub feasible: bool,
    /// One multiplier per input constraint, zero for inactive ones.
    pub multipliers: Vec<T>,
    /// Constraints in the final working set.
    pub active: Vec<usize>,
    pub residuals: KktResiduals<T>,
}

fn dot<T: Real>(x: [T; 2], y: [T; 2]) -> T {
    x[0] * y[0] + x[1] * y[1]
}

/// KKT residuals of `(u, lambda)` for the projection problem.
pub fn kkt_residuals<T: Real>(u_des: [T; 2], cons: &[HalfPlane<T>], u: [T; 2], lambda: &[T]) -> KktResiduals<T> {
    let mut g = [u[0] - u_des[0], u[1] - u_des[1]];
    let mut res = KktResiduals { stationarity: T::zero(), primal: T::zero(), dual: T::zero(), complementarity: T::zero() };
    for (c, &l) in cons.iter().zip(lambda) {
        g[0] -= l * c.a[0];
        g[1] -= l * c.a[1];
        let s = c.slack(u);
        res.primal = res.primal.max(-s);
        res.dual = res.dual.max(-l);
        res.complementarity = res.complementarity.max((l * s).abs());
    }
    res.stationarity = g[0].abs().max(g[1].abs());
    res
}

/// Solves the projection QP. Infeasible problems (or a stalled active set)
/// return `feasible = false` and the stopping input `(0, omega_des)`.
pub fn cbf_qp<T: Real>(u_des: [T; 2], cons: &[HalfPlane<T>]) -> QpSolution<T> {
    let m = cons.len();
    let norms: Vec<T> = cons.iter().map(|c| dot(c.a, c.a).sqrt()).collect();
    let tol = T::lit(1e-12);
    let mut u = u_des;
    let mut lambda = vec![T::zero(); m];
    let mut active: Vec<usize> = Vec::with_capacity(2);
    let mut feasible = true;

    let mut iterations = 0usize;
    let cap = 20 * m + 100;
    'outer: loop {
        // Most violated constraint, measured as signed distance to its line.
        let mut worst: Option<(usize, T)> = None;
        for (j, c) in cons.iter().enumerate() {
            let n = norms[j];
            let (viol, scale) = if n > T::zero() {
                (c.slack(u) / n, T::one() + c.b.abs() / n)
            } else {
                (-c.b, T::one())
            };
            if viol < -tol * scale && worst.is_none_or(|(_, w)| viol < w) {
                worst = Some((j, viol));
            }
        }
        let Some((j, _)) = worst else { break };
        if norms[j] == T::zero() {
            feasible = false;
            break;
        }
        let aj = cons[j].a;
        loop {
            iterations += 1;
            if iterations > cap {
                feasible = false;
                break 'outer;
            }
            // Primal direction z and dual direction r for the active working set.
            let (z, r) = directions(cons, &active, aj);
            let mut t1: Option<(T, usize)> = None;
            for (k, &idx) in active.iter().enumerate() {
                if r[k] > T::zero() {
                    let t = lambda[idx] / r[k];
                    if t1.is_none_or(|(best, _)| t < best) {
                        t1 = Some((t, k));
                    }
                }
            }
            let zz = dot(z, aj);
            let z_zero = zz <= T::lit(1e-14) * dot(aj, aj);
            if z_zero {
                let Some((t, k)) = t1 else {
                    feasible = false;
                    break 'outer;
                };
                for (kk, &idx) in active.iter().enumerate() {
                    lambda[idx] -= t * r[kk];
                }
                lambda[j] += t;
                let dropped = active.remove(k);
                lambda[dropped] = T::zero();
                continue;
            }
            let s = cons[j].slack(u);
            let t2 = -s / zz;
            let (t, drop) = match t1 {
                Some((t1v, k)) if t1v < t2 => (t1v, Some(k)),
                _ => (t2, None),
            };
            u[0] += t * z[0];
            u[1] += t * z[1];
            for (kk, &idx) in active.iter().enumerate() {
                lambda[idx] -= t * r[kk];
            }
            lambda[j] += t;
            match drop {
                Some(k) => {
                    let dropped = active.remove(k);
                    lambda[dropped] = T::zero();
                }
                None => {
                    active.push(j);
                    continue 'outer;
                }
            }
        }
    }

    if !feasible {
        let u = [T::zero(), u_des[1]];
        let zeros = vec![T::zero(); m];
        let residuals = kkt_residuals(u_des, cons, u, &zeros);
        return QpSolution { u, feasible, multipliers: zeros, active: Vec::new(), residuals };
    }
    for l in &mut lambda {
        if *l < T::zero() {
            *l = T::zero();
        }
    }
    let residuals = kkt_residuals(u_des, cons, u, &lambda);
    QpSolution { u, feasible, multipliers: lambda, active, residuals }
}

/// For active normals `N`, returns `z = (I - N N^+) a` and `r = N^+ a`.
fn directions<T: Real>(cons: &[HalfPlane<T>], active: &[usize], a: [T; 2]) -> ([T; 2], Vec<T>) {
    match active {
        [] => (a, Vec::new()),
        [k] => {
            let n = cons[*k].a;
            let r = dot(n, a) / dot(n, n);
            ([a[0] - r * n[0], a[1] - r * n[1]], vec![r])
        }
        [k1, k2] => {
            let (n1, n2) = (cons[*k1].a, cons[*k2].a);
            // Two independent normals span the plane, so z = 0.
            let det = n1[0] * n2[1] - n1[1] * n2[0];
            let r1 = (a[0] * n2[1] - a[1] * n2[0]) / det;
            let r2 = (n1[0] * a[1] - n1[1] * a[0]) / det;
            ([T::zero(), T::zero()], vec![r1, r2])
        }
        _ => unreachable!("at most two independent constraints are active in the plane"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unconstrained() {
        let s = cbf_qp::<f64>([0.2, -0.1], &[]);
        assert!(s.feasible);
        assert_eq!(s.u, [0.2, -0.1]);
    }

    #[test]
    fn one_dimensional_projection() {
        let s = cbf_qp([0.2, 0.0], &[HalfPlane::new([-1.0, 0.0], -0.1)]);
        assert!(s.feasible);
        assert_abs_diff_eq!(s.u[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.u[1], 0.0, epsilon = 1e-15);
        assert!(s.residuals.max() <= 1e-12);
    }

    #[test]
    fn many_parallel_constraints_pick_tightest() {
        let cons: Vec<_> = (1..200)
            .map(|i| {
                let z = f64::from(i) * 0.01;
                HalfPlane::new([-z, 0.0], -0.05)
            })
            .collect();
        let s = cbf_qp([0.2, 0.3], &cons);
        assert!(s.feasible);
        assert_abs_diff_eq!(s.u[0], 0.05 / 1.99, epsilon = 1e-12);
        assert_abs_diff_eq!(s.u[1], 0.3, epsilon = 1e-12);
        assert!(s.residuals.max() <= 1e-12);
    }

    #[test]
    fn vertex_solution() {
        let cons = [HalfPlane::new([-1.0, -1.0], -1.0), HalfPlane::new([-1.0, 1.0], -1.0)];
        let s = cbf_qp([3.0, 0.5], &cons);
        assert!(s.feasible);
        assert_abs_diff_eq!(s.u[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.u[1], 0.0, epsilon = 1e-12);
        assert!(s.residuals.max() <= 1e-12);
    }

    #[test]
    fn infeasible_falls_back_to_stop() {
        let cons = [HalfPlane::new([1.0, 0.0], 1.0), HalfPlane::new([-1.0, 0.0], 0.0)];
        let s = cbf_qp([0.2, 0.4], &cons);
        assert!(!s.feasible);
        assert_eq!(s.u, [0.0, 0.4]);
    }

    #[test]
    fn zero_normal_constraint() {
        let ok = cbf_qp([0.2, 0.0], &[HalfPlane::new([0.0, 0.0], -1.0)]);
        assert!(ok.feasible);
        let bad = cbf_qp([0.2, 0.0], &[HalfPlane::new([0.0, 0.0], 1.0)]);
        assert!(!bad.feasible);
    }

    #[test]
    fn f32_instantiation() {
        let s = cbf_qp::<f32>([0.2, 0.0], &[HalfPlane::new([-1.0, 0.0], -0.1)]);
        assert!((s.u[0] - 0.1).abs() < 1e-6);
    }
}
