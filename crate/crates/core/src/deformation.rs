//! RKHS velocity fields and geodesic shooting.
//!
//! Deformations are generated by momenta attached to mesh vertices through a
//! (multiscale) Gaussian scalar kernel. The tangential model evolves (x, p)
//! under the geometric Hamiltonian with a linear-in-time signal; the
//! metamorphosis model adds a signal momentum whose source term feeds back
//! into the momentum dynamics through the moving mass matrix. Gradients of
//! terminal functionals are transported back to t = 0 by integrating the
//! adjoint (linearized, transposed) system over the stored trajectory.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::FShapeMesh;

/// Multiscale deformation kernel: K_V(a, b) = Σ_s weight_s exp(−|a−b|²/σ_s²).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeformationKernelConfig {
    scales: Vec<f64>,
    weights: Vec<f64>,
}

impl DeformationKernelConfig {
    /// Equal-weight kernel over the given scales (the common two-scale setup
    /// gets weights 1/2, 1/2).
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        let n = scales.len();
        if n == 0 {
            return Err(Error::validation("deformation kernel needs at least one scale"));
        }
        Self::with_weights(scales, vec![1.0 / n as f64; n])
    }

    pub fn with_weights(scales: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::validation("deformation kernel needs at least one scale"));
        }
        if scales.len() != weights.len() {
            return Err(Error::validation(format!(
                "{} scales but {} weights",
                scales.len(),
                weights.len()
            )));
        }
        for &s in &scales {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation(format!(
                    "kernel scale must be positive and finite, got {s}"
                )));
            }
        }
        for &w in &weights {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::validation(format!(
                    "kernel weight must be positive and finite, got {w}"
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!(
                "kernel weights must sum to 1, got {sum}"
            )));
        }
        Ok(Self { scales, weights })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Kernel scales multiplied by `lambda` (keeps weights).
    pub fn rescaled(&self, lambda: f64) -> Self {
        Self {
            scales: self.scales.iter().map(|s| s * lambda).collect(),
            weights: self.weights.clone(),
        }
    }

    /// K(s) evaluated on the squared distance s.
    #[inline]
    fn k(&self, s: f64) -> f64 {
        self.scales
            .iter()
            .zip(&self.weights)
            .map(|(&sig, &w)| w * (-s / (sig * sig)).exp())
            .sum()
    }

    /// dK/ds.
    #[inline]
    fn dk(&self, s: f64) -> f64 {
        self.scales
            .iter()
            .zip(&self.weights)
            .map(|(&sig, &w)| {
                let inv = 1.0 / (sig * sig);
                -w * inv * (-s * inv).exp()
            })
            .sum()
    }

    /// d²K/ds².
    #[inline]
    fn d2k(&self, s: f64) -> f64 {
        self.scales
            .iter()
            .zip(&self.weights)
            .map(|(&sig, &w)| {
                let inv = 1.0 / (sig * sig);
                w * inv * inv * (-s * inv).exp()
            })
            .sum()
    }
}

/// Scalar deformation kernel value K_V(a, b).
pub fn kernel_v(a: Vec3, b: Vec3, cfg: &DeformationKernelConfig) -> f64 {
    cfg.k(geom::dist_sq(a, b))
}

/// Velocity field v(q) = (1/γ_V) Σ_k K_V(q, x_k) p_k.
pub fn velocity_field(
    x: &[Vec3],
    p: &[Vec3],
    query: Vec3,
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
) -> Vec3 {
    let mut v = geom::ZERO;
    for (xk, pk) in x.iter().zip(p) {
        v = geom::axpy(cfg.k(geom::dist_sq(query, *xk)), *pk, v);
    }
    geom::scale(v, 1.0 / gamma_v)
}

/// Geometric reduced Hamiltonian
/// H_r^geo = (1/2γ_V) Σ_{k,k'} K_V(x_k, x_k') ⟨p_k, p_k'⟩.
pub fn hamiltonian_geo(x: &[Vec3], p: &[Vec3], cfg: &DeformationKernelConfig, gamma_v: f64) -> f64 {
    assert_eq!(x.len(), p.len());
    let rows: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut acc = geom::Accumulator::new();
            for j in 0..x.len() {
                acc.add(cfg.k(geom::dist_sq(x[k], x[j])) * geom::dot(p[k], p[j]));
            }
            acc.total()
        })
        .collect();
    geom::compensated_sum(rows) / (2.0 * gamma_v)
}

/// ∂H_r^geo/∂x: component k is (2/γ_V) Σ_j K'(s_kj)(x_k − x_j)⟨p_k, p_j⟩.
pub fn hamiltonian_geo_position_grad(
    x: &[Vec3],
    p: &[Vec3],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
) -> Vec<Vec3> {
    let inv_g = 1.0 / gamma_v;
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut g = geom::ZERO;
            for j in 0..x.len() {
                let diff = geom::sub(x[k], x[j]);
                let s = geom::norm_sq(diff);
                g = geom::axpy(2.0 * inv_g * cfg.dk(s) * geom::dot(p[k], p[j]), diff, g);
            }
            g
        })
        .collect()
}

/// ∂H_r^geo/∂p: component k is (1/γ_V) Σ_j K(s_kj) p_j.
pub fn hamiltonian_geo_momentum_grad(
    x: &[Vec3],
    p: &[Vec3],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
) -> Vec<Vec3> {
    let inv_g = 1.0 / gamma_v;
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut g = geom::ZERO;
            for j in 0..x.len() {
                g = geom::axpy(cfg.k(geom::dist_sq(x[k], x[j])), p[j], g);
            }
            geom::scale(g, inv_g)
        })
        .collect()
}

/// Geometrico-functional Hamiltonian term
/// H_r^geofun = (1/2γ_f) Σ_k (p^f_k)² / w_k, for lumped vertex weights w.
/// Errors when a zero weight carries a nonzero signal momentum.
pub fn hamiltonian_geofun(pf: &[f64], mass_weights: &[f64], gamma_f: f64) -> Result<f64> {
    assert_eq!(pf.len(), mass_weights.len());
    let mut acc = geom::Accumulator::new();
    for (k, (&q, &w)) in pf.iter().zip(mass_weights).enumerate() {
        if w <= 0.0 {
            if q != 0.0 {
                return Err(Error::SingularMass { vertex: k });
            }
            continue;
        }
        acc.add(q * q / w);
    }
    Ok(acc.total() / (2.0 * gamma_f))
}

/// Energy split into its penalty families. `total` is the plain sum; the γ
/// coefficients of the active functional are already inside each part.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnergyBreakdown {
    pub geometric: f64,
    pub functional: f64,
    pub attachment: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(geometric: f64, functional: f64, attachment: f64) -> Self {
        Self {
            geometric,
            functional,
            attachment,
            total: geometric + functional + attachment,
        }
    }

    /// A bare scalar objective with no term structure.
    pub fn scalar(total: f64) -> Self {
        Self {
            geometric: 0.0,
            functional: 0.0,
            attachment: total,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.geometric.is_finite()
            && self.functional.is_finite()
            && self.attachment.is_finite()
            && self.total.is_finite()
    }

    /// |total − (geometric + functional + attachment)| relative to the parts.
    pub fn consistency_residual(&self) -> f64 {
        let sum = self.geometric + self.functional + self.attachment;
        let scale = self
            .geometric
            .abs()
            .max(self.functional.abs())
            .max(self.attachment.abs())
            .max(f64::MIN_POSITIVE);
        (self.total - sum).abs() / scale
    }
}

/// Time-indexed shooting trajectory on the uniform grid t_i = i/nsteps.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootState {
    positions: Vec<Vec<Vec3>>,
    momenta: Vec<Vec<Vec3>>,
    signals: Vec<Vec<f64>>,
    signal_momenta: Option<Vec<Vec<f64>>>,
    nsteps: usize,
}

impl ShootState {
    pub fn nsteps(&self) -> usize {
        self.nsteps
    }

    pub fn node_count(&self) -> usize {
        self.nsteps + 1
    }

    pub fn time(&self, node: usize) -> f64 {
        node as f64 / self.nsteps as f64
    }

    pub fn positions_at(&self, node: usize) -> &[Vec3] {
        &self.positions[node]
    }

    pub fn momenta_at(&self, node: usize) -> &[Vec3] {
        &self.momenta[node]
    }

    pub fn signals_at(&self, node: usize) -> &[f64] {
        &self.signals[node]
    }

    /// Signal momenta per node (metamorphosis only); constant in time.
    pub fn signal_momenta_at(&self, node: usize) -> Option<&[f64]> {
        self.signal_momenta.as_ref().map(|m| m[node].as_slice())
    }

    pub fn final_positions(&self) -> &[Vec3] {
        self.positions.last().unwrap()
    }

    pub fn final_momenta(&self) -> &[Vec3] {
        self.momenta.last().unwrap()
    }

    pub fn final_signals(&self) -> &[f64] {
        self.signals.last().unwrap()
    }
}

/// RHS of the geometric Hamiltonian system: (ẋ, ṗ) = (∂_p H, −∂_x H).
fn geo_rhs(
    x: &[Vec3],
    p: &[Vec3],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = x.len();
    let inv_g = 1.0 / gamma_v;
    let out: Vec<(Vec3, Vec3)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut dx = geom::ZERO;
            let mut dp = geom::ZERO;
            for j in 0..n {
                let diff = geom::sub(x[k], x[j]);
                let s = geom::norm_sq(diff);
                dx = geom::axpy(cfg.k(s), p[j], dx);
                dp = geom::axpy(-2.0 * cfg.dk(s) * geom::dot(p[k], p[j]), diff, dp);
            }
            (geom::scale(dx, inv_g), geom::scale(dp, inv_g))
        })
        .collect();
    out.into_iter().unzip()
}

fn check_finite(step: usize, what: &str, values: &[Vec3]) -> Result<()> {
    if values.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::divergence(format!(
            "non-finite {what} after integration step {step}"
        )));
    }
    Ok(())
}

fn check_finite_scalar(step: usize, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|c| !c.is_finite()) {
        return Err(Error::divergence(format!(
            "non-finite {what} after integration step {step}"
        )));
    }
    Ok(())
}

fn shift(x: &[Vec3], d: &[Vec3], h: f64) -> Vec<Vec3> {
    x.iter().zip(d).map(|(&a, &b)| geom::axpy(h, b, a)).collect()
}

fn rk4_combine(x: &[Vec3], k1: &[Vec3], k2: &[Vec3], k3: &[Vec3], k4: &[Vec3], dt: f64) -> Vec<Vec3> {
    (0..x.len())
        .map(|i| {
            let mut s = k1[i];
            s = geom::axpy(2.0, k2[i], s);
            s = geom::axpy(2.0, k3[i], s);
            s = geom::add(s, k4[i]);
            geom::axpy(dt / 6.0, s, x[i])
        })
        .collect()
}

/// Tangential-model shooting: RK4 on (x, p) under the geometric Hamiltonian,
/// with the exact signal evolution f(t) = f0 + t·ζ.
pub fn shoot_tangential(
    x0: &[Vec3],
    p0: &[Vec3],
    f0: &[f64],
    zeta: &[f64],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
    nsteps: usize,
) -> Result<ShootState> {
    if nsteps == 0 {
        return Err(Error::validation("nsteps must be at least 1"));
    }
    let p_count = x0.len();
    if p0.len() != p_count || f0.len() != p_count || zeta.len() != p_count {
        return Err(Error::validation(
            "shoot_tangential: x0, p0, f0, zeta must have equal lengths",
        ));
    }
    let dt = 1.0 / nsteps as f64;
    let mut positions = Vec::with_capacity(nsteps + 1);
    let mut momenta = Vec::with_capacity(nsteps + 1);
    let mut signals = Vec::with_capacity(nsteps + 1);
    let mut x = x0.to_vec();
    let mut p = p0.to_vec();
    positions.push(x.clone());
    momenta.push(p.clone());
    signals.push(f0.to_vec());
    for step in 1..=nsteps {
        let (k1x, k1p) = geo_rhs(&x, &p, cfg, gamma_v);
        let (k2x, k2p) = geo_rhs(&shift(&x, &k1x, dt * 0.5), &shift(&p, &k1p, dt * 0.5), cfg, gamma_v);
        let (k3x, k3p) = geo_rhs(&shift(&x, &k2x, dt * 0.5), &shift(&p, &k2p, dt * 0.5), cfg, gamma_v);
        let (k4x, k4p) = geo_rhs(&shift(&x, &k3x, dt), &shift(&p, &k3p, dt), cfg, gamma_v);
        x = rk4_combine(&x, &k1x, &k2x, &k3x, &k4x, dt);
        p = rk4_combine(&p, &k1p, &k2p, &k3p, &k4p, dt);
        check_finite(step, "positions", &x)?;
        check_finite(step, "momenta", &p)?;
        positions.push(x.clone());
        momenta.push(p.clone());
        let t = step as f64 * dt;
        signals.push(f0.iter().zip(zeta).map(|(f, z)| f + t * z).collect());
    }
    Ok(ShootState {
        positions,
        momenta,
        signals,
        signal_momenta: None,
        nsteps,
    })
}

/// Metamorphosis shooting over the connectivity of `mesh`, starting from the
/// mesh's own positions and signal. The mass matrix D(x) is recomputed from
/// the current positions at every RK4 stage; ṗ gains the source term
/// −∂_x H_r^geofun, ḟ = (1/γ_f) D(x)⁻¹ p^f, and ṗ^f = 0.
pub fn shoot_metamorphosis(
    mesh: &FShapeMesh,
    p0: &[Vec3],
    pf0: &[f64],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
    gamma_f: f64,
    nsteps: usize,
) -> Result<ShootState> {
    if nsteps == 0 {
        return Err(Error::validation("nsteps must be at least 1"));
    }
    let p_count = mesh.vertex_count();
    if p0.len() != p_count || pf0.len() != p_count {
        return Err(Error::validation(
            "shoot_metamorphosis: p0 and pf0 must match the vertex count",
        ));
    }
    if !(gamma_f.is_finite() && gamma_f > 0.0) {
        return Err(Error::validation(format!(
            "gamma_f must be positive and finite, got {gamma_f}"
        )));
    }
    let dt = 1.0 / nsteps as f64;

    // ṗ^f = 0, so pf0 is captured once and reused at every stage.
    let rhs = |x: &[Vec3], p: &[Vec3]| -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<f64>)> {
        let (dx, mut dp) = geo_rhs(x, p, cfg, gamma_v);
        let w = mesh.mass_weights_at(x);
        let mut df = vec![0.0; p_count];
        let mut coeffs = vec![0.0; p_count];
        for k in 0..p_count {
            if w[k] <= 0.0 {
                if pf0[k] != 0.0 {
                    return Err(Error::SingularMass { vertex: k });
                }
                continue;
            }
            let ratio = pf0[k] / w[k];
            df[k] = ratio / gamma_f;
            // ∂_x H_geofun = −(1/2γ_f) Σ_k (pf_k/w_k)² ∂w_k/∂x.
            coeffs[k] = -(0.5 / gamma_f) * ratio * ratio;
        }
        let source = mesh.mass_gradient_at(x, &coeffs);
        for k in 0..p_count {
            // geo_rhs already returns −∂_x H_geo; subtract the source term.
            dp[k] = geom::sub(dp[k], source[k]);
        }
        Ok((dx, dp, df))
    };

    let mut positions = Vec::with_capacity(nsteps + 1);
    let mut momenta = Vec::with_capacity(nsteps + 1);
    let mut signals = Vec::with_capacity(nsteps + 1);
    let mut x = mesh.vertices().to_vec();
    let mut p = p0.to_vec();
    let mut f = mesh.signal().to_vec();
    positions.push(x.clone());
    momenta.push(p.clone());
    signals.push(f.clone());

    for step in 1..=nsteps {
        let (k1x, k1p, k1f) = rhs(&x, &p)?;
        let (k2x, k2p, k2f) = rhs(&shift(&x, &k1x, dt * 0.5), &shift(&p, &k1p, dt * 0.5))?;
        let (k3x, k3p, k3f) = rhs(&shift(&x, &k2x, dt * 0.5), &shift(&p, &k2p, dt * 0.5))?;
        let (k4x, k4p, k4f) = rhs(&shift(&x, &k3x, dt), &shift(&p, &k3p, dt))?;
        x = rk4_combine(&x, &k1x, &k2x, &k3x, &k4x, dt);
        p = rk4_combine(&p, &k1p, &k2p, &k3p, &k4p, dt);
        for i in 0..p_count {
            f[i] += dt / 6.0 * (k1f[i] + 2.0 * k2f[i] + 2.0 * k3f[i] + k4f[i]);
        }
        check_finite(step, "positions", &x)?;
        check_finite(step, "momenta", &p)?;
        check_finite_scalar(step, "signals", &f)?;
        positions.push(x.clone());
        momenta.push(p.clone());
        signals.push(f.clone());
    }
    let signal_momenta = vec![pf0.to_vec(); nsteps + 1];
    Ok(ShootState {
        positions,
        momenta,
        signals,
        signal_momenta: Some(signal_momenta),
        nsteps,
    })
}

/// Adjoint RHS: with λ = (u, w) and F the Hamiltonian field, λ̇ = −(DF)ᵀλ
/// = ∇²H · (w, −u), i.e. u̇ = H_xx w − H_xp u and ẇ = H_px w − H_pp u.
fn adjoint_rhs(
    x: &[Vec3],
    p: &[Vec3],
    u: &[Vec3],
    w: &[Vec3],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = x.len();
    let inv_g = 1.0 / gamma_v;
    let out: Vec<(Vec3, Vec3)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut du = geom::ZERO;
            let mut dw = geom::ZERO;
            for j in 0..n {
                let dx = geom::sub(x[k], x[j]);
                let s = geom::norm_sq(dx);
                let kval = cfg.k(s);
                let kp = cfg.dk(s);
                let kpp = cfg.d2k(s);
                let dwij = geom::sub(w[k], w[j]);
                let pp = geom::dot(p[k], p[j]);
                // (H_xx w)_k
                du = geom::axpy(4.0 * inv_g * kpp * geom::dot(dx, dwij) * pp, dx, du);
                du = geom::axpy(2.0 * inv_g * kp * pp, dwij, du);
                // −(H_xp u)_k
                du = geom::axpy(
                    -2.0 * inv_g * kp * (geom::dot(u[k], p[j]) + geom::dot(p[k], u[j])),
                    dx,
                    du,
                );
                // (H_px w)_k
                dw = geom::axpy(2.0 * inv_g * kp * geom::dot(dx, dwij), p[j], dw);
                // −(H_pp u)_k
                dw = geom::axpy(-inv_g * kval, u[j], dw);
            }
            (du, dw)
        })
        .collect();
    out.into_iter().unzip()
}

/// Transports the gradient of a terminal functional G(x(1), p(1)) back to
/// (x0, p0) along a stored tangential trajectory by integrating the adjoint
/// system backward with RK4. Intermediate forward states are linearly
/// interpolated between stored nodes; the discretize/optimize mismatch is
/// covered by the finite-difference tolerance this op is tested at.
pub fn adjoint_gradient(
    trajectory: &ShootState,
    terminal_grad_x: &[Vec3],
    terminal_grad_p: &[Vec3],
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let p_count = trajectory.positions[0].len();
    if terminal_grad_x.len() != p_count || terminal_grad_p.len() != p_count {
        return Err(Error::validation(format!(
            "adjoint_gradient: terminal gradients have lengths {} and {}, trajectory carries {p_count} particles",
            terminal_grad_x.len(),
            terminal_grad_p.len()
        )));
    }
    let nsteps = trajectory.nsteps;
    let dt = -1.0 / nsteps as f64;
    let mut u = terminal_grad_x.to_vec();
    let mut w = terminal_grad_p.to_vec();

    let midpoint = |a: &[Vec3], b: &[Vec3]| -> Vec<Vec3> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| geom::scale(geom::add(x, y), 0.5))
            .collect()
    };

    for node in (1..=nsteps).rev() {
        let x1 = &trajectory.positions[node];
        let p1 = &trajectory.momenta[node];
        let x0 = &trajectory.positions[node - 1];
        let p0 = &trajectory.momenta[node - 1];
        let xm = midpoint(x0, x1);
        let pm = midpoint(p0, p1);

        let (k1u, k1w) = adjoint_rhs(x1, p1, &u, &w, cfg, gamma_v);
        let (k2u, k2w) = adjoint_rhs(
            &xm,
            &pm,
            &shift(&u, &k1u, dt * 0.5),
            &shift(&w, &k1w, dt * 0.5),
            cfg,
            gamma_v,
        );
        let (k3u, k3w) = adjoint_rhs(
            &xm,
            &pm,
            &shift(&u, &k2u, dt * 0.5),
            &shift(&w, &k2w, dt * 0.5),
            cfg,
            gamma_v,
        );
        let (k4u, k4w) = adjoint_rhs(x0, p0, &shift(&u, &k3u, dt), &shift(&w, &k3w, dt), cfg, gamma_v);
        u = rk4_combine(&u, &k1u, &k2u, &k3u, &k4u, dt);
        w = rk4_combine(&w, &k1w, &k2w, &k3w, &k4w, dt);
        check_finite(node, "adjoint x-block", &u)?;
        check_finite(node, "adjoint p-block", &w)?;
    }
    Ok((u, w))
}

/// Quadrature weights (including the grid spacing) used to integrate over
/// the uniform time grid of `nt` nodes on [0, 1]: composite Simpson, with a
/// 3/8 block absorbing an odd interval count and a trapezoid fallback for a
/// single interval. Fourth-order for nt ≥ 4.
pub fn time_quadrature_weights(nt: usize) -> Vec<f64> {
    assert!(nt >= 2);
    let m = nt - 1;
    let h = 1.0 / m as f64;
    let mut w = vec![0.0; nt];
    if m == 1 {
        w[0] = 0.5 * h;
        w[1] = 0.5 * h;
        return w;
    }
    // Peel off a 3/8 block when the interval count is odd (m = 2 handled by
    // plain Simpson below).
    let simpson_end = if m % 2 == 0 { m } else { m - 3 };
    if simpson_end > 0 {
        w[0] += h / 3.0;
        w[simpson_end] += h / 3.0;
        for i in 1..simpson_end {
            w[i] += if i % 2 == 1 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
        }
    }
    if m % 2 == 1 {
        if simpson_end == 0 {
            // m == 3: pure Simpson 3/8.
        }
        let base = simpson_end;
        w[base] += 3.0 * h / 8.0;
        w[base + 1] += 9.0 * h / 8.0;
        w[base + 2] += 9.0 * h / 8.0;
        w[base + 3] += 3.0 * h / 8.0;
    }
    w
}

/// Optimal time reparameterization of a signal residual under a moving
/// volume distortion: h*_t(x) = C(x) ζ1(x) / J(x, t) with
/// C(x) = (∫₀¹ ds / J(x, s))⁻¹ integrated with
/// [`time_quadrature_weights`]. `jacobians` is vertex-major: entry
/// [v·nt + i] is J(x_v, t_i) on the uniform grid of `nt` nodes over [0, 1].
/// Applying the same quadrature to the result integrates back to ζ1
/// exactly (up to roundoff).
pub fn optimal_h_star(zeta1: &[f64], jacobians: &[f64], nt: usize) -> Result<Vec<f64>> {
    if nt < 2 {
        return Err(Error::validation("optimal_h_star needs at least 2 time nodes"));
    }
    if jacobians.len() != zeta1.len() * nt {
        return Err(Error::validation(format!(
            "jacobian table has {} entries, expected {} vertices × {nt} nodes",
            jacobians.len(),
            zeta1.len()
        )));
    }
    if let Some(bad) = jacobians.iter().find(|j| !(j.is_finite() && **j > 0.0)) {
        return Err(Error::validation(format!(
            "Jacobian values must be strictly positive, got {bad}"
        )));
    }
    let weights = time_quadrature_weights(nt);
    let mut out = vec![0.0; jacobians.len()];
    for (v, &z) in zeta1.iter().enumerate() {
        let row = &jacobians[v * nt..(v + 1) * nt];
        let mut acc = geom::Accumulator::new();
        for (i, jac) in row.iter().enumerate() {
            acc.add(weights[i] / jac);
        }
        let c = 1.0 / acc.total();
        for (i, jac) in row.iter().enumerate() {
            out[v * nt + i] = c * z / jac;
        }
    }
    Ok(out)
}

/// Largest relative Hamiltonian drift max_t |H(t) − H(0)| / |H(0)| along a
/// trajectory. For metamorphosis trajectories pass the mesh and γ_f so the
/// full reduced Hamiltonian is monitored.
pub fn hamiltonian_drift(
    trajectory: &ShootState,
    cfg: &DeformationKernelConfig,
    gamma_v: f64,
    metamorphosis: Option<(&FShapeMesh, f64)>,
) -> Result<f64> {
    let h_at = |node: usize| -> Result<f64> {
        let x = trajectory.positions_at(node);
        let p = trajectory.momenta_at(node);
        let mut h = hamiltonian_geo(x, p, cfg, gamma_v);
        if let Some((mesh, gamma_f)) = metamorphosis {
            let pf = trajectory
                .signal_momenta_at(node)
                .ok_or_else(|| Error::validation("trajectory carries no signal momenta"))?;
            h += hamiltonian_geofun(pf, &mesh.mass_weights_at(x), gamma_f)?;
        }
        Ok(h)
    };
    let h0 = h_at(0)?;
    let scale = h0.abs().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for node in 1..trajectory.node_count() {
        worst = worst.max((h_at(node)? - h0).abs() / scale);
    }
    Ok(worst)
}
