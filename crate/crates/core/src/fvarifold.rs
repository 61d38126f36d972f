//! Kernel metric on functional varifolds.
//!
//! The metric is induced by the tensor product of three Gaussian kernels:
//! k_e on centers, k_t on (unoriented) directions, k_f on signal values.
//! Inner products between Dirac sets, squared distances, and the exact
//! analytic gradient of the squared distance with respect to the vertex
//! positions and signal values of a mesh are provided.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::{DiracSet, FShapeMesh};

/// Scale parameters of the tensor kernel k_e ⊗ k_t ⊗ k_f.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    /// Spatial scale (length units).
    pub sigma_e: f64,
    /// Direction scale (dimensionless).
    pub sigma_t: f64,
    /// Signal scale (signal units).
    pub sigma_f: f64,
}

impl KernelConfig {
    pub fn new(sigma_e: f64, sigma_t: f64, sigma_f: f64) -> Result<Self> {
        let cfg = Self {
            sigma_e,
            sigma_t,
            sigma_f,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_e", self.sigma_e),
            ("sigma_t", self.sigma_t),
            ("sigma_f", self.sigma_f),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!(
                    "{name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Spatial kernel: exp(−|x1−x2|²/σ_e²).
#[inline]
pub fn kernel_e(x1: Vec3, x2: Vec3, cfg: &KernelConfig) -> f64 {
    (-geom::dist_sq(x1, x2) / (cfg.sigma_e * cfg.sigma_e)).exp()
}

/// Direction kernel on unit vectors: exp(−(2/σ_t²)(1 − ⟨V1,V2⟩²)).
/// The squared inner product makes it orientation-blind. Errors when an
/// input deviates from unit length by more than 1e-9.
pub fn kernel_t(v1: Vec3, v2: Vec3, cfg: &KernelConfig) -> Result<f64> {
    for (name, v) in [("V1", v1), ("V2", v2)] {
        if (geom::norm(v) - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "kernel_t: {name} is not a unit vector (|{name}| = {})",
                geom::norm(v)
            )));
        }
    }
    Ok(kt_raw(v1, v2, cfg))
}

#[inline]
fn kt_raw(v1: Vec3, v2: Vec3, cfg: &KernelConfig) -> f64 {
    let c = geom::dot(v1, v2);
    (-(2.0 / (cfg.sigma_t * cfg.sigma_t)) * (1.0 - c * c)).exp()
}

/// Signal kernel: exp(−|f1−f2|²/σ_f²).
#[inline]
pub fn kernel_f(f1: f64, f2: f64, cfg: &KernelConfig) -> f64 {
    let d = f1 - f2;
    (-d * d / (cfg.sigma_f * cfg.sigma_f)).exp()
}

/// Squared kernel distance g = ⟨μ,μ⟩ − 2⟨μ,ν⟩ + ⟨ν,ν⟩ with its cross terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttachmentValue {
    pub value: f64,
    pub mu_mu: f64,
    pub mu_nu: f64,
    pub nu_nu: f64,
}

impl AttachmentValue {
    fn assemble(mu_mu: f64, mu_nu: f64, nu_nu: f64) -> Self {
        let raw = mu_mu - 2.0 * mu_nu + nu_nu;
        // PSD kernel: tiny negative values are roundoff and get clamped.
        let scale = mu_mu.abs().max(nu_nu.abs()).max(1.0);
        let value = if raw < 0.0 && raw > -1e-10 * scale {
            0.0
        } else {
            raw
        };
        Self {
            value,
            mu_mu,
            mu_nu,
            nu_nu,
        }
    }

    /// Residual of the expansion identity value = ⟨μ,μ⟩ − 2⟨μ,ν⟩ + ⟨ν,ν⟩,
    /// relative to the term magnitudes.
    pub fn expansion_residual(&self) -> f64 {
        let raw = self.mu_mu - 2.0 * self.mu_nu + self.nu_nu;
        let scale = self
            .mu_mu
            .abs()
            .max(self.nu_nu.abs())
            .max(2.0 * self.mu_nu.abs())
            .max(f64::MIN_POSITIVE);
        (self.value - raw).abs() / scale
    }
}

fn check_compatible(a: &DiracSet, b: &DiracSet) -> Result<()> {
    if a.cell_dim() != b.cell_dim() || a.ambient_dim() != b.ambient_dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: (d={}, n={}) vs (d={}, n={})",
            a.cell_dim(),
            a.ambient_dim(),
            b.cell_dim(),
            b.ambient_dim()
        )));
    }
    Ok(())
}

/// Fvarifold inner product
/// Σ_ℓ Σ_ℓ' r_ℓ s_ℓ' k_e(x̂_ℓ, ŷ_ℓ') k_t(V_ℓ, W_ℓ') k_f(f̂_ℓ, ĝ_ℓ').
///
/// Rows are computed independently (possibly in parallel) with a sequential
/// compensated inner loop, then combined in index order, so the result does
/// not depend on thread count or scheduling.
pub fn inner_product(a: &DiracSet, b: &DiracSet, cfg: &KernelConfig) -> Result<f64> {
    check_compatible(a, b)?;
    Ok(inner_product_unchecked(a, b, cfg))
}

fn inner_product_unchecked(a: &DiracSet, b: &DiracSet, cfg: &KernelConfig) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|l| {
            let mut acc = geom::Accumulator::new();
            let xa = a.centers()[l];
            let va = a.directions()[l];
            let fa = a.signals()[l];
            let ra = a.weights()[l];
            if ra == 0.0 {
                return 0.0;
            }
            for lp in 0..b.len() {
                let s = b.weights()[lp];
                if s == 0.0 {
                    continue;
                }
                acc.add(
                    ra * s
                        * kernel_e(xa, b.centers()[lp], cfg)
                        * kt_raw(va, b.directions()[lp], cfg)
                        * kernel_f(fa, b.signals()[lp], cfg),
                );
            }
            acc.total()
        })
        .collect();
    geom::compensated_sum(rows)
}

/// Squared fvarifold distance ‖μ_A − μ_B‖²_{W'}.
pub fn squared_distance(a: &DiracSet, b: &DiracSet, cfg: &KernelConfig) -> Result<AttachmentValue> {
    check_compatible(a, b)?;
    let mu_mu = inner_product_unchecked(a, a, cfg);
    let mu_nu = inner_product_unchecked(a, b, cfg);
    let nu_nu = inner_product_unchecked(b, b, cfg);
    Ok(AttachmentValue::assemble(mu_mu, mu_nu, nu_nu))
}

/// Analytic gradient of the squared distance to `target`, with respect to
/// every vertex coordinate and signal value of the template.
#[derive(Debug, Clone)]
pub struct AttachmentGrad {
    pub grad_x: Vec<Vec3>,
    pub grad_f: Vec<f64>,
    pub value: AttachmentValue,
}

/// Per-Dirac partial derivatives of E(A, B) = Σ r_ℓ s_ℓ' k_e k_t k_f with
/// respect to the components of Dirac ℓ of A, holding B fixed.
#[derive(Debug, Clone, Copy, Default)]
struct DiracPartials {
    d_center: Vec3,
    d_dir: Vec3,
    d_signal: f64,
    d_weight: f64,
    /// Row contribution r_ℓ Σ_ℓ' (…), so Σ rows = E(A, B).
    row_value: f64,
}

fn pair_partials(a: &DiracSet, b: &DiracSet, cfg: &KernelConfig) -> Vec<DiracPartials> {
    let inv_se2 = 1.0 / (cfg.sigma_e * cfg.sigma_e);
    let inv_st2 = 1.0 / (cfg.sigma_t * cfg.sigma_t);
    let inv_sf2 = 1.0 / (cfg.sigma_f * cfg.sigma_f);
    (0..a.len())
        .into_par_iter()
        .map(|l| {
            let xa = a.centers()[l];
            let va = a.directions()[l];
            let fa = a.signals()[l];
            let ra = a.weights()[l];
            let mut p = DiracPartials::default();
            for lp in 0..b.len() {
                let s = b.weights()[lp];
                if s == 0.0 {
                    continue;
                }
                let yb = b.centers()[lp];
                let wb = b.directions()[lp];
                let gb = b.signals()[lp];
                let ke = kernel_e(xa, yb, cfg);
                let kt = kt_raw(va, wb, cfg);
                let kf = kernel_f(fa, gb, cfg);
                let base = s * ke * kt * kf;
                // ∂k_e/∂x̂ = −2/σ_e² (x̂−ŷ) k_e, and similarly for k_f.
                p.d_center = geom::axpy(
                    -2.0 * inv_se2 * ra * base,
                    geom::sub(xa, yb),
                    p.d_center,
                );
                p.d_signal += -2.0 * inv_sf2 * ra * base * (fa - gb);
                // ∂k_t/∂V = 4/σ_t² ⟨V,W⟩ W k_t.
                p.d_dir = geom::axpy(
                    4.0 * inv_st2 * ra * base * geom::dot(va, wb),
                    wb,
                    p.d_dir,
                );
                p.d_weight += base;
                p.row_value += ra * base;
            }
            p
        })
        .collect()
}

/// Exact gradient of g((x, f_template + residual), target) with respect to
/// the template's vertex positions and signal values. The gradient with
/// respect to the residual equals `grad_f` (same chain). Degenerate cells
/// contribute the zero subgradient through the direction/weight chain.
pub fn grad_attachment(
    template: &FShapeMesh,
    residual: &[f64],
    target: &DiracSet,
    cfg: &KernelConfig,
) -> Result<AttachmentGrad> {
    if residual.len() != template.vertex_count() {
        return Err(Error::validation(format!(
            "residual length {} does not match vertex count {}",
            residual.len(),
            template.vertex_count()
        )));
    }
    let signal: Vec<f64> = template
        .signal()
        .iter()
        .zip(residual)
        .map(|(f, z)| f + z)
        .collect();
    let mu = template.diracs_at(template.vertices(), &signal);
    check_compatible(&mu, target)?;

    let self_parts = pair_partials(&mu, &mu, cfg);
    let cross_parts = pair_partials(&mu, target, cfg);
    let mu_mu = geom::compensated_sum(self_parts.iter().map(|p| p.row_value));
    let mu_nu = geom::compensated_sum(cross_parts.iter().map(|p| p.row_value));
    let nu_nu = inner_product_unchecked(target, target, cfg);
    let value = AttachmentValue::assemble(mu_mu, mu_nu, nu_nu);

    // d⟨μ,μ⟩ doubles the one-slot partial (symmetry); d(−2⟨μ,ν⟩) gives −2.
    let combine = |l: usize| -> DiracPartials {
        let s = &self_parts[l];
        let c = &cross_parts[l];
        DiracPartials {
            d_center: geom::sub(geom::scale(s.d_center, 2.0), geom::scale(c.d_center, 2.0)),
            d_dir: geom::sub(geom::scale(s.d_dir, 2.0), geom::scale(c.d_dir, 2.0)),
            d_signal: 2.0 * s.d_signal - 2.0 * c.d_signal,
            d_weight: 2.0 * s.d_weight - 2.0 * c.d_weight,
            row_value: 0.0,
        }
    };

    let pos = template.vertices();
    let d = template.cell_dim();
    let arity = d + 1;
    let share = 1.0 / arity as f64;
    let mut degenerate = mu.degenerate().iter().copied().peekable();
    let mut grad_x = vec![geom::ZERO; template.vertex_count()];
    let mut grad_f = vec![0.0; template.vertex_count()];

    for (l, cell) in template.cells().chunks_exact(arity).enumerate() {
        let q = combine(l);
        for &k in cell {
            grad_x[k] = geom::axpy(share, q.d_center, grad_x[k]);
            grad_f[k] += share * q.d_signal;
        }
        let is_degenerate = degenerate.peek() == Some(&l);
        if is_degenerate {
            degenerate.next();
            continue;
        }
        // Chain through the raw (unnormalized) direction c with r = |c| and
        // V = c/r: ∂E/∂c = (∂E/∂r) V + (I − VVᵀ)/r · ∂E/∂V.
        let v = mu.directions()[l];
        let r = mu.weights()[l];
        let tangential = geom::axpy(-geom::dot(q.d_dir, v), v, q.d_dir);
        let g_c = geom::axpy(1.0 / r, tangential, geom::scale(v, q.d_weight));
        match d {
            1 => {
                grad_x[cell[1]] = geom::add(grad_x[cell[1]], g_c);
                grad_x[cell[0]] = geom::sub(grad_x[cell[0]], g_c);
            }
            2 => {
                let u = geom::sub(pos[cell[1]], pos[cell[0]]);
                let w = geom::sub(pos[cell[2]], pos[cell[0]]);
                let gu = geom::cross(w, g_c);
                let gw = geom::cross(g_c, u);
                grad_x[cell[1]] = geom::add(grad_x[cell[1]], gu);
                grad_x[cell[2]] = geom::add(grad_x[cell[2]], gw);
                grad_x[cell[0]] = geom::sub(grad_x[cell[0]], geom::add(gu, gw));
            }
            _ => unreachable!(),
        }
    }

    Ok(AttachmentGrad {
        grad_x,
        grad_f,
        value,
    })
}
