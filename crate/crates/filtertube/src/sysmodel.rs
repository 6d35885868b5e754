//! Uncertain linear models, constraint sets, quadratic costs and the two
//! benchmark systems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariant::lqr_gain;
use crate::polytope::Polytope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("disturbance lies outside W (margin {0:.3e})")]
    DisturbanceOutsideW(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid set: {0}")]
    InvalidSet(String),
}

/// One vertex `(ΔA, ΔB)` of the parametric uncertainty set.
#[derive(Clone, Debug)]
pub struct DeltaVertex {
    pub da: DMatrix<f64>,
    pub db: DMatrix<f64>,
}

/// `x+ = (A + ΔA) x + (B + ΔB) u + w` with `(ΔA, ΔB)` in the convex hull of
/// `deltas` and `w ∈ W`.
#[derive(Clone, Debug)]
pub struct UncertainLTI {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub deltas: Vec<DeltaVertex>,
    pub w: Polytope,
    /// Generators of `W`; used by samplers and oracles.
    pub w_vertices: Vec<DVector<f64>>,
    pub wbar: Polytope,
    pub x: Polytope,
    pub u: Polytope,
}

/// Quadratic stage and terminal weights.
#[derive(Clone, Debug)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub pf: DMatrix<f64>,
    /// Linear weight on the fallback memory slot.
    pub lambda0_reg: f64,
    /// Weight `ρ` of the nominal-disturbance penalty `ρ Σ p_i' Q p_i`.
    pub p_reg: f64,
}

impl CostSpec {
    /// Builds the spec with `P_f` from the Riccati equation of `(A, B, Q, R)`.
    pub fn with_riccati(sys: &UncertainLTI, q: DMatrix<f64>, r: DMatrix<f64>) -> CostSpec {
        let (_, pf) = lqr_gain(&sys.a, &sys.b, &q, &r).expect("benchmark pair is stabilizable");
        CostSpec { q, r, pf, lambda0_reg: 1.0, p_reg: 1e4 }
    }

    /// `x'Qx + u'Ru`
    pub fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[0] + (u.transpose() * &self.r * u)[0]
    }

    /// `x'P_f x`
    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.pf * x)[0]
    }
}

impl UncertainLTI {
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_delta(&self) -> usize {
        self.deltas.len()
    }

    /// Whether diagonal filter scalings are admissible (box `W̄`).
    pub fn wbar_is_box(&self) -> bool {
        self.wbar.box_bounds().is_some()
    }

    /// True when `W = {0}` and every `(ΔA, ΔB)` vertex vanishes.
    pub fn is_certain(&self) -> bool {
        self.w_vertices.iter().all(|v| v.amax() == 0.0)
            && self.deltas.iter().all(|d| d.da.amax() == 0.0 && d.db.amax() == 0.0)
    }

    /// Checks dimensions and the set assumptions of the model.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (n, m) = (self.nx(), self.nu());
        if self.a.ncols() != n || self.b.nrows() != n {
            return Err(ModelError::ShapeMismatch("A must be n x n and B n x m".into()));
        }
        if self.deltas.is_empty() {
            return Err(ModelError::ShapeMismatch("at least one uncertainty vertex".into()));
        }
        for d in &self.deltas {
            if d.da.shape() != (n, n) || d.db.shape() != (n, m) {
                return Err(ModelError::ShapeMismatch("uncertainty vertex shape".into()));
            }
        }
        for (name, set, dim) in [("X", &self.x, n), ("U", &self.u, m), ("W", &self.w, n), ("Wbar", &self.wbar, n)] {
            if set.dim() != dim {
                return Err(ModelError::ShapeMismatch(format!("{name} has dimension {}", set.dim())));
            }
        }
        let zero_n = vec![0.0; n];
        if self.x.margin(&zero_n) >= 0.0 || self.u.margin(&vec![0.0; m]) >= 0.0 {
            return Err(ModelError::InvalidSet("X and U must contain the origin in their interior".into()));
        }
        if self.wbar.margin(&zero_n) > 0.0 {
            return Err(ModelError::InvalidSet("Wbar must contain the origin".into()));
        }
        if self.w.is_empty() {
            return Err(ModelError::InvalidSet("W is empty".into()));
        }
        Ok(())
    }
}

/// `η = ΔA x + ΔB u + w`, with `w ∈ W` checked to `tol`.
pub fn combined_uncertainty(
    sys: &UncertainLTI,
    delta: &DeltaVertex,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, ModelError> {
    if x.len() != sys.nx() || u.len() != sys.nu() || w.len() != sys.nx() {
        return Err(ModelError::ShapeMismatch("state, input or disturbance length".into()));
    }
    let margin = sys.w.margin(w.as_slice());
    if margin > tol {
        return Err(ModelError::DisturbanceOutsideW(margin));
    }
    Ok(&delta.da * x + &delta.db * u + w)
}

/// Convex combination of uncertainty vertices.
pub fn mix_deltas(sys: &UncertainLTI, weights: &[f64]) -> DeltaVertex {
    let mut da = DMatrix::zeros(sys.nx(), sys.nx());
    let mut db = DMatrix::zeros(sys.nx(), sys.nu());
    for (w, d) in weights.iter().zip(&sys.deltas) {
        da += &d.da * *w;
        db += &d.db * *w;
    }
    DeltaVertex { da, db }
}

/// How `W̄` is derived for the double integrator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WbarChoice {
    /// `W̄ = W`.
    #[default]
    SameAsW,
    /// Bounding box of `W`.
    BoundingBox,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleIntegratorParams {
    pub eps_a: f64,
    pub eps_b: f64,
    pub sigma_w: f64,
    /// Hexagonal `W` instead of the box.
    pub skewed: bool,
    pub wbar: WbarChoice,
    /// `W̄` radius used when `W = {0}` but the model is uncertain.
    pub wbar_floor: f64,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        DoubleIntegratorParams {
            eps_a: 0.1,
            eps_b: 0.1,
            sigma_w: 0.1,
            skewed: false,
            wbar: WbarChoice::SameAsW,
            wbar_floor: 0.1,
        }
    }
}

/// Raw description `(H_w, h_w)` of the skewed hexagon: rows `(1,0)`,
/// `(1,2)`, `(0,1)` and their negatives with offsets
/// `(0.5, 1, 0.5, 0.5, 1, 0.5) * sigma`.
pub fn skewed_hexagon_raw(sigma: f64) -> (DMatrix<f64>, DVector<f64>) {
    let hm = DMatrix::from_row_slice(6, 2, &[1.0, 0.0, 1.0, 2.0, 0.0, 1.0, -1.0, 0.0, -1.0, -2.0, 0.0, -1.0]);
    let h = DVector::from_vec(vec![0.5, 1.0, 0.5, 0.5, 1.0, 0.5]) * sigma;
    (hm, h)
}

pub fn skewed_hexagon(sigma: f64) -> Polytope {
    let (hm, h) = skewed_hexagon_raw(sigma);
    Polytope::new_unchecked(hm, h)
}

fn box_corners(lo: &[f64], hi: &[f64]) -> Vec<DVector<f64>> {
    let n = lo.len();
    let mut out: Vec<DVector<f64>> = Vec::new();
    for mask in 0..(1usize << n) {
        let v = DVector::from_fn(n, |k, _| if mask >> k & 1 == 1 { hi[k] } else { lo[k] });
        if !out.iter().any(|u| (u - &v).amax() == 0.0) {
            out.push(v);
        }
    }
    out
}

/// Two-state benchmark with uncertain `A[0][0]` and `B[1]`.
pub fn double_integrator(p: &DoubleIntegratorParams) -> (UncertainLTI, CostSpec) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.15, 0.1, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.1, 1.1]);
    let mut deltas = Vec::new();
    for sa in [1.0, -1.0] {
        for sb in [1.0, -1.0] {
            let da = DMatrix::from_row_slice(2, 2, &[sa * p.eps_a, 0.0, 0.0, 0.0]);
            let db = DMatrix::from_row_slice(2, 1, &[0.0, sb * p.eps_b]);
            if !deltas
                .iter()
                .any(|d: &DeltaVertex| (&d.da - &da).amax() == 0.0 && (&d.db - &db).amax() == 0.0)
            {
                deltas.push(DeltaVertex { da, db });
            }
        }
    }
    let (w, w_vertices) = if p.skewed {
        let hex = skewed_hexagon(p.sigma_w);
        let v = if p.sigma_w > 0.0 {
            hex.vertices().expect("hexagon is bounded").vertices
        } else {
            vec![DVector::zeros(2)]
        };
        (hex, v)
    } else {
        let s = p.sigma_w;
        (Polytope::inf_ball(2, s), box_corners(&[-s, -s], &[s, s]))
    };
    let certain = p.eps_a == 0.0 && p.eps_b == 0.0;
    let wbar = if p.sigma_w > 0.0 {
        match p.wbar {
            WbarChoice::SameAsW => w.clone(),
            WbarChoice::BoundingBox => {
                let lo: Vec<f64> = (0..2).map(|k| -w.support(&unit(2, k, -1.0)).unwrap()).collect();
                let hi: Vec<f64> = (0..2).map(|k| w.support(&unit(2, k, 1.0)).unwrap()).collect();
                Polytope::from_box(&lo, &hi)
            }
        }
    } else if certain {
        Polytope::inf_ball(2, 0.0)
    } else {
        Polytope::inf_ball(2, p.wbar_floor)
    };
    let sys = UncertainLTI {
        name: "double_integrator".into(),
        a,
        b,
        deltas,
        w,
        w_vertices,
        wbar,
        x: Polytope::inf_ball(2, 8.0),
        u: Polytope::inf_ball(1, 4.0),
    };
    let cost = CostSpec::with_riccati(&sys, DMatrix::identity(2, 2) * 10.0, DMatrix::identity(1, 1));
    (sys, cost)
}

fn unit(n: usize, k: usize, s: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = s;
    e
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VtolParams {
    pub dt: f64,
    pub inertia: f64,
    pub k1_range: (f64, f64),
    pub k2_range: (f64, f64),
    pub sigma_w: f64,
    pub wbar_radius: f64,
    /// Lower bound on the vertical position.
    pub pz_min: f64,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
}

impl Default for VtolParams {
    fn default() -> Self {
        VtolParams {
            dt: 0.075,
            inertia: 0.144,
            k1_range: (3.33, 4.67),
            k2_range: (4.33, 5.67),
            sigma_w: 0.05,
            wbar_radius: 0.075,
            pz_min: -15.0,
            q_diag: vec![10.0, 1.0, 10.0, 1.0, 1.0, 1.0],
            r_diag: vec![1.0, 1.0],
        }
    }
}

/// Planar vertical take-off and landing vehicle with state
/// `(p_x, v_x, p_z, v_z, θ, ω)` and input `(u_z, u_θ)`.
pub fn vtol(p: &VtolParams) -> (UncertainLTI, CostSpec) {
    let dt = p.dt;
    let k1 = 0.5 * (p.k1_range.0 + p.k1_range.1);
    let k2 = 0.5 * (p.k2_range.0 + p.k2_range.1);
    let mut a = DMatrix::identity(6, 6);
    a[(0, 1)] = dt;
    a[(1, 4)] = dt * k1;
    a[(2, 3)] = dt;
    a[(4, 5)] = dt;
    a[(5, 4)] = dt * k2;
    let mut b = DMatrix::zeros(6, 2);
    b[(3, 0)] = dt;
    b[(5, 1)] = dt / p.inertia;
    let mut deltas = Vec::new();
    for (k1e, k2e) in [(p.k1_range.0, p.k2_range.0), (p.k1_range.1, p.k2_range.1)] {
        let mut da = DMatrix::zeros(6, 6);
        da[(1, 4)] = dt * (k1e - k1);
        da[(5, 4)] = dt * (k2e - k2);
        deltas.push(DeltaVertex { da, db: DMatrix::zeros(6, 2) });
    }
    // W is the segment between ±σ (e_vx + e_ω)
    let s = p.sigma_w;
    let mut hm = DMatrix::zeros(12, 6);
    let mut h = DVector::zeros(12);
    let mut r = 0;
    for k in [0usize, 2, 3, 4] {
        hm[(r, k)] = 1.0;
        hm[(r + 1, k)] = -1.0;
        r += 2;
    }
    hm[(r, 1)] = 1.0;
    hm[(r, 5)] = -1.0;
    hm[(r + 1, 1)] = -1.0;
    hm[(r + 1, 5)] = 1.0;
    r += 2;
    hm[(r, 1)] = 1.0;
    h[r] = s;
    hm[(r + 1, 1)] = -1.0;
    h[r + 1] = s;
    let w = Polytope::new_unchecked(hm, h);
    let mut wv = DVector::zeros(6);
    wv[1] = s;
    wv[5] = s;
    let w_vertices = if s > 0.0 { vec![wv.clone(), -wv] } else { vec![DVector::zeros(6)] };
    let sys = UncertainLTI {
        name: "vtol".into(),
        a,
        b,
        deltas,
        w,
        w_vertices,
        wbar: Polytope::inf_ball(6, p.wbar_radius),
        x: Polytope::from_box(&[-15.0, -6.0, p.pz_min, -6.0, -20.0, -10.0], &[15.0, 6.0, 15.0, 6.0, 20.0, 10.0]),
        u: Polytope::from_box(&[-5.0, -25.0], &[5.0, 25.0]),
    };
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&p.q_diag));
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&p.r_diag));
    let cost = CostSpec::with_riccati(&sys, q, r);
    (sys, cost)
}
