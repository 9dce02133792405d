//! Weighted Lebesgue and Sobolev norms of discrete fields, and the Hardy,
//! trace and second-order checks built on them.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mesh::{Cylinder, TensorMesh};
use crate::solver::{DiscreteField, SpaceTimeSolution};

/// Gauss-Legendre rule of order 8 on `[0, 1]`.
pub const GAUSS8_NODES: [f64; 8] = [
    0.019855071751231912,
    0.10166676129318664,
    0.2372337950418355,
    0.4082826787521751,
    0.5917173212478248,
    0.7627662049581645,
    0.8983332387068134,
    0.9801449282487681,
];
pub const GAUSS8_WEIGHTS: [f64; 8] = [
    0.050614268145188344,
    0.11119051722668717,
    0.15685332293894352,
    0.18134189168918088,
    0.18134189168918088,
    0.15685332293894352,
    0.11119051722668717,
    0.050614268145188344,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeOrder {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1_full")]
    Full,
    #[serde(rename = "1_xd")]
    Normal,
    #[serde(rename = "2_full")]
    Second,
}

impl DerivativeOrder {
    pub fn label(self) -> &'static str {
        match self {
            Self::Zero => "0",
            Self::Full => "1_full",
            Self::Normal => "1_xd",
            Self::Second => "2_full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Whole,
    Cylinder(Cylinder),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub p: f64,
    /// Exponent of the weight `x_d^alpha`.
    pub alpha: f64,
    pub order: DerivativeOrder,
    pub region: Region,
    /// Leading fraction of time levels left out of whole-domain norms.
    pub exclude_fraction: f64,
}

impl NormSpec {
    pub fn new(p: f64, alpha: f64, order: DerivativeOrder) -> Self {
        Self {
            p,
            alpha,
            order,
            region: Region::Whole,
            exclude_fraction: 0.1,
        }
    }

    pub fn on(mut self, cyl: Cylinder) -> Self {
        self.region = Region::Cylinder(cyl);
        self
    }

    pub fn full_window(mut self) -> Self {
        self.exclude_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(LabError::InvalidNorm(format!("p = {} must exceed 1", self.p)));
        }
        if !self.alpha.is_finite() || self.alpha <= -self.p - 1.0 {
            return Err(LabError::InvalidNorm(format!(
                "weight exponent {} not integrable against fields vanishing linearly at x_d = 0",
                self.alpha
            )));
        }
        if self.order != DerivativeOrder::Zero && self.alpha <= -1.0 {
            return Err(LabError::InvalidNorm(format!(
                "weight exponent {} not integrable for derivative order {}",
                self.alpha,
                self.order.label()
            )));
        }
        if !(0.0..1.0).contains(&self.exclude_fraction) {
            return Err(LabError::InvalidNorm(format!("exclude fraction {}", self.exclude_fraction)));
        }
        Ok(())
    }

    fn region_label(&self) -> String {
        match self.region {
            Region::Whole => "whole".to_string(),
            Region::Cylinder(c) => format!("cyl({};{};{};{})", c.center_time, c.center_xprime, c.center_xd, c.radius),
        }
    }
}

/// Nodal second differences `(D_dd u, D_pp u)`, extended to the x_d
/// boundary nodes by copying their neighbours.
fn second_differences(mesh: &TensorMesh, field: &DiscreteField) -> Result<DiscreteField2> {
    let m = mesh.xd_cells();
    if m + 1 < 4 {
        return Err(LabError::InvalidNorm("second differences need at least 4 x_d nodes".into()));
    }
    let x = &mesh.xd_nodes;
    let kc = mesh.xprime_cells();
    let mut dd = vec![0.0; mesh.spatial_node_count()];
    let mut pp = vec![0.0; mesh.spatial_node_count()];
    for k in 0..kc {
        for j in 1..m {
            let (hl, hr) = (x[j] - x[j - 1], x[j + 1] - x[j]);
            let (ul, uc, ur) = (field.at(mesh, k, j - 1), field.at(mesh, k, j), field.at(mesh, k, j + 1));
            dd[mesh.node(k, j)] = 2.0 * ((ur - uc) / hr - (uc - ul) / hl) / (hl + hr);
        }
        dd[mesh.node(k, 0)] = dd[mesh.node(k, 1)];
        dd[mesh.node(k, m)] = dd[mesh.node(k, m - 1)];
        if mesh.dim == 2 {
            let hp = mesh.xprime_width();
            let kl = (k + kc - 1) % kc;
            let kr = mesh.xprime_next(k);
            for j in 0..=m {
                pp[mesh.node(k, j)] =
                    (field.at(mesh, kr, j) - 2.0 * field.at(mesh, k, j) + field.at(mesh, kl, j)) / (hp * hp);
            }
        }
    }
    Ok(DiscreteField2 { dd, pp })
}

struct DiscreteField2 {
    dd: Vec<f64>,
    pp: Vec<f64>,
}

enum Source<'a> {
    Plain(&'a DiscreteField),
    Second(DiscreteField2),
}

fn prepare<'a>(mesh: &TensorMesh, field: &'a DiscreteField, spec: &NormSpec) -> Result<Source<'a>> {
    if field.values.len() != mesh.spatial_node_count() {
        return Err(LabError::DimensionMismatch {
            expected: mesh.spatial_node_count(),
            got: field.values.len(),
        });
    }
    if let Some(i) = field.values.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite(format!("field value at node {i}")));
    }
    if spec.order == DerivativeOrder::Second {
        Ok(Source::Second(second_differences(mesh, field)?))
    } else {
        Ok(Source::Plain(field))
    }
}

/// `int |D^o u|^p x_d^alpha` over spatial cell `(k, j)`.
fn cell_integral(mesh: &TensorMesh, src: &Source, spec: &NormSpec, k: usize, j: usize) -> Result<f64> {
    let p = spec.p;
    let alpha = spec.alpha;
    let h = mesh.xd_width(j);
    let x0 = mesh.xd_nodes[j];
    let two_d = mesh.dim == 2;
    let k1 = if two_d { mesh.xprime_next(k) } else { k };
    let hp = mesh.xprime_width();
    let corner = |vals: &[f64]| {
        (
            vals[mesh.node(k, j)],
            vals[mesh.node(k, j + 1)],
            vals[mesh.node(k1, j)],
            vals[mesh.node(k1, j + 1)],
        )
    };
    let (u00, u01, u10, u11, extra) = match src {
        Source::Plain(f) => {
            let (a, b, c, d) = corner(&f.values);
            (a, b, c, d, None)
        }
        Source::Second(s) => {
            let (a, b, c, d) = corner(&s.dd);
            (a, b, c, d, Some(corner(&s.pp)))
        }
    };
    // Integrand at tangential parameter xi and normal parameter s.
    let integrand = |xi: f64, s: f64| -> f64 {
        let lin = |a: f64, b: f64, c: f64, d: f64| {
            let lo = (1.0 - xi) * a + xi * c;
            let hi = (1.0 - xi) * b + xi * d;
            (1.0 - s) * lo + s * hi
        };
        match spec.order {
            DerivativeOrder::Zero => lin(u00, u01, u10, u11).abs().powf(p),
            DerivativeOrder::Normal => {
                let lo = (1.0 - xi) * u00 + xi * u10;
                let hi = (1.0 - xi) * u01 + xi * u11;
                ((hi - lo) / h).abs().powf(p)
            }
            DerivativeOrder::Full => {
                let lo = (1.0 - xi) * u00 + xi * u10;
                let hi = (1.0 - xi) * u01 + xi * u11;
                let gd = (hi - lo) / h;
                let gp = if two_d {
                    ((1.0 - s) * (u10 - u00) + s * (u11 - u01)) / hp
                } else {
                    0.0
                };
                gd.hypot(gp).powf(p)
            }
            DerivativeOrder::Second => {
                let dd = lin(u00, u01, u10, u11);
                let pp = extra.map_or(0.0, |(a, b, c, d)| lin(a, b, c, d));
                dd.hypot(pp).powf(p)
            }
        }
    };
    let xi_points: Vec<(f64, f64)> = if two_d {
        GAUSS8_NODES.iter().cloned().zip(GAUSS8_WEIGHTS.iter().cloned()).collect()
    } else {
        vec![(0.0, 1.0)]
    };
    let tangential_measure = if two_d { hp } else { 1.0 };
    let mut total = 0.0;
    if j > 0 {
        for &(xi, wx) in &xi_points {
            for (s, ws) in GAUSS8_NODES.iter().zip(GAUSS8_WEIGHTS.iter()) {
                let x = x0 + h * s;
                total += wx * ws * integrand(xi, *s) * x.powf(alpha);
            }
        }
        return Ok(total * h * tangential_measure);
    }
    if spec.order == DerivativeOrder::Zero && u00 == 0.0 && u10 == 0.0 {
        // u = s * b(xi) on the first cell: closed form in x_d.
        if p + alpha <= -1.0 {
            return Err(LabError::InvalidNorm(format!("x_d^{alpha} |u|^{p} not integrable at x_d = 0")));
        }
        for &(xi, wx) in &xi_points {
            let b = (1.0 - xi) * u01 + xi * u11;
            total += wx * b.abs().powf(p);
        }
        return Ok(total * h.powf(alpha + 1.0) / (p + alpha + 1.0) * tangential_measure);
    }
    if alpha <= -1.0 {
        return Err(LabError::InvalidNorm(format!(
            "field does not vanish at x_d = 0 and x_d^{alpha} is not integrable"
        )));
    }
    // s = sigma^{1/(alpha+1)} absorbs the weight.
    let e = 1.0 / (alpha + 1.0);
    for &(xi, wx) in &xi_points {
        for (sig, ws) in GAUSS8_NODES.iter().zip(GAUSS8_WEIGHTS.iter()) {
            total += wx * ws * integrand(xi, sig.powf(e));
        }
    }
    Ok(total * h.powf(alpha + 1.0) * e * tangential_measure)
}

fn spatial_cells(mesh: &TensorMesh, region: &Region) -> Vec<(usize, usize)> {
    match region {
        Region::Whole => {
            let mut out = Vec::with_capacity(mesh.xprime_cells() * mesh.xd_cells());
            for k in 0..mesh.xprime_cells() {
                for j in 0..mesh.xd_cells() {
                    out.push((k, j));
                }
            }
            out
        }
        Region::Cylinder(c) => mesh.cells_in_ball(c),
    }
}

/// `int |D^o u|^p x_d^alpha dx` over the spatial cells of the region.
pub fn field_integral(mesh: &TensorMesh, field: &DiscreteField, spec: &NormSpec) -> Result<f64> {
    spec.validate()?;
    let src = prepare(mesh, field, spec)?;
    let mut total = 0.0;
    for (k, j) in spatial_cells(mesh, &spec.region) {
        total += cell_integral(mesh, &src, spec, k, j)?;
    }
    Ok(total)
}

/// Spatial norm of one field; a cylinder region selects its spatial ball.
pub fn field_norm(mesh: &TensorMesh, field: &DiscreteField, spec: &NormSpec) -> Result<f64> {
    Ok(field_integral(mesh, field, spec)?.powf(1.0 / spec.p))
}

/// First level entering whole-domain time integrals.
pub fn first_level(time_count: usize, exclude_fraction: f64) -> usize {
    ((exclude_fraction * time_count as f64).floor() as usize + 1).min(time_count)
}

/// Space-time integral with the rectangle rule over levels: level `n`
/// stands for slab `n`.
pub fn solution_integral(sol: &SpaceTimeSolution, spec: &NormSpec) -> Result<f64> {
    spec.validate()?;
    let mesh = &*sol.mesh;
    let dt = mesh.time_step;
    let mut total = 0.0;
    match &spec.region {
        Region::Whole => {
            for n in first_level(mesh.time_count, spec.exclude_fraction)..=mesh.time_count {
                total += dt * field_integral(mesh, &sol.levels[n], spec)?;
            }
        }
        Region::Cylinder(c) => {
            let cells = mesh.cells_in_cylinder(c);
            let mut current: Option<(usize, Source)> = None;
            for cell in cells.cells() {
                if current.as_ref().map(|(n, _)| *n) != Some(cell.level) {
                    current = Some((cell.level, prepare(mesh, &sol.levels[cell.level], spec)?));
                }
                let (_, src) = current.as_ref().unwrap();
                total += dt * cell_integral(mesh, src, spec, cell.xprime, cell.xd)?;
            }
        }
    }
    Ok(total)
}

/// `( int int |D^o u|^p x_d^alpha dx dt )^{1/p}`.
pub fn weighted_norm(sol: &SpaceTimeSolution, spec: &NormSpec) -> Result<f64> {
    Ok(solution_integral(sol, spec)?.powf(1.0 / spec.p))
}

/// `|| D^2 u ||_{L_p(x_d^{p/2})}` of one field from nodal second differences.
pub fn second_order_weighted_norm(mesh: &TensorMesh, field: &DiscreteField, p: f64) -> Result<f64> {
    field_norm(mesh, field, &NormSpec::new(p, p / 2.0, DerivativeOrder::Second))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardyReport {
    pub p: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn hardy_bound(p: f64) -> f64 {
    p / (p - 1.0) + 0.05
}

/// `||u / x_d||_p / ||D_d u||_p` for one field.
pub fn hardy_check(mesh: &TensorMesh, field: &DiscreteField, p: f64) -> Result<HardyReport> {
    if (0..mesh.xprime_cells()).any(|k| field.at(mesh, k, 0) != 0.0) {
        return Err(LabError::Degenerate("field does not vanish at x_d = 0".into()));
    }
    let num = field_norm(mesh, field, &NormSpec::new(p, -p, DerivativeOrder::Zero))?;
    let den = field_norm(mesh, field, &NormSpec::new(p, 0.0, DerivativeOrder::Normal))?;
    hardy_report(p, num, den)
}

/// Hardy ratio of a space-time solution over its full time window.
pub fn hardy_check_solution(sol: &SpaceTimeSolution, p: f64) -> Result<HardyReport> {
    let num = weighted_norm(sol, &NormSpec::new(p, -p, DerivativeOrder::Zero).full_window())?;
    let den = weighted_norm(sol, &NormSpec::new(p, 0.0, DerivativeOrder::Normal).full_window())?;
    hardy_report(p, num, den)
}

fn hardy_report(p: f64, num: f64, den: f64) -> Result<HardyReport> {
    let ratio = if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        return Err(LabError::Degenerate(format!(
            "||D_d u|| = 0 while ||u / x_d|| = {num}: boundary condition broken"
        )));
    };
    let bound = hardy_bound(p);
    Ok(HardyReport {
        p,
        numerator: num,
        denominator: den,
        ratio,
        bound,
        pass: ratio <= bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub p: f64,
    pub slope: f64,
    pub threshold: f64,
    /// `sup_j s(x_j) / x_j^{1/2 - 1/p}`.
    pub constant: f64,
    pub slices_used: usize,
    pub pass: bool,
}

/// `s(x_j) = ||u(., x_j)||_{L_p(x')}` for every node `j >= 1`.
pub fn slice_norms(mesh: &TensorMesh, field: &DiscreteField, p: f64) -> Vec<f64> {
    (1..mesh.xd_nodes.len())
        .map(|j| {
            if mesh.dim == 1 {
                field.at(mesh, 0, j).abs()
            } else {
                let hp = mesh.xprime_width();
                let mut acc = 0.0;
                for k in 0..mesh.xprime_cells() {
                    let (a, b) = (field.at(mesh, k, j), field.at(mesh, mesh.xprime_next(k), j));
                    for (xi, w) in GAUSS8_NODES.iter().zip(GAUSS8_WEIGHTS.iter()) {
                        acc += w * ((1.0 - xi) * a + xi * b).abs().powf(p);
                    }
                }
                (acc * hp).powf(1.0 / p)
            }
        })
        .collect()
}

/// Least-squares slope of `log s` against `log x_d` over the first quartile
/// of nodes, and the trace constant over all nodes.
pub fn trace_decay_check(mesh: &TensorMesh, field: &DiscreteField, p: f64) -> Result<TraceReport> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(LabError::InvalidNorm(format!("trace check needs p >= 2, got {p}")));
    }
    let s = slice_norms(mesh, field, p);
    let expo = 0.5 - 1.0 / p;
    let quart = (mesh.xd_cells() / 4).max(1);
    let pts: Vec<(f64, f64)> = (1..=quart)
        .filter(|&j| s[j - 1] > 0.0)
        .map(|j| (mesh.xd_nodes[j].ln(), s[j - 1].ln()))
        .collect();
    if pts.len() < 4 {
        return Err(LabError::Degenerate(format!(
            "only {} usable slices near x_d = 0",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    let constant = (1..mesh.xd_nodes.len())
        .map(|j| s[j - 1] / mesh.xd_nodes[j].powf(expo))
        .fold(0.0, f64::max);
    let threshold = expo - 0.05;
    Ok(TraceReport {
        p,
        slope,
        threshold,
        constant,
        slices_used: pts.len(),
        pass: slope >= threshold && constant.is_finite(),
    })
}

/// One row of a norm report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub field_id: String,
    pub p: f64,
    pub alpha: f64,
    pub order: DerivativeOrder,
    pub region: String,
    pub value: f64,
}

pub const NORM_CSV_HEADER: &str = "field_id,p,alpha,order,region,value";

impl NormRow {
    pub fn new(field_id: impl Into<String>, spec: &NormSpec, value: f64) -> Self {
        Self {
            field_id: field_id.into(),
            p: spec.p,
            alpha: spec.alpha,
            order: spec.order,
            region: spec.region_label(),
            value,
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{:e}",
            self.field_id,
            self.p,
            self.alpha,
            self.order.label(),
            self.region,
            self.value
        );
        s
    }
}

/// Positive mixture `sum_m c_m x^{beta_m} e^{-x}` with every `beta_m` in
/// `(1 - 1/p, 2)`, tangentially modulated for `dim = 2`, scaled to unit
/// `W^1_p` norm.
pub fn random_power_field(mesh: &TensorMesh, seed: u64, p: f64) -> Result<DiscreteField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = 1.0 - 1.0 / p;
    let terms: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.2..1.0), rng.gen_range(lo + 0.02..2.0)))
        .collect();
    let (amp, phase) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..std::f64::consts::TAU));
    let period = mesh.xprime_length;
    let two_d = mesh.dim == 2;
    let field = DiscreteField::from_fn_open(mesh, |xp, x| {
        let radial: f64 = terms.iter().map(|(c, b)| c * x.powf(*b)).sum::<f64>() * (-x).exp();
        let tang = if two_d {
            1.0 + amp * (std::f64::consts::TAU * xp / period + phase).cos()
        } else {
            1.0
        };
        radial * tang
    });
    normalize_w1p(mesh, field, p)
}

/// I.i.d. uniform nodal values on `x_d > 0`, scaled to unit `W^1_p` norm.
pub fn random_nodal_field(mesh: &TensorMesh, seed: u64, p: f64) -> Result<DiscreteField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = DiscreteField::zeros(mesh);
    for k in 0..mesh.xprime_cells() {
        for j in 1..mesh.xd_nodes.len() {
            field.values[mesh.node(k, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    normalize_w1p(mesh, field, p)
}

/// `||u||_{L_p(x_d^{-p/2})} + ||D u||_{L_p}` of one field.
pub fn w1p_norm(mesh: &TensorMesh, field: &DiscreteField, p: f64) -> Result<f64> {
    Ok(field_norm(mesh, field, &NormSpec::new(p, -p / 2.0, DerivativeOrder::Zero))?
        + field_norm(mesh, field, &NormSpec::new(p, 0.0, DerivativeOrder::Full))?)
}

fn normalize_w1p(mesh: &TensorMesh, field: DiscreteField, p: f64) -> Result<DiscreteField> {
    let n = w1p_norm(mesh, &field, p)?;
    if n == 0.0 {
        return Err(LabError::Degenerate("zero random field".into()));
    }
    Ok(field.scaled(1.0 / n))
}
