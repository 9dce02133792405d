//! Command dispatch: validate, compute, write artifacts.

use std::path::Path;

use degen_lab::assembly::{assemble_stiffness_at, assemble_weighted_mass_for, Sources};
use degen_lab::coefficients::{generate_family, oscillation, OscillationReport};
use degen_lab::harness::{
    boundary_lipschitz, caccioppoli_ratio, corollary2_check, default_outer_cylinder, duality_check, energy_ratio_of,
    hardy_report, local_sources, locally_homogeneous_solution, main_estimate_sweep, random_sources, relative_change,
    reports_to_csv, sweep_sources, trace_report, w_estimate_ratio, EstimateReport, Problem, SweepSpec,
};
use degen_lab::mms::{convergence_study, mms_ladder, ManufacturedCase, SourceMode};
use degen_lab::norms::{
    field_norm, random_nodal_field, random_power_field, DerivativeOrder, NormRow, NormSpec, NORM_CSV_HEADER,
};
use degen_lab::{build_mesh, CoefficientField, CoefficientKind, Cylinder, FamilySpec, LabError, TensorMesh, TimeStepperConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Command, ExperimentConfig, SourceKind};
use crate::error::{config_error, CliError};
use crate::output::{plot_script, ArtifactEntry, ArtifactWriter, PlotKind};

pub const REFINEMENT_TOLERANCE: f64 = 0.25;

#[derive(Debug)]
pub struct RunOutcome {
    /// Failing rows, one line each.
    pub failures: Vec<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Serialize)]
struct Bundle<'a> {
    schema_version: u32,
    command: Command,
    config: &'a ExperimentConfig,
    pass: bool,
    summary: serde_json::Value,
    reports: &'a [EstimateReport],
}

/// Everything a command produced besides raw files.
#[derive(Default)]
struct Produced {
    reports: Vec<EstimateReport>,
    refined: Vec<EstimateReport>,
    failures: Vec<String>,
    summary: serde_json::Value,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    mesh: TensorMesh,
    coeffs: Vec<(CoefficientKind, CoefficientField)>,
}

impl Context<'_> {
    fn stepper(&self, mesh: &TensorMesh) -> TimeStepperConfig {
        TimeStepperConfig::for_mesh(mesh)
            .with_theta(self.cfg.theta)
            .with_tol(self.cfg.linear_tol)
    }

    fn sources(&self, seed: u64) -> Sources {
        let dim = self.cfg.dim;
        match self.cfg.sources {
            SourceKind::Random => random_sources(seed, dim),
            SourceKind::Sweep => sweep_sources(dim),
            SourceKind::Local => local_sources(seed, dim),
            SourceKind::Zero => Sources::zero(),
        }
    }

    fn first_coeffs(&self) -> &CoefficientField {
        &self.coeffs[0].1
    }
}

fn family(cfg: &ExperimentConfig, kind: CoefficientKind, seed: u64) -> Result<CoefficientField, LabError> {
    generate_family(&FamilySpec {
        seed,
        kind,
        dim: cfg.dim,
        nu: cfg.nu,
        eps: cfg.eps,
        xprime_period: cfg.xprime_length,
    })
}

fn check_single(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.lambda_grid().len() != 1 || cfg.p_values().len() != 1 {
        return Err(CliError::Config(format!("{:?} takes a single lambda and a single p", cfg.command)));
    }
    Ok(())
}

/// Checks every parameter the command will touch, before any solve.
fn prepare(cfg: &ExperimentConfig) -> Result<Context<'_>, CliError> {
    cfg.validate()?;
    let mesh = build_mesh(&cfg.mesh_params()).map_err(config_error)?;
    let coeffs = cfg
        .kinds()
        .into_iter()
        .map(|k| family(cfg, k, cfg.seed).map(|c| (k, c)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_error)?;
    match cfg.command {
        Command::Mms => {
            check_single(cfg)?;
            mms_ladder(cfg.dim, &cfg.mms_cells, cfg.xd_length, cfg.final_time, cfg.dt_factor).map_err(config_error)?;
        }
        Command::Caccioppoli | Command::Wlemma | Command::Lipschitz => {
            let outer = default_outer_cylinder(&mesh).with_radius(cfg.outer_radius);
            let lip = 2.0 * cfg.radius;
            if outer.radius.max(lip) > cfg.xd_length || outer.radius.max(lip) > cfg.final_time {
                return Err(CliError::Config("local cylinders leave the computational window".into()));
            }
            if mesh.cells_in_cylinder(&outer.with_radius(cfg.radius)).is_empty() {
                return Err(CliError::Config(format!("no mesh cell inside the radius-{} cylinder", cfg.radius)));
            }
            if cfg.sources == SourceKind::Random || cfg.sources == SourceKind::Sweep {
                return Err(CliError::Config("local checks need `sources` = \"local\"".into()));
            }
        }
        Command::Corollary2 => {
            if cfg.kinds() != [CoefficientKind::Constant] {
                return Err(CliError::Config("corollary2 uses the model equation with constant identity coefficients".into()));
            }
        }
        _ => {}
    }
    if cfg.refine {
        mesh.refined(2, 4).map_err(config_error)?;
    }
    Ok(Context { cfg, mesh, coeffs })
}

/// Runs `cfg` and writes all artifacts into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome, CliError> {
    let ctx = prepare(cfg)?;
    let mut w = ArtifactWriter::new(out)?;
    let produced = match cfg.command {
        Command::Solve => solve(&ctx, &mut w)?,
        Command::Mms => mms(&ctx, &mut w)?,
        Command::Sweep => sweep(&ctx)?,
        Command::Caccioppoli | Command::Wlemma | Command::Lipschitz => local(&ctx)?,
        Command::Duality => duality(&ctx)?,
        Command::Corollary2 => corollary(&ctx)?,
        Command::Trace => trace(&ctx, &mut w)?,
        Command::Hardy => hardy(&ctx, &mut w)?,
        Command::Oscillation => oscillation_scan(&ctx, &mut w)?,
    };
    if cfg.command != Command::Mms && cfg.command != Command::Oscillation {
        let csv = reports_to_csv(&produced.reports);
        w.write_str("report.csv", &csv)?;
        w.write_str("report.gp", &plot_script(&csv, "report.csv", PlotKind::RatioVsLambda, cfg.xd_length)?)?;
        if cfg.refine {
            w.write_str("report_refined.csv", &reports_to_csv(&produced.refined))?;
        }
    }
    let bundle = Bundle {
        schema_version: cfg.schema_version,
        command: cfg.command,
        config: cfg,
        pass: produced.failures.is_empty(),
        summary: produced.summary,
        reports: &produced.reports,
    };
    let text = serde_json::to_string_pretty(&bundle).map_err(std::io::Error::from)?;
    w.write_str("bundle.json", &text)?;
    let artifacts = w.finish(&format!("{:?}", cfg.command).to_lowercase())?;
    Ok(RunOutcome {
        failures: produced.failures,
        artifacts,
    })
}

fn failing_rows(reports: &[EstimateReport]) -> Vec<String> {
    reports.iter().filter(|r| !r.pass).map(|r| r.csv_row()).collect()
}

/// Pairs each report with its refined counterpart and flags changes above 25%.
fn refinement_failures(coarse: &[EstimateReport], fine: &[EstimateReport]) -> (f64, Vec<String>) {
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for (a, b) in coarse.iter().zip(fine) {
        let c = relative_change(a.ratio, b.ratio);
        worst = worst.max(c);
        if !(c <= REFINEMENT_TOLERANCE) {
            rows.push(format!("{} -> {} (change {:.1}%)", a.csv_row(), b.csv_row(), 100.0 * c));
        }
    }
    (worst, rows)
}

fn suffix(i: usize, n: usize) -> String {
    if n == 1 {
        String::new()
    } else {
        format!("_{i}")
    }
}

fn solve(ctx: &Context, w: &mut ArtifactWriter) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let mesh = &ctx.mesh;
    let lambdas = cfg.lambda_grid();
    let mut out = Produced::default();
    w.write_str("mesh.json", &mesh.summary_json()?)?;
    if cfg.write_matrix_market {
        w.write_str("mass.mtx", &assemble_weighted_mass_for(mesh, ctx.first_coeffs())?.to_matrix_market())?;
    }
    for (i, &lambda) in lambdas.iter().enumerate() {
        let sfx = suffix(i, lambdas.len());
        let problem = Problem::new(mesh.clone(), ctx.first_coeffs().clone(), ctx.sources(cfg.seed), lambda);
        let sol = problem.solve(&ctx.stepper(mesh))?;
        w.write_str(&format!("solution{sfx}.csv"), &sol.to_csv())?;
        if cfg.write_binary {
            let (bytes, sidecar) = sol.to_binary();
            w.write(&format!("solution{sfx}.bin"), &bytes)?;
            w.write_str(
                &format!("solution{sfx}.bin.json"),
                &serde_json::to_string_pretty(&sidecar).map_err(std::io::Error::from)?,
            )?;
        }
        if cfg.write_matrix_market {
            let k = assemble_stiffness_at(mesh, ctx.first_coeffs(), lambda, 1)?;
            w.write_str(&format!("stiffness{sfx}.mtx"), &k.to_matrix_market())?;
        }
        out.reports.push(energy_ratio_of(&problem, &sol)?.with_seed(cfg.seed));
    }
    out.failures = failing_rows(&out.reports);
    out.summary = serde_json::json!({
        "xd_cells": mesh.xd_cells(),
        "time_count": mesh.time_count,
        "interior_dofs": mesh.interior_dof_count(),
        "lambdas": lambdas,
    });
    Ok(out)
}

fn mms(ctx: &Context, w: &mut ArtifactWriter) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let ladder = mms_ladder(cfg.dim, &cfg.mms_cells, cfg.xd_length, cfg.final_time, cfg.dt_factor)?;
    let case = ManufacturedCase::default_case(cfg.dim, cfg.lambda_grid()[0], SourceMode::FOnly).with_theta(cfg.theta);
    let study = convergence_study(&case, &ladder, cfg.p_values()[0])?;
    let csv = study.to_csv();
    w.write_str("errors.csv", &csv)?;
    w.write_str("errors.gp", &plot_script(&csv, "errors.csv", PlotKind::ErrorVsH, cfg.xd_length)?)?;
    let mut out = Produced::default();
    if !(study.fitted_rate0 >= cfg.min_rate0 && study.fitted_rate1 >= cfg.min_rate1) {
        out.failures.push(format!(
            "fitted rates e0 {} (min {}), e1 {} (min {})",
            study.fitted_rate0, cfg.min_rate0, study.fitted_rate1, cfg.min_rate1
        ));
        out.failures.extend(csv.lines().skip(1).map(str::to_string));
    }
    out.summary = serde_json::to_value(&study).map_err(std::io::Error::from)?;
    Ok(out)
}

fn sweep(ctx: &Context) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let spec = SweepSpec {
        mesh: cfg.mesh_params(),
        p_grid: cfg.p_values(),
        lambdas: cfg.lambda_grid(),
        families: cfg.kinds().into_iter().map(|k| (k, cfg.eps)).collect(),
        seed: cfg.seed,
        nu: cfg.nu,
        rho0: cfg.rho0,
        refine: cfg.refine,
    };
    let res = main_estimate_sweep(&spec)?;
    let mut failures = failing_rows(&res.reports);
    for c in res.cells.iter().filter(|c| !c.pass) {
        failures.push(format!(
            "cell p={} kind={} spread={} refinement_change={:?}",
            c.p, c.kind, c.spread, c.max_refinement_change
        ));
    }
    Ok(Produced {
        summary: serde_json::to_value(&res.cells).map_err(std::io::Error::from)?,
        reports: res.reports,
        refined: res.refined,
        failures,
    })
}

fn local_reports(ctx: &Context, mesh: &TensorMesh) -> Result<Vec<EstimateReport>, CliError> {
    let cfg = ctx.cfg;
    let jobs: Vec<(u64, f64)> = cfg
        .seeds()
        .into_iter()
        .flat_map(|s| cfg.lambda_grid().into_iter().map(move |l| (s, l)))
        .collect();
    let nested = jobs
        .par_iter()
        .map(|&(seed, lambda)| -> Result<Vec<EstimateReport>, LabError> {
            let coeffs = family(cfg, ctx.coeffs[0].0, seed)?;
            let problem = Problem::new(mesh.clone(), coeffs, ctx.sources(seed), lambda);
            let outer = default_outer_cylinder(mesh).with_radius(cfg.outer_radius);
            let local = locally_homogeneous_solution(&problem, outer, seed)?;
            let sol = &local.solution;
            let reports = match cfg.command {
                Command::Caccioppoli => {
                    let c = caccioppoli_ratio(sol, &outer, cfg.radius, cfg.outer_radius)?;
                    vec![c.gradient, c.time]
                }
                Command::Wlemma => vec![w_estimate_ratio(sol, &outer, cfg.radius, cfg.outer_radius)?],
                _ => vec![boundary_lipschitz(sol, &outer.with_radius(cfg.radius))?.report],
            };
            Ok(reports.into_iter().map(|r| r.with_seed(seed)).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn local(ctx: &Context) -> Result<Produced, CliError> {
    let mut out = Produced {
        reports: local_reports(ctx, &ctx.mesh)?,
        ..Produced::default()
    };
    out.failures = failing_rows(&out.reports);
    let mut summary = serde_json::json!({
        "max_ratio": out.reports.iter().map(|r| r.ratio).fold(0.0, f64::max),
    });
    if ctx.cfg.refine {
        out.refined = local_reports(ctx, &ctx.mesh.refined(2, 4)?)?;
        let (worst, rows) = refinement_failures(&out.reports, &out.refined);
        out.failures.extend(rows);
        summary["max_refinement_change"] = worst.into();
    }
    out.summary = summary;
    Ok(out)
}

fn duality(ctx: &Context) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let jobs: Vec<(u64, f64)> = cfg
        .seeds()
        .into_iter()
        .flat_map(|s| cfg.lambda_grid().into_iter().map(move |l| (s, l)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(s, l)| duality_check(&ctx.mesh, s, l))
        .collect::<Result<Vec<_>, _>>()?;
    let worst = reports
        .iter()
        .map(|r| (r.lhs - r.rhs).abs() / r.lhs.abs().max(r.rhs.abs()))
        .fold(0.0, f64::max);
    Ok(Produced {
        failures: failing_rows(&reports),
        summary: serde_json::json!({ "max_relative_difference": worst }),
        reports,
        refined: Vec::new(),
    })
}

fn corollary(ctx: &Context) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let case = ManufacturedCase::default_case(cfg.dim, 1.0, SourceMode::FOnly).with_theta(cfg.theta);
    let run = |mesh: &TensorMesh| -> Result<Vec<EstimateReport>, LabError> {
        cfg.p_values().par_iter().map(|&p| corollary2_check(mesh, &case, p)).collect()
    };
    let mut out = Produced {
        reports: run(&ctx.mesh)?,
        ..Produced::default()
    };
    out.failures = failing_rows(&out.reports);
    if cfg.refine {
        out.refined = run(&ctx.mesh.refined(2, 4)?)?;
        let (worst, rows) = refinement_failures(&out.reports, &out.refined);
        out.failures.extend(rows);
        out.summary = serde_json::json!({ "max_refinement_change": worst });
    }
    Ok(out)
}

fn norm_rows(mesh: &TensorMesh, id: &str, field: &degen_lab::DiscreteField, specs: &[NormSpec]) -> Result<Vec<String>, LabError> {
    specs
        .iter()
        .map(|s| Ok(NormRow::new(id, s, field_norm(mesh, field, s)?).csv_row()))
        .collect()
}

fn write_norms(w: &mut ArtifactWriter, rows: &[String]) -> Result<(), CliError> {
    let mut csv = String::from(NORM_CSV_HEADER);
    csv.push('\n');
    for r in rows {
        csv.push_str(r);
        csv.push('\n');
    }
    w.write_str("norms.csv", &csv)
}

fn trace(ctx: &Context, w: &mut ArtifactWriter) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let mesh = &ctx.mesh;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for p in cfg.p_values() {
        let specs = [
            NormSpec::new(p, -p / 2.0, DerivativeOrder::Zero),
            NormSpec::new(p, 0.0, DerivativeOrder::Full),
        ];
        for seed in cfg.seeds() {
            let field = random_power_field(mesh, seed, p)?;
            reports.push(trace_report(mesh, &field, p, 0.0)?.with_seed(seed));
            rows.extend(norm_rows(mesh, &format!("power_{seed}"), &field, &specs)?);
        }
        if cfg.sources != SourceKind::Zero {
            for lambda in cfg.lambda_grid() {
                let problem = Problem::new(mesh.clone(), ctx.first_coeffs().clone(), ctx.sources(cfg.seed), lambda);
                let sol = problem.solve(&ctx.stepper(mesh))?;
                reports.push(trace_report(mesh, sol.last(), p, lambda)?.with_seed(cfg.seed));
                rows.extend(norm_rows(mesh, &format!("solution_lambda_{lambda}"), sol.last(), &specs)?);
            }
        }
    }
    write_norms(w, &rows)?;
    Ok(Produced {
        failures: failing_rows(&reports),
        reports,
        ..Produced::default()
    })
}

fn hardy(ctx: &Context, w: &mut ArtifactWriter) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let mesh = &ctx.mesh;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for p in cfg.p_values() {
        let num = NormSpec::new(p, -p, DerivativeOrder::Zero);
        let den = NormSpec::new(p, 0.0, DerivativeOrder::Normal);
        for seed in cfg.seeds() {
            for (name, field) in [
                ("power", random_power_field(mesh, seed, p)?),
                ("nodal", random_nodal_field(mesh, seed, p)?),
            ] {
                let r = hardy_report(mesh, &field, p)?.with_seed(seed);
                let id = format!("{name}_{seed}");
                rows.push(NormRow::new(id.as_str(), &num, r.lhs).csv_row());
                rows.push(NormRow::new(id.as_str(), &den, r.rhs).csv_row());
                reports.push(r);
            }
        }
    }
    write_norms(w, &rows)?;
    Ok(Produced {
        failures: failing_rows(&reports),
        reports,
        ..Produced::default()
    })
}

fn lattice(mesh: &TensorMesh, radii: &[f64]) -> Vec<Cylinder> {
    let st = (mesh.time_count / 8).max(1);
    let sk = (mesh.xprime_cells() / 4).max(1);
    let sj = (mesh.xd_cells() / 8).max(1);
    let mut out = Vec::new();
    for &rho in radii {
        for n in (1..=mesh.time_count).step_by(st) {
            for k in (0..mesh.xprime_cells()).step_by(sk) {
                for j in (0..mesh.xd_nodes.len()).step_by(sj) {
                    let c = Cylinder::new(mesh.time_level(n), mesh.xprime_node(k), mesh.xd_nodes[j], rho);
                    if c.center_xd + rho <= mesh.xd_length() {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

fn oscillation_scan(ctx: &Context, w: &mut ArtifactWriter) -> Result<Produced, CliError> {
    let cfg = ctx.cfg;
    let mesh = &ctx.mesh;
    let cylinders = lattice(mesh, &[cfg.rho0 / 2.0, cfg.rho0]);
    let mut out = Produced::default();
    let mut summary = serde_json::Map::new();
    for (kind, coeffs) in &ctx.coeffs {
        let reports: Vec<OscillationReport> = cylinders
            .par_iter()
            .map(|c| match oscillation(coeffs, mesh, c) {
                Ok(r) => Ok(Some(r)),
                Err(LabError::EmptyCylinder(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        let bound = FamilySpec::oscillation_constant(*kind) * cfg.eps + 1e-12;
        let mut csv = String::from(OscillationReport::CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
            if !(r.value <= bound) {
                out.failures.push(format!("{kind}: {} exceeds {bound:e}", r.csv_row()));
            }
        }
        let name = if ctx.coeffs.len() == 1 {
            "oscillation.csv".to_string()
        } else {
            format!("oscillation_{kind}.csv")
        };
        w.write_str(&name, &csv)?;
        let max = reports.iter().map(|r| r.value).fold(0.0, f64::max);
        summary.insert(kind.to_string(), serde_json::json!({ "max": max, "bound": bound, "cylinders": reports.len() }));
    }
    out.summary = serde_json::Value::Object(summary);
    Ok(out)
}
