//! Study runners: each writes CSV, a JSON summary and SVG plots, and
//! returns the list of declared checks with their outcomes.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sobolev_forge::io::resnet_from_json;
use sobolev_forge::manifold::{build_atlas, build_manifold_approx, manifold_norm, ManifoldParams, ManifoldSpec};
use sobolev_forge::metrics::{fit_constant, fit_slope, grid_norm, holder_quotient, sample_pairs, EvalGrid, MetricRow};
use sobolev_forge::risk::{adversarial_gap_check, empirical_residual_study, risk_approximator};
use sobolev_forge::targets::registry;
use sobolev_forge::taylor::{build_euclidean, EuclideanParams};
use sobolev_forge::{audit_class, NetClassParams};

use crate::config::{default_checks, AuditStudy, EuclideanRate, Evaluate, ManifoldRate, RiskStudy, SlopeCheck};
use crate::output::{loglog_svg, write_atomic, write_json, Series};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeResult {
    pub order: f64,
    pub slope: f64,
    pub constant: f64,
    pub min: f64,
    pub max: f64,
    pub passed: bool,
}

fn slope_checks(ns: &[f64], series: &[(f64, Vec<f64>)], checks: &[SlopeCheck]) -> Result<Vec<SlopeResult>> {
    checks
        .iter()
        .map(|c| {
            let (_, errs) = series
                .iter()
                .find(|(o, _)| *o == c.order)
                .with_context(|| format!("no measured series for order {}", c.order))?;
            let slope = fit_slope(ns, errs)?;
            Ok(SlopeResult {
                order: c.order,
                slope,
                constant: fit_constant(ns, errs, slope),
                min: c.min,
                max: c.max,
                passed: slope >= c.min && slope <= c.max,
            })
        })
        .collect()
}

fn slope_to_checks(results: &[SlopeResult]) -> Vec<Check> {
    results
        .iter()
        .map(|r| Check {
            name: format!("slope[order={}]", r.order),
            passed: r.passed,
            detail: format!("fitted slope {:.4} against window [{}, {}]", r.slope, r.min, r.max),
        })
        .collect()
}

#[derive(Serialize)]
struct EuclideanSummary<'a> {
    kind: &'static str,
    target: &'a str,
    alpha: usize,
    dim: usize,
    seed: u64,
    rows: &'a [MetricRow],
    slopes: &'a [SlopeResult],
    records: &'a [serde_json::Value],
    passed: bool,
}

pub fn euclidean_rate(cfg: &EuclideanRate, seed: u64, out: &Path) -> Result<Vec<Check>> {
    let f = registry(&cfg.target, cfg.dim, cfg.alpha)?;
    let pairs: Vec<[usize; 2]> = match (&cfg.n, &cfg.mj) {
        (Some(ns), _) => ns.iter().map(|&n| [n, n.pow(cfg.dim as u32 - 1)]).collect(),
        (None, Some(mj)) => mj.clone(),
        (None, None) => unreachable!("validated"),
    };
    let mut orders: Vec<f64> = cfg.orders.iter().map(|&k| k as f64).collect();
    if let Some(s) = cfg.s {
        orders.push(s);
    }
    let p_label = cfg.p.map_or("inf".to_string(), |p| p.to_string());
    let grid = EvalGrid::new(cfg.dim, cfg.resolution);
    let holder_pairs = sample_pairs(cfg.dim, 20_000, seed);

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut ns = Vec::new();
    let mut series: Vec<(f64, Vec<f64>)> = orders.iter().map(|&o| (o, Vec::new())).collect();
    for [mt, jt] in pairs {
        let params = EuclideanParams {
            s: cfg.s.unwrap_or(0.0),
            p: cfg.p,
            mode: cfg.mode,
            compile: cfg.compile || cfg.evaluate == Evaluate::Network,
            ..EuclideanParams::new(mt, jt)
        };
        let approx = build_euclidean(&f, &params)?;
        let n = approx.record.n;
        let err = |x: &[f64]| -> f64 {
            let v = match cfg.evaluate {
                Evaluate::Functional => approx.functional(x),
                Evaluate::Network => approx.compiled(x).unwrap_or(f64::NAN),
            };
            v - f.eval(x)
        };
        for (o, values) in series.iter_mut() {
            let value = if o.fract() == 0.0 {
                grid_norm(&err, *o as usize, cfg.p, &grid)?
            } else {
                grid_norm(&err, 0, None, &grid)?.max(holder_quotient(&err, *o, &holder_pairs)?)
            };
            values.push(value);
            rows.push(MetricRow {
                target: cfg.target.clone(),
                n,
                mj: mt * jt,
                s_or_k: *o,
                p: p_label.clone(),
                value,
                grid: cfg.resolution,
                seed,
            });
        }
        ns.push(n as f64);
        records.push(serde_json::json!({ "record": approx.record, "audit": approx.audit }));
    }

    let declared = if cfg.checks.is_empty() {
        default_checks(cfg.alpha, &orders)
    } else {
        cfg.checks.clone()
    };
    let slopes = slope_checks(&ns, &series, &declared)?;
    let checks = slope_to_checks(&slopes);

    let mut csv = format!("{}\n", MetricRow::HEADER);
    for r in &rows {
        csv += &r.csv();
        csv.push('\n');
    }
    write_atomic(&out.join("rate.csv"), csv.as_bytes())?;
    write_json(
        &out.join("summary.json"),
        &EuclideanSummary {
            kind: "euclidean-rate",
            target: &cfg.target,
            alpha: cfg.alpha,
            dim: cfg.dim,
            seed,
            rows: &rows,
            slopes: &slopes,
            records: &records,
            passed: checks.iter().all(|c| c.passed),
        },
    )?;
    let plot: Vec<Series> = series
        .iter()
        .map(|(o, v)| Series {
            label: format!("order {o}"),
            points: ns.iter().copied().zip(v.iter().copied()).collect(),
        })
        .collect();
    let title = format!("{} error, alpha = {}, D = {}", cfg.target, cfg.alpha, cfg.dim);
    write_atomic(
        &out.join("rate.svg"),
        loglog_svg(&title, "N", "error", &plot).as_bytes(),
    )?;
    Ok(checks)
}

#[derive(Serialize)]
struct ManifoldSummary<'a> {
    kind: &'static str,
    manifold: &'a str,
    target: &'a str,
    alpha: usize,
    seed: u64,
    charts: usize,
    mean_overlap: f64,
    slopes: &'a [SlopeResult],
    records: &'a [serde_json::Value],
    passed: bool,
}

pub fn manifold_rate(cfg: &ManifoldRate, seed: u64, out: &Path) -> Result<Vec<Check>> {
    let spec = ManifoldSpec::by_name(&cfg.manifold, cfg.ambient)?;
    let f = registry(&cfg.target, cfg.ambient, cfg.alpha)?;
    let atlas = build_atlas(&spec, cfg.radius, seed)?;
    let d = spec.intrinsic_dim();
    let orders: Vec<f64> = cfg.orders.iter().map(|&k| k as f64).collect();
    let mut series: Vec<(f64, Vec<f64>)> = orders.iter().map(|&o| (o, Vec::new())).collect();
    let mut csv = String::from("manifold,D,d,N,k,error,charts\n");
    let mut ns = Vec::new();
    let mut records = Vec::new();
    for &n in &cfg.n {
        let params = ManifoldParams {
            compile: cfg.compile,
            seed,
            mode: cfg.mode,
            ..ManifoldParams::new(n, n.pow(d as u32 - 1))
        };
        let approx = build_manifold_approx(&f, &atlas, &params)?;
        let n_eff = approx.record.n;
        let err = |x: &[f64]| approx.functional(x) - f.eval(x);
        for (o, values) in series.iter_mut() {
            let norm = manifold_norm(&err, &atlas, *o as usize, cfg.resolution)?;
            values.push(norm.value);
            csv += &format!(
                "{},{},{},{},{},{:e},{}\n",
                cfg.manifold,
                cfg.ambient,
                d,
                n_eff,
                o,
                norm.value,
                atlas.len()
            );
        }
        ns.push(n_eff as f64);
        records.push(serde_json::json!({ "record": approx.record, "audit": approx.audit }));
    }
    let declared = if cfg.checks.is_empty() {
        default_checks(cfg.alpha, &orders)
    } else {
        cfg.checks.clone()
    };
    let slopes = slope_checks(&ns, &series, &declared)?;
    let checks = slope_to_checks(&slopes);
    write_atomic(&out.join("manifold.csv"), csv.as_bytes())?;
    write_atomic(&out.join("atlas.json"), atlas.to_json()?.as_bytes())?;
    write_json(
        &out.join("summary.json"),
        &ManifoldSummary {
            kind: "manifold-rate",
            manifold: &cfg.manifold,
            target: &cfg.target,
            alpha: cfg.alpha,
            seed,
            charts: atlas.len(),
            mean_overlap: atlas.mean_overlap,
            slopes: &slopes,
            records: &records,
            passed: checks.iter().all(|c| c.passed),
        },
    )?;
    let plot: Vec<Series> = series
        .iter()
        .map(|(o, v)| Series {
            label: format!("k = {o}"),
            points: ns.iter().copied().zip(v.iter().copied()).collect(),
        })
        .collect();
    let title = format!("{} on {} in R^{}", cfg.target, cfg.manifold, cfg.ambient);
    write_atomic(
        &out.join("manifold.svg"),
        loglog_svg(&title, "N", "error", &plot).as_bytes(),
    )?;
    Ok(checks)
}

fn risk_evaluator(
    cfg: &RiskStudy,
) -> Result<(
    sobolev_forge::targets::TargetFunction,
    sobolev_forge::taylor::ConstructedApproximator,
)> {
    let f = registry(&cfg.target, cfg.dim, cfg.alpha)?;
    let approx = risk_approximator(&f, cfg.risk.eps)?;
    Ok((f, approx))
}

pub fn risk_study(cfg: &RiskStudy, seed: u64, out: &Path) -> Result<Vec<Check>> {
    let (f, approx) = risk_evaluator(cfg)?;
    let mut rc = cfg.risk.clone();
    rc.seed = seed;
    let report = match cfg.evaluate {
        Evaluate::Functional => empirical_residual_study(&rc, &f, &|x: &[f64]| approx.functional(x))?,
        Evaluate::Network => empirical_residual_study(&rc, &f, &|x: &[f64]| approx.compiled(x).unwrap_or(f64::NAN))?,
    };
    let mut csv = String::from("repetition,residual,below_bound\n");
    for (i, r) in report.residuals.iter().enumerate() {
        csv += &format!("{i},{r:e},{}\n", *r <= report.residual_bound);
    }
    write_atomic(&out.join("risk.csv"), csv.as_bytes())?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "kind": "risk",
            "target": cfg.target,
            "seed": seed,
            "n_grid": approx.record.n,
            "success_fraction": report.success_fraction,
            "theoretical_floor": report.theoretical_floor,
            "report": report,
        }),
    )?;
    Ok(vec![
        Check {
            name: "success_fraction".into(),
            passed: report.success_fraction >= report.theoretical_floor,
            detail: format!(
                "{} of {} repetitions within 2 eps^2 + sigma^2 = {:.4} (Lipschitz {:.4} <= {:.4}); floor {:.6}",
                report.successes,
                report.repetitions,
                report.residual_bound,
                report.lipschitz_estimate,
                report.lipschitz_bound,
                report.theoretical_floor
            ),
        },
        Check {
            name: "expected_risk".into(),
            passed: report.expected_risk <= report.expected_risk_bound + 3.0 * report.expected_risk_stderr,
            detail: format!(
                "E[(g - y)^2] = {:.6} +- {:.1e} against eps^2 + sigma^2 = {:.6}",
                report.expected_risk, report.expected_risk_stderr, report.expected_risk_bound
            ),
        },
    ])
}

pub fn adversarial_study(cfg: &RiskStudy, seed: u64, out: &Path) -> Result<Vec<Check>> {
    let (f, approx) = risk_evaluator(cfg)?;
    let mut rc = cfg.risk.clone();
    rc.seed = seed;
    let report = match cfg.evaluate {
        Evaluate::Functional => adversarial_gap_check(&rc, &f, &|x: &[f64]| approx.functional(x))?,
        Evaluate::Network => adversarial_gap_check(&rc, &f, &|x: &[f64]| approx.compiled(x).unwrap_or(f64::NAN))?,
    };
    let mut csv = String::from("delta,risk,gap,bound,passed\n");
    for r in &report.gap_table {
        csv += &format!("{},{:e},{:e},{:e},{}\n", r.delta, r.risk, r.gap, r.bound, r.passed);
    }
    write_atomic(&out.join("gap.csv"), csv.as_bytes())?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "kind": "adversarial",
            "target": cfg.target,
            "seed": seed,
            "plain_risk": report.plain_risk,
            "slope_bound": report.slope_bound,
            "lipschitz_estimate": report.lipschitz_estimate,
            "gap_table": report.gap_table,
            "passed": report.passed,
        }),
    )?;
    let plot = [
        Series {
            label: "gap".into(),
            points: report.gap_table.iter().map(|r| (r.delta, r.gap)).collect(),
        },
        Series {
            label: "bound".into(),
            points: report.gap_table.iter().map(|r| (r.delta, r.bound)).collect(),
        },
    ];
    write_atomic(
        &out.join("gap.svg"),
        loglog_svg("adversarial gap", "delta", "R(delta) - R(0)", &plot).as_bytes(),
    )?;
    Ok(report
        .gap_table
        .iter()
        .map(|r| Check {
            name: format!("gap[delta={}]", r.delta),
            passed: r.passed,
            detail: format!("gap {:.3e} against bound {:.3e}", r.gap, r.bound),
        })
        .collect())
}

pub fn load_network(path: &Path) -> Result<sobolev_forge::ConvResNetModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(resnet_from_json(&text)?)
}

pub fn audit(cfg: &AuditStudy, out: &Path) -> Result<NetClassParams> {
    let params = audit_class(&load_network(&cfg.network)?);
    write_json(&out.join("audit.json"), &params)?;
    Ok(params)
}
