use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use revlm::stability::{
    char_roots, empirical_fb_stable, grid_csv, stability_condition, standard_grid, StabilityQuery, Verdict,
    STANDARD_GRID_STEPS,
};

use super::{emit, write_file};
use crate::error::{CliError, Result};

pub fn parse_complex(s: &str) -> Result<Complex64> {
    s.trim()
        .parse::<Complex64>()
        .map_err(|_| CliError::Usage(format!("cannot parse `{s}` as a complex number")))
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Stable => "stable",
        Verdict::MarginallyStable => "marginally_stable",
        Verdict::Unstable => "unstable",
    }
}

fn fmt_complex(z: Complex64) -> String {
    format!("{}{:+}i", z.re, z.im)
}

pub fn cmd_stability(
    a: Option<f64>,
    b: Option<f64>,
    hlambda: Option<&str>,
    grid: bool,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    if grid {
        let rows = standard_grid();
        let csv = grid_csv(&rows);
        let agree = rows.iter().filter(|r| r.all_agree()).count();
        match path {
            Some(p) => {
                write_file(p, &csv)?;
                emit(out, format_args!("points={} agreeing={agree}", rows.len()))
            }
            None => out.write_all(csv.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
        }
    } else {
        let a = a.ok_or_else(|| CliError::Usage("--a is required without --grid".into()))?;
        let hl = parse_complex(hlambda.ok_or_else(|| CliError::Usage("--hlambda is required without --grid".into()))?)?;
        let q = StabilityQuery::new(a, b.unwrap_or(0.0), hl);
        if !q.is_finite() {
            return Err(CliError::Usage("stability parameters must be finite".into()));
        }
        let report = char_roots(&q);
        let lines = [
            format!("a={} b={} hlambda={}", q.a, q.b, fmt_complex(q.hlambda)),
            format!("roots={} {}", fmt_complex(report.roots[0]), fmt_complex(report.roots[1])),
            format!("moduli={} {}", report.moduli[0], report.moduli[1]),
            format!("condition={}", stability_condition(&q)),
            format!("empirical={}", empirical_fb_stable(&q, STANDARD_GRID_STEPS, 10.0)),
            format!("fb_stable={}", report.fb_stable),
            format!("verdict={}", verdict_name(report.verdict)),
        ];
        for l in lines {
            emit(out, format_args!("{l}"))?;
        }
        if let Some(p) = path {
            write_file(p, &grid_csv(&[revlm::stability::GridRow {
                query: q,
                report,
                condition: stability_condition(&q),
                empirical: empirical_fb_stable(&q, STANDARD_GRID_STEPS, 10.0),
            }]))?;
        }
        Ok(())
    }
}
