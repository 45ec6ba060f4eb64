//! Runs every acceptance criterion at its stated tolerance and prints one
//! PASS/FAIL line per criterion. Runs without the libtest harness so the
//! lines are never captured; exits non-zero on any failure.

use std::process::ExitCode;
use std::time::Instant;

use specsim::acceptance::{
    alpha_sweep, check_dominance, check_ordering, criteria, BenefitParams, FormulaParams,
    SweepParams, Verdict,
};

fn close(a: f64, b: f64, rel: f64) -> bool {
    ((a - b) / b).abs() <= rel
}

/// The frozen expectations match a direct evaluation of the formulas.
fn frozen_values_match_direct_evaluation() {
    let p = FormulaParams::default();
    let (b, l, g, tt, td) = (32.0, 3.0, 4.0, 0.050, 0.005);
    let ord = b * l / (tt + (g - 1.0) * td);
    let par = b * (0.2 + 0.8 * l) / tt;
    let rs = (g - 1.0) * l * td / ((tt + (g - 1.0) * td) * (l - 1.0));
    assert!(close(p.ordinary, ord, 1e-15));
    assert!(close(p.parallel, par, 1e-15));
    assert!(close(p.r_star, rs, 1e-15));
    assert_eq!(format!("{:.2}", p.ordinary), "1476.92");
    assert_eq!(format!("{:.5}", p.r_star), "0.34615");

    let bp = BenefitParams::default();
    let with = (2000.0 * 3.0 + 500.0 * 0.45) / 1e6 * 1000.0 / 2.0;
    let without = 2000.0 * 3.0 / 1e6 * 1000.0 / 2.0;
    assert!(close(bp.with_draft, with, 1e-15));
    assert!(close(bp.without_draft, without, 1e-15));
}

fn acceptance_criteria() -> bool {
    let mut verdicts: Vec<Verdict> = Vec::new();
    for c in criteria() {
        match c.id {
            4 => {
                let p = SweepParams::default();
                let t = Instant::now();
                let sweep = alpha_sweep(&p).expect("alpha sweep runs");
                for (id, name, res) in [
                    (4, "hybrid dominance", check_dominance(&p, &sweep, t)),
                    (5, "accepted-length ordering", check_ordering(&p, &sweep, t)),
                ] {
                    let (passed, detail) = res.unwrap_or_else(|e| (false, format!("error: {e}")));
                    verdicts.push(Verdict {
                        id,
                        name: name.into(),
                        passed,
                        detail,
                        seconds: t.elapsed().as_secs_f64(),
                    });
                }
            }
            5 => {}
            _ => verdicts.push(c.run()),
        }
    }
    for v in &verdicts {
        println!("{}", v.line());
    }
    let failed: Vec<&Verdict> = verdicts.iter().filter(|v| !v.passed).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {:?}", failed.iter().map(|v| v.id).collect::<Vec<_>>());
    }
    failed.is_empty()
}

fn main() -> ExitCode {
    frozen_values_match_direct_evaluation();
    println!("frozen expectations match direct evaluation");
    if acceptance_criteria() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
