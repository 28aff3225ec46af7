//! Plot-ready CSV and JSON emission for evaluation reports.
//!
//! Missing values are written as the literal token `missing`, never NaN.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::eval::{EvalReport, FoldStatus, KlValue};

fn kl_field(v: &KlValue) -> String {
    match v {
        KlValue::Value(x) => x.to_string(),
        KlValue::Missing => "missing".to_string(),
    }
}

fn opt_field(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "missing".to_string(),
    }
}

/// Write `kl_by_altitude.csv`, `conditional_profiles.csv`,
/// `kfold_grid.csv`, `bivariate_samples.csv`, and `report.json`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut w = std::fs::File::create(out_dir.join("kl_by_altitude.csv"))?;
    writeln!(w, "model,altitude,kl")?;
    for curve in &report.kl_by_altitude {
        for (alt, v) in report.altitudes.iter().zip(&curve.values) {
            writeln!(w, "{},{},{}", curve.model, alt, kl_field(v))?;
        }
    }

    let mut w = std::fs::File::create(out_dir.join("conditional_profiles.csv"))?;
    writeln!(
        w,
        "model,speed_bin,direction,altitude,n_real,n_generated,low_support,\
         real_mean,real_std,gen_mean,gen_std,kl"
    )?;
    for cell in &report.conditional {
        for (i, alt) in report.altitudes.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                cell.model,
                cell.speed_bin,
                cell.direction,
                alt,
                cell.n_real,
                cell.n_generated,
                cell.low_support,
                opt_field(cell.real.as_ref().map(|s| s.mean[i])),
                opt_field(cell.real.as_ref().map(|s| s.std[i])),
                opt_field(cell.generated.as_ref().map(|s| s.mean[i])),
                opt_field(cell.generated.as_ref().map(|s| s.std[i])),
                kl_field(&cell.kl_by_altitude[i]),
            )?;
        }
    }

    let mut w = std::fs::File::create(out_dir.join("kfold_grid.csv"))?;
    writeln!(
        w,
        "model,speed_bin,direction,n_train,n_test,n_generated,status,label_audit_passed,kl"
    )?;
    for cell in &report.kfold {
        let status = match &cell.status {
            FoldStatus::Ok => "ok".to_string(),
            FoldStatus::Missing => "missing".to_string(),
            FoldStatus::Failed(_) => "failed".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            cell.model,
            cell.speed_bin,
            cell.direction,
            cell.n_train,
            cell.n_test,
            cell.n_generated,
            status,
            cell.label_audit_passed,
            kl_field(&cell.kl),
        )?;
    }

    let mut w = std::fs::File::create(out_dir.join("bivariate_samples.csv"))?;
    writeln!(w, "model,mean_u,mean_v")?;
    for set in &report.bivariate {
        for (u, v) in &set.points {
            writeln!(w, "{},{},{}", set.model, u, v)?;
        }
    }

    let file = std::fs::File::create(out_dir.join("report.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{KfoldCell, KlCurve, RunMetadata};

    fn metadata() -> RunMetadata {
        RunMetadata {
            schema_version: 1,
            version: "test".into(),
            seed: 0,
            k_neighbors: 1,
            configs: vec![],
        }
    }

    #[test]
    fn empty_report_writes_header_only_csvs_and_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport::empty(vec![20.0, 30.0], metadata());
        emit_report(&report, dir.path()).unwrap();
        for name in [
            "kl_by_altitude.csv",
            "conditional_profiles.csv",
            "kfold_grid.csv",
            "bivariate_samples.csv",
        ] {
            let content = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(content.lines().count(), 1, "{name} should be header-only");
        }
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.altitudes, report.altitudes);
    }

    #[test]
    fn missing_cells_use_the_literal_token() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvalReport::empty(vec![20.0], metadata());
        report.kfold.push(KfoldCell {
            model: "gmm".into(),
            speed_bin: 3,
            direction: "SW".into(),
            n_train: 10,
            n_test: 5,
            n_generated: 0,
            status: FoldStatus::Missing,
            kl: KlValue::Missing,
            label_audit_passed: true,
        });
        emit_report(&report, dir.path()).unwrap();
        let grid = std::fs::read_to_string(dir.path().join("kfold_grid.csv")).unwrap();
        assert!(grid.contains(",missing,"), "{grid}");
        assert!(grid.trim_end().ends_with("missing"), "{grid}");
        assert!(!grid.contains("NaN"));
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert!(json.contains("\"missing\""));
    }

    #[test]
    fn emitted_kl_curves_reparse_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvalReport::empty(vec![20.0, 30.0, 40.0], metadata());
        report.kl_by_altitude.push(KlCurve {
            model: "fm".into(),
            values: vec![
                KlValue::Value(0.1234567890123),
                KlValue::Value(1.0 / 3.0),
                KlValue::Missing,
            ],
        });
        emit_report(&report, dir.path()).unwrap();
        let content = std::fs::read_to_string(dir.path().join("kl_by_altitude.csv")).unwrap();
        let mut lines = content.lines().skip(1);
        for expected in &report.kl_by_altitude[0].values {
            let line = lines.next().unwrap();
            let field = line.rsplit(',').next().unwrap();
            match expected {
                KlValue::Value(v) => {
                    let parsed: f64 = field.parse().unwrap();
                    assert_eq!(parsed, *v, "round-trip of {v}");
                }
                KlValue::Missing => assert_eq!(field, "missing"),
            }
        }
    }
}
