//! CSV ingestion and export.
//!
//! The ingestion schema is one header row of
//! `timestamp,u_1..u_A,v_1..v_A,macro_speed,macro_direction` with velocities
//! and macro_speed in m/s and macro_direction one of the 16 compass tokens.
//! The altitude grid itself is not part of the sensor export; the schema
//! carries the known range and levels are spaced evenly across it.

use std::path::Path;

use crate::data::{encode_condition, Dataset, DirectionSet, SpeedBins, WindProfile};
use crate::error::{Error, Result};

/// Column mapping and altitude range for dataset ingestion.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub timestamp: String,
    pub u_prefix: String,
    pub v_prefix: String,
    pub macro_speed: String,
    pub macro_direction: String,
    /// (lowest, highest) measurement altitude in meters.
    pub altitude_range: (f64, f64),
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            u_prefix: "u_".into(),
            v_prefix: "v_".into(),
            macro_speed: "macro_speed".into(),
            macro_direction: "macro_direction".into(),
            altitude_range: (20.0, 250.0),
        }
    }
}

/// Outcome of loading a dataset file.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Data rows in the file, header excluded.
    pub raw_rows: usize,
    /// Rows removed because a velocity or the macro speed was NaN/Inf.
    pub dropped_rows: usize,
}

/// Evenly spaced altitude grid over a range.
pub fn altitude_grid(range: (f64, f64), count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![range.0];
    }
    let step = (range.1 - range.0) / (count - 1) as f64;
    (0..count).map(|i| range.0 + step * i as f64).collect()
}

/// Load a CSV dataset, dropping rows that contain non-finite velocities.
pub fn load_dataset(
    path: &Path,
    schema: &CsvSchema,
    bins: &SpeedBins,
    dirs: &DirectionSet,
) -> Result<LoadReport> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };

    // The timestamp column must exist even though its content is unused.
    let _ts = col(&schema.timestamp)?;
    let speed_col = col(&schema.macro_speed)?;
    let dir_col = col(&schema.macro_direction)?;

    // Count u_1..u_A columns, then require matching v columns.
    let mut u_cols = Vec::new();
    loop {
        let name = format!("{}{}", schema.u_prefix, u_cols.len() + 1);
        match headers.iter().position(|h| h == name) {
            Some(i) => u_cols.push(i),
            None => break,
        }
    }
    if u_cols.is_empty() {
        return Err(Error::MissingColumn { column: format!("{}1", schema.u_prefix) });
    }
    let a = u_cols.len();
    let mut v_cols = Vec::with_capacity(a);
    for k in 1..=a {
        v_cols.push(col(&format!("{}{}", schema.v_prefix, k))?);
    }

    let mut profiles = Vec::new();
    let mut raw_rows = 0usize;
    let mut dropped = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        raw_rows += 1;

        let parse = |col: usize, what: &str| -> Result<f64> {
            record
                .get(col)
                .ok_or_else(|| Error::Row { row, message: format!("missing field {what}") })?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Row {
                    row,
                    message: format!("field {what} is not a number: `{}`", &record[col]),
                })
        };

        let mut u = Vec::with_capacity(a);
        let mut v = Vec::with_capacity(a);
        for k in 0..a {
            u.push(parse(u_cols[k], &format!("{}{}", schema.u_prefix, k + 1))?);
            v.push(parse(v_cols[k], &format!("{}{}", schema.v_prefix, k + 1))?);
        }
        let speed = parse(speed_col, &schema.macro_speed)?;

        if u.iter().chain(&v).any(|x| !x.is_finite()) || !speed.is_finite() {
            dropped += 1;
            continue;
        }
        if speed < 0.0 {
            return Err(Error::Row { row, message: format!("negative macro speed {speed}") });
        }

        let token = record
            .get(dir_col)
            .ok_or_else(|| Error::Row { row, message: "missing macro_direction".into() })?
            .trim();
        let condition = encode_condition(speed, token, bins, dirs).map_err(|_| Error::Row {
            row,
            message: format!("unknown direction token `{token}`"),
        })?;

        profiles.push(WindProfile { u, v, condition });
    }

    if raw_rows == 0 {
        return Err(Error::EmptyFile { path: path.display().to_string() });
    }

    let altitudes = altitude_grid(schema.altitude_range, a);
    let dataset = Dataset::new(profiles, altitudes)?;
    Ok(LoadReport { dataset, raw_rows, dropped_rows: dropped })
}

fn velocity_header(a: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(2 * a);
    for k in 1..=a {
        cols.push(format!("u_{k}"));
    }
    for k in 1..=a {
        cols.push(format!("v_{k}"));
    }
    cols
}

fn profile_fields(p: &WindProfile, bins: &SpeedBins, dirs: &DirectionSet) -> Vec<String> {
    let mut fields: Vec<String> = p.u.iter().map(f64::to_string).collect();
    fields.extend(p.v.iter().map(f64::to_string));
    fields.push(bins.midpoint(p.condition.speed_bin).to_string());
    fields.push(dirs.token(p.condition.direction).to_string());
    fields
}

/// Write a dataset in the ingestion schema. The condition label is carried
/// as the bin's midpoint speed and the direction token, which re-encode to
/// the identical label on load.
pub fn write_dataset_csv(
    dataset: &Dataset,
    path: &Path,
    bins: &SpeedBins,
    dirs: &DirectionSet,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(velocity_header(dataset.altitude_count()));
    header.push("macro_speed".into());
    header.push("macro_direction".into());
    w.write_record(&header)?;
    for (i, p) in dataset.profiles.iter().enumerate() {
        let mut fields = vec![i.to_string()];
        fields.extend(profile_fields(p, bins, dirs));
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

/// Write generated profiles in the ingestion schema minus the timestamp.
pub fn write_profiles_csv(
    profiles: &[WindProfile],
    path: &Path,
    bins: &SpeedBins,
    dirs: &DirectionSet,
) -> Result<()> {
    let a = profiles.first().map_or(0, WindProfile::altitude_count);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = velocity_header(a);
    header.push("macro_speed".into());
    header.push("macro_direction".into());
    w.write_record(&header)?;
    for p in profiles {
        w.write_record(profile_fields(p, bins, dirs))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ConditionLabel;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn default_ctx() -> (CsvSchema, SpeedBins, DirectionSet) {
        (CsvSchema::default(), SpeedBins::reference(), DirectionSet::compass16())
    }

    #[test]
    fn nan_rows_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "\
timestamp,u_1,u_2,v_1,v_2,macro_speed,macro_direction
0,1.0,2.0,0.5,0.5,3.0,W
1,1.0,NaN,0.5,0.5,3.0,W
2,1.5,2.5,0.0,0.1,9.0,SW
";
        let path = write_file(&dir, "d.csv", csv);
        let (schema, bins, dirs) = default_ctx();
        let report = load_dataset(&path, &schema, &bins, &dirs).unwrap();
        assert_eq!(report.raw_rows, 3);
        assert_eq!(report.dropped_rows, 1);
        assert_eq!(report.dataset.len(), 2);
        assert_eq!(report.dropped_rows + report.dataset.len(), report.raw_rows);
        assert_eq!(report.dataset.altitude_count(), 2);
        // 3.0 m/s encodes into the second bin, 9.0 into the last.
        assert_eq!(report.dataset.profiles[0].condition.speed_bin, 1);
        assert_eq!(report.dataset.profiles[1].condition.speed_bin, 3);
    }

    #[test]
    fn missing_column_names_the_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "d.csv",
            "timestamp,u_1,v_1,macro_speed\n0,1.0,2.0,3.0\n",
        );
        let (schema, bins, dirs) = default_ctx();
        match load_dataset(&path, &schema, &bins, &dirs) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "macro_direction"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "d.csv",
            "timestamp,u_1,v_1,macro_speed,macro_direction\n",
        );
        let (schema, bins, dirs) = default_ctx();
        assert!(matches!(
            load_dataset(&path, &schema, &bins, &dirs),
            Err(Error::EmptyFile { .. })
        ));
    }

    #[test]
    fn unknown_direction_token_reports_row_index() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "\
timestamp,u_1,v_1,macro_speed,macro_direction
0,1.0,0.5,3.0,W
1,1.0,0.5,3.0,QQ
";
        let path = write_file(&dir, "d.csv", csv);
        let (schema, bins, dirs) = default_ctx();
        match load_dataset(&path, &schema, &bins, &dirs) {
            Err(Error::Row { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("QQ"));
            }
            other => panic!("expected Row error, got {other:?}"),
        }
    }

    #[test]
    fn reference_geometry_loads_with_47_levels() {
        // Full-resolution file: 47 altitudes, flattened dimension 94.
        use crate::data::{synth_generate, SynthConfig};
        let dir = tempfile::tempdir().unwrap();
        let (schema, bins, dirs) = default_ctx();
        let ds = synth_generate(&SynthConfig::four_regime_reference(20, 3), &bins, &dirs).unwrap();
        let path = dir.path().join("ref.csv");
        write_dataset_csv(&ds, &path, &bins, &dirs).unwrap();
        let report = load_dataset(&path, &schema, &bins, &dirs).unwrap();
        assert_eq!(report.dataset.altitude_count(), 47);
        assert_eq!(report.dataset.profiles[0].flatten().len(), 94);
        assert_eq!(report.dataset.altitudes[0], 20.0);
        assert_eq!(*report.dataset.altitudes.last().unwrap(), 250.0);
    }

    #[test]
    fn dataset_csv_round_trips_labels_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let (schema, bins, dirs) = default_ctx();
        let profiles = vec![
            WindProfile {
                u: vec![0.25, -1.75],
                v: vec![3.125, 0.0625],
                condition: ConditionLabel::new(2, dirs.index_of("WNW").unwrap()),
            },
            WindProfile {
                u: vec![1.0 / 3.0, 0.1],
                v: vec![-0.3, 2.0],
                condition: ConditionLabel::new(0, dirs.index_of("N").unwrap()),
            },
        ];
        let ds = Dataset::new(profiles, altitude_grid((20.0, 250.0), 2)).unwrap();
        let path = dir.path().join("round.csv");
        write_dataset_csv(&ds, &path, &bins, &dirs).unwrap();
        let back = load_dataset(&path, &schema, &bins, &dirs).unwrap();
        assert_eq!(back.dropped_rows, 0);
        assert_eq!(back.dataset, ds);
    }
}
