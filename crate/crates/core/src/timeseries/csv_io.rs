//! CGM CSV import/export.
//!
//! Layout: header `patient_id,timestamp_iso8601,glucose_mgdl`, one row per
//! reading, rows sorted by timestamp within each patient, empty glucose field
//! for a missing reading.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};

use super::{GlucoseSeries, TimeseriesError};

pub const CSV_HEADER: [&str; 3] = ["patient_id", "timestamp_iso8601", "glucose_mgdl"];

pub fn write_csv<W: Write>(writer: W, cohort: &[GlucoseSeries]) -> Result<(), TimeseriesError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for s in cohort {
        for (i, v) in s.values().iter().enumerate() {
            let ts = s.time_at(i).to_rfc3339_opts(SecondsFormat::Secs, true);
            let glucose = v.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([s.patient_id(), ts.as_str(), glucose.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
                .ok()
                .map(|t| t.and_utc())
        })
}

struct Rows {
    line: u64,
    times: Vec<DateTime<Utc>>,
    values: Vec<Option<f64>>,
}

/// Reads every patient in the file, in order of first appearance.
///
/// The sampling interval is the smallest gap between consecutive rows of a
/// patient. Larger gaps must be whole multiples of it and are filled with
/// missing readings. When `expected_interval` is given, the inferred interval
/// must match it.
pub fn read_csv<R: Read>(
    reader: R,
    expected_interval: Option<u32>,
) -> Result<Vec<GlucoseSeries>, TimeseriesError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(TimeseriesError::Csv {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut patients: BTreeMap<String, Rows> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| TimeseriesError::Csv { line, message };
        let id = record.get(0).unwrap_or("").trim().to_owned();
        if id.is_empty() {
            return Err(err("empty patient_id".into()));
        }
        let ts_field = record.get(1).unwrap_or("").trim();
        let ts = parse_timestamp(ts_field).ok_or_else(|| err(format!("bad timestamp {ts_field:?}")))?;
        let glucose = record.get(2).unwrap_or("").trim();
        let value = if glucose.is_empty() {
            None
        } else {
            Some(glucose.parse::<f64>().map_err(|_| err(format!("bad glucose {glucose:?}")))?)
        };
        let rows = patients.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Rows {
                line,
                times: Vec::new(),
                values: Vec::new(),
            }
        });
        if let Some(prev) = rows.times.last() {
            if ts <= *prev {
                return Err(err(format!("timestamp {ts_field} is not after the previous row")));
            }
        }
        rows.times.push(ts);
        rows.values.push(value);
    }

    order
        .into_iter()
        .map(|id| {
            let rows = patients.remove(&id).expect("patient recorded in order");
            assemble(id, rows, expected_interval)
        })
        .collect()
}

fn assemble(id: String, rows: Rows, expected: Option<u32>) -> Result<GlucoseSeries, TimeseriesError> {
    let err = |message: String| TimeseriesError::Csv {
        line: rows.line,
        message: format!("patient {id}: {message}"),
    };
    let gaps: Vec<i64> = rows
        .times
        .windows(2)
        .map(|w| (w[1] - w[0]).num_seconds())
        .collect();
    let interval_secs = match (gaps.iter().min(), expected) {
        (Some(&g), _) => g,
        (None, Some(e)) => i64::from(e) * 60,
        (None, None) => 300,
    };
    if interval_secs % 60 != 0 {
        return Err(err(format!("interval of {interval_secs}s is not whole minutes")));
    }
    let interval = u32::try_from(interval_secs / 60).map_err(|_| err("interval out of range".into()))?;
    if let Some(e) = expected {
        if e != interval {
            return Err(err(format!("inferred interval {interval} min, expected {e} min")));
        }
    }

    let mut values = Vec::with_capacity(rows.values.len());
    values.push(rows.values[0]);
    for (gap, v) in gaps.iter().zip(&rows.values[1..]) {
        if gap % interval_secs != 0 {
            return Err(err(format!("gap of {gap}s is not a multiple of the interval")));
        }
        values.extend(std::iter::repeat_n(None, (gap / interval_secs - 1) as usize));
        values.push(*v);
    }
    GlucoseSeries::new(id, rows.times[0], interval, values)
}
