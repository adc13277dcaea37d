//! CSV and JSONL exports of a [`ResultFrame`].
//!
//! Both formats carry the columns of [`ResultFrame::column_names`]: the
//! parameter names in template order, `repetition_index`, `status`, then
//! the metric names. CSV cells use canonical text (empty for a missing
//! metric), RFC 4180 quoting and `\n` line endings.

use serde_json::{Map, Value};

use super::frame::ResultFrame;
use super::AnalysisError;
use crate::model::{format_number, ExperimentStatus, ParamValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(AnalysisError::InvalidQuery(format!("unknown export format {other:?}"))),
        }
    }
}

/// The exported projection of one frame row.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub values: Vec<ParamValue>,
    pub repetition_index: u32,
    pub status: ExperimentStatus,
    pub metrics: Vec<Option<f64>>,
}

impl ResultFrame {
    pub fn export_rows(&self) -> Vec<ExportRow> {
        self.rows
            .iter()
            .map(|r| ExportRow {
                values: r.values.clone(),
                repetition_index: r.repetition_index,
                status: r.status,
                metrics: r.metrics.clone(),
            })
            .collect()
    }

    pub fn export(&self, format: ExportFormat) -> Vec<u8> {
        match format {
            ExportFormat::Csv => self.to_csv(),
            ExportFormat::Jsonl => self.to_jsonl(false),
        }
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .quote_style(csv::QuoteStyle::Necessary)
            .from_writer(Vec::new());
        writer
            .write_record(self.column_names())
            .expect("writing to memory");
        for row in &self.rows {
            let cells = row
                .values
                .iter()
                .map(ParamValue::canonical_text)
                .chain([row.repetition_index.to_string(), row.status.to_string()])
                .chain(row.metrics.iter().map(|m| m.map(format_number).unwrap_or_default()));
            writer.write_record(cells).expect("writing to memory");
        }
        writer.into_inner().expect("writing to memory")
    }

    /// One JSON document per row. With `with_ids`, each document also
    /// carries `experiment_id` and `combo_index` for drill-down links.
    pub fn to_jsonl(&self, with_ids: bool) -> Vec<u8> {
        let mut out = Vec::new();
        for row in &self.rows {
            let mut doc = Map::new();
            if with_ids {
                doc.insert("experiment_id".into(), Value::from(row.experiment_id.0.clone()));
                doc.insert("combo_index".into(), Value::from(row.combo_index));
            }
            for (col, value) in self.parameters.iter().zip(&row.values) {
                doc.insert(col.name.clone(), serde_json::to_value(value).expect("scalar"));
            }
            doc.insert("repetition_index".into(), Value::from(row.repetition_index));
            doc.insert("status".into(), Value::from(row.status.as_str()));
            for (col, cell) in self.metrics.iter().zip(&row.metrics) {
                doc.insert(col.name.clone(), cell.map_or(Value::Null, Value::from));
            }
            serde_json::to_writer(&mut out, &Value::Object(doc)).expect("writing to memory");
            out.push(b'\n');
        }
        out
    }

    /// Parses a CSV export back into rows, re-typing parameter cells against
    /// this frame's declared values.
    pub fn parse_csv(&self, bytes: &[u8]) -> Result<Vec<ExportRow>, AnalysisError> {
        let bad = |msg: String| AnalysisError::InvalidQuery(msg);
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let expected = self.column_names();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(bad(format!("unexpected header {:?}", header)));
        }
        let n_params = self.parameters.len();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let values = self
                .parameters
                .iter()
                .zip(record.iter())
                .map(|(col, cell)| {
                    col.values
                        .iter()
                        .find(|v| v.canonical_text() == cell)
                        .cloned()
                        .ok_or_else(|| bad(format!("{cell:?} is not a value of {}", col.name)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let repetition_index = record[n_params]
                .parse()
                .map_err(|_| bad(format!("bad repetition_index {:?}", &record[n_params])))?;
            let status = ExperimentStatus::parse(&record[n_params + 1])
                .ok_or_else(|| bad(format!("bad status {:?}", &record[n_params + 1])))?;
            let metrics = record
                .iter()
                .skip(n_params + 2)
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| bad(format!("bad metric cell {cell:?}")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(ExportRow {
                values,
                repetition_index,
                status,
                metrics,
            });
        }
        Ok(rows)
    }
}
