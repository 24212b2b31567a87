use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::write_atomic;
use crate::error::{LensError, Result};

pub const METRICS_COLUMNS: [&str; 6] = [
    "step",
    "loss",
    "reg",
    "reward",
    "grad_norm",
    "spectral_norm",
];

/// One evaluation point. Loss, reg and reward are held-out means; grad_norm
/// is the pre-clip norm of the most recent step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub reg: f64,
    pub reward: f64,
    pub grad_norm: f64,
    pub spectral_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| LensError::Format(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| LensError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| LensError::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(|e| LensError::Format(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header != METRICS_COLUMNS {
            return Err(LensError::Format(format!(
                "unexpected metrics header {header:?}"
            )));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(|e| LensError::Format(e.to_string()))?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}
