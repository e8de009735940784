//! `metrics.csv`: one row per training step.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use reentangle::eval::MetricsRecord;
use reentangle::objectives::LossWeights;

use crate::CliError;

pub const HEADER: [&str; 10] = [
    "step", "loss_v", "loss_c", "loss_r", "gan_g1", "gan_g2", "loss_ac", "loss_av", "lr", "rho",
];

/// Shortest representation that parses back to the same value.
fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Row writer that flushes after every record, so an interrupted run leaves
/// a readable prefix.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self, CliError> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(HEADER).map_err(anyhow::Error::from)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        let rho = r.rho.map(num).unwrap_or_default();
        self.inner
            .write_record([
                r.step.to_string(),
                num(r.ell_v),
                num(r.ell_c),
                num(r.ell_r),
                num(r.gan_g1),
                num(r.gan_g2),
                num(r.loss_ac),
                num(r.loss_av),
                num(r.lr),
                rho,
            ])
            .map_err(std::io::Error::other)?;
        self.inner.flush()
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(bad(format!(
            "unexpected header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| -> Result<f64, CliError> {
            row[k]
                .parse()
                .map_err(|_| bad(format!("row {}: bad `{}` value `{}`", i + 1, HEADER[k], &row[k])))
        };
        out.push(MetricsRecord {
            step: row[0]
                .parse()
                .map_err(|_| bad(format!("row {}: bad step `{}`", i + 1, &row[0])))?,
            ell_v: num(1)?,
            ell_c: num(2)?,
            ell_r: num(3)?,
            gan_g1: num(4)?,
            gan_g2: num(5)?,
            loss_ac: num(6)?,
            loss_av: num(7)?,
            lr: num(8)?,
            rho: if row[9].is_empty() { None } else { Some(num(9)?) },
        });
    }
    Ok(out)
}

/// Mean weighted reconstruction loss over records with `lo <= step <= hi`.
pub fn mean_recon(history: &[MetricsRecord], w: &LossWeights, lo: usize, hi: usize) -> Option<f64> {
    let vals: Vec<f64> = history
        .iter()
        .filter(|r| (lo..=hi).contains(&r.step))
        .map(|r| r.recon(w))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Early-window (steps 100 to 600) and final-1000-step mean `L_recon`, and
/// the relative drop between them. `None` when the run is too short for
/// the windows not to overlap.
pub fn recon_descent(history: &[MetricsRecord], w: &LossWeights) -> Option<(f64, f64, f64)> {
    let last = history.last()?.step;
    if last < 1600 {
        return None;
    }
    let early = mean_recon(history, w, 100, 600)?;
    let late = mean_recon(history, w, last - 999, last)?;
    Some((early, late, 1.0 - late / early))
}
