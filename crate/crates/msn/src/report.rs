//! CSV outputs. Numbers are written in their shortest round-trip form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use msn_core::eval::EvalReport;
use msn_core::model::{Prepared, PredictionSet};
use msn_core::style::classify;
use msn_core::train::EpochLog;

use crate::error::{Error, Result};

pub const LOSS_HEADER: [&str; 5] = ["epoch", "l_sty", "l_ad", "l_kl", "total"];
pub const EVAL_HEADER: [&str; 5] = ["sample_id", "minADE", "minFDE", "argmin_channel", "argmin_draw"];
pub const PREDICTION_HEADER: [&str; 6] = ["sample_id", "channel", "draw", "t", "x", "y"];
pub const INSPECT_HEADER: [&str; 6] = ["sample_id", "channel", "dx", "dy", "chosen", "distance"];
pub const KEEL_HEADER: [&str; 5] = ["sample_id", "channel", "t", "x", "y"];

pub(crate) fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Per-epoch loss log, flushed after every row so an aborted run keeps
/// what it finished.
pub struct LossLog {
    out: csv::Writer<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        out.write_record(LOSS_HEADER)?;
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { out })
    }

    pub fn push(&mut self, log: &EpochLog) -> Result<()> {
        let l = &log.loss;
        self.out.write_record([
            log.epoch.to_string(),
            l.l_sty.to_string(),
            l.l_ad.to_string(),
            l.l_kl.to_string(),
            l.total.to_string(),
        ])?;
        self.out.flush().map_err(|e| Error::Csv(e.into()))
    }
}

/// One row per sample; the argmin columns name the minADE candidate.
pub fn write_eval(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = create(path)?;
    out.write_record(EVAL_HEADER)?;
    for r in &report.records {
        out.write_record([
            r.sample_id.to_string(),
            r.min_ade.to_string(),
            r.min_fde.to_string(),
            r.ade_source.0.to_string(),
            r.ade_source.1.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Every predicted point in world coordinates; `t` counts future steps from 1.
pub fn write_predictions(path: &Path, sets: &[PredictionSet]) -> Result<()> {
    let mut out = create(path)?;
    out.write_record(PREDICTION_HEADER)?;
    for set in sets {
        for p in &set.predictions {
            for (t, q) in p.points.iter().enumerate() {
                out.write_record([
                    set.sample_id.to_string(),
                    p.channel.to_string(),
                    p.draw.to_string(),
                    (t + 1).to_string(),
                    q[0].to_string(),
                    q[1].to_string(),
                ])?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Proposals relative to the last observed point, the channel the ground
/// truth endpoint is assigned to, and each proposal's distance to it.
pub fn write_inspect(path: &Path, sample: &Prepared, set: &PredictionSet) -> Result<()> {
    let rel: Vec<[f64; 2]> = set
        .proposals
        .iter()
        .map(|p| [p[0] - sample.origin[0], p[1] - sample.origin[1]])
        .collect();
    let chosen = classify(sample.endpoint(), &rel)?;
    let mut out = create(path)?;
    out.write_record(INSPECT_HEADER)?;
    for (c, p) in rel.iter().enumerate() {
        out.write_record([
            set.sample_id.to_string(),
            c.to_string(),
            p[0].to_string(),
            p[1].to_string(),
            u8::from(c == chosen.channel).to_string(),
            msn_core::style::distance(sample.endpoint(), *p).to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_keels(path: &Path, set: &PredictionSet) -> Result<()> {
    let mut out = create(path)?;
    out.write_record(KEEL_HEADER)?;
    for (c, keel) in set.keels.iter().enumerate() {
        for (t, q) in keel.iter().enumerate() {
            out.write_record([
                set.sample_id.to_string(),
                c.to_string(),
                (t + 1).to_string(),
                q[0].to_string(),
                q[1].to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
