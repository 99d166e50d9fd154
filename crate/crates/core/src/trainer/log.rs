//! Per-epoch training records and their CSV form.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{ClsEval, SegEval};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Level weights of the supervised levels.
    pub eta: Vec<f64>,
    pub seg_per_level: Vec<f64>,
    pub cls_per_level: Vec<f64>,
    pub l_seg: f64,
    pub l_cls: f64,
    pub reg: f64,
    pub total: f64,
    /// Largest relative gap between the logged total and its reassembly
    /// from components over the epoch's steps.
    pub reassembly_err: f64,
    /// Largest global gradient norm over the epoch's steps, before clipping.
    pub grad_norm: f64,
    pub val_seg: Option<SegEval>,
    pub val_cls: Option<ClsEval>,
    pub wall_ms: u64,
}

/// Whether two logs agree record by record under [`TrainRecord::same_as`].
pub fn same_logs(a: &[TrainRecord], b: &[TrainRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_as(y))
}

impl TrainRecord {
    /// Equal in every field except wall-clock time, counting NaN as equal
    /// to NaN (an AUC on a single-class validation set).
    pub fn same_as(&self, other: &Self) -> bool {
        let (a, b) = (to_row(self), to_row(other));
        a[..a.len() - 1] == b[..b.len() - 1]
    }
}

pub const HEADER: [&str; 20] = [
    "epoch",
    "lr",
    "eta",
    "seg_per_level",
    "cls_per_level",
    "l_seg",
    "l_cls",
    "reg",
    "total",
    "reassembly_err",
    "grad_norm",
    "val_dsc",
    "val_sensitivity",
    "val_fpi",
    "val_acc",
    "val_auc",
    "val_f1",
    "val_precision",
    "val_recall",
    "wall_ms",
];

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn split(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| x.parse().map_err(|_| Error::Format(format!("bad number {x:?} in log")))).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn to_row(r: &TrainRecord) -> Vec<String> {
    let s = r.val_seg;
    let c = r.val_cls;
    vec![
        r.epoch.to_string(),
        r.lr.to_string(),
        join(&r.eta),
        join(&r.seg_per_level),
        join(&r.cls_per_level),
        r.l_seg.to_string(),
        r.l_cls.to_string(),
        r.reg.to_string(),
        r.total.to_string(),
        r.reassembly_err.to_string(),
        r.grad_norm.to_string(),
        opt(s.map(|s| s.dsc)),
        opt(s.map(|s| s.sensitivity)),
        opt(s.map(|s| s.fpi)),
        opt(c.map(|c| c.acc)),
        opt(c.map(|c| c.auc)),
        opt(c.map(|c| c.f1)),
        opt(c.map(|c| c.precision)),
        opt(c.map(|c| c.recall)),
        r.wall_ms.to_string(),
    ]
}

fn from_row(row: &csv::StringRecord) -> Result<TrainRecord> {
    if row.len() != HEADER.len() {
        return Err(Error::Format(format!("log row has {} fields, expected {}", row.len(), HEADER.len())));
    }
    let num = |i: usize| -> Result<f64> {
        row[i].parse().map_err(|_| Error::Format(format!("bad {} value {:?}", HEADER[i], &row[i])))
    };
    let maybe = |i: usize| -> Result<Option<f64>> { if row[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
    let val_seg = match (maybe(11)?, maybe(12)?, maybe(13)?) {
        (Some(dsc), Some(sensitivity), Some(fpi)) => Some(SegEval { dsc, sensitivity, fpi }),
        _ => None,
    };
    let val_cls = match (maybe(14)?, maybe(15)?, maybe(16)?, maybe(17)?, maybe(18)?) {
        (Some(acc), Some(auc), Some(f1), Some(precision), Some(recall)) => {
            Some(ClsEval { acc, auc, f1, precision, recall })
        }
        _ => None,
    };
    Ok(TrainRecord {
        epoch: num(0)? as usize,
        lr: num(1)?,
        eta: split(&row[2])?,
        seg_per_level: split(&row[3])?,
        cls_per_level: split(&row[4])?,
        l_seg: num(5)?,
        l_cls: num(6)?,
        reg: num(7)?,
        total: num(8)?,
        reassembly_err: num(9)?,
        grad_norm: num(10)?,
        val_seg,
        val_cls,
        wall_ms: num(19)? as u64,
    })
}

pub fn write_log(path: &Path, log: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in log {
        w.write_record(to_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        out.push(from_row(&row?)?);
    }
    Ok(out)
}
