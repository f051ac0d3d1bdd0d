//! Confusion matrix, per-class IoU, mIoU and CSV reports.
//!
//! Classes with an empty union (absent from both prediction and ground
//! truth) have no IoU and are left out of the mean.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::imagecore::{LabelMap, IGNORE};

/// K×K counts, rows are ground truth and columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// From row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return invalid("confusion matrix must be square");
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not [`IGNORE`].
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return invalid(format!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.dims(),
                gt.dims()
            ));
        }
        let k = self.classes;
        let mut local = vec![0u64; k * k];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= k || p >= k {
                return invalid(format!(
                    "label out of range for {k} classes (gt {g}, pred {p})"
                ));
            }
            local[g * k + p] += 1;
        }
        for (c, l) in self.counts.iter_mut().zip(local) {
            *c += l;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return invalid("cannot merge confusion matrices of different size");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - self.get(c, c)
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - self.get(c, c)
    }

    /// `tp / (tp + fp + fn)` per class; `None` when the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.true_positives(c);
                let union = tp + self.false_positives(c) + self.false_negatives(c);
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> Result<f64> {
        mean_defined(&self.iou_per_class())
            .ok_or_else(|| Error::InvalidArgument("no class has a defined IoU".into()))
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub class_name: String,
    pub tp: u64,
    #[serde(rename = "fp")]
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// IoU in percent, two decimals; empty when undefined.
    pub iou: Option<String>,
}

/// Per-class scores plus the mean, as written to and read from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassRow>,
    /// mIoU in percent.
    pub miou: f64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        if class_names.len() != cm.classes() {
            return invalid(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.classes()
            ));
        }
        let ious = cm.iou_per_class();
        let rows = (0..cm.classes())
            .map(|c| ClassRow {
                class_id: c,
                class_name: class_names[c].clone(),
                tp: cm.true_positives(c),
                fp: cm.false_positives(c),
                fn_: cm.false_negatives(c),
                iou: ious[c].map(percent),
            })
            .collect();
        Ok(Self {
            rows,
            miou: cm.miou()? * 100.0,
        })
    }

    /// Per-class IoU in percent, `None` when undefined.
    pub fn ious(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| r.iou.as_ref().and_then(|s| s.parse().ok()))
            .collect()
    }

    /// CSV with header `class_id,class_name,tp,fp,fn,iou`, one row per
    /// class and a closing `mIoU` row. IoU values are percentages.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.write_record(["", "mIoU", "", "", "", &percent(self.miou / 100.0)])
            .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["class_id", "class_name", "tp", "fp", "fn", "iou"]
        {
            return format_err("unexpected report header");
        }
        let mut rows = Vec::new();
        let mut miou = None;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.get(1) == Some("mIoU") && rec.get(0) == Some("") {
                let v = rec.get(5).unwrap_or_default();
                miou = Some(
                    v.parse()
                        .map_err(|_| Error::Format(format!("bad mIoU {v}")))?,
                );
                continue;
            }
            let row: ClassRow = rec.deserialize(Some(&headers)).map_err(csv_err)?;
            rows.push(row);
        }
        let miou = miou.ok_or_else(|| Error::Format("report has no mIoU row".into()))?;
        Ok(Self { rows, miou })
    }
}

fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Per-class IoU difference between two runs (b minus a), in points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub class_id: usize,
    pub class_name: String,
    pub moving: bool,
    pub iou_a: Option<f64>,
    pub iou_b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunComparison {
    pub rows: Vec<DeltaRow>,
    pub miou_a: f64,
    pub miou_b: f64,
    /// Mean IoU over moving classes defined in both runs.
    pub moving_a: Option<f64>,
    pub moving_b: Option<f64>,
}

impl RunComparison {
    pub fn miou_delta(&self) -> f64 {
        self.miou_b - self.miou_a
    }

    pub fn moving_delta(&self) -> Option<f64> {
        Some(self.moving_b? - self.moving_a?)
    }

    /// CSV with header `class_id,class_name,moving,iou_a,iou_b,delta`, a
    /// `mIoU` row and a `moving_mIoU` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "class_id",
            "class_name",
            "moving",
            "iou_a",
            "iou_b",
            "delta",
        ])
        .map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.class_id.to_string(),
                r.class_name.clone(),
                r.moving.to_string(),
                fmt(r.iou_a),
                fmt(r.iou_b),
                r.delta.map(|d| format!("{d:+.2}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            String::new(),
            "mIoU".into(),
            String::new(),
            format!("{:.2}", self.miou_a),
            format!("{:.2}", self.miou_b),
            format!("{:+.2}", self.miou_delta()),
        ])
        .map_err(csv_err)?;
        w.write_record([
            String::new(),
            "moving_mIoU".into(),
            "true".into(),
            fmt(self.moving_a),
            fmt(self.moving_b),
            self.moving_delta()
                .map(|d| format!("{d:+.2}"))
                .unwrap_or_default(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

/// Compares two reports over the same classes. `moving` flags the classes
/// that move in the scenes.
pub fn compare_runs(a: &EvalReport, b: &EvalReport, moving: &[bool]) -> Result<RunComparison> {
    if a.rows.len() != b.rows.len() || a.rows.len() != moving.len() {
        return invalid("reports disagree on class count");
    }
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if ra.class_id != rb.class_id || ra.class_name != rb.class_name {
            return invalid(format!(
                "class mismatch: {}:{} vs {}:{}",
                ra.class_id, ra.class_name, rb.class_id, rb.class_name
            ));
        }
    }
    let (ia, ib) = (a.ious(), b.ious());
    let rows: Vec<DeltaRow> = a
        .rows
        .iter()
        .enumerate()
        .map(|(c, r)| DeltaRow {
            class_id: r.class_id,
            class_name: r.class_name.clone(),
            moving: moving[c],
            iou_a: ia[c],
            iou_b: ib[c],
            delta: ia[c].zip(ib[c]).map(|(x, y)| y - x),
        })
        .collect();
    let moving_mean = |pick: fn(&DeltaRow) -> Option<f64>| {
        let vals: Vec<Option<f64>> = rows
            .iter()
            .filter(|r| r.moving && r.delta.is_some())
            .map(pick)
            .collect();
        mean_defined(&vals)
    };
    Ok(RunComparison {
        moving_a: moving_mean(|r| r.iou_a),
        moving_b: moving_mean(|r| r.iou_b),
        rows,
        miou_a: a.miou,
        miou_b: b.miou,
    })
}
