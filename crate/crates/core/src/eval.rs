//! Confusion matrices and intersection-over-union.

use std::fmt::Write;

use crate::error::{dim_mismatch, invalid, Result};
use crate::tensorio::{LabelMap, NODATA};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    /// Pixels skipped because the truth or the prediction was nodata.
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counted(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if !pred.same_shape(truth) {
            return Err(dim_mismatch(format!(
                "prediction {}×{} vs truth {}×{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        if pred.classes() > self.classes || truth.classes() > self.classes {
            return Err(dim_mismatch("label maps have more classes than the matrix"));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == NODATA || p == NODATA {
                self.ignored += 1;
            } else {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(dim_mismatch("confusion matrices differ in size"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }
}

pub fn accumulate_confusion(
    pred: &LabelMap,
    truth: &LabelMap,
    mut cm: ConfusionMatrix,
) -> Result<ConfusionMatrix> {
    cm.add(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("class   IoU\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "{c:>5}   {:.2}%", v * 100.0),
                None => writeln!(s, "{c:>5}   absent"),
            }
            .expect("writing to a String");
        }
        writeln!(s, " mean   {:.2}%", self.mean * 100.0).expect("writing to a String");
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "iou.{c}={v:.6}"),
                None => writeln!(s, "iou.{c}=nan"),
            }
            .expect("writing to a String");
        }
        writeln!(s, "miou={:.6}", self.mean).expect("writing to a String");
        s
    }
}

/// `IoU_c = TP / (TP + FP + FN)`. Classes with an empty union are left out
/// of the mean unless `absent_as_zero` is set.
pub fn miou(cm: &ConfusionMatrix, absent_as_zero: bool) -> Result<IouReport> {
    let c_n = cm.classes;
    let mut per_class = Vec::with_capacity(c_n);
    for c in 0..c_n {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..c_n).map(|p| cm.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..c_n).map(|t| cm.get(t, c)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        per_class.push((union > 0).then(|| tp as f64 / union as f64));
    }
    if per_class.iter().all(Option::is_none) {
        return Err(invalid("every class has an empty union"));
    }
    let values: Vec<f64> = if absent_as_zero {
        per_class.iter().map(|v| v.unwrap_or(0.0)).collect()
    } else {
        per_class.iter().flatten().copied().collect()
    };
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// Convenience: mIoU of one prediction against one truth map.
pub fn miou_of(pred: &LabelMap, truth: &LabelMap) -> Result<IouReport> {
    let cm = accumulate_confusion(
        pred,
        truth,
        ConfusionMatrix::new(truth.classes().max(pred.classes())),
    )?;
    miou(&cm, false)
}
