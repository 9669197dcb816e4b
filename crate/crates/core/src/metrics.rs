//! Confusion-matrix accumulation and the six segmentation statistics:
//! pixel accuracy, per-class pixel accuracy, mean accuracy, IoU, mean IoU,
//! and frequency-weighted IoU. Metric values are exact rationals; use the
//! `*_f64` helpers for reporting.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::map::ClassMap;

/// `counts[i][j]` = pixels of true class `i` predicted as class `j`.
/// Row sum `i` is `t_i`; the grand total is the number of counted pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_cl: usize,
    counts: Vec<u64>,
    class_names: Vec<String>,
    ignore: Option<u8>,
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

impl ConfusionMatrix {
    pub fn new(class_names: &[String], ignore: Option<u8>) -> Self {
        let n_cl = class_names.len();
        ConfusionMatrix {
            n_cl,
            counts: vec![0; n_cl * n_cl],
            class_names: class_names.to_vec(),
            ignore,
        }
    }

    pub fn with_classes(n_cl: usize) -> Self {
        let names = (0..n_cl).map(|i| format!("class{i}")).collect::<Vec<_>>();
        Self::new(&names, Some(crate::map::IGNORE_INDEX))
    }

    pub fn n_classes(&self) -> usize {
        self.n_cl
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    #[inline]
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_cl + pred]
    }

    /// Total true pixels of class `i` among counted pixels.
    pub fn t(&self, i: usize) -> u64 {
        (0..self.n_cl).map(|j| self.count(i, j)).sum()
    }

    /// Column sum: pixels of any class predicted as `i`.
    pub fn col(&self, i: usize) -> u64 {
        (0..self.n_cl).map(|j| self.count(j, i)).sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one `(truth, prediction)` pixel-map pair. Pixels whose truth is
    /// the ignore id are skipped; an out-of-range id in either map is an
    /// error. Accumulation is associative across images.
    pub fn accumulate(&mut self, truth: &ClassMap, pred: &ClassMap) -> Result<()> {
        if truth.h != pred.h || truth.w != pred.w {
            return Err(Error::Validation(format!(
                "accumulate: truth {}x{} vs prediction {}x{}",
                truth.h, truth.w, pred.h, pred.w
            )));
        }
        for (&t, &p) in truth.data.iter().zip(&pred.data) {
            if Some(t) == self.ignore {
                continue;
            }
            if (t as usize) >= self.n_cl {
                return Err(Error::Validation(format!(
                    "accumulate: truth class {t} out of range for {} classes",
                    self.n_cl
                )));
            }
            if (p as usize) >= self.n_cl {
                return Err(Error::Validation(format!(
                    "accumulate: predicted class {p} out of range for {} classes",
                    self.n_cl
                )));
            }
            self.counts[t as usize * self.n_cl + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge by summation (deterministic regardless of merge order).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n_cl != other.n_cl {
            return Err(Error::Validation(format!(
                "merge: {} vs {} classes",
                self.n_cl, other.n_cl
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.grand_total() == 0 {
            return Err(Error::UndefinedMetric(format!("{what} on an empty confusion matrix")));
        }
        Ok(())
    }

    /// `sum_i n_ii / sum_i t_i`
    pub fn pixel_accuracy(&self) -> Result<BigRational> {
        self.require_nonempty("pixel_accuracy")?;
        let diag: u64 = (0..self.n_cl).map(|i| self.count(i, i)).sum();
        Ok(ratio(diag, self.grand_total()))
    }

    /// `n_ii / t_i`; `None` when the class has no true pixels.
    pub fn class_pixel_accuracy(&self, i: usize) -> Result<Option<BigRational>> {
        self.require_nonempty("class_pixel_accuracy")?;
        let t = self.t(i);
        Ok((t > 0).then(|| ratio(self.count(i, i), t)))
    }

    /// Mean of per-class accuracy over classes present in the truth.
    pub fn mean_accuracy(&self) -> Result<BigRational> {
        self.require_nonempty("mean_accuracy")?;
        let mut sum = BigRational::zero();
        let mut present = 0u64;
        for i in 0..self.n_cl {
            if let Some(a) = self.class_pixel_accuracy(i)? {
                sum += a;
                present += 1;
            }
        }
        if present == 0 {
            return Err(Error::UndefinedMetric("mean_accuracy: no class present".into()));
        }
        Ok(sum / BigRational::from(BigInt::from(present)))
    }

    /// `n_ii / (t_i + col_i - n_ii)`; `None` when the union is empty.
    pub fn iou(&self, i: usize) -> Result<Option<BigRational>> {
        self.require_nonempty("iou")?;
        let union = self.t(i) + self.col(i) - self.count(i, i);
        Ok((union > 0).then(|| ratio(self.count(i, i), union)))
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn mean_iou(&self) -> Result<BigRational> {
        self.require_nonempty("mean_iou")?;
        let mut sum = BigRational::zero();
        let mut present = 0u64;
        for i in 0..self.n_cl {
            if let Some(v) = self.iou(i)? {
                sum += v;
                present += 1;
            }
        }
        if present == 0 {
            return Err(Error::UndefinedMetric("mean_iou: no class present".into()));
        }
        Ok(sum / BigRational::from(BigInt::from(present)))
    }

    /// `(1 / sum_k t_k) * sum_i t_i * IoU_i`
    pub fn fw_iou(&self) -> Result<BigRational> {
        self.require_nonempty("fw_iou")?;
        let mut sum = BigRational::zero();
        for i in 0..self.n_cl {
            let t = self.t(i);
            if t == 0 {
                continue;
            }
            if let Some(v) = self.iou(i)? {
                sum += BigRational::from(BigInt::from(t)) * v;
            }
        }
        Ok(sum / BigRational::from(BigInt::from(self.grand_total())))
    }

    pub fn pixel_accuracy_f64(&self) -> Result<f64> {
        Ok(self.pixel_accuracy()?.to_f64().unwrap())
    }

    pub fn mean_accuracy_f64(&self) -> Result<f64> {
        Ok(self.mean_accuracy()?.to_f64().unwrap())
    }

    pub fn iou_f64(&self, i: usize) -> Result<Option<f64>> {
        Ok(self.iou(i)?.map(|v| v.to_f64().unwrap()))
    }

    pub fn mean_iou_f64(&self) -> Result<f64> {
        Ok(self.mean_iou()?.to_f64().unwrap())
    }

    pub fn fw_iou_f64(&self) -> Result<f64> {
        Ok(self.fw_iou()?.to_f64().unwrap())
    }

    /// CSV report: one row per class (name, t_i, CP_acc, IoU) plus a summary
    /// row (P_acc, mCP_acc, mIoU, FWIoU). Absent classes print empty cells.
    pub fn to_csv(&self) -> Result<String> {
        self.require_nonempty("metric report")?;
        let mut out = String::from("class,true_pixels,class_pixel_accuracy,iou\n");
        for i in 0..self.n_cl {
            let cp = self
                .class_pixel_accuracy(i)?
                .map(|v| format!("{:.6}", v.to_f64().unwrap()))
                .unwrap_or_default();
            let iou = self
                .iou(i)?
                .map(|v| format!("{:.6}", v.to_f64().unwrap()))
                .unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", self.class_names[i], self.t(i), cp, iou));
        }
        out.push_str("summary,pixel_accuracy,mean_accuracy,mean_iou,fw_iou\n");
        out.push_str(&format!(
            "all,{:.6},{:.6},{:.6},{:.6}\n",
            self.pixel_accuracy_f64()?,
            self.mean_accuracy_f64()?,
            self.mean_iou_f64()?,
            self.fw_iou_f64()?
        ));
        Ok(out)
    }
}
