use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::map::ClassMap;

/// Loss value and the logits gradient of one cross-entropy evaluation.
pub struct CrossEntropy<T: Element> {
    /// Mean of `-log softmax(logit_label)` over counted pixels.
    pub loss: f64,
    /// `(softmax - one_hot) / count` at counted pixels, zero elsewhere.
    pub grad: Tensor<T>,
    /// Number of non-ignored pixels.
    pub counted: usize,
}

/// Per-pixel softmax cross-entropy over `(n, classes, h, w)` logits and one
/// label map per batch item. Pixels labeled `ignore` contribute neither loss
/// nor gradient. Stabilized by max-subtraction; the loss accumulates in f64.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[ClassMap],
    ignore: Option<u8>,
) -> Result<CrossEntropy<T>> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(Error::Dimension(format!(
            "softmax_cross_entropy: {} label maps for batch of {}",
            labels.len(),
            s.n
        )));
    }
    for (i, m) in labels.iter().enumerate() {
        if m.h != s.h || m.w != s.w {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: label map {i} is {}x{}, logits are {}x{}",
                m.h, m.w, s.h, s.w
            )));
        }
        for &v in &m.data {
            if Some(v) == ignore {
                continue;
            }
            if (v as usize) >= s.c {
                return Err(Error::Validation(format!(
                    "softmax_cross_entropy: label {v} out of range for {} classes (map {i})",
                    s.c
                )));
            }
        }
    }
    logits.debug_assert_finite("softmax_cross_entropy logits");

    let plane = s.h * s.w;
    let mut count = 0usize;
    for m in labels {
        count += m.data.iter().filter(|&&v| Some(v) != ignore).count();
    }

    let mut grad = Tensor::zeros(s);
    if count == 0 {
        return Ok(CrossEntropy { loss: 0.0, grad, counted: 0 });
    }
    let inv_count = 1.0 / count as f64;

    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; s.c];
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = labels[n].at(y, x);
                if Some(label) == ignore {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for c in 0..s.c {
                    max = max.max(logits.data()[(n * s.c + c) * plane + y * s.w + x].as_f64());
                }
                let mut denom = 0.0f64;
                for c in 0..s.c {
                    let e = (logits.data()[(n * s.c + c) * plane + y * s.w + x].as_f64() - max)
                        .exp();
                    probs[c] = e;
                    denom += e;
                }
                let p_label = probs[label as usize] / denom;
                total -= p_label.ln();
                for c in 0..s.c {
                    let one_hot = if c == label as usize { 1.0 } else { 0.0 };
                    grad.data_mut()[(n * s.c + c) * plane + y * s.w + x] =
                        T::from_f64((probs[c] / denom - one_hot) * inv_count);
                }
            }
        }
    }

    Ok(CrossEntropy { loss: total * inv_count, grad, counted: count })
}
