use crate::scalar::Scalar;

/// Per-pixel argmax of class-major logits `[K x N]`. Ties pick the lowest class.
pub fn argmax_labels<T: Scalar>(logits: &[T], num_classes: usize) -> Vec<usize> {
    let n = logits.len() / num_classes;
    (0..n)
        .map(|px| {
            (1..num_classes).fold(0, |best, c| if logits[c * n + px] > logits[best * n + px] { c } else { best })
        })
        .collect()
}

/// Confusion counts, `counts[truth * K + predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, predicted: &[usize], truth: &[usize]) {
        for (&p, &t) in predicted.iter().zip(truth) {
            self.counts[t * self.num_classes + p] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes).map(|c| self.counts[c * self.num_classes + c]).sum();
        match self.total() {
            0 => 0.0,
            n => correct as f64 / n as f64,
        }
    }

    /// IoU averaged over classes that occur in either truth or prediction.
    pub fn mean_iou(&self) -> f64 {
        let k = self.num_classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let truth: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            let union = truth + pred - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}
