//! Per-class FIFO memory banks of unit-norm teacher features harvested from
//! labeled images.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{dot, Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<F> {
    num_classes: usize,
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<Vec<F>>>,
}

impl<F: Real> MemoryBank<F> {
    pub fn new(num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes", "must be >= 1"));
        }
        if capacity == 0 {
            return Err(Error::config("bank_capacity", "must be >= 1"));
        }
        if dim == 0 {
            return Err(Error::config("bank_dim", "must be >= 1"));
        }
        Ok(MemoryBank {
            num_classes,
            capacity,
            dim,
            queues: (0..num_classes).map(|_| VecDeque::with_capacity(capacity)).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn queue(&self, class: usize) -> &VecDeque<Vec<F>> {
        &self.queues[class]
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Appends in order, evicting the oldest entries beyond capacity.
    pub fn push<V: AsRef<[F]>>(&mut self, class: usize, features: &[V]) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::shape(format!(
                "class {class} out of range for {} queues",
                self.num_classes
            )));
        }
        let tol = F::lit(1e-4);
        for f in features {
            let f = f.as_ref();
            if f.len() != self.dim {
                return Err(Error::shape(format!(
                    "feature dim {} does not match bank dim {}",
                    f.len(),
                    self.dim
                )));
            }
            if (dot(f, f).sqrt() - F::one()).abs() > tol {
                return Err(Error::shape("bank entries must be unit norm"));
            }
        }
        let q = &mut self.queues[class];
        for f in features {
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(f.as_ref().to_vec());
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.queues.iter().all(|q| q.len() == self.capacity)
    }

    pub fn fill_fractions(&self) -> Vec<f64> {
        self.queues
            .iter()
            .map(|q| q.len() as f64 / self.capacity as f64)
            .collect()
    }

    /// Every queue except `class`, concatenated in class order.
    pub fn negatives(&self, class: usize) -> Vec<&[F]> {
        self.queues
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != class)
            .flat_map(|(_, q)| q.iter().map(Vec::as_slice))
            .collect()
    }

    /// All entries stacked class by class, with the class of each row.
    pub fn stacked(&self) -> (Matrix<F>, Vec<usize>) {
        let mut data = Vec::with_capacity(self.total_len() * self.dim);
        let mut classes = Vec::with_capacity(self.total_len());
        for (c, q) in self.queues.iter().enumerate() {
            for v in q {
                data.extend_from_slice(v);
                classes.push(c);
            }
        }
        let rows = classes.len();
        (
            Matrix::from_vec(rows, self.dim, data).expect("consistent bank dims"),
            classes,
        )
    }

    pub fn cast<G: Real>(&self) -> MemoryBank<G> {
        MemoryBank {
            num_classes: self.num_classes,
            capacity: self.capacity,
            dim: self.dim,
            queues: self
                .queues
                .iter()
                .map(|q| {
                    q.iter()
                        .map(|v| v.iter().map(|x| G::lit(x.to_f64_lossy())).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

/// `max(1, floor(n_labeled / capacity))`.
pub fn compute_k(n_labeled: usize, capacity: usize) -> Result<usize> {
    if n_labeled == 0 || capacity == 0 {
        return Err(Error::config("compute_k", "arguments must be >= 1"));
    }
    Ok((n_labeled / capacity).max(1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// k uniformly drawn among the qualifying pixels.
    #[default]
    Random,
    /// The k most confident qualifying pixels.
    Topk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateFeature<F> {
    pub vector: Vec<F>,
    pub class: usize,
    pub confidence: F,
    /// Row of the source pixel in the forward output.
    pub pixel: usize,
}

/// Teacher features whose prediction agrees with the (feature-resolution)
/// ground truth, at most `k` per class, L2-normalized.
pub fn select_candidates<F: Real, R: Rng + ?Sized>(
    teacher_out: &ForwardOutput<F>,
    gt: &[u8],
    k: usize,
    selection: Selection,
    rng: &mut R,
) -> Result<Vec<Vec<CandidateFeature<F>>>> {
    if gt.len() != teacher_out.pixels() {
        return Err(Error::shape(format!(
            "labels have {} pixels, features {}",
            gt.len(),
            teacher_out.pixels()
        )));
    }
    let nc = teacher_out.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (i, (&g, &p)) in gt.iter().zip(&teacher_out.hard_labels).enumerate() {
        if g != IGNORE && g == p && (g as usize) < nc {
            by_class[g as usize].push(i);
        }
    }
    let mut out = Vec::with_capacity(nc);
    for (c, mut pix) in by_class.into_iter().enumerate() {
        if pix.len() > k {
            pix = match selection {
                Selection::Random => {
                    let mut chosen: Vec<usize> = index::sample(rng, pix.len(), k)
                        .into_iter()
                        .map(|j| pix[j])
                        .collect();
                    chosen.sort_unstable();
                    chosen
                }
                Selection::Topk => {
                    let conf = &teacher_out.confidence;
                    pix.sort_by(|&a, &b| {
                        conf[b]
                            .partial_cmp(&conf[a])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.cmp(&b))
                    });
                    pix.truncate(k);
                    pix
                }
            };
        }
        out.push(
            pix.into_iter()
                .map(|i| {
                    let raw = teacher_out.features.row(i);
                    let n = dot(raw, raw).sqrt().max(F::lit(1e-12));
                    CandidateFeature {
                        vector: raw.iter().map(|&v| v / n).collect(),
                        class: c,
                        confidence: teacher_out.confidence[i],
                        pixel: i,
                    }
                })
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize, hot: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[hot % d] = 1.0;
        v
    }

    fn fake_output(hard: Vec<u8>, conf: Vec<f64>, nc: usize) -> ForwardOutput<f64> {
        let n = hard.len();
        let d = 4;
        let features = Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|i| 1.0 + (i % 7) as f64).collect(),
        )
        .unwrap();
        ForwardOutput {
            batch: 1,
            height: 1,
            width: n,
            features,
            logits: Matrix::zeros(n, nc),
            probs: Matrix::zeros(n, nc),
            confidence: conf,
            hard_labels: hard,
        }
    }

    #[test]
    fn new_bank_shapes() {
        let b = MemoryBank::<f32>::new(19, 128, 64).unwrap();
        assert_eq!(b.num_classes(), 19);
        assert_eq!(b.total_len(), 0);
        assert!(!b.is_full());
        assert!(MemoryBank::<f32>::new(2, 1, 4).is_ok());
        assert!(matches!(MemoryBank::<f32>::new(0, 1, 4), Err(Error::Config { .. })));
    }

    #[test]
    fn k_values() {
        assert_eq!(compute_k(100, 128).unwrap(), 1);
        assert_eq!(compute_k(2975, 128).unwrap(), 23);
        assert_eq!(compute_k(128, 128).unwrap(), 1);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = MemoryBank::<f64>::new(2, 4, 6).unwrap();
        b.push(0, &[unit(6, 0)]).unwrap();
        assert_eq!(b.len(0), 1);
        for i in 1..5 {
            b.push(0, &[unit(6, i)]).unwrap();
        }
        let got: Vec<_> = b.queue(0).iter().cloned().collect();
        assert_eq!(got, (1..5).map(|i| unit(6, i)).collect::<Vec<_>>());

        let mut b = MemoryBank::<f64>::new(2, 4, 6).unwrap();
        let batch: Vec<_> = (0..6).map(|i| unit(6, i)).collect();
        b.push(1, &batch).unwrap();
        let got: Vec<_> = b.queue(1).iter().cloned().collect();
        assert_eq!(got, batch[2..].to_vec());
    }

    #[test]
    fn push_rejects_wrong_dim() {
        let mut b = MemoryBank::<f64>::new(2, 4, 6).unwrap();
        assert!(matches!(b.push(0, &[unit(5, 0)]), Err(Error::Shape(_))));
    }

    #[test]
    fn fullness_and_negatives() {
        let mut b = MemoryBank::<f64>::new(3, 4, 3).unwrap();
        assert!(b.negatives(0).is_empty());
        for c in 0..3 {
            b.push(c, &(0..4).map(|i| unit(3, i + c)).collect::<Vec<_>>()).unwrap();
        }
        assert!(b.is_full());
        assert_eq!(b.negatives(1).len(), 8);

        let mut b2 = MemoryBank::<f64>::new(2, 4, 3).unwrap();
        b2.push(0, &(0..4).map(|i| unit(3, i)).collect::<Vec<_>>()).unwrap();
        b2.push(1, &(0..3).map(|i| unit(3, i)).collect::<Vec<_>>()).unwrap();
        assert!(!b2.is_full());
        let neg: Vec<Vec<f64>> = b2.negatives(0).into_iter().map(<[f64]>::to_vec).collect();
        assert_eq!(neg, b2.queue(1).iter().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn all_wrong_predictions_give_no_candidates() {
        let out = fake_output(vec![1, 1, 0, 0], vec![0.9; 4], 2);
        let gt = vec![0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = select_candidates(&out, &gt, 5, Selection::Random, &mut rng).unwrap();
        assert!(c.iter().all(Vec::is_empty));
    }

    #[test]
    fn fewer_than_k_keeps_all_and_normalizes() {
        let out = fake_output(vec![1, 1, 1, 0], vec![0.9; 4], 2);
        let gt = vec![1, 1, 1, IGNORE];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = select_candidates(&out, &gt, 5, Selection::Random, &mut rng).unwrap();
        assert_eq!(c[1].len(), 3);
        assert!(c[0].is_empty());
        for f in &c[1] {
            assert!((dot(&f.vector, &f.vector) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn more_than_k_draws_k_from_the_candidates() {
        let mut hard = vec![1u8; 10];
        hard.extend([0, 0]);
        let mut gt = vec![1u8; 10];
        gt.extend([1, 1]);
        let conf: Vec<f64> = (0..12).map(|i| 0.5 + i as f64 / 30.0).collect();
        let out = fake_output(hard, conf, 2);
        // brute-force candidate set: pixels where prediction == gt == 1
        let valid: Vec<usize> = (0..12).filter(|&i| out.hard_labels[i] == gt[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = select_candidates(&out, &gt, 2, Selection::Random, &mut rng).unwrap();
        assert_eq!(c[1].len(), 2);
        assert!(c[1].iter().all(|f| valid.contains(&f.pixel)));
        assert_ne!(c[1][0].pixel, c[1][1].pixel);

        let top = select_candidates(&out, &gt, 2, Selection::Topk, &mut rng).unwrap();
        let picked: Vec<usize> = top[1].iter().map(|f| f.pixel).collect();
        assert_eq!(picked, vec![9, 8]);
    }
}
