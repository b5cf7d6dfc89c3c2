//! Round-robin mini-batches over several datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

use crate::dataset::Dataset;
use crate::error::{Result, SceneError};
use crate::scene::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

/// Serializable iteration state; the datasets themselves are passed to
/// [`BatchIterator::next_batch`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchIterator {
    batch_size: usize,
    augment: bool,
    cursors: Vec<Cursor>,
    next: usize,
    served: Vec<u64>,
    rng: ChaCha8Rng,
}

/// Stacked training views of one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// 1-based position of the source dataset.
    pub dataset_id: usize,
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
    /// `B x 3 x H x W`.
    pub images: Tensor,
    /// `B x H x W` class indices, when the dataset labels segmentation.
    pub seg: Option<Vec<usize>>,
    /// `B x 1 x H x W`, when the dataset labels depth.
    pub inv_depth: Option<Tensor>,
}

fn flip_rows(data: &mut [f64], width: usize) {
    data.chunks_mut(width).for_each(<[f64]>::reverse);
}

impl BatchIterator {
    pub fn new(datasets: &[Dataset], batch_size: usize, seed: u64, augment: bool) -> Result<Self> {
        if datasets.is_empty() {
            return Err(SceneError::InvalidSpec("batch iterator needs at least one dataset".into()));
        }
        if batch_size == 0 {
            return Err(SceneError::InvalidSpec("batch size must be positive".into()));
        }
        for ds in datasets {
            if batch_size > ds.len() {
                return Err(SceneError::BatchTooLarge {
                    batch: batch_size,
                    dataset: ds.spec().name.clone(),
                    size: ds.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cursors = datasets
            .iter()
            .map(|ds| {
                let mut order: Vec<usize> = (0..ds.len()).collect();
                order.shuffle(&mut rng);
                Cursor { order, pos: 0, epoch: 0 }
            })
            .collect();
        Ok(Self { batch_size, augment, cursors, next: 0, served: vec![0; datasets.len()], rng })
    }

    pub fn num_datasets(&self) -> usize {
        self.cursors.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches served so far, per dataset.
    pub fn served(&self) -> &[u64] {
        &self.served
    }

    pub fn epoch(&self, dataset: usize) -> u64 {
        self.cursors[dataset].epoch
    }

    /// Advances the state and returns `(dataset_id, indices, flips)` without
    /// touching sample data.
    pub fn next_indices(&mut self) -> (usize, Vec<usize>, Vec<bool>) {
        let k = self.next;
        self.next = (self.next + 1) % self.cursors.len();
        self.served[k] += 1;
        let mut indices = Vec::with_capacity(self.batch_size);
        let mut flips = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let cur = &mut self.cursors[k];
            if cur.pos == cur.order.len() {
                cur.order.shuffle(&mut self.rng);
                cur.pos = 0;
                cur.epoch += 1;
            }
            let cur = &mut self.cursors[k];
            indices.push(cur.order[cur.pos]);
            cur.pos += 1;
            flips.push(self.augment && self.rng.random_bool(0.5));
        }
        (k + 1, indices, flips)
    }

    pub fn next_batch(&mut self, datasets: &[Dataset]) -> Result<Batch> {
        if datasets.len() != self.cursors.len() {
            return Err(SceneError::InvalidSpec(format!(
                "iterator built for {} datasets, given {}",
                self.cursors.len(),
                datasets.len()
            )));
        }
        let (dataset_id, indices, flipped) = self.next_indices();
        let ds = &datasets[dataset_id - 1];
        let views: Vec<Sample> = indices.iter().map(|&i| ds.train_view(i)).collect::<Result<_>>()?;
        assemble(dataset_id, indices, flipped, &views)
    }
}

/// Stacks samples into a batch, mirroring the flagged ones left to right.
pub fn assemble(dataset_id: usize, indices: Vec<usize>, flipped: Vec<bool>, views: &[Sample]) -> Result<Batch> {
    let width = views[0].image.shape()[2];
    let mut images = Vec::with_capacity(views.len());
    let mut seg: Option<Vec<usize>> = views[0].seg.as_ref().map(|_| Vec::new());
    let mut depth = views[0].inv_depth.as_ref().map(|_| Vec::new());
    for (s, &flip) in views.iter().zip(&flipped) {
        let mut img = s.image.clone();
        if flip {
            flip_rows(img.data_mut(), width);
        }
        images.push(img);
        if let (Some(out), Some(lbl)) = (seg.as_mut(), s.seg.as_ref()) {
            let start = out.len();
            out.extend(lbl.iter().map(|&c| c as usize));
            if flip {
                out[start..].chunks_mut(width).for_each(<[usize]>::reverse);
            }
        }
        if let (Some(out), Some(d)) = (depth.as_mut(), s.inv_depth.as_ref()) {
            let mut d = d.clone();
            if flip {
                flip_rows(d.data_mut(), width);
            }
            out.push(d);
        }
    }
    Ok(Batch {
        dataset_id,
        indices,
        flipped,
        images: Tensor::stack(&images)?,
        seg,
        inv_depth: depth.map(|d| Tensor::stack(&d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_dataset;
    use crate::spec::{DatasetSpec, DomainConfig, Task};

    fn datasets(sizes: &[usize]) -> Vec<Dataset> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let task = if i % 2 == 0 { Task::Seg } else { Task::Depth };
                let mut s = DatasetSpec::new(&format!("d{i}"), DomainConfig::neutral(i as u32 + 1), &[task], i as u64);
                s.size = n;
                make_dataset(&s).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_robin_ids() {
        let ds = datasets(&[6, 6]);
        let mut it = BatchIterator::new(&ds, 2, 1, false).unwrap();
        let ids: Vec<usize> = (0..6).map(|_| it.next_batch(&ds).unwrap().dataset_id).collect();
        assert_eq!(ids, [1, 2, 1, 2, 1, 2]);
    }

    #[test]
    fn batch_shapes_and_labels() {
        let ds = datasets(&[8, 8]);
        let mut it = BatchIterator::new(&ds, 4, 1, true).unwrap();
        let a = it.next_batch(&ds).unwrap();
        assert_eq!(a.images.shape(), &[4, 3, 32, 32]);
        assert_eq!(a.seg.as_ref().unwrap().len(), 4 * 32 * 32);
        assert!(a.inv_depth.is_none());
        let b = it.next_batch(&ds).unwrap();
        assert!(b.seg.is_none());
        assert_eq!(b.inv_depth.unwrap().shape(), &[4, 1, 32, 32]);
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        let ds = datasets(&[3, 8]);
        assert!(matches!(BatchIterator::new(&ds, 4, 0, false), Err(SceneError::BatchTooLarge { .. })));
    }

    #[test]
    fn flip_mirrors_image_and_labels() {
        let ds = datasets(&[2]);
        let s = ds[0].train_view(0).unwrap();
        let b = assemble(1, vec![0], vec![true], std::slice::from_ref(&s)).unwrap();
        let n = 32;
        for y in [0, 10, 31] {
            for x in [0, 5, 31] {
                assert_eq!(b.images.data()[y * n + x], s.image.data()[y * n + (n - 1 - x)]);
                assert_eq!(b.seg.as_ref().unwrap()[y * n + x], s.seg.as_ref().unwrap()[y * n + (n - 1 - x)] as usize);
            }
        }
    }
}
