use crate::error::{Result, SceneError};
use crate::scene::{render_scene, Sample};
use crate::spec::{DatasetSpec, Task};

/// Rendered samples of one split.
///
/// Full ground truth is always kept. [`Dataset::train_view`] hides the tasks
/// its `DatasetSpec` does not label; [`Dataset::eval_view`] exposes everything.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self, task: Task) -> bool {
        self.spec.labels(task)
    }

    fn get(&self, index: usize) -> Result<&Sample> {
        self.samples.get(index).ok_or(SceneError::IndexOutOfRange { index, size: self.samples.len() })
    }

    pub fn train_view(&self, index: usize) -> Result<Sample> {
        let s = self.get(index)?;
        Ok(Sample {
            image: s.image.clone(),
            seg: if self.labels(Task::Seg) { s.seg.clone() } else { None },
            inv_depth: if self.labels(Task::Depth) { s.inv_depth.clone() } else { None },
        })
    }

    pub fn eval_view(&self, index: usize) -> Result<&Sample> {
        self.get(index)
    }

    /// Wraps already-rendered samples (for example, loaded from disk).
    pub fn from_samples(spec: DatasetSpec, samples: Vec<Sample>) -> Result<Self> {
        spec.validate()?;
        if samples.len() != spec.size {
            return Err(SceneError::InvalidSpec(format!("spec declares {} samples, got {}", spec.size, samples.len())));
        }
        Ok(Self { spec, samples })
    }
}

/// Renders every training sample of `spec`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.size).map(|i| render_scene(spec, i)).collect::<Result<_>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}

/// Renders the held-out split of `spec`.
pub fn make_test_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    make_dataset(&spec.test_split())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::DomainConfig;

    fn small(tasks: &[Task]) -> DatasetSpec {
        let mut s = DatasetSpec::new("d", DomainConfig::neutral(1), tasks, 5);
        s.size = 4;
        s.test_size = 3;
        s
    }

    #[test]
    fn views_respect_labeled_tasks() {
        let ds = make_dataset(&small(&[Task::Seg])).unwrap();
        let tv = ds.train_view(0).unwrap();
        assert!(tv.seg.is_some() && tv.inv_depth.is_none());
        let ev = ds.eval_view(0).unwrap();
        assert!(ev.seg.is_some() && ev.inv_depth.is_some());

        let ds = make_dataset(&small(&[Task::Seg, Task::Depth])).unwrap();
        let tv = ds.train_view(1).unwrap();
        assert!(tv.seg.is_some() && tv.inv_depth.is_some());
    }

    #[test]
    fn test_split_differs() {
        let spec = small(&[Task::Depth]);
        let train = make_dataset(&spec).unwrap();
        let test = make_test_dataset(&spec).unwrap();
        assert_eq!(test.len(), 3);
        assert_ne!(train.eval_view(0).unwrap().image, test.eval_view(0).unwrap().image);
        assert!(train.train_view(4).is_err());
    }
}
