use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SceneError};

/// Dense prediction tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Seg,
    Depth,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Seg, Task::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Depth => "depth",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const CLASS_SKY: u32 = 0;
pub const CLASS_GROUND: u32 = 1;
pub const CLASS_BOX: u32 = 2;
pub const CLASS_DISK: u32 = 3;

/// Appearance knobs that separate one domain from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain_id: u32,
    /// Additive per-channel color offset, each in [-0.3, 0.3].
    pub palette_shift: [f64; 3],
    pub noise_sigma: f64,
    /// Mean object count per scene.
    pub object_density: f64,
    /// Multiplicative gain in [0.5, 1.5].
    pub illumination_gain: f64,
}

impl DomainConfig {
    pub fn neutral(domain_id: u32) -> Self {
        Self { domain_id, palette_shift: [0.0; 3], noise_sigma: 0.02, object_density: 3.0, illumination_gain: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.domain_id < 1 {
            return bad("domain_id must be >= 1".into());
        }
        if self.palette_shift.iter().any(|s| !(-0.3..=0.3).contains(s)) {
            return bad(format!("palette_shift {:?} outside [-0.3, 0.3]", self.palette_shift));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.object_density >= 0.0 && self.object_density <= 16.0) {
            return bad(format!("object_density must be in [0, 16], got {}", self.object_density));
        }
        if !(0.5..=1.5).contains(&self.illumination_gain) {
            return bad(format!("illumination_gain {} outside [0.5, 1.5]", self.illumination_gain));
        }
        Ok(())
    }
}

fn default_image_size() -> usize {
    32
}

fn default_num_classes() -> usize {
    4
}

fn default_test_size() -> usize {
    128
}

/// One dataset: a domain, a sample count, and which tasks it annotates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub domain: DomainConfig,
    pub size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    pub labeled_tasks: BTreeSet<Task>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub seed: u64,
}

/// Mixed into the seed of the held-out split.
const TEST_SEED_SALT: u64 = 0x5DEE_CE66_D1CE_4E5B;

impl DatasetSpec {
    pub fn new(name: &str, domain: DomainConfig, labeled_tasks: &[Task], seed: u64) -> Self {
        Self {
            name: name.to_string(),
            domain,
            size: 512,
            test_size: default_test_size(),
            labeled_tasks: labeled_tasks.iter().copied().collect(),
            image_size: default_image_size(),
            num_classes: default_num_classes(),
            seed,
        }
    }

    pub fn labels(&self, task: Task) -> bool {
        self.labeled_tasks.contains(&task)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.labeled_tasks.is_empty() {
            return bad(format!("dataset {:?} labels no task", self.name));
        }
        if self.size < 1 || self.test_size < 1 {
            return bad(format!("dataset {:?} needs at least one sample per split", self.name));
        }
        if !(8..=256).contains(&self.image_size) {
            return bad(format!("image_size {} outside [8, 256]", self.image_size));
        }
        if !(2..=8).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside [2, 8]", self.num_classes));
        }
        if self.num_classes < 3 && self.domain.object_density > 0.0 {
            return bad("objects need at least 3 classes".into());
        }
        Ok(())
    }

    /// The held-out split: same domain, `test_size` samples, derived seed.
    pub fn test_split(&self) -> DatasetSpec {
        DatasetSpec {
            name: format!("{}-test", self.name),
            size: self.test_size,
            seed: self.seed ^ TEST_SEED_SALT,
            ..self.clone()
        }
    }
}
