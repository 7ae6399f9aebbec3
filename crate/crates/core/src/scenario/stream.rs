use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// One incremental step: a group of new classes and their samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    pub classes: Vec<usize>,
    pub train_samples: Vec<usize>,
    pub test_samples: Vec<usize>,
}

impl Task {
    pub fn num_train(&self) -> usize {
        self.train_samples.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub seed: u64,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task `t` (1-based).
    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t - 1]
    }

    /// Classes of tasks `1..=t` in stream order.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..t]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.seen_classes(self.tasks.len())
    }
}

/// Shuffles the class ids with a seeded RNG and cuts them into `num_tasks`
/// contiguous groups; when the count does not divide evenly the earliest
/// tasks take one extra class each.
pub fn build_stream(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    let k = dataset.num_classes();
    if num_tasks < 1 || num_tasks > k {
        return Err(Error::InvalidSplit(format!(
            "{num_tasks} tasks requested for {k} classes"
        )));
    }
    let mut order: Vec<usize> = dataset.classes().iter().map(|c| c.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = k / num_tasks;
    let extra = k % num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut at = 0;
    for t in 0..num_tasks {
        let size = base + usize::from(t < extra);
        let classes = order[at..at + size].to_vec();
        at += size;
        let pick = |split: Split| {
            dataset
                .samples()
                .iter()
                .filter(|s| s.split == split && classes.contains(&s.label))
                .map(|s| s.sample_id)
                .collect::<Vec<_>>()
        };
        tasks.push(Task {
            index: t + 1,
            train_samples: pick(Split::Train),
            test_samples: pick(Split::Test),
            classes,
        });
    }
    Ok(TaskStream { tasks, seed })
}
