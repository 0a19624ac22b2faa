use super::preprocess::split_counts;
use super::trajectory::TrajectorySet;

/// A named trajectory set with its mixture weight. The last tenth of its
/// trajectories is held out for evaluation.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub name: String,
    pub set: TrajectorySet,
    pub weight: f64,
}

impl TrainingSet {
    pub fn new(name: impl Into<String>, set: TrajectorySet, weight: f64) -> Self {
        TrainingSet { name: name.into(), set, weight }
    }

    /// `(train, held_out)` trajectory counts.
    pub fn split(&self) -> (usize, usize) {
        split_counts(self.set.dims().n)
    }

    /// Indices of held-out trajectories.
    pub fn held_out(&self) -> std::ops::Range<usize> {
        let (train, held) = self.split();
        train..train + held
    }
}
