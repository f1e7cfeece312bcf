//! Shared fixtures for the benchmarks.

use tkto_core::data::generate;
use tkto_core::recipe::Recipe;
use tkto_core::{Dataset, Model, TaskConfig};

pub struct Fixture {
    pub task: TaskConfig,
    pub data: Dataset,
    pub policy: Model,
    pub reference: Model,
}

/// A warm-started policy, the same model frozen as reference, and
/// `n` samples per label.
pub fn fixture(n: usize) -> Fixture {
    let recipe = Recipe {
        corpus_size: 320,
        ..Recipe::with_seed(0)
    };
    let policy = recipe.warm_model().expect("warm start");
    let reference = policy.snapshot();
    Fixture {
        data: generate(&recipe.task, n, n, 1).expect("data"),
        task: recipe.task,
        policy,
        reference,
    }
}
