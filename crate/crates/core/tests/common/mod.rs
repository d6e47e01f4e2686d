#![allow(dead_code)]

use fluid_exit::model::GeneratorSpec;
use fluid_exit::{validate_model, ModelSpec, ValidatedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn two_state(g: [[f64; 2]; 2]) -> ValidatedModel {
    validate_model(&ModelSpec::constant(["u", "d"], &[1.0, -1.0], &g)).unwrap()
}

/// `Λ = [[-2, 1], [1, -2]]`, unit speeds: killing rate 1 in both states.
pub fn killed() -> ValidatedModel {
    two_state([[-2.0, 1.0], [1.0, -2.0]])
}

/// `Λ = [[-1, 1], [1, -1]]`, unit speeds, no killing and no drift.
pub fn conservative() -> ValidatedModel {
    two_state([[-1.0, 1.0], [1.0, -1.0]])
}

/// Conservative on `[0, 1)`, killed from `t = 1` on.
pub fn switching() -> ValidatedModel {
    let spec = ModelSpec {
        states: vec!["u".into(), "d".into()],
        velocities: vec![1.0, -1.0],
        generator: GeneratorSpec::Piecewise {
            breakpoints: vec![1.0],
            matrices: vec![
                vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
                vec![vec![-2.0, 1.0], vec![1.0, -2.0]],
            ],
        },
    };
    validate_model(&spec).unwrap()
}

/// Random homogeneous model with `2..=max_states` states, both velocity
/// signs, and a killing rate of at least `min_kill` in every state.
pub fn random_model(rng: &mut ChaCha8Rng, max_states: usize, min_kill: f64) -> ValidatedModel {
    let m = rng.random_range(2..=max_states);
    let split = rng.random_range(1..m);
    let mut velocities: Vec<f64> = (0..m)
        .map(|i| {
            let speed = rng.random_range(0.2..2.0);
            if i < split {
                speed
            } else {
                -speed
            }
        })
        .collect();
    // mix the signs through the state order
    velocities.rotate_left(rng.random_range(0..m));
    let mut rows = vec![vec![0.0; m]; m];
    for (i, row) in rows.iter_mut().enumerate() {
        let mut out = 0.0;
        for (j, r) in row.iter_mut().enumerate() {
            if i != j {
                *r = rng.random_range(0.0..2.0);
                out += *r;
            }
        }
        row[i] = -(out + min_kill + rng.random_range(0.0..1.0));
    }
    let states: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
    validate_model(&ModelSpec::constant(states, &velocities, &rows)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
