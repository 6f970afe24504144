//! Initial states from eigenmode coefficients.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wave_plate_core::dynamics::State;
use wave_plate_core::operators::Mode;
use wave_plate_core::DiscreteOperators;

use crate::config::{Component, ConfigError, InitialData, Preset};

const DEFAULT_RANDOM_MODES: usize = 8;

fn combine(modes: &[Mode], coeffs: &[f64], len: usize, what: &str) -> Result<DVector<f64>, ConfigError> {
    if coeffs.len() > modes.len() {
        return Err(ConfigError::Invalid(format!(
            "initial: {} coefficients for `{what}` but the grid resolves only {} modes",
            coeffs.len(),
            modes.len()
        )));
    }
    let mut v = DVector::zeros(len);
    for (m, &c) in modes.iter().zip(coeffs) {
        v.axpy(c, &m.values, 1.0);
    }
    Ok(v)
}

/// Builds the state at `t = 0`; `seed` is the run seed, used by `random`
/// unless the preset carries its own.
pub fn initial_state(ops: &DiscreteOperators, init: &InitialData, seed: u64) -> Result<State, ConfigError> {
    let (u0, u1, w0, w1): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = match init.preset {
        Preset::Zero => return Ok(State::zeros(ops)),
        Preset::SingleMode => {
            let which = init.which.unwrap_or(1);
            let mut c = vec![0.0; which];
            c[which - 1] = init.amplitude.unwrap_or(0.0);
            match init.field.unwrap_or_default() {
                Component::U0 => (c, vec![], vec![], vec![]),
                Component::U1 => (vec![], c, vec![], vec![]),
                Component::W0 => (vec![], vec![], c, vec![]),
                Component::W1 => (vec![], vec![], vec![], c),
            }
        }
        Preset::Random => {
            let m = init.modes.unwrap_or(DEFAULT_RANDOM_MODES);
            let scale = init.scale.unwrap_or(1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(init.seed.unwrap_or(seed));
            let chamber = ops.chamber_modes(m);
            let plate = &ops.plate_modes()[..m.min(ops.plate_dofs())];
            let mut draw = |modes: &[Mode], displacement: bool| -> Vec<f64> {
                modes
                    .iter()
                    .map(|md| {
                        let c = scale * rng.gen_range(-1.0..1.0);
                        if displacement {
                            c / md.eigenvalue.sqrt()
                        } else {
                            c
                        }
                    })
                    .collect()
            };
            (
                draw(&chamber, true),
                draw(&chamber, false),
                draw(plate, true),
                draw(plate, false),
            )
        }
        Preset::Modes => (
            init.u0.clone().unwrap_or_default(),
            init.u1.clone().unwrap_or_default(),
            init.w0.clone().unwrap_or_default(),
            init.w1.clone().unwrap_or_default(),
        ),
    };
    let chamber = ops.chamber_modes(u0.len().max(u1.len()));
    let plate = ops.plate_modes();
    let (nc, np) = (ops.chamber_dofs(), ops.plate_dofs());
    Ok(State {
        u: ops.scatter_chamber(&combine(&chamber, &u0, nc, "u0")?),
        u_t: ops.scatter_chamber(&combine(&chamber, &u1, nc, "u1")?),
        w: ops.scatter_plate(&combine(plate, &w0, np, "w0")?),
        w_t: ops.scatter_plate(&combine(plate, &w1, np, "w1")?),
        t: 0.0,
    })
}
