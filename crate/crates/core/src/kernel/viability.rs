use super::{ball_meets, fixed_point, safe_layers, sweep, GridDynamics, KernelKind, KernelResult};
use crate::grid::{KernelSet, ModeMask};

/// Inputs whose successor ball of radius `r` meets mode slice `u` of `set`.
/// Independent of the current mode.
fn meeting_inputs(
    dynamics: &dyn GridDynamics,
    set: &KernelSet,
    cell: [usize; 3],
    candidates: ModeMask,
) -> ModeMask {
    let spec = dynamics.spec();
    candidates
        .iter()
        .filter(|&u| {
            dynamics
                .successor(cell, u)
                .and_then(|f| spec.ball_ranges(&f, [spec.r; 3]))
                .is_some_and(|ranges| ball_meets(set, &ranges, u))
        })
        .collect()
}

/// Largest subset of `k_h` in which every point has an admissible input
/// whose sampled path stays feasible and whose successor cell meets the set.
pub fn viability_kernel(k_h: &KernelSet, dynamics: &dyn GridDynamics) -> KernelResult {
    let spec = dynamics.spec();
    let n = spec.n_modes;
    let all = ModeMask::all(n);
    let step = |current: &KernelSet| {
        sweep(current, |cell, alive| {
            let good = meeting_inputs(dynamics, current, cell, all);
            alive
                .iter()
                .filter(|&q| !dynamics.admissible(q).intersect(good).is_empty())
                .collect()
        })
    };
    let (kernel, iterations, trace) = fixed_point(k_h, step);
    let safe = safe_layers(&kernel, |cell, q| {
        meeting_inputs(dynamics, &kernel, cell, dynamics.admissible(q))
    });
    KernelResult {
        kind: KernelKind::Viability,
        kernel,
        safe,
        iterations,
        trace,
    }
}
