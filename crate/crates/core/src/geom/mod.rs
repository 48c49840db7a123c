//! Classical geometric unmixing: VCA endmember extraction and FCLS abundances.
//!
//! Matrices follow the `L x N` (bands x pixels) and `L x P` (bands x
//! endmembers) convention of the mixing model and use nalgebra storage.

mod fcls;
mod vca;

pub use fcls::{fcls, fcls_pixel, fcls_sequence, kkt_residual, FclsSolver};
pub use vca::{vca, VcaResult};

use nalgebra::DMatrix;

use crate::datamodel::{EndmemberSet, HyperCubeSequence};
use crate::exec::Exec;
use crate::Result;

/// Phase `t` of `seq` as an `L x N` matrix.
pub fn phase_matrix(seq: &HyperCubeSequence, t: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(seq.bands(), seq.pixels(), &seq.phase_f64(t))
}

/// Phase `t` of `m` as an `L x P` matrix.
pub fn endmember_matrix(m: &EndmemberSet, t: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.bands(), m.endmembers(), &m.phase_f64(t))
}

/// Runs VCA independently on every phase (seed `seed + t` for phase `t`).
pub fn vca_per_phase(seq: &HyperCubeSequence, p: usize, seed: u64, exec: Exec) -> Result<Vec<VcaResult>> {
    exec.try_map_range(seq.phases(), |t| vca(&phase_matrix(seq, t), p, seed.wrapping_add(t as u64)))
}

/// Packs per-phase VCA results into an [`EndmemberSet`].
pub fn vca_endmember_set(results: &[VcaResult]) -> Result<EndmemberSet> {
    let (l, p) = results[0].endmembers.shape();
    let per_phase: Vec<Vec<f64>> = results
        .iter()
        .map(|r| {
            let m = &r.endmembers;
            (0..l).flat_map(|i| (0..p).map(move |j| m[(i, j)])).collect()
        })
        .collect();
    EndmemberSet::from_f64(l, p, &per_phase)
}
