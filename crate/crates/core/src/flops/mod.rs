mod counter;
mod formula;
mod report;

pub use counter::FlopCounter;
pub use formula::{eval_formula, geometric_factor, Bindings, ComplexityFormula};
pub use report::{count_fusing_layer, counted_ceca, linear_r2, scaling_csv, scaling_report, ScalingBase, ScalingReportRow};

use crate::autodiff::{Graph, ParamStore, Tape};
use crate::detector::Detector;
use crate::error::Result;
use crate::tensor::Tensor;

/// Counts one inference forward pass of a detector on `image`.
pub fn count_forward(detector: &Detector, store: &ParamStore, image: &Tensor) -> Result<FlopCounter> {
    let mut g = Graph::with_tape(store, Tape::with_flop_counter());
    detector.forward(&mut g, image)?;
    Ok(g.into_tape().take_flops().expect("counting tape"))
}
