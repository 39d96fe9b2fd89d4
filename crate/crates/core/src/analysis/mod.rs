//! Complexity profiling, saliency, APSM coefficient export and ROC export.

mod coefficients;
mod profile;
mod roc;
mod saliency;
#[cfg(test)]
mod tests;

pub use coefficients::{
    export_phase_coefficients, phase_coefficients, render_heat_strip, CoefficientFile, CoefficientOutcome, StreamCoefficients,
};
pub use profile::{profile, profile_input, BaselineComparison, ComplexityReport, FLOPS_CONVENTION};
pub use roc::{read_roc_csv, roc_export};
pub use saliency::{
    grad_cam_map, gradcam3d, mask_heat_ratio, max_normalize, occlusion_sensitivity, top_fraction_iou, SaliencyVolume,
};
