//! State-space machinery: ZOH discretization, the time-invariant recurrence
//! and kernel forms, the associative scan and the selective scan.

mod linear;
mod mixer;
mod scan;
mod selective;
mod zoh;

pub use linear::{kernel, kernel_apply, scan_recurrent, SsmParams};
pub use mixer::{selective_parameters, SelectiveParams, DELTA_BIAS_TARGET};
pub use scan::{inclusive_scan, inclusive_scan_soa, ScanElement, DEFAULT_CHUNK};
pub use selective::{
    a_ladder, selective_scan, selective_scan_backward, selective_scan_parallel,
    selective_scan_sequential, ScanMode, SelectiveScanGrads, SelectiveScanInput,
    SelectiveScanOutput,
};
pub use zoh::{discretize_zoh, selective_discretize, zoh_coefficients, DiscreteSsm, TAYLOR_GUARD};
