//! Certified extrema of the GP posterior over boxes.
//!
//! Every quantity here is an enclosure: the true extremum over the region is
//! guaranteed to lie in the reported interval, up to floating-point rounding
//! (which is padded for in the relaxations).

mod bnb;
mod extrema;
mod interval_box;
mod metric;
mod relaxation;
mod taylor;

pub use bnb::{maximize, BnbOutcome, BnbSettings, NodeBound, TraceNode};
pub use extrema::{
    mean_extrema, mean_extrema_in, sup_abs_deviation, variance_upper, variance_upper_in, CertifiedInterval,
    DomainControl, MeanExtrema, SearchDomain,
};
pub use interval_box::IntervalBox;
pub use metric::{canonical_metric_diameter, canonical_metric_diameter_with, metric_lipschitz};
pub use relaxation::{kernel_linear_bounds, relaxed_min, z_range, LinearKernelBounds, RelaxedMin};
pub use taylor::{
    mean_enclosure, mean_linearization, variance_upper_bound, variance_upper_in_frame, Frame, MeanLinearization,
    DEFAULT_ORDER as TAYLOR_ORDER,
};
