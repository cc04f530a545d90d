//! Effective receptive fields, attention distances and centered kernel
//! alignment.

mod cka;
mod distance;
mod dump;
mod erf;
mod report;
mod rf;

pub use cka::{cka_cross, cka_matrix, cka_pair, CkaMatrix, CkaMode};
pub use distance::{
    attended_pairs, attention_distance, AttendedPair, BinnedDistances, DistanceOptions, DistanceStats, LONG_RANGE,
    TOP_K,
};
pub use dump::{
    collect_activations, read_centroids, read_dumps, read_dumps_from, write_centroids, write_dumps, write_dumps_to,
    ActivationDump, CentroidRow, CENTROID_HEADER,
};
pub use erf::{erf_gradients, erf_maps, input_gradient, ErfMap, ERF_THRESHOLD};
pub use report::{
    attention_report, erf_report, read_table4, read_table5, write_erf_map, write_table4, write_table5,
    Table4Row, Table5Row, TABLE4_HEADER, TABLE5_HEADER,
};
pub use rf::{compose_rf, table4_taps, theoretical_rf, TheoreticalRf};
