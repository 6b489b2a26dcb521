//! Data ingestion, memory reports, benchmark sweeps and the external SQL
//! conformance mode.

pub mod bench;
pub mod conformance;
pub mod dataset;
pub mod memreport;
pub mod synthetic;

pub use bench::{bench, predicted_peak_entries, records_to_csv, BenchError, BenchRecord, BenchSweep, CellStatus, BENCH_HEADER};
pub use conformance::{
    conformance, reference_shim, CommandExecutor, ConformanceError, ConformanceReport, ConformanceSetup, ExecError,
    ExecRequest, QueryOutcome, ReferenceShim, SqlExecutor, SqlTexts,
};
pub use dataset::{encode, load_csv, parse_csv, replicate, write_encoded, Dataset, DatasetError, Schema};
pub use memreport::{mem_report, MemDims, MemReport, MemRow};
pub use synthetic::synthetic_pixels;
