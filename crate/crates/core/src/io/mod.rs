//! Study-file ingestion and report emission.

mod raw_data;
mod report;
mod study_file;

pub use raw_data::read_raw_csv;
pub use report::{
    sig6, Diagnostics, ParamReport, Report, StatLevene, StatReport, StudyProvenance, SynthesisReport,
    VerificationReport,
};
pub use study_file::{InputFormat, StudyFile, CSV_SLOPE_LABEL};
