pub mod attention;
pub mod dgp;
pub mod experiment;
pub mod diagnostics;
pub mod forward;
pub mod graph;
pub mod ingest;
