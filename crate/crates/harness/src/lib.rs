pub mod certify;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod reduction;
pub mod simulate;
pub mod trajfile;
