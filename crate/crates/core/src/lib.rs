//! Natural-language fact store with support-set retrieval, select-project-join
//! operators and classical aggregation.

pub mod aggregation;
pub mod fact_store;
pub mod grammar;
pub mod spj;
pub mod retrieval;
pub mod dataset_gen;
pub mod ssg;
pub mod supervision;
pub mod pipeline;
pub mod eval;
