pub mod corpus;
pub mod detection;
pub mod estimation;
pub mod evaluation;
pub mod pipeline;
pub mod scoring;
pub mod simulator;
pub mod types;
pub mod union_find;
