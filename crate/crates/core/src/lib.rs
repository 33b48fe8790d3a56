pub mod autodiff;
pub mod corpus;
pub mod labels;
pub mod embedder;
pub mod crf;
pub mod encoder;
pub mod lang_clf;
pub mod postprocess;
pub mod evaluator;
pub mod model;
pub mod dataset;
pub mod trainer;
pub mod config;
pub mod selfcheck;
