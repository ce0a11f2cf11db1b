pub mod build;
pub mod features;
pub mod frame;
pub mod grammar;
pub mod interaction_model;
pub mod models;
pub mod ontology;
pub mod pipeline;
pub mod runtime;
pub mod text;
