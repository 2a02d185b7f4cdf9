pub mod annotation;
pub mod cli;
pub mod corpus;
pub mod exec;
pub mod fill;
pub mod fixture;
pub mod masker;
pub mod mlm;
pub mod ner;
pub mod phi;
pub mod pos;
pub mod privacy;
pub mod remote;
pub mod resemblance;
pub mod rng;
pub mod text;
pub mod utility;
