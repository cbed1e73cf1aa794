//! Tigrinya to English neural machine translation toolkit: text
//! normalization, BPE subwords, corpus preparation, evaluation metrics, a
//! from-scratch Transformer, staged transfer-learning training and a
//! translation service.

pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod subword;
pub mod synthetic;
pub mod textnorm;
pub mod trainer;
pub mod translate;
