//! Multilingual hate-speech and offensive-content classification toolkit.
//!
//! Three model families share one data path: a BPE subword tokenizer over
//! normalized posts, then either TF-IDF features into a one-vs-rest linear
//! SVM, mean-pooled bi-LSTM language-model states into the same SVM, or a
//! transformer encoder fine-tuned end to end with a `[CLS]` softmax head.
//! [`metrics`] scores all of them with macro F1, accuracy and confusion
//! matrices.

pub mod autodiff;
pub mod checkpoint;
pub mod contextual;
pub mod corpus;
pub mod encoder;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod svm;
pub mod synthetic;
pub mod tokenizer;
