//! Rationalize-then-predict models, universal trigger attacks on their
//! explanations, and the metrics that quantify the damage.
//!
//! The crate is organised bottom-up:
//!
//! * [`tape`]: a minimal reverse-mode autodiff engine over dense tensors,
//!   including the stochastic mask-sampling primitives.
//! * [`knn`]: an exact kd-tree over embedding rows, used for candidate
//!   lookup during the trigger search.
//! * [`data`]: document corpora, pretrained embedding tables, and a
//!   synthetic corpus generator with planted rationales.
//! * [`model`]: the rationalizer/predictor bundles (five variants at token
//!   or sentence granularity) and their checkpoint format.
//! * [`train`]: per-variant objectives and the SGD training loop.
//! * [`attack`]: trigger insertion, label sequences, the greedy search,
//!   and attack evaluation (including transfer and fixed triggers).
//! * [`metrics`]: explanation-shift metrics and their aggregation.
//! * [`report`]: annotated text/html rendering of attacked samples.
//!
//! Core numerics are generic over the scalar type via [`scalar::Scalar`];
//! concrete aliases below pin the default 64-bit instantiation used by the
//! command-line tools and the test suite.

pub mod attack;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default scalar for end-user entry points: 64-bit reals.
pub type Real = f64;

/// Default-precision tensor.
pub type RealTensor = tensor::Tensor<Real>;

/// Default-precision parameter store.
pub type RealParamStore = tape::ParamStore<Real>;

/// Default-precision model bundle.
pub type RealModelBundle = model::ModelBundle<Real>;

/// Default-precision kd-tree index.
pub type RealKnnIndex = knn::KnnIndex<Real>;

/// Default-precision embedding table.
pub type RealEmbeddingTable = data::EmbeddingTable<Real>;
