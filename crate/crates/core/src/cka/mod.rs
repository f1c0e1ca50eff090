//! Linear CKA over minibatches with the unbiased HSIC estimator, probe
//! minibatch construction, the three similarity products and their export.

mod analysis;
mod export;
mod hsic;
mod probe;

pub use analysis::{cross_model_similarity, layer_similarity, same_layer_similarity};
pub use export::CkaMatrix;
#[doc(hidden)]
pub use hsic::hsic1_with_cross_coefficient;
pub use hsic::{
    gram_linear, hsic1_unbiased, ActivationMatrix, CkaAccumulator, CkaScore, GramMatrix, MIN_EXAMPLES,
};
pub use probe::{build_probe_minibatches, ProbeBatch};
