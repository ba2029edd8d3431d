pub mod corpus;
pub mod dedup;
pub mod eval;
pub mod features;
pub mod matching;
pub mod math;
pub mod mil;
pub mod pipeline;
pub mod saliency;
