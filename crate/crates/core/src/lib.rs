pub mod embedding;
mod limit;
pub mod types;
pub mod genclient;
#[cfg(test)]
mod test_support;
pub mod template;
pub mod enhancer;
pub mod retrieval;
pub mod metrics;
pub mod corpus;
pub mod harness;
