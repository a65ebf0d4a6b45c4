//! Shared fixtures for the criterion benches.

use mamba_icl::embedding::embed_prompt;
use mamba_icl::sampler::TaskSampler;
use mamba_icl::{EmbeddedPrompt, FeatureMap, FeatureSpace, LinkFunction, RngStream};

/// One embedded `He_3` prompt with `n` context examples in `d` dimensions.
pub fn embedded_prompt(d: usize, r: usize, n: usize) -> EmbeddedPrompt {
    let space = FeatureSpace::leading(d, r).expect("r <= d");
    let g = LinkFunction::hermite_mode(3).expect("He_3");
    let sampler = TaskSampler::new(&space, &g, 0.1);
    let task = RngStream::new(1).child(0);
    let beta = sampler.beta(&task);
    embed_prompt(&sampler.prompt(&task, &beta, 0, n), FeatureMap::Quadratic)
}
