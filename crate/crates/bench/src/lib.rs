//! Shared fixtures for the criterion benches.

use rfp_core::csi::{validate_window, CsiFrame};
use rfp_core::nn::{InputGeometry, ModelSpec, Network, Tensor};
use rfp_core::preprocess::{ModelInput, PipelineVariant, Preprocessor};
use rfp_core::synth::{Scene, SimConfig};
use rfp_core::{CsiWindow, Label, WindowConfig};

/// A motion scene with the default simulator settings.
pub fn scene(seed: u64) -> Scene {
    Scene::random(&SimConfig::default(), "bench", seed).expect("default config is valid")
}

/// `n` frames of a motion stream.
pub fn frames(n: usize, seed: u64) -> Vec<CsiFrame> {
    scene(seed).stream(Label::Motion, n, 1).expect("valid stream").collect()
}

/// One validated reference-size window.
pub fn window(seed: u64) -> CsiWindow {
    validate_window(&frames(128, seed), &WindowConfig::default(), Some(Label::Motion)).expect("synthetic window is valid")
}

pub fn preprocessor() -> Preprocessor {
    Preprocessor::new(128, 14, 50).expect("reference geometry")
}

/// Untrained reference network for `variant`.
pub fn network(variant: PipelineVariant) -> Network {
    Network::new(ModelSpec::reference(variant, InputGeometry::default()), 1).expect("reference spec")
}

/// A batch of `n` copies of one window's inputs, one tensor per branch.
pub fn batch(variant: PipelineVariant, n: usize) -> Vec<Tensor> {
    let input: ModelInput = preprocessor().make_input(&window(3), variant).expect("valid window");
    input
        .tensors
        .iter()
        .map(|t| Tensor::stack_images(std::iter::repeat_n(t, n)).expect("same shapes"))
        .collect()
}
