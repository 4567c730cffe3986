//! Fixtures shared by the criterion benches.

use eamat_core::synth::generate_split;
use eamat_core::{GroundedSample, Lexicon, Model, RunConfig, Split};

/// Desk configuration and one training sample of `frames` frames.
pub fn desk_fixture(frames: usize) -> (Model, GroundedSample) {
    let mut cfg = RunConfig::default();
    cfg.t_min = frames;
    cfg.t_max = frames;
    cfg.span_max = cfg.span_max.min(frames);
    cfg.span_min = cfg.span_min.min(cfg.span_max);
    let model = Model::new(&cfg).expect("desk config is valid");
    let sample = generate_split(&cfg.gen_config(), &Lexicon::shipped(), Split::Train, 1)
        .expect("desk generator config is valid")
        .remove(0);
    (model, sample)
}
