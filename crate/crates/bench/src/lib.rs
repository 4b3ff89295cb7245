//! Shared fixtures for the benchmarks.

use forge_core::model::{init_model, DecoderModel, ModelSpec};
use forge_core::multimodal::{init_bundle, ChatTemplate, MultimodalSequence, TrainableScope, VisionBundle, VisionSpec};
use forge_core::synth_data::{gen_text_corpus, gen_vqa_corpus, Split, Tokenizer};
use forge_core::training::{text_sequences, vqa_sequences};

pub fn toy_target() -> DecoderModel {
    init_model(&ModelSpec::toy(Tokenizer::standard().vocab_size()), 1).expect("toy spec is valid")
}

pub fn toy_bundle(scope: TrainableScope) -> VisionBundle {
    init_bundle(&VisionSpec::toy(64), scope, 2).expect("toy vision spec is valid")
}

pub fn text_batch(n: usize) -> Vec<MultimodalSequence> {
    let tok = Tokenizer::standard();
    text_sequences(&gen_text_corpus(3, n, Split::Train), &tok, &ChatTemplate { n_patches: 16 }).expect("corpus tokenises")
}

pub fn vqa_batch(n: usize) -> Vec<MultimodalSequence> {
    let tok = Tokenizer::standard();
    vqa_sequences(&gen_vqa_corpus(4, n, Split::Train), &tok, &ChatTemplate { n_patches: 16 }).expect("corpus tokenises")
}
