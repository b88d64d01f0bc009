//! Image decoding, normalization, augmentation, triplet manifests and the
//! synthetic triplet generator.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod synth;

pub use augment::{apply_augment, augment, sample_params, AugmentParams, AugmentSpec};
pub use image::{decode_image, encode_ppm, read_image, resize_normalize};
pub use manifest::{
    largest_remainder, load_manifest, parse_manifest, resolve, sample_triplets, write_manifest, Source, Split,
    Stratification, Stratum, TripletRecord,
};
pub use synth::{synth_generate, SynthConfig, SynthOutput};
