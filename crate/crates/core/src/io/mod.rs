//! File formats, dataset manifests and feature providers.

pub(crate) mod binary;
pub mod formats;
pub mod manifest;
pub mod pnm;
pub mod provider;
pub mod synthetic;

pub use formats::{
    decode_bank, decode_features, decode_weights, encode_bank, encode_features, encode_weights,
    read_bank_file, read_feature_file, read_weight_file, write_bank_file, write_feature_file,
    write_weight_file,
};
pub use manifest::{
    load_manifest, parse_manifest, write_manifest, DatasetManifest, ManifestEntry, ManifestOptions, Split,
};
pub use provider::{FeatureProvider, FileProvider, ProviderKind, ProviderSpec};
pub use synthetic::{SyntheticConfig, SyntheticProvider};
