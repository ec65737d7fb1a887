//! File formats, corpus loading, synthetic corpora and batching.

mod batch;
mod formats;
mod labels;
mod manifest;
mod synth;

pub(crate) use formats::missing_or_io;
pub use batch::{make_batches, Batch, BatchPlan};
pub use formats::{
    read_anchor_file, read_feature_file, read_feature_header, read_score_file, write_anchor_file,
    write_feature_file, write_score_file, AnchorSet, FeatureSequence, ScoreMatrix, ANCHOR_MAGIC, FEATURE_MAGIC,
    FORMAT_VERSION, SCORE_MAGIC,
};
pub use labels::{AttributeMap, DenseLabels, Interval, IntervalLabelSet};
pub use manifest::{
    read_attribute_map, read_label_file, read_manifest, Corpus, LabelSource, Manifest, ManifestEntry, Split,
    VideoRecord, MANIFEST_VERSION,
};
pub use synth::{generate_synthetic_corpus, write_corpus_dir, SynthSpec, SyntheticCorpus, PROMPT_TEMPLATES};
