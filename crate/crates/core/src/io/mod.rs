//! Model and dataset files.

mod blob;
mod bytes;
mod dataset;
mod manifest;

use std::path::Path;

pub use blob::{decode_blob, encode_blob, BLOB_MAGIC, DTYPE_F32, FORMAT_VERSION};
pub use dataset::{
    decode_labels, decode_samples, encode_labels, encode_samples, load_batches, Batches,
    CycleBatches, Dataset, DatasetBatch, DATASET_MAGIC, LABELS_MAGIC,
};
pub use manifest::{from_manifest, to_manifest, LayerDesc, Manifest, ModeDesc, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<NetworkGraph> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::from_json(&text)?;
    let entries = decode_blob(&read_file(blob_path.as_ref())?)?;
    from_manifest(&manifest, entries)
}

pub fn save_model(
    graph: &NetworkGraph,
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<()> {
    graph.validate()?;
    let (manifest, entries) = to_manifest(graph);
    write_file(blob_path.as_ref(), &encode_blob(&entries)?)?;
    write_file(manifest_path.as_ref(), manifest.to_json()?.as_bytes())
}
