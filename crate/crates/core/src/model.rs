//! The trained segmentation model persisted as a single JSON file: the
//! shared PCA reference basis, feature normalization parameters, the LDA
//! classifier, the spatial parts model, and the parameter snapshot used at
//! training time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::LdaModel;
use crate::error::{Error, Result};
use crate::features::FeatureNormalizer;
use crate::parts::PartsModel;
use crate::pca::PcaBasis;
use crate::pipeline::PipelineParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegModel {
    pub pca_basis: PcaBasis,
    pub normalizer: FeatureNormalizer,
    pub lda: LdaModel,
    pub parts: PartsModel,
    pub params: PipelineParams,
}

pub fn write_model(model: &SegModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Internal(format!("model serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<SegModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{path:?}: {e}")))
}
