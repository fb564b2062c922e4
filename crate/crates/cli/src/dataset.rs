//! Datasets backed by extracted `.psft` feature files.

use std::fs;
use std::path::{Path, PathBuf};

use sigver_core::ink::{label_for_sample, parse_svc_name, Label};
use sigver_core::models::{ModelConfig, ModelKind};
use sigver_core::pipeline::{feature_to_tensor, Dataset, PipelineError, Sample};
use sigver_core::psf::{read_psft, scale_to_square};

use crate::error::CliError;

/// One feature file and its corpus coordinates.
#[derive(Debug, Clone)]
pub struct FeatureFile {
    pub path: PathBuf,
    pub writer: u32,
    pub sample: u32,
    pub label: Label,
}

/// Scan a directory of `U<w>S<s>.psft` files, sorted by (writer, sample).
pub fn scan_features(dir: &Path) -> Result<Vec<FeatureFile>, CliError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".psft") else { continue };
        // Reuse the corpus naming rule by faking the extension.
        if let Some((writer, sample)) = parse_svc_name(&format!("{stem}.TXT")) {
            files.push(FeatureFile {
                path,
                writer,
                sample,
                label: label_for_sample(sample),
            });
        }
    }
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no .psft feature files found under {}",
            dir.display()
        )));
    }
    files.sort_by_key(|f| (f.writer, f.sample));
    Ok(files)
}

/// Lazily loads feature files; rescales to a square tensor when the
/// model wants width-fixed input.
pub struct PsfDirDataset {
    files: Vec<FeatureFile>,
    indices: Vec<usize>,
    square: bool,
}

impl PsfDirDataset {
    pub fn new(files: Vec<FeatureFile>, indices: Vec<usize>, config: &ModelConfig) -> Self {
        PsfDirDataset {
            files,
            indices,
            square: config.kind == ModelKind::CnnFixed,
        }
    }

    pub fn labels(files: &[FeatureFile]) -> Vec<bool> {
        files.iter().map(|f| f.label == Label::Genuine).collect()
    }
}

impl Dataset<f32> for PsfDirDataset {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<Sample<f32>, PipelineError> {
        let file = &self.files[self.indices[index]];
        let mut reader = fs::File::open(&file.path).map_err(sigver_core::psf::PsfError::Io)?;
        let mut tensor = read_psft(&mut reader)?;
        if self.square {
            tensor = scale_to_square(&tensor);
        }
        Ok(Sample {
            input: feature_to_tensor(&tensor),
            genuine: file.label == Label::Genuine,
        })
    }
}
