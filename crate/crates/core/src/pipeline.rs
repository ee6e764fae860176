//! Run configuration and the glue between manifests, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{LogMel, MelConfig};
use crate::data::{load_clips, load_manifest, LoadedClip, Split};
use crate::dictionary::ObjectDictionary;
use crate::error::{invalid, Result};
use crate::eval::{evaluate_multi, representation_nmi, single_source_ious, summarize_multi, summarize_single, EvalOptions, Report};
use crate::model::{Model, ModelConfig};
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

/// Everything a run needs besides its data paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mel: MelConfig,
    /// Clip length fed to the audio front end.
    pub duration_s: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mel: MelConfig::default(),
            duration_s: 1.0,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Settings used for the bundled toy dataset.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.stage1.lr = 1e-3;
        cfg.stage1.loc_epochs = 4;
        cfg.stage1.cls_epochs = 1;
        cfg
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.mel.sample_rate as f64).round() as usize
    }

    /// Sets every seed of the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if !(self.duration_s > 0.0) {
            return Err(invalid!("duration_s must be positive"));
        }
        let frames = self.mel.num_frames(self.num_samples());
        if frames != self.model.audio_frames || self.mel.n_mels != self.model.audio_mels {
            return Err(invalid!(
                "front end yields {frames}x{} spectrograms, model expects {}x{}",
                self.mel.n_mels,
                self.model.audio_frames,
                self.model.audio_mels
            ));
        }
        Ok(())
    }

    /// Loads every clip of a manifest; relative media paths resolve against
    /// the manifest's directory.
    pub fn load_manifest_clips(&self, manifest: &Path) -> Result<Vec<LoadedClip>> {
        let records = load_manifest(manifest)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let mel = LogMel::new(self.mel)?;
        load_clips(&records, root, &mel, self.num_samples(), self.model.image_size)
    }
}

/// Splits clips into (single-source, multi-source).
pub fn partition_clips(clips: Vec<LoadedClip>) -> (Vec<LoadedClip>, Vec<LoadedClip>) {
    clips.into_iter().partition(|c| c.record.split == Split::Single)
}

/// All metrics the clips support: single-source IoU/AUC for clips with a
/// box, NMI for clips with a category, and the class-aware scores for
/// multi-source clips.
pub fn evaluate_clips(model: &Model, dict: &ObjectDictionary, clips: Vec<LoadedClip>, opts: &EvalOptions) -> Result<Report> {
    if clips.is_empty() {
        return Err(invalid!("nothing to evaluate: the split is empty"));
    }
    let (single, multi) = partition_clips(clips);
    let mut report = Report::default();
    let boxed: Vec<LoadedClip> = single.iter().filter(|c| !c.record.objects.is_empty()).cloned().collect();
    if !boxed.is_empty() {
        summarize_single(&mut report, &single_source_ious(model, &boxed, opts)?, opts)?;
    }
    if !single.is_empty() && single.iter().all(|c| c.record.category.is_some()) {
        let v = representation_nmi(model, dict, &single, opts.binarize_threshold)?;
        report.metrics.insert("nmi".into(), v);
    }
    if !multi.is_empty() {
        summarize_multi(&mut report, &evaluate_multi(model, dict, &multi, opts)?, opts)?;
    }
    Ok(report)
}
