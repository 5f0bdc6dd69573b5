//! `meta-train`: PES meta-training with checkpoints and a training curve.

use std::path::PathBuf;
use std::time::Instant;

use optlab::metatrain::{meta_train, MetaConfig, MetaTrainIo, CURVE_FILE};
use serde::{Deserialize, Serialize};

use crate::config::{self, config_hash};
use crate::manifest::Manifest;
use crate::{CliResult, TrainArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainRun {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub meta: MetaConfig,
}

pub fn cmd_meta_train(args: &TrainArgs) -> CliResult<()> {
    let run: MetaTrainRun = config::load(args.config.config.as_deref(), &args.config.overrides)?;
    run.meta.validate()?;
    let started = Instant::now();
    let out = meta_train(
        &run.meta,
        &MetaTrainIo {
            out_dir: Some(run.out_dir.clone()),
            resume_from: args.resume.clone(),
        },
    )?;
    let mut manifest = Manifest::new("meta-train", &run, config_hash(&run), run.meta.seed)?;
    for ckpt in &out.checkpoints {
        manifest.add(&run.out_dir, ckpt);
    }
    manifest.add(&run.out_dir, &run.out_dir.join(CURVE_FILE));
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&run.out_dir)?;
    if let Some(last) = out.curve.last() {
        eprintln!(
            "meta-train: {} meta-steps, final validation loss {:.4}",
            last.meta_step, last.val_loss
        );
    }
    Ok(())
}
