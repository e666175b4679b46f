//! Optimisation: Adam, learning-rate decay, the two encoder modes, centroid
//! refresh, checkpoints and checkpoint averaging.

mod adam;
mod battery;
mod checkpoint;
mod config;
mod pretrain;
mod run;
mod step;

pub use adam::{adam_step, clip_global_norm, AdamState, BETA1, BETA2, EPSILON};
pub use battery::{gradient_battery, BatteryCheck, BATTERY_SEEDS, BATTERY_STEP, BATTERY_TOLERANCE};
pub use checkpoint::{average_checkpoints, Checkpoint, RngState, Snapshot, CHECKPOINT_VERSION};
pub use config::{lr_at, ClsConfig, ConsistencyMode, EncoderMode, PretrainConfig, TrainConfig};
pub use pretrain::{
    classification_accuracy, margin_probe, pretrain_encoder, PretrainEpoch, PretrainOutcome,
};
pub use run::{
    checkpoint_file_name, class_indices, log_to_csv, parse_log, speaker_groups, train_run,
    write_outcome, LogRow, TrainOutcome, TrainSetup, LOG_FILE, LOG_HEADER,
};
pub use step::{
    crop_offsets, record_sample_loss, sample_gradients, train_step, Objective, PreparedSample,
    StepContext, StepReport, TrainState,
};
