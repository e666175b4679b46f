//! Finite-difference checks of every loss and of the composite training objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::step::{record_sample_loss, Objective, PreparedSample, StepContext};
use super::{ConsistencyMode, EncoderMode, TrainConfig};
use crate::audio::Waveform;
use crate::corpus::{make_mixture, make_speaker, synth_utterance, MixtureSample};
use crate::diffgraph::{grad_check_with, Coverage, GradCheckReport, Tape, Tensor};
use crate::digest::item_seed;
use crate::error::Result;
use crate::losses::{
    build_centroid_bank, c_sc_loss_on_tape, ce_loss_on_tape, sc_loss_on_tape, si_sdr_loss_on_tape,
    CentroidBank, ClsSchedule,
};
use crate::model::{
    Architecture, ModelConfig, SeparatorParams, SpeakerEncoderParams, UnitEmbedding, UnitVar,
};

pub const BATTERY_STEP: f64 = 1e-5;
pub const BATTERY_TOLERANCE: f64 = 1e-4;
pub const BATTERY_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryCheck {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl BatteryCheck {
    /// Judged per parameter tensor. Single coordinates whose gradient is
    /// near zero sit at the rounding floor of the central difference.
    pub fn passed(&self) -> bool {
        self.report.max_tensor_error() < BATTERY_TOLERANCE
    }
}

fn row(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::row((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn check(
    name: &str,
    seed: u64,
    tape: &mut Tape,
    loss: crate::diffgraph::Var,
    coverage: Coverage,
) -> Result<BatteryCheck> {
    let params = tape.param_values();
    let report = grad_check_with(tape, loss, &params, BATTERY_STEP, coverage)?;
    Ok(BatteryCheck {
        name: name.to_string(),
        seed,
        report,
    })
}

fn loss_checks(seed: u64) -> Result<Vec<BatteryCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, "battery-losses", 0));
    let mut out = Vec::new();

    let mut tape = Tape::new();
    let reference: Vec<f64> = row(&mut rng, 64).data().to_vec();
    let est = tape.param("est", row(&mut rng, 64));
    let l = si_sdr_loss_on_tape(&mut tape, est, &reference)?;
    out.push(check("si_sdr", seed, &mut tape, l, Coverage::All)?);

    let mut tape = Tape::new();
    let a = tape.param("e_r", row(&mut rng, 8));
    let b = tape.param("e_s", row(&mut rng, 8));
    let a = tape.normalize(a)?;
    let b = tape.normalize(b)?;
    let l = sc_loss_on_tape(&mut tape, UnitVar(a), UnitVar(b))?;
    out.push(check(
        "speaker_consistency",
        seed,
        &mut tape,
        l,
        Coverage::All,
    )?);

    let groups: BTreeMap<u32, Vec<UnitEmbedding>> = (0..4)
        .map(|s| {
            let members = (0..3)
                .map(|_| UnitEmbedding::normalized(&row(&mut rng, 8)))
                .collect::<Result<Vec<_>>>()?;
            Ok((s, members))
        })
        .collect::<Result<_>>()?;
    let bank = CentroidBank::from_embeddings(&groups, "battery")?;
    let mut tape = Tape::new();
    let e = tape.param("e_s", row(&mut rng, 8));
    let e = tape.normalize(e)?;
    let l = c_sc_loss_on_tape(&mut tape, UnitVar(e), &bank, (seed % 4) as u32)?;
    out.push(check(
        "centroid_consistency",
        seed,
        &mut tape,
        l,
        Coverage::All,
    )?);

    let mut tape = Tape::new();
    let z = tape.param("logits", row(&mut rng, 6));
    let l = ce_loss_on_tape(&mut tape, z, (seed % 6) as usize)?;
    out.push(check("cross_entropy", seed, &mut tape, l, Coverage::All)?);
    Ok(out)
}

/// Joint-mode composite with all three terms live: separator, re-encoding,
/// classifier and centroid loss on one toy sample.
fn composite_check(seed: u64) -> Result<BatteryCheck> {
    let arch = Architecture::new(ModelConfig {
        embed_dim: 6,
        encoder_hidden: 8,
        feature_dim: 6,
        depth: 2,
        num_speakers: 3,
        ..ModelConfig::default()
    })?;
    let master = item_seed(seed, "battery-composite", 0);
    let speakers: Vec<_> = (0..3).map(|s| make_speaker(s, master)).collect();
    // Voiced toy speech has almost no energy in the top bands, which leaves
    // those gradients below the difference quotient's rounding floor. A
    // broadband floor keeps every coordinate measurable.
    let utt = |s: usize, k: u64| -> Result<Waveform> {
        let voiced = synth_utterance(&speakers[s], item_seed(master, "utt", k), 0.5, 8000)?;
        let mut noise = ChaCha8Rng::seed_from_u64(item_seed(master, "floor", k));
        let x = voiced
            .samples()
            .iter()
            .map(|v| 0.7 * v + 0.2 * noise.random_range(-1.0..1.0))
            .collect();
        Ok(Waveform::new(x, 8000)?)
    };

    let enc = SpeakerEncoderParams::init(item_seed(master, "enc", 0), &arch.config);
    let sep = SeparatorParams::init(item_seed(master, "sep", 0), &arch.config);
    let mut groups = BTreeMap::new();
    for s in 0..3u32 {
        groups.insert(
            s,
            vec![
                utt(s as usize, 10 + u64::from(s))?,
                utt(s as usize, 20 + u64::from(s))?,
            ],
        );
    }
    let group_refs: BTreeMap<u32, Vec<&Waveform>> = groups
        .iter()
        .map(|(k, v)| (*k, v.iter().collect()))
        .collect();
    let bank = build_centroid_bank(&enc, &arch, &group_refs)?;

    let parts = make_mixture(&utt(0, 1)?, &utt(1, 2)?, 1.5)?;
    let sample = MixtureSample {
        sample_id: "battery/0".into(),
        mixture_id: "battery".into(),
        mixture: parts.mixture,
        target: parts.target,
        interferer: parts.interferer,
        enrollment: utt(0, 3)?,
        enrollment_id: "enroll".into(),
        target_utterance: "u1".into(),
        target_speaker: 0,
        snr_db: 1.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let prepared = PreparedSample::new(
        &sample,
        sample.enrollment.clone(),
        None,
        usize::MAX,
        &arch,
        &mut rng,
    )?;

    let cfg =
        TrainConfig::default().with_modes(EncoderMode::Joint, ConsistencyMode::Centroid, false);
    let schedule = ClsSchedule::new(1, false)?;
    let classes: BTreeMap<u32, usize> = (0..3).map(|s| (s, s as usize)).collect();
    let ctx = StepContext {
        arch: &arch,
        cfg: &cfg,
        schedule: &schedule,
        bank: Some(&bank),
        classes: &classes,
    };
    let params = enc.0.merged(&sep.0);
    let mut tape = Tape::new();
    let (_, total) = record_sample_loss(
        &mut tape,
        &prepared,
        &params,
        &ctx,
        0,
        Objective::Configured,
    )?;
    check(
        "composite",
        seed,
        &mut tape,
        total,
        Coverage::Sampled {
            per_param: 3,
            seed: master,
        },
    )
}

/// Every loss on its own, then the composite, at each seed.
pub fn gradient_battery(seeds: &[u64]) -> Result<Vec<BatteryCheck>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(loss_checks(seed)?);
        out.push(composite_check(seed)?);
    }
    Ok(out)
}
