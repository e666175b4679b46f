//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! `SCTSE_ACCEPTANCE=1,2,4` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sctse::audio::{band_merge, band_split, istft, stft, BandPlan, StftConfig, Waveform};
use sctse::config::ExperimentConfig;
use sctse::corpus::{build_corpus, Corpus, MixtureSample, Split};
use sctse::diffgraph::{Gradients, Tensor};
use sctse::eval::{evaluate, extraction_accuracy, EvalOptions, EvalReport, MetricRow};
use sctse::losses::{
    build_centroid_bank, c_sc_loss, ce_loss, cls_combined_loss, cls_gate, combined_loss, omega_at,
    sc_loss, secs, si_sdr, si_sdr_loss, CentroidBank, ClsSchedule, LossWeights,
};
use sctse::model::Params;
use sctse::model::{encode_speaker, Architecture, SpeakerEncoderParams, UnitEmbedding};
use sctse::train::{
    adam_step, average_checkpoints, class_indices, gradient_battery, lr_at, margin_probe,
    pretrain_encoder, speaker_groups, train_run, train_step, AdamState, ConsistencyMode,
    EncoderMode, Objective, PreparedSample, StepContext, TrainConfig, TrainSetup, TrainState,
    BATTERY_SEEDS,
};

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Accumulates named checks; the criterion passes when all do.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.count += 1;
        if !ok {
            self.failed.push(what.into());
        }
    }

    fn close(&mut self, got: f64, want: f64, tol: f64, what: &str) {
        self.check(
            (got - want).abs() <= tol,
            format!("{what}: got {got}, want {want} (tol {tol:e})"),
        );
    }

    fn verdict(self) -> Verdict {
        if self.failed.is_empty() {
            verdict(true, format!("{} checks", self.count))
        } else {
            verdict(
                false,
                format!(
                    "{} of {} failed: {}",
                    self.failed.len(),
                    self.count,
                    self.failed.join("; ")
                ),
            )
        }
    }
}

/// Default corpus and pretrained reference encoder for one master seed.
struct SeedLab {
    cfg: ExperimentConfig,
    corpus: Corpus,
    arch: Architecture,
    encoder: SpeakerEncoderParams,
    pretrain_accuracy: f64,
    pretrain_epochs: usize,
    pretrain_time: Duration,
}

struct Lab {
    root: tempfile::TempDir,
    seeds: BTreeMap<u64, SeedLab>,
    runs: BTreeMap<(u64, String), (EvalReport, Duration)>,
}

impl Lab {
    fn new() -> Self {
        Self {
            root: tempfile::tempdir().expect("temp dir"),
            seeds: BTreeMap::new(),
            runs: BTreeMap::new(),
        }
    }

    fn seed(&mut self, seed: u64) -> &SeedLab {
        if !self.seeds.contains_key(&seed) {
            let mut cfg = ExperimentConfig::default();
            cfg.set_seed(seed);
            cfg.output_dir = self.root.path().join(format!("seed{seed}"));
            build_corpus(&cfg.corpus, seed, cfg.corpus_dir()).expect("corpus");
            let corpus = Corpus::load(cfg.corpus_dir()).expect("load corpus");
            let arch = Architecture::new(cfg.model.clone()).expect("architecture");
            let start = Instant::now();
            let outcome = pretrain_encoder(&corpus, &arch, &cfg.pretrain, |e| {
                eprintln!(
                    "  seed {seed} pretrain epoch {} accuracy {:.4}",
                    e.epoch, e.accuracy
                );
            })
            .expect("pretraining");
            let lab = SeedLab {
                pretrain_accuracy: outcome.accuracy(),
                pretrain_epochs: outcome.history.len(),
                pretrain_time: start.elapsed(),
                encoder: outcome.encoder,
                cfg,
                corpus,
                arch,
            };
            self.seeds.insert(seed, lab);
        }
        &self.seeds[&seed]
    }

    /// Trains one frozen-encoder cell on the default corpus and evaluates it
    /// on the test split with the last checkpoints averaged.
    fn run(
        &mut self,
        seed: u64,
        consistency: ConsistencyMode,
        cls: bool,
    ) -> (EvalReport, Duration) {
        let key = (seed, format!("{consistency}-{cls}"));
        if let Some(r) = self.runs.get(&key) {
            return r.clone();
        }
        let lab = self.seed(seed);
        let start = Instant::now();
        let cfg = lab
            .cfg
            .train
            .clone()
            .with_modes(EncoderMode::Frozen, consistency, cls);
        let mut exp = lab.cfg.clone();
        exp.train = cfg.clone();
        let hash = exp.config_hash();
        let setup = TrainSetup {
            arch: &lab.arch,
            cfg: &cfg,
            pretrained: Some(&lab.encoder),
            bank: None,
            config_hash: &hash,
        };
        let outcome = train_run(&lab.corpus, &setup, |c, rows| {
            let n = rows.len().max(1) as f64;
            eprintln!(
                "  seed {seed} {consistency} cls={cls} epoch {} mean total {:.4}",
                c.epoch,
                rows.iter().map(|r| r.total).sum::<f64>() / n
            );
        })
        .expect("training");
        let k = cfg.checkpoint_avg_k.min(outcome.checkpoints.len());
        let averaged = average_checkpoints(&outcome.checkpoints[outcome.checkpoints.len() - k..])
            .expect("averaging");
        let report = evaluate(
            &averaged,
            &lab.corpus,
            Split::Test,
            &lab.encoder,
            EvalOptions::default(),
        )
        .expect("eval");
        let elapsed = start.elapsed();
        let a = report.aggregates;
        eprintln!(
            "  seed {seed} {consistency} cls={cls}: SI-SDRi {:.3} dB, Acc {:.1}%, Sim {:.2}, {:.0}s",
            a.si_sdri_db,
            a.accuracy_pct,
            a.similarity_pct,
            elapsed.as_secs_f64()
        );
        self.runs.insert(key, (report.clone(), elapsed));
        (report, elapsed)
    }
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let checks = match gradient_battery(&BATTERY_SEEDS) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("battery error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| {
            a.report
                .max_tensor_error()
                .total_cmp(&b.report.max_tensor_error())
        })
        .expect("non-empty battery");
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}@{}={:.2e}", c.name, c.seed, c.report.max_tensor_error()))
        .collect();
    let in_time = elapsed < Duration::from_secs(120);
    verdict(
        failed.is_empty() && in_time,
        format!(
            "{} checks, worst {} seed {} error {:.2e}, {:.1}s{}",
            checks.len(),
            worst.name,
            worst.seed,
            worst.report.max_tensor_error(),
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(" "))
            }
        ),
    )
}

fn unit(v: &[f64]) -> UnitEmbedding {
    UnitEmbedding::normalized(&Tensor::row_from(v)).expect("nonzero")
}

fn bank_of(groups: &[(u32, Vec<&[f64]>)]) -> CentroidBank {
    let map: BTreeMap<u32, Vec<UnitEmbedding>> = groups
        .iter()
        .map(|(s, es)| (*s, es.iter().map(|e| unit(e)).collect()))
        .collect();
    CentroidBank::from_embeddings(&map, "acceptance").expect("bank")
}

fn criterion_loss_values() -> Verdict {
    let mut c = Checks::default();
    let tol = 1e-9;
    let half_root2 = 0.5f64.sqrt();

    c.close(
        si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
        0.0,
        tol,
        "si_sdr([1,1],[1,0])",
    );
    c.close(
        si_sdr(&[-3.5, -3.5], &[1.0, 0.0]).unwrap(),
        0.0,
        tol,
        "si_sdr scaled by -3.5",
    );
    c.check(
        si_sdr(&[1.0, 0.0], &[1.0, 0.0]).unwrap() == 60.0,
        "si_sdr at est == ref clamps to 60",
    );
    c.check(
        si_sdr(&[1.0, 1.0], &[0.0, 0.0]).is_err(),
        "si_sdr zero reference",
    );
    c.close(
        si_sdr_loss(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
        0.0,
        tol,
        "si_sdr_loss([1,1],[1,0])",
    );

    let x = unit(&[1.0, 0.0]);
    c.close(secs(&x, &x).unwrap(), 1.0, tol, "secs identical");
    c.close(
        secs(&x, &unit(&[0.0, 1.0])).unwrap(),
        0.0,
        tol,
        "secs orthogonal",
    );
    c.close(
        secs(&x, &unit(&[1.0, 1.0])).unwrap(),
        half_root2,
        tol,
        "secs 45 degrees",
    );
    c.close(sc_loss(&x, &x).unwrap(), 0.0, tol, "sc at secs 1");
    c.close(
        sc_loss(&x, &unit(&[-1.0, 0.0])).unwrap(),
        2.0,
        tol,
        "sc at secs -1",
    );
    c.close(
        sc_loss(&x, &unit(&[1.0, 1.0])).unwrap(),
        1.0 - half_root2,
        tol,
        "sc at secs 0.70711",
    );

    let same = bank_of(&[(0, vec![&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]])]);
    let e = unit(&[0.6, 0.8]);
    let mean = same.centroid(0).unwrap();
    c.check(
        mean.iter()
            .zip(e.data())
            .all(|(a, b)| (a - b).abs() <= 1e-15),
        "identical embeddings average to themselves",
    );
    let two = bank_of(&[(0, vec![&[1.0, 0.0], &[0.0, 1.0]])]);
    c.check(
        two.centroid(0) == Some(&[0.5, 0.5][..]),
        "mean of [1,0] and [0,1]",
    );
    let a = bank_of(&[
        (0, vec![&[1.0, 0.2], &[0.3, 1.0], &[-0.4, 0.9]]),
        (1, vec![&[0.1, -1.0]]),
    ]);
    let b = bank_of(&[
        (0, vec![&[-0.4, 0.9], &[1.0, 0.2], &[0.3, 1.0]]),
        (1, vec![&[0.1, -1.0]]),
    ]);
    c.check(a == b, "bank invariant to utterance order");

    let one = bank_of(&[(7, vec![&[0.3, 0.4]])]);
    c.check(
        c_sc_loss(&unit(&[1.0, 0.0]), &one, 7).unwrap() == 0.0,
        "centroid loss with one speaker",
    );
    let pair = bank_of(&[(0, vec![&[1.0, 0.0]]), (1, vec![&[0.0, 1.0]])]);
    c.close(
        c_sc_loss(&unit(&[1.0, 0.0]), &pair, 0).unwrap(),
        (1.0 + (-1.0f64).exp()).ln(),
        tol,
        "centroid loss two speakers",
    );
    c.close(
        (1.0 + (-1.0f64).exp()).ln(),
        0.31326,
        1e-5,
        "ln(1+e^-1) reference digits",
    );
    let four = bank_of(&[
        (0, vec![&[1.0, 1.0, 0.0]]),
        (1, vec![&[1.0, -1.0, 0.0]]),
        (2, vec![&[1.0, 0.0, 1.0]]),
        (3, vec![&[1.0, 0.0, -1.0]]),
    ]);
    c.close(
        c_sc_loss(&unit(&[1.0, 0.0, 0.0]), &four, 3).unwrap(),
        4f64.ln(),
        tol,
        "centroid loss uniform",
    );
    c.check(
        c_sc_loss(&x, &pair, 9).is_err(),
        "centroid loss unknown speaker",
    );

    c.close(
        ce_loss(&[0.25; 5], 3).unwrap(),
        5f64.ln(),
        tol,
        "ce uniform",
    );
    c.check(
        ce_loss(&[0.0, 30.0, 0.0], 1).unwrap() < 1e-12,
        "ce confident",
    );
    let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    c.close(
        ce_loss(&[1.0, 2.0, 3.0], 2).unwrap(),
        direct,
        tol,
        "ce [1,2,3]",
    );
    c.close(direct, 0.40761, 1e-5, "ce reference digits");
    c.check(ce_loss(&[1.0, 2.0], 2).is_err(), "ce class out of range");

    let zero = LossWeights::new(0.0, 0.0).unwrap();
    c.check(
        combined_loss(5.0, 2.0, 0.3, &zero).total == 5.0,
        "beta = lambda = 0 keeps the signal term",
    );
    let w = LossWeights::new(0.1, 0.1).unwrap();
    c.close(
        combined_loss(5.0, 2.0, 0.3, &w).total,
        4.23,
        tol,
        "0.8*5 + 0.1*2 + 0.1*0.3",
    );
    c.close(
        w.sisdr_weight() + w.beta + w.lambda,
        1.0,
        1e-15,
        "weights sum to one",
    );

    let sched = ClsSchedule::new(100, true).unwrap();
    c.check(omega_at(0, &sched).unwrap() == 1.0, "omega at step 0");
    c.close(
        omega_at(100, &sched).unwrap(),
        0.8,
        1e-15,
        "omega at the last step",
    );
    c.close(
        omega_at(50, &sched).unwrap(),
        0.9,
        1e-15,
        "omega at the midpoint",
    );

    c.check(cls_gate(0.5, 0.9, 0.8) == 0.0, "gate closed above omega");
    c.check(cls_gate(0.5, 0.7, 0.8) == 0.5, "gate open below omega");
    c.check(cls_gate(0.5, 0.8, 0.8) == 0.5, "gate open at omega");

    let open = cls_combined_loss(5.0, 2.0, 0.3, 0.7, &w, &sched, 100).unwrap();
    c.check(
        open.gate_open && open.total == combined_loss(5.0, 2.0, 0.3, &w).total,
        "open gate equals combined",
    );
    let shut = cls_combined_loss(5.0, 2.0, 0.3, 0.95, &w, &sched, 100).unwrap();
    c.check(
        !shut.gate_open && shut.total == 0.8 * 5.0 + 0.1 * 2.0,
        "closed gate drops the consistency term",
    );
    let off = ClsSchedule::new(100, false).unwrap();
    let all_steps = (0..=100).all(|step| {
        cls_combined_loss(5.0, 2.0, 0.3, 0.99, &w, &off, step)
            .unwrap()
            .total
            == combined_loss(5.0, 2.0, 0.3, &w).total
    });
    c.check(all_steps, "disabled schedule equals combined at every step");

    let mut params = Params::new();
    params.insert("p", Tensor::row_from(&[0.0]));
    let grads = Gradients::from_map([("p".to_string(), Tensor::row_from(&[0.1]))].into());
    let mut state = AdamState::new();
    adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
    let delta = params.get("p").unwrap().data()[0];
    c.close(
        delta,
        -1e-3 * 0.1 / (0.01f64.sqrt() + 1e-8),
        1e-15,
        "first adam step",
    );
    c.close(delta, -9.99997e-4, 1e-8, "first adam step near -9.99997e-4");

    let train = TrainConfig::default();
    c.check(lr_at(0, &train).unwrap() == 1e-3, "lr at epoch 0");
    c.check(
        lr_at(train.epochs - 1, &train).unwrap() == 2.5e-5,
        "lr at the last epoch",
    );
    c.verdict()
}

/// Clean single-speaker items whose enrollment is the mixture itself, so the
/// re-encoded estimate stays close to the cue.
fn clean_batch(lab: &SeedLab, n: usize, cue: bool) -> Vec<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let segment = (lab.cfg.train.segment_seconds * f64::from(lab.corpus.sample_rate())) as usize;
    lab.corpus
        .manifest
        .utterances
        .iter()
        .filter(|u| u.split == Split::Train)
        .step_by(13)
        .take(n)
        .map(|u| {
            let w = lab.corpus.audio(&u.id).unwrap().clone();
            let sample = MixtureSample {
                sample_id: format!("clean/{}", u.id),
                mixture_id: u.id.clone(),
                mixture: w.clone(),
                target: w.clone(),
                interferer: Waveform::new(vec![0.0; w.len()], w.sample_rate()).unwrap(),
                enrollment: w.clone(),
                enrollment_id: u.id.clone(),
                target_utterance: u.id.clone(),
                target_speaker: u.speaker,
                snr_db: 0.0,
            };
            let c = cue.then(|| encode_speaker(&w, &lab.encoder, &lab.arch).unwrap());
            PreparedSample::new(&sample, w, c, segment, &lab.arch, &mut rng).unwrap()
        })
        .collect()
}

fn mixture_batch(lab: &SeedLab, n: usize, cue: bool) -> Vec<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let segment = (lab.cfg.train.segment_seconds * f64::from(lab.corpus.sample_rate())) as usize;
    lab.corpus
        .samples(Split::Train)
        .unwrap()
        .into_iter()
        .take(n)
        .map(|s| {
            let c = cue.then(|| encode_speaker(&s.enrollment, &lab.encoder, &lab.arch).unwrap());
            PreparedSample::new(&s, s.enrollment.clone(), c, segment, &lab.arch, &mut rng).unwrap()
        })
        .collect()
}

fn criterion_suppression(lab: &mut Lab) -> Verdict {
    let lab = lab.seed(0);
    let mut c = Checks::default();
    let groups = speaker_groups(&lab.corpus, Split::Train);
    let bank = build_centroid_bank(&lab.encoder, &lab.arch, &groups).unwrap();
    let classes = class_indices(&lab.corpus);
    let total_steps = 20;
    let mut min_secs_closed = f64::INFINITY;

    let cells = [
        (EncoderMode::Frozen, ConsistencyMode::Sc),
        (EncoderMode::Frozen, ConsistencyMode::Centroid),
        (EncoderMode::Joint, ConsistencyMode::Centroid),
    ];
    for (mode, consistency) in cells {
        let joint = mode == EncoderMode::Joint;
        let cfg = TrainConfig::default().with_modes(mode, consistency, true);
        let disabled_cfg = TrainConfig::default().with_modes(mode, consistency, false);
        let bank_ref = (consistency == ConsistencyMode::Centroid && !joint).then_some(&bank);
        let joint_bank;
        let bank_ref = if joint {
            let enc = SpeakerEncoderParams::init(21, &lab.arch.config);
            joint_bank = build_centroid_bank(&enc, &lab.arch, &groups).unwrap();
            Some(&joint_bank)
        } else {
            bank_ref
        };
        let encoder = if joint {
            SpeakerEncoderParams::init(21, &lab.arch.config)
        } else {
            lab.encoder.clone()
        };
        let separator = sctse::model::SeparatorParams::init(22, &lab.arch.config);
        let state = TrainState::new(&encoder, &separator, ChaCha8Rng::seed_from_u64(23));
        let on = ClsSchedule::new(total_steps, true).unwrap();
        let off = ClsSchedule::new(total_steps, false).unwrap();
        let ctx = |cfg: &'_ TrainConfig, schedule: &'_ ClsSchedule| -> (TrainConfig, ClsSchedule) {
            (cfg.clone(), *schedule)
        };
        let label = format!("{mode}/{consistency}");

        // Final step: omega = 0.8 and every clean item sits above it.
        let (cfg_on, sched_on) = ctx(&cfg, &on);
        let step_ctx = StepContext {
            arch: &lab.arch,
            cfg: &cfg_on,
            schedule: &sched_on,
            bank: bank_ref,
            classes: &classes,
        };
        if !joint {
            let batch = clean_batch(lab, 6, true);
            let refs: Vec<&PreparedSample> = batch.iter().collect();
            let mut gated = state.clone();
            let mut dropped = state.clone();
            let r = train_step(
                &refs,
                &mut gated,
                &step_ctx,
                total_steps,
                1e-3,
                Objective::Configured,
            )
            .unwrap();
            train_step(
                &refs,
                &mut dropped,
                &step_ctx,
                total_steps,
                1e-3,
                Objective::WithoutConsistency,
            )
            .unwrap();
            let all_above = r
                .breakdowns
                .iter()
                .all(|(_, b)| b.secs.unwrap() > b.omega && !b.gate_open);
            for (_, b) in &r.breakdowns {
                min_secs_closed = min_secs_closed.min(b.secs.unwrap());
            }
            c.check(
                all_above,
                format!("{label}: constructed batch has every SECS above omega"),
            );
            c.check(
                gated.params == dropped.params,
                format!("{label}: suppressed update equals lambda=0 update"),
            );
            c.check(
                gated.adam == dropped.adam,
                format!("{label}: optimiser state matches"),
            );
        }

        // First step: omega = 1 so every gate is open.
        let batch = mixture_batch(lab, 6, !joint);
        let refs: Vec<&PreparedSample> = batch.iter().collect();
        let (cfg_off, sched_off) = ctx(&disabled_cfg, &off);
        let ungated_ctx = StepContext {
            arch: &lab.arch,
            cfg: &cfg_off,
            schedule: &sched_off,
            bank: bank_ref,
            classes: &classes,
        };
        let mut gated = state.clone();
        let mut ungated = state.clone();
        let r = train_step(&refs, &mut gated, &step_ctx, 0, 1e-3, Objective::Configured).unwrap();
        train_step(
            &refs,
            &mut ungated,
            &ungated_ctx,
            0,
            1e-3,
            Objective::Configured,
        )
        .unwrap();
        c.check(
            r.breakdowns
                .iter()
                .all(|(_, b)| b.secs.unwrap() <= b.omega && b.gate_open),
            format!("{label}: every SECS at or below omega at step 0"),
        );
        c.check(
            gated.params == ungated.params,
            format!("{label}: open-gate update equals ungated update"),
        );
    }
    let mut v = c.verdict();
    v.detail = format!("{}, lowest suppressed SECS {min_secs_closed:.4}", v.detail);
    v
}

fn criterion_dsp() -> Verdict {
    let mut c = Checks::default();
    let cfg = StftConfig::hann(256, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for len in [256usize, 1000, 4321, 16000] {
        let w = Waveform::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            8000,
        )
        .unwrap();
        let y = istft(&stft(&w, &cfg).unwrap()).unwrap();
        c.check(y.len() == len, format!("round trip keeps {len} samples"));
        // Samples under two overlapping windows.
        let frames = cfg.frame_count(len);
        for i in cfg.window_length() - cfg.hop()..(frames - 1) * cfg.hop() + cfg.hop() {
            worst = worst.max((y.samples()[i] - w.samples()[i]).abs());
        }
    }
    c.check(
        worst <= 1e-10,
        format!("stft/istft round trip error {worst:e}"),
    );

    let w = Waveform::new(
        (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect(),
        8000,
    )
    .unwrap();
    let s = stft(&w, &cfg).unwrap();
    for plan in [
        BandPlan::desk_default(129).unwrap(),
        BandPlan::from_widths(&[1, 64, 64]).unwrap(),
        BandPlan::new(vec![0..129], 129).unwrap(),
    ] {
        let (re, im) = band_merge(&band_split(&s, &plan).unwrap(), &plan, s.frames()).unwrap();
        c.check(
            re == s.re() && im == s.im(),
            format!("band split/merge bit-exact for {:?}", plan.widths()),
        );
    }

    let reference: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
    let est: Vec<f64> = reference
        .iter()
        .map(|r| r + 0.3 * rng.random_range(-1.0..1.0))
        .collect();
    let base = si_sdr(&est, &reference).unwrap();
    for k in [0.1, 1.0, 10.0, -1.0] {
        let scaled: Vec<f64> = est.iter().map(|e| k * e).collect();
        c.close(
            si_sdr(&scaled, &reference).unwrap(),
            base,
            1e-9,
            &format!("si_sdr scale {k}"),
        );
    }

    let row = |d: f64| MetricRow {
        sample_id: format!("{d}"),
        mixture_id: "m".into(),
        target_speaker: 0,
        si_sdr_db: d,
        si_sdri_db: d,
        success: d > 1.0,
        similarity: 0.0,
        sdr_db: 0.0,
    };
    c.check(
        extraction_accuracy(&[row(1.0)]).unwrap() == 0.0,
        "exactly 1 dB fails",
    );
    c.check(
        extraction_accuracy(&[row(1.0 + 1e-12)]).unwrap() == 1.0,
        "just above 1 dB succeeds",
    );
    let mixed = [row(2.0), row(0.5), row(1.5)];
    c.close(
        extraction_accuracy(&mixed).unwrap(),
        2.0 / 3.0,
        1e-15,
        "accuracy of [2.0, 0.5, 1.5]",
    );
    c.verdict()
}

fn criterion_pretraining(lab: &mut Lab) -> Verdict {
    let lab = lab.seed(0);
    let (same, diff) = margin_probe(&lab.encoder, &lab.arch, &lab.corpus, Split::Test).unwrap();
    let pass = lab.pretrain_accuracy >= 0.95
        && lab.pretrain_epochs <= 30
        && lab.pretrain_time < Duration::from_secs(600)
        && same > diff;
    verdict(
        pass,
        format!(
            "accuracy {:.4} after {} epochs in {:.1}s; held-out cosine same {:.3} vs different {:.3}",
            lab.pretrain_accuracy,
            lab.pretrain_epochs,
            lab.pretrain_time.as_secs_f64(),
            same,
            diff
        ),
    )
}

fn criterion_training(lab: &mut Lab) -> Verdict {
    let (report, elapsed) = lab.run(0, ConsistencyMode::None, false);
    let a = report.aggregates;
    let pass = a.si_sdri_db >= 3.0 && a.accuracy_pct >= 70.0 && elapsed < Duration::from_secs(1800);
    verdict(
        pass,
        format!(
            "SI-SDRi {:.3} dB (need 3), Acc {:.1}% (need 70), SI-SDR {:.3} dB, Sim {:.2}, {} rows, {:.0}s",
            a.si_sdri_db,
            a.accuracy_pct,
            a.si_sdr_db,
            a.similarity_pct,
            report.rows.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_ablation(lab: &mut Lab) -> Verdict {
    let mut sim_wins = 0;
    let mut cls_wins = 0;
    let mut parts = Vec::new();
    for seed in ABLATION_SEEDS {
        let base = lab.run(seed, ConsistencyMode::None, false).0.aggregates;
        let centroid = lab.run(seed, ConsistencyMode::Centroid, false).0.aggregates;
        let with_cls = lab.run(seed, ConsistencyMode::Centroid, true).0.aggregates;
        sim_wins += usize::from(centroid.similarity_pct > base.similarity_pct);
        cls_wins += usize::from(with_cls.si_sdri_db >= centroid.si_sdri_db);
        parts.push(format!(
            "seed {seed}: Sim {:.2}->{:.2}, SI-SDRi {:.2}/{:.2}/{:.2}",
            base.similarity_pct,
            centroid.similarity_pct,
            base.si_sdri_db,
            centroid.si_sdri_db,
            with_cls.si_sdri_db
        ));
    }
    verdict(
        sim_wins >= 2 && cls_wins >= 2,
        format!(
            "centroid Sim wins {sim_wins}/3, CLS SI-SDRi wins {cls_wins}/3; {}",
            parts.join("; ")
        ),
    )
}

const TINY: &str = r#"
seed = 9

[corpus]
train_speakers = 4
train_utterances = 3
test_speakers = 2
test_utterances = 3
min_duration_s = 0.5
max_duration_s = 0.7
train_mixtures = 6
valid_mixtures = 1
test_mixtures = 3

[model]
embed_dim = 6
encoder_hidden = 8
feature_dim = 6
depth = 1
num_speakers = 4

[pretrain]
max_epochs = 3
min_accuracy = 0.0

[train]
epochs = 3
batch_size = 2
segment_seconds = 0.6
checkpoint_avg_k = 2
"#;

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Runs the whole command sequence into `out` and returns stdout with the
/// directory name replaced.
fn command_sequence(config: &str, out: &Path) -> Result<String, String> {
    let o = out.display().to_string();
    let bank = out.join("centroids.bank").display().to_string();
    let mut transcript = String::new();
    let mut go = |args: Vec<&str>| -> Result<String, String> {
        let mut full = vec!["sctse"];
        full.extend(args.iter().copied());
        let r = sctse::cli::run(full);
        if r.code != 0 {
            return Err(format!("{args:?} exited {}: {}", r.code, r.stderr));
        }
        transcript.push_str(&r.stdout.replace(&o, "<out>"));
        Ok(r.stdout)
    };
    go(vec!["gen-data", "-c", config, "--out", &o])?;
    go(vec!["pretrain-encoder", "-c", config, "--out", &o])?;
    go(vec!["build-centroids", "-c", config, "--out", &o])?;
    let mut runs = Vec::new();
    for flags in [
        vec![],
        vec![
            "--consistency",
            "centroid",
            "--bank",
            bank.as_str(),
            "--cls",
            "on",
        ],
        vec!["--encoder-mode", "joint", "--consistency", "sc"],
    ] {
        let mut args = vec!["train", "-c", config, "--out", &o];
        args.extend(flags);
        let stdout = go(args)?;
        let run = stdout
            .lines()
            .find_map(|l| l.strip_prefix("run="))
            .unwrap()
            .to_string();
        go(vec!["eval", "-c", config, "--out", &o, "--run", &run])?;
        runs.push(run);
    }
    let report = out.join("report").display().to_string();
    let mut args = vec!["report"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--out", report.as_str()]);
    go(args)?;
    go(vec!["gradcheck", "-c", config, "--out", &o])?;
    Ok(transcript)
}

fn criterion_determinism(lab: &mut Lab) -> Verdict {
    let mut c = Checks::default();
    let root = lab.root.path().join("determinism");
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let config = config.display().to_string();
    let mut transcripts = Vec::new();
    let mut trees = Vec::new();
    for name in ["first", "second"] {
        let out = root.join(name);
        match command_sequence(&config, &out) {
            Ok(t) => transcripts.push(t),
            Err(e) => return verdict(false, e),
        }
        trees.push(files_under(&out));
    }
    c.check(
        transcripts[0] == transcripts[1],
        "command output differs between repeats",
    );
    let names: Vec<&PathBuf> = trees[0].keys().collect();
    c.check(
        names == trees[1].keys().collect::<Vec<_>>(),
        "output file sets differ",
    );
    for (path, bytes) in &trees[0] {
        c.check(
            trees[1].get(path) == Some(bytes),
            format!("{} differs", path.display()),
        );
    }

    let ckpt =
        sctse::train::Checkpoint::load(root.join("first/runs/frozen-none-cls-off/epoch002.ckpt"))
            .unwrap();
    let avg = average_checkpoints(&vec![ckpt.clone(); 5]).unwrap();
    c.check(
        avg.params == ckpt.params,
        "average of 5 equal checkpoints changes parameters",
    );
    c.check(
        avg.to_text() == ckpt.to_text(),
        "average of 5 equal checkpoints changes the file",
    );
    let mut v = c.verdict();
    v.detail = format!("{} files compared, {}", trees[0].len(), v.detail);
    v
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SCTSE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut lab = Lab::new();
    type Criterion = fn(&mut Lab) -> Verdict;
    let criteria: [(usize, &str, Criterion); 8] = [
        (1, "gradient battery", |_| criterion_gradients()),
        (2, "loss unit values", |_| criterion_loss_values()),
        (3, "suppression equivalence", criterion_suppression),
        (4, "signal processing", |_| criterion_dsp()),
        (5, "pretraining sanity", criterion_pretraining),
        (6, "end-to-end training", criterion_training),
        (7, "directional ablation", criterion_ablation),
        (8, "determinism", criterion_determinism),
    ];
    let mut failures = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run(&mut lab);
        failures += usize::from(!v.pass);
        println!(
            "criterion {id} {name}: {} ({}; {:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
