//! The training loop: sample, encode, generate or sample class weights,
//! compute the margin loss, then update class weights and the encoder.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{FullSoftmaxHead, FullWeightMatrix, SampledSoftmaxHead};
use crate::config::PmConfig;
use crate::dataset::{DatasetConfig, SyntheticDataset};
use crate::diagnostics::{
    class_center, default_n_longest, generated_probe, obsolescence_metric, SampleClock,
};
use crate::distill::Teacher;
use crate::encoder::LinearEncoder;
use crate::error::{Error, Result};
use crate::head::{ClassBatch, ClassifierHead, PrototypeMemoryHead, SystemKind};
use crate::mining::{top_nontarget, DoppelgangerTable, HardnessTable};
use crate::sampling::{stream_rng, BatchSampler, PartConfig, SamplingContext};
use crate::vector::{dot, normalize, ClassId, ExampleId, UnitVector};

const ENCODER_STREAM: u64 = 10;
const MATRIX_STREAM: u64 = 11;
const NEGATIVES_STREAM: u64 = 12;
const PROBE_STREAM: u64 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    /// Steps at which the learning rate is divided by 10.
    #[serde(default)]
    pub lr_drops: Vec<u64>,
    /// Learning rate for class weights; the encoder's when absent.
    #[serde(default)]
    pub prototype_learning_rate: Option<f64>,
    #[serde(default = "default_plan")]
    pub sampling: Vec<PartConfig>,
    /// Classes per step for sampled softmax baselines; `M` when absent.
    #[serde(default)]
    pub sample_size: Option<usize>,
    /// 0 disables evaluation.
    #[serde(default)]
    pub eval_every: u64,
    /// 0 disables obsolescence measurement.
    #[serde(default)]
    pub obsolescence_every: u64,
    /// Classes averaged by the obsolescence metric; `min(100, N_c / 20)` when absent.
    #[serde(default)]
    pub n_longest: Option<usize>,
}

fn default_plan() -> Vec<PartConfig> {
    vec![PartConfig::IterateShuffle { groups: 8 }]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(lr) = self.prototype_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "prototype_learning_rate must be non-negative, got {lr}"
                )));
            }
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_drops must be strictly increasing".into()));
        }
        if self.sampling.is_empty() || self.sampling.iter().any(|p| p.groups() == 0) {
            return Err(Error::Config(
                "sampling plan needs parts with at least one group".into(),
            ));
        }
        Ok(())
    }

    fn decay(&self, step: u64) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&s| s <= step).count();
        10f64.powi(-(drops as i32))
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.decay(step)
    }

    pub fn prototype_learning_rate_at(&self, step: u64) -> f64 {
        self.prototype_learning_rate.unwrap_or(self.learning_rate) * self.decay(step)
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub pm: PmConfig,
    pub train: TrainConfig,
    #[serde(default = "default_system")]
    pub system: SystemKind,
}

fn default_system() -> SystemKind {
    SystemKind::Pm
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.pm.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn sample_size(&self) -> usize {
        self.train.sample_size.unwrap_or(self.pm.memory_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub occupancy: usize,
    pub evictions: usize,
    pub refreshes: usize,
    pub enqueues: usize,
    /// Distinct classes in the batch.
    pub batch_classes: usize,
    pub transfer_bytes: u64,
    pub eval_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,occupancy,evictions,refreshes,eval_accuracy";
pub const OBSOLESCENCE_HEADER: &str = "step,system,metric";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let acc = self
            .eval_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.occupancy, self.evictions, self.refreshes, acc
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObsolescencePoint {
    pub step: u64,
    pub system: SystemKind,
    pub metric: Option<f64>,
}

impl ObsolescencePoint {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{}",
            self.step,
            self.system,
            self.metric.map(|m| m.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub obsolescence: Vec<ObsolescencePoint>,
}

impl TrainLog {
    pub fn write_metrics<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_line())?;
        }
        Ok(())
    }

    pub fn write_obsolescence<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{OBSOLESCENCE_HEADER}")?;
        for p in &self.obsolescence {
            writeln!(w, "{}", p.csv_line())?;
        }
        Ok(())
    }
}

fn build_head(cfg: &ExperimentConfig) -> Result<Box<dyn ClassifierHead>> {
    let (n, d, seed) = (cfg.dataset.num_classes, cfg.pm.dim, cfg.pm.seed);
    Ok(match cfg.system {
        SystemKind::Pm => Box::new(PrototypeMemoryHead::new(
            d,
            cfg.pm.memory_size,
            cfg.pm.refresh_ratio,
        )),
        kind @ (SystemKind::Pprn | SystemKind::DSoftmaxK) => {
            let matrix = FullWeightMatrix::random(n, d, &mut stream_rng(seed, MATRIX_STREAM));
            Box::new(SampledSoftmaxHead::new(
                kind,
                matrix,
                cfg.sample_size(),
                stream_rng(seed, NEGATIVES_STREAM),
            )?)
        }
        SystemKind::Full => Box::new(FullSoftmaxHead::new(FullWeightMatrix::random(
            n,
            d,
            &mut stream_rng(seed, MATRIX_STREAM),
        ))),
    })
}

pub struct Trainer<'a> {
    config: ExperimentConfig,
    dataset: &'a SyntheticDataset,
    encoder: LinearEncoder,
    head: Box<dyn ClassifierHead>,
    sampler: BatchSampler,
    hardness: HardnessTable,
    doppelgangers: DoppelgangerTable,
    clock: SampleClock,
    teacher: Option<Teacher>,
    probe_rng: ChaCha8Rng,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: ExperimentConfig, dataset: &'a SyntheticDataset) -> Result<Self> {
        config.validate()?;
        if dataset.num_classes() != config.dataset.num_classes
            || dataset.dim_in() != config.dataset.dim_in
        {
            return Err(Error::Config(
                "dataset does not match the dataset config".into(),
            ));
        }
        let seed = config.pm.seed;
        let encoder = LinearEncoder::random(
            dataset.dim_in(),
            config.pm.dim,
            &mut stream_rng(seed, ENCODER_STREAM),
        );
        let head = build_head(&config)?;
        let sampler = BatchSampler::from_plan(
            dataset.index().clone(),
            config.pm.group_size,
            config.pm.hardness_ratio,
            &config.train.sampling,
            seed,
        )?;
        Ok(Trainer {
            hardness: HardnessTable::new(dataset.num_examples()),
            doppelgangers: DoppelgangerTable::new(dataset.num_classes()),
            clock: SampleClock::new(dataset.num_classes()),
            teacher: None,
            probe_rng: stream_rng(seed, PROBE_STREAM),
            step: 0,
            config,
            dataset,
            encoder,
            head,
            sampler,
        })
    }

    /// Generates prototypes from `teacher` instead of the student.
    pub fn with_teacher(mut self, teacher: LinearEncoder) -> Result<Self> {
        if self.config.system != SystemKind::Pm {
            return Err(Error::Config(format!(
                "a teacher needs the prototype memory system, not {}",
                self.config.system
            )));
        }
        self.teacher = Some(Teacher::new(
            teacher,
            self.dataset.dim_in(),
            self.config.pm.dim,
        )?);
        Ok(self)
    }

    pub fn with_encoder(mut self, encoder: LinearEncoder) -> Result<Self> {
        if encoder.dim_in() != self.dataset.dim_in() || encoder.dim_out() != self.config.pm.dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.pm.dim,
                got: encoder.dim_out(),
            });
        }
        self.encoder = encoder;
        Ok(self)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn encoder(&self) -> &LinearEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &dyn ClassifierHead {
        self.head.as_ref()
    }

    pub fn hardness(&self) -> &HardnessTable {
        &self.hardness
    }

    pub fn doppelgangers(&self) -> &DoppelgangerTable {
        &self.doppelgangers
    }

    pub fn clock(&self) -> &SampleClock {
        &self.clock
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One training step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let dataset = self.dataset;
        let loss_fn = self.config.pm.loss;
        let batch = self.sampler.next_batch(&SamplingContext {
            hardness: Some(&self.hardness),
            doppelgangers: Some(&self.doppelgangers),
        });

        let examples: Vec<(ClassId, ExampleId)> = batch.examples().collect();
        let inputs: Vec<&[f64]> = examples.iter().map(|&(_, e)| dataset.example(e)).collect();
        let raw: Vec<Vec<f64>> = inputs.iter().map(|x| self.encoder.forward_raw(x)).collect();
        let teacher_embeddings = match self.teacher.as_mut() {
            Some(t) => t.embed_batch(&inputs)?,
            None => raw
                .iter()
                .map(|r| normalize(r))
                .collect::<Result<Vec<_>>>()?,
        };

        let merged = batch.merged_classes();
        let classes: Vec<ClassBatch<'_>> = merged
            .iter()
            .map(|(class, positions)| ClassBatch {
                class: *class,
                embeddings: positions
                    .iter()
                    .map(|&i| teacher_embeddings[i].as_slice())
                    .collect(),
            })
            .collect();
        let report = self.head.prepare(&classes, step)?;
        if self.head.kind() == SystemKind::Pm {
            assert_eq!(
                report.refreshed + report.enqueued,
                classes.len(),
                "every batch class refreshes or enqueues once"
            );
        }
        self.clock.mark(&report.touched, step);

        let view = self.head.view();
        // A class can be evicted by a later class of the same batch when the
        // batch has more classes than the memory holds; its rows sit out.
        let kept: Vec<usize> = (0..examples.len())
            .filter(|&i| view.contains(examples[i].0))
            .collect();
        let kept_raw: Vec<&[f64]> = kept.iter().map(|&i| raw[i].as_slice()).collect();
        let targets: Vec<Option<usize>> =
            kept.iter().map(|&i| view.position(examples[i].0)).collect();
        let grad = loss_fn.backward(&kept_raw, &targets, &view)?;

        let mut scored = Vec::with_capacity(kept.len());
        let mut tops = Vec::with_capacity(kept.len());
        for (row, &i) in grad.rows.iter().zip(&kept) {
            let (class, example) = examples[i];
            let t = row.target.expect("kept rows have targets");
            scored.push((example, row.cosines[t]));
            if let Some(top) = top_nontarget(row, view.ids()) {
                tops.push((class, top));
            }
        }
        for (class, top) in tops {
            self.doppelgangers.update(class, top, |c| view.contains(c));
        }
        drop(view);
        self.hardness.update_hardness(&scored);

        let lr = self.config.train.learning_rate_at(step);
        let proto_lr = self.config.train.prototype_learning_rate_at(step);
        self.head.apply_gradients(&grad.d_prototypes, proto_lr)?;
        let d_w = self.encoder.backward_raw(
            &kept.iter().map(|&i| inputs[i]).collect::<Vec<_>>(),
            &grad.d_embeddings,
        );
        self.encoder.sgd_step(&d_w, lr);

        self.step += 1;
        let eval_every = self.config.train.eval_every;
        let eval_accuracy = if eval_every > 0 && self.step.is_multiple_of(eval_every) {
            Some(self.evaluate()?)
        } else {
            None
        };
        Ok(StepRecord {
            step,
            loss: grad.loss,
            occupancy: self.head.occupancy(),
            evictions: report.evicted.len(),
            refreshes: report.refreshed,
            enqueues: report.enqueued,
            batch_classes: classes.len(),
            transfer_bytes: report.transfer_bytes,
            eval_accuracy,
        })
    }

    /// Runs the configured number of steps. Obsolescence is measured before
    /// the first step and then every `obsolescence_every` steps.
    pub fn run(&mut self) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let every = self.config.train.obsolescence_every;
        if every > 0 && self.config.train.steps > 0 {
            log.obsolescence.push(self.obsolescence_point()?);
        }
        for _ in 0..self.config.train.steps {
            log.records.push(self.step()?);
            if every > 0 && self.step.is_multiple_of(every) {
                log.obsolescence.push(self.obsolescence_point()?);
            }
        }
        Ok(log)
    }

    pub fn obsolescence_point(&mut self) -> Result<ObsolescencePoint> {
        Ok(ObsolescencePoint {
            step: self.step,
            system: self.config.system,
            metric: self.obsolescence()?,
        })
    }

    /// Mean distance between class prototypes and class centers over the
    /// longest-unsampled classes. Prototype memory regenerates its probe from
    /// `k` random images; the other systems use their stored rows. `None`
    /// when prototype memory has not seen a class yet.
    pub fn obsolescence(&mut self) -> Result<Option<f64>> {
        let n = self
            .config
            .train
            .n_longest
            .unwrap_or_else(|| default_n_longest(self.dataset.num_classes()));
        let (encoder, dataset) = (&self.encoder, self.dataset);
        let center = |c: ClassId| class_center(encoder, dataset, c);
        if self.config.system == SystemKind::Pm {
            let classes = self.clock.longest_unsampled(n, false);
            let k = self.config.pm.group_size;
            let rng = &mut self.probe_rng;
            obsolescence_metric(
                &classes,
                |c| generated_probe(encoder, dataset, c, k, rng),
                center,
            )
        } else {
            let classes = self.clock.longest_unsampled(n, true);
            let head = self.head.as_ref();
            obsolescence_metric(
                &classes,
                |c| {
                    let row = head.stored_prototype(c).ok_or(Error::MissingClass(c))?;
                    normalize(row)
                },
                center,
            )
        }
    }

    /// Encoded class directions: the frozen probe held-out examples are
    /// classified against.
    pub fn center_probe(&self) -> Result<Vec<UnitVector>> {
        (0..self.dataset.num_classes())
            .map(|c| {
                self.encoder
                    .forward(self.dataset.direction(ClassId(c as u32)))
            })
            .collect()
    }

    /// Nearest-center accuracy on the held-out examples.
    pub fn evaluate(&self) -> Result<f64> {
        nearest_center_accuracy(&self.encoder, &self.center_probe()?, self.dataset)
    }

    /// Writes the encoder, the classifier state and the mining tables into `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            Ok(std::io::BufWriter::new(std::fs::File::create(
                dir.join(name),
            )?))
        };
        let mut w = file("encoder.bin")?;
        self.encoder.write_to(&mut w)?;
        w.flush()?;
        let mut w = file("classifier.bin")?;
        let view = self.head.view();
        crate::io::write_u64(&mut w, self.head.kind() as u64)?;
        crate::io::write_u64(&mut w, view.dim() as u64)?;
        crate::io::write_u64(&mut w, view.len() as u64)?;
        for j in 0..view.len() {
            crate::io::write_u64(&mut w, view.class_at(j).0 as u64)?;
            crate::io::write_f64s(&mut w, view.row(j))?;
        }
        w.flush()?;
        let mut w = file("doppelgangers.bin")?;
        self.doppelgangers.write_to(&mut w)?;
        w.flush()?;
        let mut w = file("hardness.bin")?;
        self.hardness.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Share of held-out examples whose embedding is closest to their own
/// class's center.
pub fn nearest_center_accuracy(
    encoder: &LinearEncoder,
    centers: &[UnitVector],
    dataset: &SyntheticDataset,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (x, label) in dataset.holdout() {
        let e = encoder.forward(x)?;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (c, center) in centers.iter().enumerate() {
            let s = dot(&e, center);
            if s > best.0 {
                best = (s, c);
            }
        }
        hits += usize::from(best.1 == label.index());
        total += 1;
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

/// Step counts at which each evaluated accuracy was first at least `target`.
pub fn steps_to_accuracy(records: &[StepRecord], target: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.eval_accuracy.is_some_and(|a| a >= target))
        .map(|r| r.step + 1)
}
