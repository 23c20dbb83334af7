//! Mini-batch training with validation-gated retention, and evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{center_crop, collate, load_manifest, load_samples, random_crop, split_811, synth_split, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{age_group_bin, AttributeSchema};
use crate::model::AgeNet;
use crate::optim::{adam_step, AdamState};
use crate::ranking::Reduction;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

impl Splits {
    /// Generates the synthetic splits or loads and splits the manifest.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if let Some(spec) = &cfg.synthetic {
            let [train, val, test] = synth_split(spec)?;
            return Ok(Splits { train, val, test });
        }
        let source = cfg
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("no data source configured".into()))?;
        Self::from_manifest(&source.path, &cfg.schema.resolve()?, cfg.split_seed())
    }

    pub fn from_manifest(path: &Path, schema: &AttributeSchema, seed: u64) -> Result<Self> {
        let manifest = load_manifest(path, schema)?;
        if let Some(r) = manifest.rejected.first() {
            return Err(Error::format(
                path,
                format!("{} rows rejected; first at line {}: {}", manifest.rejected.len(), r.line, r.reason),
            ));
        }
        let (train, val, test) = split_811(&manifest.entries, seed)?;
        Ok(Splits {
            train: load_samples(&train)?,
            val: load_samples(&val)?,
            test: load_samples(&test)?,
        })
    }

    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub val_mae: f64,
    pub retained: bool,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serialises")
    }
}

pub fn metrics_log(records: &[EpochRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: AgeNet,
    pub log: Vec<EpochRecord>,
}

fn image_side(samples: &[Sample]) -> Result<usize> {
    let mut side = usize::MAX;
    for s in samples {
        match s.image.shape() {
            [3, h, w] => side = side.min(*h).min(*w),
            other => return Err(Error::shape("train", format!("sample image is {other:?}, expected 3×H×W"))),
        }
    }
    Ok(side)
}

/// Trains from `cfg.train.seed`; with `out`, writes `metrics.jsonl` and
/// atomically replaces `best.agn` whenever validation MAE strictly improves.
pub fn train(cfg: &RunConfig, splits: &Splits, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let side = image_side(&splits.train)?.min(image_side(&splits.val)?);
    let crop = cfg.crop(side);
    if crop > side {
        return Err(Error::invalid(format!("crop {crop} exceeds smallest image side {side}")));
    }
    let tc = &cfg.train;
    let mut model = AgeNet::new(cfg.model_spec(crop)?, tc.seed)?;
    let schema = model.schema().clone();
    let opts = tc.loss_options();
    let mut adam = AdamState::new(tc.adam(), &model.store.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let cropped = chunk
                .iter()
                .map(|&i| {
                    let s = &splits.train[i];
                    Ok(Sample {
                        image: random_crop(&s.image, crop, &mut rng)?,
                        ..s.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = cropped.iter().collect();
            let batch = collate(&refs, &schema)?;

            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let x = g.constant(batch.images.clone());
            let fwd = model.forward(&mut g, &p, x)?;
            let loss = model.loss(&mut g, &fwd, &batch, &opts)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            loss_total += match tc.reduction {
                Reduction::Sum => value,
                Reduction::Mean => value * chunk.len() as f64,
            };
            g.backward(loss)?;
            let grads = p.grads(&g);
            let mut params = model.store.tensors();
            adam_step(&mut params, &grads, &mut adam)?;
            model.store.set_all(params)?;
        }

        let val_mae = evaluate(&model, &splits.val, crop)?.mae;
        let retained = best.as_ref().is_none_or(|c| val_mae < c.meta.best_val_mae);
        if retained {
            let ckpt = Checkpoint::from_model(&model, cfg.clone(), val_mae, epoch);
            if let Some(dir) = out {
                ckpt.save(&dir.join("best.agn"))?;
            }
            best = Some(ckpt);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_total / splits.train.len() as f64,
            val_mae,
            retained,
        };
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", record.to_json_line()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(record);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last: model,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMae {
    pub group: usize,
    /// Inclusive lower bound of the group.
    pub from_age: i32,
    pub count: usize,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mae: f64,
    pub per_group: Vec<GroupMae>,
    pub gender_accuracy: f64,
    pub age_group_accuracy: f64,
    pub ethnicity_accuracy: Option<f64>,
}

/// Centre-cropped pass over `samples` in batches of [`EVAL_BATCH`].
pub fn evaluate(model: &AgeNet, samples: &[Sample], crop: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let schema = model.schema();
    let mut preds = Vec::with_capacity(samples.len());
    let (mut gender_hits, mut group_hits, mut eth_hits) = (0usize, 0usize, 0usize);
    for chunk in samples.chunks(EVAL_BATCH) {
        let cropped = chunk
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: center_crop(&s.image, crop)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Sample> = cropped.iter().collect();
        let batch = collate(&refs, schema)?;
        let pred = model.predict(&batch.images)?;
        for (i, labels) in batch.attributes.iter().enumerate() {
            gender_hits += usize::from(pred.gender[i] == labels.gender);
            group_hits += usize::from(pred.age_group[i] == labels.age_group);
            if let Some(e) = &pred.ethnicity {
                eth_hits += usize::from(e[i] == labels.ethnicity);
            }
        }
        preds.extend(pred.ages);
    }
    let ages: Vec<i32> = samples.iter().map(|s| s.age).collect();
    let mae = crate::ranking::mae(&preds, &ages)?;
    let mut sums = vec![(0usize, 0.0f64); schema.age_groups()];
    for (&p, &a) in preds.iter().zip(&ages) {
        let slot = &mut sums[age_group_bin(a, schema)?];
        slot.0 += 1;
        slot.1 += (p - f64::from(a)).abs();
    }
    let per_group = sums
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(g, &(n, total))| GroupMae {
            group: g,
            from_age: schema.group_boundaries[g],
            count: n,
            mae: total / n as f64,
        })
        .collect();
    let n = samples.len() as f64;
    Ok(EvalReport {
        count: samples.len(),
        mae,
        per_group,
        gender_accuracy: gender_hits as f64 / n,
        age_group_accuracy: group_hits as f64 / n,
        ethnicity_accuracy: schema.has_ethnicity().then(|| eth_hits as f64 / n),
    })
}

/// Evaluates a stored checkpoint on data labelled under `schema`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[Sample], schema: &AttributeSchema) -> Result<EvalReport> {
    if &ckpt.meta.model.schema != schema {
        return Err(Error::invalid(format!(
            "schema mismatch: checkpoint was trained on `{}`, data uses `{}`",
            ckpt.meta.model.schema.name, schema.name
        )));
    }
    let model = ckpt.to_model()?;
    evaluate(&model, samples, ckpt.meta.model.network.input_resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, epochs: usize) -> RunConfig {
        RunConfig::from_toml_str(&format!(
            "schema = \"morph\"\n[train]\nepochs = {epochs}\nbatch_size = 3\nlearning_rate = {lr}\nseed = 4\n\
             [synthetic]\nresolution = 12\na_min = 16\na_max = 77\nnoise_sigma = 0.05\nseed = 2\ntrain = 7\nval = 3\ntest = 2\n"
        ))
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_everything() {
        let c = cfg(0.0, 3);
        let splits = Splits::from_config(&c).unwrap();
        let out = train(&c, &splits, None).unwrap();
        let init = AgeNet::new(c.model_spec(12).unwrap(), 4).unwrap();
        assert_eq!(out.last.store, init.store);
        assert!(out.log.iter().all(|r| r.val_mae == out.log[0].val_mae));
        assert_eq!(out.log.iter().filter(|r| r.retained).count(), 1);
        assert_eq!(out.best.meta.epoch, 1);
    }

    #[test]
    fn retention_tracks_strict_improvements() {
        let c = cfg(0.01, 4);
        let splits = Splits::from_config(&c).unwrap();
        let out = train(&c, &splits, None).unwrap();
        let mut best = f64::INFINITY;
        for r in &out.log {
            assert_eq!(r.retained, r.val_mae < best);
            best = best.min(r.val_mae);
        }
        assert_eq!(out.best.meta.best_val_mae, best);
    }

    #[test]
    fn writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(0.001, 2);
        let splits = Splits::from_config(&c).unwrap();
        let out = train(&c, &splits, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text, metrics_log(&out.log));
        assert!(text.lines().next().unwrap().starts_with("{\"epoch\":1,\"train_loss\":"));
        let saved = Checkpoint::load(&dir.path().join("best.agn")).unwrap();
        assert_eq!(saved, out.best);
    }

    #[test]
    fn empty_split_and_schema_mismatch() {
        let c = cfg(0.001, 1);
        let splits = Splits::from_config(&c).unwrap();
        let out = train(&c, &splits, None).unwrap();
        assert!(evaluate(&out.last, &[], 12).is_err());
        assert!(evaluate_checkpoint(&out.best, &splits.val, &AttributeSchema::utkface()).is_err());
        let r = evaluate_checkpoint(&out.best, &splits.val, &AttributeSchema::morph()).unwrap();
        assert_eq!(r.mae, out.best.meta.best_val_mae);
        assert_eq!(r.count, 3);
        assert!(r.ethnicity_accuracy.is_some());
    }
}
