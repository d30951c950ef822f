//! Alternating optimization, checkpoints and the metrics log.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::archive::{Archive, ArchiveWriter};
use crate::conditioning::{AttributeSet, ConditionBatch, ConditionMlp, Mode};
use crate::config::RunConfig;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, LossReport};
use crate::networks::{BackwardGenerator, ContentDiscriminator, ForwardGenerator, Networks, StyleDiscriminator};
use crate::params::{Adam, ParamStore};
use crate::perceptual::PerceptualNet;
use crate::rng::SeededRng;
use crate::schema::{AttributeSchema, Axis};

pub const CHECKPOINT_FILE: &str = "checkpoint.atp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ARCHIVE_KIND: &str = "train_state";

const GENERATOR_TAGS: [&str; 3] = [ForwardGenerator::<f32>::TAG, ConditionMlp::<f32>::TAG, BackwardGenerator::<f32>::TAG];
const DISCRIMINATOR_TAGS: [&str; 2] = [StyleDiscriminator::<f32>::TAG, ContentDiscriminator::<f32>::TAG];

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub schema: AttributeSchema,
    pub step: u64,
    pub nets: Networks<f32>,
    /// One optimizer per store, in [`Networks::all_stores`] order.
    pub optimizers: Vec<Adam<f32>>,
    pub data_rng: SeededRng,
    pub noise_rng: SeededRng,
    /// Frozen; rebuilt from the config on restore.
    pub perceptual: PerceptualNet<f32>,
}

struct Streams {
    init: SeededRng,
    data: SeededRng,
    noise: SeededRng,
    perceptual: SeededRng,
}

fn streams(seed: u64) -> Streams {
    let mut root = SeededRng::new(seed);
    Streams {
        init: root.fork(),
        data: root.fork(),
        noise: root.fork(),
        perceptual: root.fork(),
    }
}

impl TrainState {
    pub fn new(config: &RunConfig, schema: &AttributeSchema) -> Result<Self> {
        config.validate()?;
        let mut s = streams(config.seed);
        let nets = Networks::new(config, schema, &mut s.init);
        let optimizers = nets.all_stores().iter().map(|st| Adam::new(config.optimizer, st)).collect();
        Ok(TrainState {
            config: config.clone(),
            schema: schema.clone(),
            step: 0,
            nets,
            optimizers,
            data_rng: s.data,
            noise_rng: s.noise,
            perceptual: PerceptualNet::load(&config.perceptual, &mut s.perceptual)?,
        })
    }

    fn optimizer_index(tag: &str) -> usize {
        GENERATOR_TAGS
            .iter()
            .chain(&DISCRIMINATOR_TAGS)
            .position(|t| *t == tag)
            .expect("known store tag")
    }

    fn update(&mut self, tag: &'static str, graph: &Graph<f32>) {
        let i = Self::optimizer_index(tag);
        let store = self.nets.store_mut(tag).expect("known store tag");
        let grads = graph.param_grads(store);
        self.optimizers[i].step(store, &grads);
    }

    /// Writes the state to `path` and returns the archive id.
    pub fn snapshot(&self, path: &Path) -> Result<String> {
        let adam_steps: Vec<u64> = self.optimizers.iter().map(Adam::steps).collect();
        let meta = json!({
            "config": self.config,
            "schema": self.schema,
            "step": self.step,
            "data_rng": self.data_rng,
            "noise_rng": self.noise_rng,
            "adam_steps": adam_steps,
        });
        let mut w = ArchiveWriter::new(ARCHIVE_KIND, meta);
        for (store, opt) in self.nets.all_stores().iter().zip(&self.optimizers) {
            let (m, v) = opt.moments();
            for (i, (name, t)) in store.named().enumerate() {
                w.add(&name, t);
                w.add(&format!("adam.m.{name}"), &m[i]);
                w.add(&format!("adam.v.{name}"), &v[i]);
            }
        }
        w.write(path)
    }

    pub fn restore(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Restores and checks the label schema against `schema`.
    pub fn restore_for(path: &Path, schema: &AttributeSchema) -> Result<Self> {
        let state = Self::restore(path)?;
        state.schema.ensure_matches(schema)?;
        Ok(state)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.require_kind(ARCHIVE_KIND)?;
        let meta = a.meta();
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("archive metadata lacks {k}")))
        };
        let bad = |k: &str, e: serde_json::Error| Error::Checkpoint(format!("archive metadata {k}: {e}"));
        let config: RunConfig = serde_json::from_value(field("config")?).map_err(|e| bad("config", e))?;
        let raw: AttributeSchema = serde_json::from_value(field("schema")?).map_err(|e| bad("schema", e))?;
        let schema = AttributeSchema::new(
            raw.labels(Axis::Artist).to_vec(),
            raw.labels(Axis::Period).to_vec(),
            raw.labels(Axis::Genre).to_vec(),
        )?;
        let mut state = TrainState::new(&config, &schema)?;
        state.step = serde_json::from_value(field("step")?).map_err(|e| bad("step", e))?;
        state.data_rng = serde_json::from_value(field("data_rng")?).map_err(|e| bad("data_rng", e))?;
        state.noise_rng = serde_json::from_value(field("noise_rng")?).map_err(|e| bad("noise_rng", e))?;
        let adam_steps: Vec<u64> = serde_json::from_value(field("adam_steps")?).map_err(|e| bad("adam_steps", e))?;
        if adam_steps.len() != state.optimizers.len() {
            return Err(Error::Checkpoint("optimizer count mismatch".into()));
        }
        let lookup = |name: &str| a.tensor::<f32>(name).ok();
        for (i, tag) in GENERATOR_TAGS.iter().chain(&DISCRIMINATOR_TAGS).enumerate() {
            let store = state.nets.store_mut(tag).expect("known store tag");
            store.load_named(&lookup)?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, _) in store.named() {
                m.push(a.tensor::<f32>(&format!("adam.m.{name}"))?);
                v.push(a.tensor::<f32>(&format!("adam.v.{name}"))?);
            }
            state.optimizers[i] = Adam::from_parts(config.optimizer, adam_steps[i], m, v);
        }
        Ok(state)
    }
}

impl TrainState {
    pub fn stores(&self) -> [&ParamStore<f32>; 5] {
        self.nets.all_stores()
    }
}

/// One discriminator update followed by one generator update, with genre
/// perturbation per the config.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    train_step_with_mode(state, batch, Mode::Train)
}

/// [`train_step`] with an explicit conditioning mode; [`Mode::Test`] uses the
/// plain one-hot genre (no noise draw).
pub fn train_step_with_mode(state: &mut TrainState, batch: &Batch, mode: Mode) -> Result<LossReport> {
    let step = state.step + 1;
    let weights = state.config.loss_weights;
    let labels = &batch.style_labels;
    if labels.len() != batch.content.batch() || labels.len() != batch.style.batch() {
        return Err(Error::Shape("content, style and label batch sizes differ".into()));
    }
    let sets = labels
        .iter()
        .map(|&l| AttributeSet::from_indices(l, &state.schema, mode, &state.config.perturbation, &mut state.noise_rng))
        .collect::<Result<Vec<_>>>()?;
    let cond = ConditionBatch::from_sets(&sets).to_tensor::<f32>();

    let mut gg = Graph::<f32>::new();
    for tag in DISCRIMINATOR_TAGS {
        gg.freeze(tag);
    }
    let x = gg.constant(batch.content.tensor().clone());
    let y = gg.constant(batch.style.tensor().clone());
    let c = gg.constant(cond);
    let t = losses::translate(&mut gg, &state.nets, x, y, c);

    let mut dg = Graph::<f32>::new();
    for tag in GENERATOR_TAGS {
        dg.freeze(tag);
    }
    let dx = dg.constant(batch.content.tensor().clone());
    let dy = dg.constant(batch.style.tensor().clone());
    let fake_y = dg.constant(gg.value(t.fake_y).clone());
    let fake_x = dg.constant(gg.value(t.fake_x).clone());
    let dt = losses::discriminator_terms(&mut dg, &state.nets, dx, dy, fake_y, fake_x, labels, &weights);
    for (name, v) in [("adv_f", dt.adv_f), ("adv_b", dt.adv_b), ("reg_real", dt.reg_real), ("full_d", dt.full)] {
        if !dg.scalar(v).is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step,
            });
        }
    }
    dg.backward(dt.full);
    for tag in DISCRIMINATOR_TAGS {
        state.update(tag, &dg);
    }

    let gt = losses::generator_terms(&mut gg, &state.nets, &state.perceptual, x, y, &t, labels, &weights);
    let report = losses::report((&gg, &gt), (&dg, &dt));
    if let Some(name) = report.first_non_finite() {
        return Err(Error::NonFinite {
            component: name.into(),
            step,
        });
    }
    gg.backward(gt.full);
    for tag in GENERATOR_TAGS {
        state.update(tag, &gg);
    }
    state.step = step;
    Ok(report)
}

/// One metrics log line: `{"step": n, <LossReport fields>}`.
pub fn metrics_line(step: u64, r: &LossReport) -> String {
    let mut map = serde_json::Map::new();
    map.insert("step".into(), json!(step));
    for (k, v) in r.fields() {
        map.insert(k.into(), json!(v));
    }
    serde_json::Value::Object(map).to_string()
}

pub fn parse_metrics_line(line: &str) -> Result<(u64, LossReport)> {
    let bad = |m: String| Error::Checkpoint(format!("metrics line: {m}"));
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let obj = v.as_object_mut().ok_or_else(|| bad("not an object".into()))?;
    let step = obj
        .remove("step")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| bad("missing step".into()))?;
    let report = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
    Ok((step, report))
}

pub fn read_metrics(path: &Path) -> Result<Vec<(u64, LossReport)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| parse_metrics_line(&l.map_err(|e| Error::io(path, e))?))
        .collect()
}

/// Output locations of a run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }
}

/// Keeps the first `keep` lines of the metrics log (records written after the
/// last checkpoint of an interrupted run are dropped) and opens it for append.
fn open_metrics(path: &Path, keep: u64) -> Result<File> {
    let kept = if keep == 0 || !path.exists() {
        String::new()
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().take(keep as usize).collect();
        if (lines.len() as u64) < keep {
            return Err(Error::Checkpoint(format!(
                "{} has {} records but the checkpoint is at step {keep}",
                path.display(),
                lines.len()
            )));
        }
        lines.iter().map(|l| format!("{l}\n")).collect()
    };
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Runs `train_step` until `config.total_steps`. With an output directory,
/// appends one metrics record per step and checkpoints every
/// `checkpoint_every` steps and at the end.
pub fn fit(state: TrainState, data: &Dataset, out: Option<&RunDir>) -> Result<TrainState> {
    fit_with(state, data, out, |_, _| {})
}

/// [`fit`] with a per-step callback.
pub fn fit_with(
    mut state: TrainState,
    data: &Dataset,
    out: Option<&RunDir>,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainState> {
    state.schema.ensure_matches(&data.schema)?;
    let mut log = match out {
        Some(dir) => Some(open_metrics(&dir.metrics(), state.step)?),
        None => None,
    };
    let total = state.config.total_steps;
    let every = state.config.checkpoint_every;
    while state.step < total {
        let batch = data.sample_batch(&mut state.data_rng, state.config.batch_size)?;
        let report = train_step(&mut state, &batch)?;
        on_step(state.step, &report);
        if let (Some(f), Some(dir)) = (log.as_mut(), out) {
            writeln!(f, "{}", metrics_line(state.step, &report)).map_err(|e| Error::io(dir.metrics(), e))?;
            if every > 0 && state.step % every == 0 && state.step < total {
                f.flush().map_err(|e| Error::io(dir.metrics(), e))?;
                state.snapshot(&dir.checkpoint())?;
            }
        }
    }
    if let (Some(mut f), Some(dir)) = (log, out) {
        f.flush().map_err(|e| Error::io(dir.metrics(), e))?;
        state.snapshot(&dir.checkpoint())?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ImageTensor, Tensor};

    fn schema() -> AttributeSchema {
        AttributeSchema::from_strs(&["a", "b", "c", "d"], &["early", "late"], &["x", "y", "z"]).unwrap()
    }

    fn cfg() -> RunConfig {
        RunConfig::miniature()
    }

    fn image(b: usize, seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed);
        ImageTensor::new(Tensor::from_fn(&[b, 3, 8, 8], |_| (rng.gaussian() * 0.5).tanh() as f32)).unwrap()
    }

    fn batch() -> Batch {
        Batch {
            content: image(2, 1),
            style: image(2, 2),
            style_labels: vec![[0, 1, 2], [3, 0, 1]],
        }
    }

    fn dataset() -> Dataset {
        Dataset {
            schema: schema(),
            style: (0..4).map(|i| image(1, 10 + i)).collect(),
            style_labels: vec![[0, 0, 0], [1, 1, 1], [2, 0, 2], [3, 1, 0]],
            style_entries: Vec::new(),
            content: (0..2).map(|i| image(1, 20 + i)).collect(),
            content_paths: Vec::new(),
            hflip: true,
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let mut a = TrainState::new(&cfg(), &schema()).unwrap();
        let mut b = a.clone();
        for _ in 0..2 {
            assert_eq!(train_step(&mut a, &batch()).unwrap(), train_step(&mut b, &batch()).unwrap());
        }
        assert_eq!(a, b);
        assert_eq!(a.step, 2);
    }

    #[test]
    fn updates_respect_the_partition() {
        let mut s = TrainState::new(&cfg(), &schema()).unwrap();
        let before = s.clone();
        train_step(&mut s, &batch()).unwrap();
        for (a, b) in s.stores().iter().zip(before.stores()) {
            assert_ne!(a.values(), b.values(), "{} unchanged", a.tag());
        }
        assert_eq!(s.perceptual, before.perceptual);
        assert!(s.optimizers.iter().all(|o| o.steps() == 1));
    }

    #[test]
    fn zero_noise_matches_test_mode() {
        let mut c = cfg();
        c.perturbation.sigma = 0.0;
        let mut a = TrainState::new(&c, &schema()).unwrap();
        let mut b = a.clone();
        for _ in 0..2 {
            let ra = train_step_with_mode(&mut a, &batch(), Mode::Train).unwrap();
            let rb = train_step_with_mode(&mut b, &batch(), Mode::Test).unwrap();
            assert_eq!(metrics_line(1, &ra), metrics_line(1, &rb));
        }
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CHECKPOINT_FILE);
        let mut s = TrainState::new(&cfg(), &schema()).unwrap();
        train_step(&mut s, &batch()).unwrap();
        s.snapshot(&p).unwrap();
        assert_eq!(TrainState::restore(&p).unwrap(), s);
        let other = AttributeSchema::from_strs(&["a", "b", "c", "d"], &["early", "mid"], &["x", "y", "z"]).unwrap();
        let err = TrainState::restore_for(&p, &other).unwrap_err().to_string();
        assert!(err.contains("period"), "{err}");
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(TrainState::restore(&p), Err(Error::Checksum)));
    }

    #[test]
    fn fit_resumes_exactly() {
        let mut c = cfg();
        c.total_steps = 4;
        c.checkpoint_every = 2;
        let ds = dataset();
        let full_dir = tempfile::tempdir().unwrap();
        let full = RunDir::new(full_dir.path()).unwrap();
        fit(TrainState::new(&c, &schema()).unwrap(), &ds, Some(&full)).unwrap();
        let log = read_metrics(&full.metrics()).unwrap();
        assert_eq!(log.len(), 4);

        let part_dir = tempfile::tempdir().unwrap();
        let part = RunDir::new(part_dir.path()).unwrap();
        let mut short = c.clone();
        short.total_steps = 2;
        fit(TrainState::new(&short, &schema()).unwrap(), &ds, Some(&part)).unwrap();
        let mut resumed = TrainState::restore(&part.checkpoint()).unwrap();
        resumed.config.total_steps = 4;
        fit(resumed, &ds, Some(&part)).unwrap();
        let a = std::fs::read_to_string(full.metrics()).unwrap();
        let b = std::fs::read_to_string(part.metrics()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_leave_an_empty_log() {
        let mut c = cfg();
        c.total_steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let init = TrainState::new(&c, &schema()).unwrap();
        let out = fit(init.clone(), &dataset(), Some(&run)).unwrap();
        assert_eq!(out, init);
        assert_eq!(std::fs::read_to_string(run.metrics()).unwrap(), "");
    }

    #[test]
    fn non_finite_losses_name_the_component() {
        let mut s = TrainState::new(&cfg(), &schema()).unwrap();
        let v = s.nets.disc_style.store_mut().value_mut(0);
        v.data_mut()[0] = f32::NAN;
        let err = train_step(&mut s, &batch()).unwrap_err();
        assert!(matches!(&err, Error::NonFinite { component, step: 1 } if component == "adv_f"), "{err}");
    }

    #[test]
    fn metrics_lines_round_trip() {
        let r = LossReport {
            rec: 1.5,
            full_g: 2.25,
            ..Default::default()
        };
        let (step, back) = parse_metrics_line(&metrics_line(7, &r)).unwrap();
        assert_eq!((step, back), (7, r));
    }
}
