//! Attribute accuracy and Inception Score of generated images, measured by a
//! small judge classifier trained on real paintings only.
//!
//! The judge stands in for both the finetuned ResNet-18 (accuracy) and the
//! Inception-V3 (IS) of large-scale evaluations; every report header says so.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::ArchiveWriter;
use crate::conditioning::{AttributeSet, ConditionBatch, Mode};
use crate::config::{GenrePerturbationParams, JudgeConfig};
use crate::data::{hflip, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{ForwardGenerator, StyleDiscriminator};
use crate::params::{Adam, AdamSettings, ParamStore};
use crate::rng::SeededRng;
use crate::schema::{AttributeSchema, Axis, LabelTriple};
use crate::tensor::ImageTensor;

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_SPLITS: usize = 10;
pub const JUDGE_NOTE: &str = "desk-scale judge: one small convolutional classifier trained on the real style images \
replaces the finetuned ResNet-18 (accuracy) and Inception-V3 (IS) networks; absolute values are not comparable to \
large-scale results";
const INFERENCE_CHUNK: usize = 16;

/// Conv classifier with one softmax head per axis. The artist head is always
/// present since the Inception Score uses it.
#[derive(Clone, Debug, PartialEq)]
pub struct JudgeClassifier {
    store: ParamStore<f32>,
    convs: Vec<(usize, usize)>,
    heads: Vec<(Axis, usize, usize)>,
}

impl JudgeClassifier {
    pub const TAG: &'static str = "judge";

    pub fn new(schema: &AttributeSchema, axes: &[Axis], width: usize, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new(Self::TAG);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, cout) in [width, 2 * width, 4 * width].into_iter().enumerate() {
            let w = store.add_normal(format!("conv{i}.weight"), &[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), rng);
            let b = store.add_zeros(format!("conv{i}.bias"), &[cout]);
            convs.push((w, b));
            cin = cout;
        }
        let mut with_artist = vec![Axis::Artist];
        with_artist.extend(axes.iter().copied().filter(|a| *a != Axis::Artist));
        let heads = with_artist
            .into_iter()
            .map(|axis| {
                let n = schema.size(axis);
                let w = store.add_normal(format!("{axis}_head.weight"), &[n, cin], (1.0 / cin as f64).sqrt(), rng);
                let b = store.add_zeros(format!("{axis}_head.bias"), &[n]);
                (axis, w, b)
            })
            .collect();
        JudgeClassifier { store, convs, heads }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn axes(&self) -> Vec<Axis> {
        self.heads.iter().map(|h| h.0).collect()
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Vec<(Axis, Var)> {
        let mut h = x;
        for &(w, b) in &self.convs {
            let wv = g.param(&self.store, w);
            let bv = g.param(&self.store, b);
            h = g.conv2d(h, wv, Some(bv), 2, 1);
            h = g.leaky_relu(h, 0.2);
        }
        let pooled = g.global_avg_pool(h);
        self.heads
            .iter()
            .map(|&(axis, w, b)| {
                let wv = g.param(&self.store, w);
                let bv = g.param(&self.store, b);
                (axis, g.linear(pooled, wv, Some(bv)))
            })
            .collect()
    }

    /// Softmax posteriors of one axis, one row per image.
    pub fn posteriors(&self, images: &ImageTensor, axis: Axis) -> Result<Vec<Vec<f64>>> {
        let head = self
            .heads
            .iter()
            .position(|h| h.0 == axis)
            .ok_or_else(|| Error::Evaluation(format!("judge has no {axis} head")))?;
        let mut out = Vec::with_capacity(images.batch());
        let mut start = 0;
        while start < images.batch() {
            let len = INFERENCE_CHUNK.min(images.batch() - start);
            let mut g = Graph::new();
            g.freeze(Self::TAG);
            let x = g.constant(images.tensor().batch_slice(start, len));
            let logits = self.forward(&mut g, x)[head].1;
            let (_, k) = g.value(logits).dims2();
            out.extend(g.value(logits).data().chunks(k).map(softmax));
            start += len;
        }
        Ok(out)
    }

    /// SHA-256 of the serialized weights.
    pub fn id(&self) -> String {
        hex::encode(Sha256::digest(self.archive().to_bytes()))
    }

    fn archive(&self) -> ArchiveWriter {
        let axes: Vec<&str> = self.heads.iter().map(|h| h.0.name()).collect();
        let mut w = ArchiveWriter::new("judge", serde_json::json!({ "axes": axes }));
        for (name, t) in self.store.named() {
            w.add(&name, t);
        }
        w
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.archive().write(path)
    }
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Trains a judge on the real style images of `data` with its own Adam
/// optimizer and random flips.
pub fn train_judge(data: &Dataset, cfg: &JudgeConfig, axes: &[Axis], rng: &mut SeededRng) -> Result<JudgeClassifier> {
    if data.style.is_empty() {
        return Err(Error::Evaluation("no labeled style images to train the judge".into()));
    }
    let mut judge = JudgeClassifier::new(&data.schema, axes, cfg.width, &mut rng.fork());
    for axis in judge.axes() {
        let first = data.style_labels[0][axis.index()];
        if data.style_labels.iter().all(|l| l[axis.index()] == first) {
            return Err(Error::Evaluation(format!(
                "degenerate judge data: every style image has the same {axis}"
            )));
        }
    }
    let settings = AdamSettings {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        ..AdamSettings::default()
    };
    let mut opt = Adam::new(settings, &judge.store);
    for _ in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.index(data.style.len());
            imgs.push(if rng.coin(0.5) { hflip(&data.style[i]) } else { data.style[i].clone() });
            labels.push(data.style_labels[i]);
        }
        let batch = ImageTensor::stack(&imgs)?;
        let mut g = Graph::new();
        let x = g.constant(batch.into_tensor());
        let heads = judge.forward(&mut g, x);
        let terms: Vec<(Var, f32)> = heads
            .iter()
            .map(|&(axis, v)| {
                let l: Vec<usize> = labels.iter().map(|t: &LabelTriple| t[axis.index()]).collect();
                (g.cross_entropy_mean(v, &l), 1.0)
            })
            .collect();
        let loss = g.weighted_sum(&terms);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite {
                component: "judge loss".into(),
                step: opt.steps() + 1,
            });
        }
        g.backward(loss);
        let grads = g.param_grads(&judge.store);
        opt.step(&mut judge.store, &grads);
    }
    Ok(judge)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Fraction of rows whose argmax equals the target.
pub fn accuracy_of(posteriors: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    if posteriors.len() != targets.len() {
        return Err(Error::Evaluation(format!(
            "{} images but {} target labels",
            posteriors.len(),
            targets.len()
        )));
    }
    let hits = posteriors.iter().zip(targets).filter(|(p, &t)| argmax(p) == t).count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn classification_accuracy(judge: &JudgeClassifier, images: &ImageTensor, targets: &[usize], axis: Axis) -> Result<f64> {
    if images.batch() == 0 || targets.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    accuracy_of(&judge.posteriors(images, axis)?, targets)
}

/// Mean and population standard deviation over contiguous splits of
/// `exp(mean_x KL(p(.|x) || p_split(.)))`.
pub fn inception_score_of(posteriors: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = posteriors.len();
    if splits == 0 {
        return Err(Error::Evaluation("splits must be positive".into()));
    }
    if n < splits {
        return Err(Error::Evaluation(format!("{n} images cannot form {splits} splits")));
    }
    let k = posteriors[0].len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &posteriors[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; k];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v.max(PROB_FLOOR) / part.len() as f64;
            }
        }
        let kl: f64 = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .map(|(&q, &m)| {
                        let q = q.max(PROB_FLOOR);
                        q * (q.ln() - m.ln())
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(judge: &JudgeClassifier, images: &ImageTensor, splits: usize) -> Result<(f64, f64)> {
    inception_score_of(&judge.posteriors(images, Axis::Artist)?, splits)
}

/// Train-set accuracy of one of the style discriminator's attribute heads.
pub fn discriminator_accuracy(d: &StyleDiscriminator<f32>, images: &ImageTensor, labels: &[LabelTriple], axis: Axis) -> Result<f64> {
    let j = d.discriminate(images);
    let logits = [&j.artist, &j.period, &j.genre][axis.index()];
    let (_, k) = logits.dims2();
    let rows: Vec<Vec<f64>> = logits.data().chunks(k).map(|r| r.to_vec()).collect();
    let targets: Vec<usize> = labels.iter().map(|l| l[axis.index()]).collect();
    accuracy_of(&rows, &targets)
}

/// Stylization direction: the condition applied to every content image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Direction {
    pub name: String,
    pub labels: LabelTriple,
}

/// One direction per artist, each paired with the artist's most frequent
/// `(period, genre)` among the style images (ties to the lower index).
pub fn artist_directions(data: &Dataset) -> Vec<Direction> {
    let s = &data.schema;
    (0..s.size(Axis::Artist))
        .map(|a| {
            let mut counts = vec![0usize; s.size(Axis::Period) * s.size(Axis::Genre)];
            for l in data.style_labels.iter().filter(|l| l[0] == a) {
                counts[l[1] * s.size(Axis::Genre) + l[2]] += 1;
            }
            let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
            Direction {
                name: s.labels(Axis::Artist)[a].clone(),
                labels: [a, best / s.size(Axis::Genre), best % s.size(Axis::Genre)],
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub record: String,
    pub judge_id: String,
    pub checkpoint_id: String,
    pub judge: String,
    pub splits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub record: String,
    pub metric: String,
    pub axis: String,
    pub direction: String,
    pub value: f64,
    pub std: Option<f64>,
    pub judge_id: String,
    pub checkpoint_id: String,
    pub set_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub header: ReportHeader,
    pub metrics: Vec<MetricRecord>,
}

impl EvalReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for m in &self.metrics {
            s += &serde_json::to_string(m).expect("record serializes");
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn find(&self, metric: &str, axis: &str, direction: &str) -> Option<&MetricRecord> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.axis == axis && m.direction == direction)
    }
}

/// Test-mode stylization of every content image toward every artist
/// direction, scored by `judge`.
pub fn evaluate(
    generator: &ForwardGenerator<f32>,
    data: &Dataset,
    judge: &JudgeClassifier,
    axes: &[Axis],
    splits: usize,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if data.content.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let content = ImageTensor::stack(&data.content)?;
    let n = content.batch();
    let judge_id = judge.id();
    let mut generated: Vec<ImageTensor> = Vec::new();
    let mut targets: Vec<LabelTriple> = Vec::new();
    let mut metrics = Vec::new();
    let record = |metric: &str, axis: &str, direction: &str, value: f64, std: Option<f64>, set_size: usize| MetricRecord {
        record: "metric".into(),
        metric: metric.into(),
        axis: axis.into(),
        direction: direction.into(),
        value,
        std,
        judge_id: judge_id.clone(),
        checkpoint_id: checkpoint_id.into(),
        set_size,
    };
    let dirs = artist_directions(data);
    for d in &dirs {
        let set = AttributeSet::from_indices(
            d.labels,
            &data.schema,
            Mode::Test,
            &GenrePerturbationParams::disabled(),
            &mut SeededRng::new(0),
        )?;
        let mut chunks = Vec::new();
        let mut start = 0;
        while start < n {
            let len = INFERENCE_CHUNK.min(n - start);
            let x = ImageTensor::new(content.tensor().batch_slice(start, len))?;
            let c = ConditionBatch::from_sets(std::slice::from_ref(&set)).repeat(len);
            chunks.push(generator.generate(&x, &c)?);
            start += len;
        }
        let out = ImageTensor::stack(&chunks)?;
        for &axis in axes {
            let t = vec![d.labels[axis.index()]; n];
            let acc = classification_accuracy(judge, &out, &t, axis)?;
            metrics.push(record("accuracy", axis.name(), &d.name, acc, None, n));
        }
        generated.push(out);
        targets.extend(std::iter::repeat(d.labels).take(n));
    }
    let all = ImageTensor::stack(&generated)?;
    for &axis in axes {
        let t: Vec<usize> = targets.iter().map(|l| l[axis.index()]).collect();
        let acc = classification_accuracy(judge, &all, &t, axis)?;
        metrics.push(record("accuracy", axis.name(), "all", acc, None, all.batch()));
    }
    let (is, is_std) = inception_score(judge, &all, splits)?;
    metrics.push(record("inception_score", Axis::Artist.name(), "all", is, Some(is_std), all.batch()));
    Ok(EvalReport {
        header: ReportHeader {
            record: "header".into(),
            judge_id: judge_id.clone(),
            checkpoint_id: checkpoint_id.into(),
            judge: JUDGE_NOTE.into(),
            splits,
        },
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture::write_fixture;
    use proptest::prelude::*;

    fn fixture() -> Dataset {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 0).unwrap();
        Dataset::load(dir.path(), 64, false).unwrap()
    }

    fn is_oracle(p: &[Vec<f64>]) -> f64 {
        let n = p.len() as f64;
        let k = p[0].len();
        let mut marg = vec![0.0; k];
        for row in p {
            for j in 0..k {
                marg[j] += row[j].max(PROB_FLOOR) / n;
            }
        }
        let mut total = 0.0;
        for row in p {
            for j in 0..k {
                let q = row[j].max(PROB_FLOOR);
                total += q * (q / marg[j]).ln();
            }
        }
        (total / n).exp()
    }

    #[test]
    fn inception_score_closed_forms() {
        let same = vec![vec![0.2, 0.3, 0.5]; 20];
        let (m, s) = inception_score_of(&same, 4).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
        for k in [2usize, 4, 7] {
            let onehot: Vec<Vec<f64>> = (0..k * 5)
                .map(|i| (0..k).map(|j| if j == i % k { 1.0 } else { 0.0 }).collect())
                .collect();
            let (m, _) = inception_score_of(&onehot, 1).unwrap();
            assert!((m - k as f64).abs() < 1e-6, "{k}: {m}");
        }
        assert!(inception_score_of(&same[..3], 4).is_err());
    }

    #[test]
    fn accuracy_definitions() {
        let p = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        assert_eq!(accuracy_of(&p, &[0, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(accuracy_of(&[], &[]).unwrap_err().to_string().contains("empty evaluation set"));
        // a balanced set of perfectly classified images scored against
        // permuted labels counts exactly the fixed points of the permutation
        let k = 4;
        let p: Vec<Vec<f64>> = (0..k * 3).map(|i| (0..k).map(|j| (j == i % k) as u8 as f64).collect()).collect();
        for perm in [[1, 2, 3, 0], [0, 2, 1, 3], [3, 2, 1, 0]] {
            let t: Vec<usize> = (0..k * 3).map(|i| perm[i % k]).collect();
            let fixed = (0..k).filter(|&i| perm[i] == i).count();
            assert_eq!(accuracy_of(&p, &t).unwrap(), fixed as f64 / k as f64);
        }
    }

    #[test]
    fn directions_pick_the_most_frequent_combination() {
        let ds = fixture();
        let dirs = artist_directions(&ds);
        assert_eq!(dirs.len(), 4);
        // every combination occurs once, so ties resolve to (early, lowest genre)
        let cezanne = &dirs[0];
        assert_eq!(cezanne.name, "cezanne");
        assert_eq!(cezanne.labels, [0, 0, 0]);
        let genre = ds.schema.labels(Axis::Genre);
        assert_eq!(genre[dirs[2].labels[2]], "cubism");
    }

    #[test]
    fn judge_learns_the_fixture_and_stays_frozen() {
        let ds = fixture();
        let cfg = JudgeConfig::default();
        let judge = train_judge(&ds, &cfg, &Axis::ALL, &mut SeededRng::new(0)).unwrap();
        let again = train_judge(&ds, &cfg, &Axis::ALL, &mut SeededRng::new(0)).unwrap();
        assert_eq!(judge, again);
        assert_eq!(judge.axes(), Axis::ALL);
        let (imgs, labels) = ds.all_style().unwrap();
        let t: Vec<usize> = labels.iter().map(|l| l[0]).collect();
        let before = judge.clone();
        let acc = classification_accuracy(&judge, &imgs, &t, Axis::Artist).unwrap();
        assert!(acc >= 0.95, "judge artist accuracy {acc}");
        assert_eq!(judge, before);
        let (is, _) = inception_score(&judge, &imgs, 2).unwrap();
        assert!(is >= 1.0 && is <= 4.0 + 1e-6);
        let artist_only = train_judge(&ds, &JudgeConfig { steps: 1, ..cfg }, &[], &mut SeededRng::new(0)).unwrap();
        assert!(classification_accuracy(&artist_only, &imgs, &t, Axis::Genre).is_err());
    }

    proptest! {
        #[test]
        fn inception_score_bounds_and_oracle(seed in any::<u64>(), n in 1usize..30, k in 2usize..6) {
            let mut rng = SeededRng::new(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                let e: Vec<f64> = (0..k).map(|_| (rng.gaussian() * 3.0).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }).collect();
            let (m, _) = inception_score_of(&rows, 1).unwrap();
            prop_assert!((m - is_oracle(&rows)).abs() < 1e-5);
            prop_assert!(m >= 1.0 - 1e-9 && m <= k as f64 + 1e-6);
        }

        #[test]
        fn accuracy_ignores_order(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = SeededRng::new(seed);
            let mut pairs: Vec<(Vec<f64>, usize)> = (0..n).map(|_| (vec![rng.gaussian(), rng.gaussian(), rng.gaussian()], rng.index(3))).collect();
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let a = accuracy_of(&p, &t).unwrap();
            rng.shuffle(&mut pairs);
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assert_eq!(a, accuracy_of(&p, &t).unwrap());
        }
    }
}
