//! Attribute conditioning: one-hot encoding of `(artist, period, genre)`,
//! training-time genre perturbation, the MLP that unfolds a condition into
//! AdaIN scale/shift vectors, and the AdaIN transform itself.

use crate::config::GenrePerturbationParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::schema::{AttributeSchema, Axis, LabelTriple};
use crate::tensor::Tensor;

/// Denominator offset of every instance/AdaIN normalization.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// A validated condition: two exact one-hots and a (possibly perturbed)
/// genre vector with a single non-zero entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSet {
    artist: Vec<f64>,
    period: Vec<f64>,
    genre: Vec<f64>,
    concatenated: Vec<f64>,
    labels: LabelTriple,
}

impl AttributeSet {
    pub fn artist(&self) -> &[f64] {
        &self.artist
    }

    pub fn period(&self) -> &[f64] {
        &self.period
    }

    pub fn genre(&self) -> &[f64] {
        &self.genre
    }

    /// `[artist | period | genre]`.
    pub fn concatenated(&self) -> &[f64] {
        &self.concatenated
    }

    pub fn labels(&self) -> LabelTriple {
        self.labels
    }

    /// Condition from label indices. Genre is perturbed iff `mode` is
    /// [`Mode::Train`] and the perturbation is enabled.
    pub fn from_indices(
        labels: LabelTriple,
        schema: &AttributeSchema,
        mode: Mode,
        params: &GenrePerturbationParams,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for axis in Axis::ALL {
            let n = schema.size(axis);
            let idx = labels[axis.index()];
            if idx >= n {
                return Err(Error::Precondition(format!(
                    "{axis} index {idx} out of range for {n} labels"
                )));
            }
            parts[axis.index()] = one_hot(idx, n);
        }
        let [artist, period, mut genre] = parts;
        if mode == Mode::Train {
            genre = perturb_genre(&genre, params, rng)?;
        }
        let concatenated = [artist.as_slice(), &period, &genre].concat();
        Ok(AttributeSet {
            artist,
            period,
            genre,
            concatenated,
            labels,
        })
    }
}

fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

/// One-hot vector of `label` within `labels` (the ordered list of one axis).
pub fn encode_attribute(label: &str, axis: Axis, labels: &[String]) -> Result<Vec<f64>> {
    let idx = labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::UnknownLabel {
            axis: axis.name(),
            label: label.to_string(),
            valid: labels.join(", "),
        })?;
    Ok(one_hot(idx, labels.len()))
}

/// Adds `delta ~ N(mu, sigma^2)` to the hot entry of a genre one-hot when
/// enabled, clamping the result to [`GenrePerturbationParams::HOT_RANGE`].
/// Exactly one Gaussian draw is consumed when enabled, none otherwise.
pub fn perturb_genre(onehot: &[f64], params: &GenrePerturbationParams, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let hot: Vec<usize> = onehot
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if hot.len() != 1 || onehot[hot[0]] != 1.0 {
        return Err(Error::Precondition(format!(
            "genre vector must be one-hot, got {onehot:?}"
        )));
    }
    let mut out = onehot.to_vec();
    if params.enabled {
        let delta = params.mu + params.sigma * rng.gaussian();
        let (lo, hi) = GenrePerturbationParams::HOT_RANGE;
        out[hot[0]] = (1.0 + delta).clamp(lo, hi);
    }
    Ok(out)
}

/// Builds the condition for `(artist, period, genre)` labels.
#[allow(clippy::too_many_arguments)]
pub fn build_condition(
    artist: &str,
    period: &str,
    genre: &str,
    mode: Mode,
    schema: &AttributeSchema,
    params: &GenrePerturbationParams,
    rng: &mut SeededRng,
) -> Result<AttributeSet> {
    let labels = [
        schema.index_of(Axis::Artist, artist)?,
        schema.index_of(Axis::Period, period)?,
        schema.index_of(Axis::Genre, genre)?,
    ];
    AttributeSet::from_indices(labels, schema, mode, params, rng)
}

/// A batch of raw condition vectors `(B, N_a + N_p + N_g)` fed to the MLP.
/// Rows built from arbitrary vectors allow attribute mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBatch {
    dim: usize,
    rows: Vec<f64>,
}

impl ConditionBatch {
    pub fn from_sets(sets: &[AttributeSet]) -> Self {
        let dim = sets.first().map_or(0, |s| s.concatenated.len());
        let rows = sets.iter().flat_map(|s| s.concatenated.iter().copied()).collect();
        ConditionBatch { dim, rows }
    }

    pub fn from_raw(vectors: &[Vec<f64>], schema: &AttributeSchema) -> Result<Self> {
        let dim = schema.condition_dim();
        for v in vectors {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "condition vector has length {}, schema needs {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Precondition("condition vector has non-finite entries".into()));
            }
        }
        Ok(ConditionBatch {
            dim,
            rows: vectors.concat(),
        })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Repeats a single row `n` times.
    pub fn repeat(&self, n: usize) -> Self {
        assert_eq!(self.len(), 1, "repeat expects one row");
        ConditionBatch {
            dim: self.dim,
            rows: self.rows.repeat(n),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.len(), self.dim], self.rows.iter().map(|&v| T::lit(v)).collect())
            .expect("condition shape")
    }
}

/// `(scale, shift)` for one AdaIN-normalized block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaInBlock<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// AdaIN parameters for one condition, in network forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaInParams<T> {
    pub blocks: Vec<AdaInBlock<T>>,
}

impl<T: Real> AdaInParams<T> {
    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.gamma.len() + b.beta.len()).sum()
    }
}

/// The condition parser. Hidden layers are fully connected with rectifiers;
/// the linear head emits, for each AdaIN block in forward order, its `gamma`
/// followed by its `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMlp<T> {
    store: ParamStore<T>,
    layers: Vec<(usize, usize)>,
    input_dim: usize,
    block_channels: Vec<usize>,
}

impl<T: Real> ConditionMlp<T> {
    pub const TAG: &'static str = "mlp";

    pub fn new(input_dim: usize, hidden: usize, hidden_layers: usize, block_channels: &[usize], rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new(Self::TAG);
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for i in 0..hidden_layers {
            let w = store.add_normal(format!("fc{i}.weight"), &[hidden, fan_in], (2.0 / fan_in as f64).sqrt(), rng);
            let b = store.add_zeros(format!("fc{i}.bias"), &[hidden]);
            layers.push((w, b));
            fan_in = hidden;
        }
        let out: usize = 2 * block_channels.iter().sum::<usize>();
        let w = store.add_normal("head.weight", &[out, fan_in], (1.0 / fan_in as f64).sqrt(), rng);
        let b = store.add_zeros("head.bias", &[out]);
        layers.push((w, b));
        ConditionMlp {
            store,
            layers,
            input_dim,
            block_channels: block_channels.to_vec(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.block_channels.iter().sum::<usize>()
    }

    pub fn block_channels(&self) -> &[usize] {
        &self.block_channels
    }

    /// `(B, input_dim) -> (B, output_dim)`.
    pub fn forward(&self, g: &mut Graph<T>, cond: Var) -> Var {
        let mut h = cond;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(&self.store, w);
            let bv = g.param(&self.store, b);
            h = g.linear(h, wv, Some(bv));
            if i != last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Splits the MLP output into per-block `(gamma, beta)` graph values,
    /// each `(B, C_block)`.
    pub fn split(&self, g: &mut Graph<T>, out: Var) -> Vec<(Var, Var)> {
        let mut offset = 0;
        self.block_channels
            .iter()
            .map(|&c| {
                let gamma = g.narrow(out, offset, c);
                let beta = g.narrow(out, offset + c, c);
                offset += 2 * c;
                (gamma, beta)
            })
            .collect()
    }
}

/// Runs the MLP on one condition and slices its output per block.
pub fn parse_condition<T: Real>(c: &AttributeSet, mlp: &ConditionMlp<T>) -> Result<AdaInParams<T>> {
    let batch = ConditionBatch::from_sets(std::slice::from_ref(c));
    parse_condition_vector(&batch, mlp)
}

pub fn parse_condition_vector<T: Real>(batch: &ConditionBatch, mlp: &ConditionMlp<T>) -> Result<AdaInParams<T>> {
    if batch.len() != 1 {
        return Err(Error::Shape(format!("expected one condition, got {}", batch.len())));
    }
    if batch.dim() != mlp.input_dim() {
        return Err(Error::Shape(format!(
            "condition has length {}, MLP expects {}",
            batch.dim(),
            mlp.input_dim()
        )));
    }
    let mut g = Graph::new();
    g.freeze(ConditionMlp::<T>::TAG);
    let input = g.constant(batch.to_tensor());
    let out = mlp.forward(&mut g, input);
    let values = g.value(out).data();
    let mut offset = 0;
    let blocks = mlp
        .block_channels()
        .iter()
        .map(|&c| {
            let block = AdaInBlock {
                gamma: values[offset..offset + c].to_vec(),
                beta: values[offset + c..offset + 2 * c].to_vec(),
            };
            offset += 2 * c;
            block
        })
        .collect();
    Ok(AdaInParams { blocks })
}

/// AdaIN inside a graph: instance-normalize, then apply per-sample
/// `gamma`/`beta` of shape `(B, C)` (or `(1, C)` for all samples).
pub fn adain_var<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
    let normed = g.instance_norm(x, eps);
    g.channel_affine(normed, gamma, beta)
}

/// `gamma_c * (z - mean(z)) / sqrt(var(z) + eps) + beta_c` per sample and
/// channel, statistics over the spatial dimensions.
pub fn adain<T: Real>(features: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Tensor<T>> {
    if features.rank() != 4 {
        return Err(Error::Shape(format!("adain needs a rank-4 input, got {:?}", features.shape())));
    }
    let (_, c, _, _) = features.dims4();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "adain: {c} channels but gamma/beta lengths {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > T::zero()) {
        return Err(Error::Precondition("adain epsilon must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let gv = g.constant(Tensor::from_vec(&[1, c], gamma.to_vec())?);
    let bv = g.constant(Tensor::from_vec(&[1, c], beta.to_vec())?);
    let y = adain_var(&mut g, x, gv, bv, eps);
    Ok(g.value(y).clone())
}
