//! Frozen VGG16-topology feature extractor and Gram statistics.
//!
//! Weights come from an archive file (`perceptual.weights`) or, when none is
//! configured, from a randomly initialized backbone of the same topology
//! whose widths are divided by `perceptual.width_divisor`.

use std::path::Path;

use crate::archive::{Archive, ArchiveWriter};
use crate::config::PerceptualConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::{ImageTensor, Tensor};

/// `(convolutions, width)` of the first four VGG16 stages.
pub const STAGES: [(usize, usize); 4] = [(2, 64), (2, 128), (3, 256), (3, 512)];
pub const TAPS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];
pub const ARCHIVE_KIND: &str = "perceptual";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub maps: Vec<Tensor<T>>,
    pub tags: [&'static str; 4],
}

/// Per-sample `C x C` Gram matrices, stored `(N, C, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T>(pub Tensor<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet<T> {
    store: ParamStore<T>,
    stages: Vec<Vec<(usize, usize)>>,
    widths: [usize; 4],
}

impl<T: Real> PerceptualNet<T> {
    pub const TAG: &'static str = "perceptual";

    fn skeleton(widths: [usize; 4], mut init: impl FnMut(&[usize], f64) -> Tensor<T>) -> Self {
        let mut store = ParamStore::new(Self::TAG);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (s, &(n, _)) in STAGES.iter().enumerate() {
            let cout = widths[s];
            let mut convs = Vec::new();
            for i in 0..n {
                let shape = [cout, cin, 3, 3];
                let w = store.add(format!("conv{}_{}.weight", s + 1, i + 1), init(&shape, (2.0 / (cin * 9) as f64).sqrt()));
                let b = store.add_zeros(format!("conv{}_{}.bias", s + 1, i + 1), &[cout]);
                convs.push((w, b));
                cin = cout;
            }
            stages.push(convs);
        }
        PerceptualNet { store, stages, widths }
    }

    /// Kaiming-initialized backbone with every width divided by `divisor`.
    pub fn random(divisor: usize, rng: &mut SeededRng) -> Self {
        let widths = STAGES.map(|(_, w)| (w / divisor.max(1)).max(1));
        Self::skeleton(widths, |shape, std| {
            Tensor::from_fn(shape, |_| T::lit(rng.gaussian() * std))
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        archive.require_kind(ARCHIVE_KIND)?;
        let widths: [usize; 4] = serde_json::from_value(archive.meta()["widths"].clone())
            .map_err(|e| Error::Checkpoint(format!("perceptual widths: {e}")))?;
        let mut net = Self::skeleton(widths, |shape, _| Tensor::zeros(shape));
        net.store.load_named(&|name| archive.tensor(name).ok())?;
        Ok(net)
    }

    /// The configured weights file, or the seeded random backbone.
    pub fn load(cfg: &PerceptualConfig, rng: &mut SeededRng) -> Result<Self> {
        match &cfg.weights {
            Some(path) => Self::from_archive(&Archive::read(path)?),
            None => Ok(Self::random(cfg.divisor(), rng)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut w = ArchiveWriter::new(ARCHIVE_KIND, serde_json::json!({ "widths": self.widths }));
        for (name, t) in self.store.named() {
            w.add(&name, t);
        }
        w.write(path)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// Tap activations of an image batch in `[-1, 1]`. Backbone weights enter
    /// as constants, so no gradient ever reaches them.
    pub fn forward(&self, g: &mut Graph<T>, img: Var) -> [Var; 4] {
        g.freeze(Self::TAG);
        let scale = g.constant(Tensor::from_fn(&[1, 3], |c| T::lit(0.5 / IMAGENET_STD[c])));
        let shift = g.constant(Tensor::from_fn(&[1, 3], |c| {
            T::lit((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
        }));
        let mut h = g.channel_affine(img, scale, shift);
        let mut taps = Vec::with_capacity(4);
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                h = g.max_pool2(h);
            }
            for &(w, b) in convs {
                let wv = g.param(&self.store, w);
                let bv = g.param(&self.store, b);
                h = g.conv2d(h, wv, Some(bv), 1, 1);
                h = g.relu(h);
            }
            taps.push(h);
        }
        [taps[0], taps[1], taps[2], taps[3]]
    }

    /// `sum_i sum_entries |gram_i(a) - gram_i(b)|`, averaged over the batch.
    pub fn style_distance_var(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.forward(g, a);
        let fb = self.forward(g, b);
        let terms: Vec<(Var, T)> = fa
            .iter()
            .zip(&fb)
            .map(|(&x, &y)| {
                let c = g.value(x).shape()[1];
                let gx = g.gram(x);
                let gy = g.gram(y);
                // l1_mean averages over N*C*C; rescale to a per-sample sum.
                (g.l1_mean(gx, gy), T::from_usize(c * c).expect("channels"))
            })
            .collect();
        g.weighted_sum(&terms)
    }

    pub fn extract_features(&self, img: &ImageTensor) -> FeaturePyramid<T> {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().cast());
        let taps = self.forward(&mut g, x);
        FeaturePyramid {
            maps: taps.iter().map(|&v| g.value(v).clone()).collect(),
            tags: TAPS,
        }
    }

    pub fn style_distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.batch() != b.batch() {
            return Err(Error::Shape(format!(
                "style distance between batches of {} and {}",
                a.batch(),
                b.batch()
            )));
        }
        let mut g = Graph::new();
        let av = g.constant(a.tensor().cast());
        let bv = g.constant(b.tensor().cast());
        let d = self.style_distance_var(&mut g, av, bv);
        Ok(g.scalar(d).to_f64().unwrap_or(f64::NAN))
    }
}

/// Gram matrices of a rank-4 feature map.
pub fn gram<T: Real>(features: &Tensor<T>) -> Result<GramMatrix<T>> {
    if features.rank() != 4 {
        return Err(Error::Shape(format!("gram expects a rank-4 map, got {:?}", features.shape())));
    }
    if !features.all_finite() {
        return Err(Error::Precondition("gram of a non-finite feature map".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let m = g.gram(x);
    Ok(GramMatrix(g.value(m).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(batch: usize, size: usize, seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed);
        ImageTensor::new(Tensor::from_fn(&[batch, 3, size, size], |_| (rng.gaussian() * 0.6).tanh() as f32)).unwrap()
    }

    fn gram_oracle(f: &[f64], c: usize, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut s = 0.0;
                for p in 0..l {
                    s += f[i * l + p] * f[j * l + p];
                }
                out[i * c + j] = s / (c * l) as f64;
            }
        }
        out
    }

    #[test]
    fn gram_hand_examples() {
        let z = gram(&Tensor::<f64>::zeros(&[1, 3, 2, 2])).unwrap();
        assert!(z.0.data().iter().all(|&v| v == 0.0));
        let one = gram(&Tensor::from_vec(&[1, 1, 1, 2], vec![1.0f64, 2.0]).unwrap()).unwrap();
        assert_eq!(one.0.data(), &[2.5]);
        let dup = gram(&Tensor::from_vec(&[1, 2, 1, 3], vec![1.0f64, -2.0, 0.5, 1.0, -2.0, 0.5]).unwrap()).unwrap();
        let d = dup.0.data();
        assert!(d.iter().all(|&v| (v - d[0]).abs() < 1e-15));
        assert!(gram(&Tensor::from_vec(&[1, 1, 1, 1], vec![f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn pyramid_sizes_for_64_input() {
        let net = PerceptualNet::<f32>::random(16, &mut SeededRng::new(0));
        let p = net.extract_features(&image(1, 64, 1));
        let sizes: Vec<_> = p.maps.iter().map(|m| m.shape()[2]).collect();
        assert_eq!(sizes, [64, 32, 16, 8]);
        let chans: Vec<_> = p.maps.iter().map(|m| m.shape()[1]).collect();
        assert_eq!(chans, [4, 8, 16, 32]);
        assert_eq!(p, net.extract_features(&image(1, 64, 1)));
    }

    #[test]
    fn full_width_topology() {
        let net = PerceptualNet::<f32>::random(1, &mut SeededRng::new(0));
        assert_eq!(net.widths(), [64, 128, 256, 512]);
        assert_eq!(net.store().len(), 20);
    }

    #[test]
    fn style_distance_matches_loop_oracle() {
        let net = PerceptualNet::<f64>::random(16, &mut SeededRng::new(3));
        let a = image(2, 16, 1);
        let b = image(2, 16, 2);
        let d = net.style_distance(&a, &b).unwrap();
        let pa = net.extract_features(&a);
        let pb = net.extract_features(&b);
        let mut oracle = 0.0;
        for (ma, mb) in pa.maps.iter().zip(&pb.maps) {
            let (n, c, h, w) = ma.dims4();
            let l = h * w;
            for s in 0..n {
                let ga = gram_oracle(&ma.data()[s * c * l..(s + 1) * c * l], c, l);
                let gb = gram_oracle(&mb.data()[s * c * l..(s + 1) * c * l], c, l);
                oracle += ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
            }
        }
        assert!((d - oracle).abs() <= 1e-5 * oracle.max(1.0), "{d} vs {oracle}");
        assert_eq!(net.style_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(d, net.style_distance(&b, &a).unwrap());
        assert!(net.style_distance(&a, &image(1, 16, 2)).is_err());
    }

    #[test]
    fn backbone_receives_no_gradient() {
        let net = PerceptualNet::<f64>::random(16, &mut SeededRng::new(3));
        let mut g = Graph::new();
        let a = g.variable(image(1, 8, 1).tensor().cast());
        let b = g.constant(image(1, 8, 2).tensor().cast());
        let d = net.style_distance_var(&mut g, a, b);
        g.backward(d);
        assert!(g.param_grads(net.store()).iter().all(Option::is_none));
        assert!(g.grad(a).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn archive_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vgg.atp");
        let net = PerceptualNet::<f32>::random(16, &mut SeededRng::new(5));
        net.save(&p).unwrap();
        let cfg = PerceptualConfig {
            weights: Some(p),
            width_divisor: None,
        };
        assert_eq!(PerceptualNet::<f32>::load(&cfg, &mut SeededRng::new(0)).unwrap(), net);
        let missing = PerceptualConfig {
            weights: Some(dir.path().join("absent.atp")),
            width_divisor: None,
        };
        let err = PerceptualNet::<f32>::load(&missing, &mut SeededRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("absent.atp"));
    }

    fn feature_map() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..5, 1usize..7).prop_flat_map(|(c, l)| {
            proptest::collection::vec(-3.0f64..3.0, c * l).prop_map(move |v| (c, l, v))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gram_is_symmetric_psd((c, l, v) in feature_map(), probe in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let g = gram(&Tensor::from_vec(&[1, c, 1, l], v).unwrap()).unwrap();
            let m = g.0.data();
            for i in 0..c {
                for j in 0..c {
                    prop_assert!((m[i * c + j] - m[j * c + i]).abs() < 1e-6);
                }
            }
            // z^T G z >= 0 for a probe vector
            let z = &probe[..c];
            let q: f64 = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| z[i] * m[i * c + j] * z[j]).sum();
            prop_assert!(q >= -1e-6);
        }

        #[test]
        fn gram_matches_oracle_and_ignores_spatial_order((c, l, v) in feature_map(), seed in any::<u64>()) {
            let g = gram(&Tensor::from_vec(&[1, c, 1, l], v.clone()).unwrap()).unwrap();
            let oracle = gram_oracle(&v, c, l);
            for (a, b) in g.0.data().iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-5);
            }
            let mut perm: Vec<usize> = (0..l).collect();
            SeededRng::new(seed).shuffle(&mut perm);
            let shuffled: Vec<f64> = (0..c).flat_map(|ch| perm.iter().map(|&p| v[ch * l + p]).collect::<Vec<_>>()).collect();
            let gp = gram(&Tensor::from_vec(&[1, c, 1, l], shuffled).unwrap()).unwrap();
            for (a, b) in g.0.data().iter().zip(gp.0.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
