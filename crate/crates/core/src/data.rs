//! Manifest loading, image preprocessing and batch sampling.
//!
//! A data root holds two JSON Lines manifests: `style.jsonl` with records
//! `{"path", "artist", "period", "genre"}` and `content.jsonl` with records
//! `{"path"}`. Paths are relative to the data root.

pub mod fixture;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schema::{AttributeSchema, Axis, LabelTriple};
use crate::tensor::{ImageTensor, Tensor};

pub const STYLE_MANIFEST: &str = "style.jsonl";
pub const CONTENT_MANIFEST: &str = "content.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub artist: String,
    pub period: String,
    pub genre: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentEntry {
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleManifest {
    pub entries: Vec<ManifestEntry>,
    pub schema: AttributeSchema,
    /// Images per `(artist, period)`.
    pub counts: BTreeMap<(String, String), usize>,
}

impl StyleManifest {
    pub fn labels(&self, i: usize) -> LabelTriple {
        let e = &self.entries[i];
        let s = &self.schema;
        [
            s.index_of(Axis::Artist, &e.artist).expect("schema built from entries"),
            s.index_of(Axis::Period, &e.period).expect("schema built from entries"),
            s.index_of(Axis::Genre, &e.genre).expect("schema built from entries"),
        ]
    }
}

fn read_records<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    Ok(out)
}

fn check_exists(manifest: &Path, rel: &Path) -> Result<()> {
    let full = root_of(manifest).join(rel);
    if !full.is_file() {
        return Err(Error::Io {
            path: full,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "image listed in manifest not found"),
        });
    }
    Ok(())
}

fn root_of(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn sorted_unique<'a>(v: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut out: Vec<String> = v.cloned().collect();
    out.sort();
    out.dedup();
    out
}

/// Reads a style manifest; the schema holds the sorted unique labels per axis.
pub fn load_manifest(path: &Path) -> Result<StyleManifest> {
    let entries: Vec<ManifestEntry> = read_records(path)?;
    for e in &entries {
        check_exists(path, &e.path)?;
    }
    let schema = AttributeSchema::new(
        sorted_unique(entries.iter().map(|e| &e.artist)),
        sorted_unique(entries.iter().map(|e| &e.period)),
        sorted_unique(entries.iter().map(|e| &e.genre)),
    )?;
    let mut counts = BTreeMap::new();
    for e in &entries {
        *counts.entry((e.artist.clone(), e.period.clone())).or_insert(0) += 1;
    }
    Ok(StyleManifest { entries, schema, counts })
}

pub fn load_content_manifest(path: &Path) -> Result<Vec<ContentEntry>> {
    let entries: Vec<ContentEntry> = read_records(path)?;
    for e in &entries {
        check_exists(path, &e.path)?;
    }
    Ok(entries)
}

/// Center-crops to a square, resizes bilinearly to `size` and maps to `[-1, 1]`.
pub fn preprocess_image(img: &DynamicImage, size: usize, origin: &Path) -> Result<ImageTensor> {
    let channels = img.color().channel_count();
    if channels != 3 {
        return Err(Error::Image {
            path: origin.to_path_buf(),
            message: format!("wrong channel count: expected 3 (RGB), found {channels}"),
        });
    }
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let square = img.crop_imm((w - side) / 2, (h - side) / 2, side, side).to_rgb32f();
    let s = size as u32;
    let resized = if side == s {
        square
    } else {
        image::imageops::resize(&square, s, s, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] * 2.0 - 1.0).clamp(-1.0, 1.0);
        }
    }
    ImageTensor::new(Tensor::from_vec(&[1, 3, size, size], data)?)
}

pub fn preprocess(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    preprocess_image(&img, size, path)
}

/// Reverses the width axis of every sample.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let (n, c, h, w) = img.dims();
    let src = img.tensor().data();
    let t = Tensor::from_fn(&[n, c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    });
    ImageTensor::new(t).expect("flip preserves invariants")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub content: ImageTensor,
    pub style: ImageTensor,
    pub style_labels: Vec<LabelTriple>,
}

/// Decoded images of both domains, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub style: Vec<ImageTensor>,
    pub style_labels: Vec<LabelTriple>,
    pub style_entries: Vec<ManifestEntry>,
    pub content: Vec<ImageTensor>,
    pub content_paths: Vec<PathBuf>,
    pub hflip: bool,
}

impl Dataset {
    pub fn load(root: &Path, image_size: usize, hflip: bool) -> Result<Self> {
        let style_path = root.join(STYLE_MANIFEST);
        let manifest = load_manifest(&style_path)?;
        let content_entries = load_content_manifest(&root.join(CONTENT_MANIFEST))?;
        let style = manifest
            .entries
            .iter()
            .map(|e| preprocess(&root.join(&e.path), image_size))
            .collect::<Result<Vec<_>>>()?;
        let style_labels = (0..manifest.entries.len()).map(|i| manifest.labels(i)).collect();
        let content_paths: Vec<PathBuf> = content_entries.into_iter().map(|e| root.join(e.path)).collect();
        let content = content_paths
            .iter()
            .map(|p| preprocess(p, image_size))
            .collect::<Result<Vec<_>>>()?;
        log::info!(
            "loaded {} style images ({} artists, {} periods, {} genres) and {} content images",
            style.len(),
            manifest.schema.size(Axis::Artist),
            manifest.schema.size(Axis::Period),
            manifest.schema.size(Axis::Genre),
            content.len()
        );
        for ((artist, period), n) in &manifest.counts {
            log::debug!("{artist}/{period}: {n} images");
        }
        Ok(Dataset {
            schema: manifest.schema,
            style,
            style_labels,
            style_entries: manifest.entries,
            content,
            content_paths,
            hflip,
        })
    }

    /// Uniform draws with replacement, content and style independently, each
    /// optionally flipped with probability 1/2.
    pub fn sample_batch(&self, rng: &mut SeededRng, batch_size: usize) -> Result<Batch> {
        if self.content.is_empty() || self.style.is_empty() {
            return Err(Error::Precondition("cannot sample from an empty image pool".into()));
        }
        if batch_size == 0 {
            return Err(Error::Precondition("batch size must be positive".into()));
        }
        let pick = |pool: &[ImageTensor], rng: &mut SeededRng| {
            let i = rng.index(pool.len());
            let img = if self.hflip && rng.coin(0.5) {
                hflip(&pool[i])
            } else {
                pool[i].clone()
            };
            (i, img)
        };
        let mut content = Vec::with_capacity(batch_size);
        let mut style = Vec::with_capacity(batch_size);
        let mut style_labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            content.push(pick(&self.content, rng).1);
            let (i, img) = pick(&self.style, rng);
            style.push(img);
            style_labels.push(self.style_labels[i]);
        }
        Ok(Batch {
            content: ImageTensor::stack(&content)?,
            style: ImageTensor::stack(&style)?,
            style_labels,
        })
    }

    /// Every style image with its labels, as one batch.
    pub fn all_style(&self) -> Result<(ImageTensor, Vec<LabelTriple>)> {
        Ok((ImageTensor::stack(&self.style)?, self.style_labels.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb, Rgba};
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    fn solid(dir: &Path, name: &str, w: u32, h: u32, v: u8) {
        ImageBuffer::from_pixel(w, h, Rgb([v, v, v])).save(dir.join(name)).unwrap();
    }

    fn eight_line(dir: &Path) -> PathBuf {
        solid(dir, "a.png", 8, 8, 10);
        let mut text = String::new();
        for artist in ["picasso", "cezanne", "monet", "vangogh"] {
            for period in ["early", "late"] {
                text += &format!("{{\"path\":\"a.png\",\"artist\":\"{artist}\",\"period\":\"{period}\",\"genre\":\"impressionism\"}}\n");
            }
        }
        text += "{\"path\":\"a.png\",\"artist\":\"monet\",\"period\":\"late\",\"genre\":\"cubism\"}\n";
        write(dir, STYLE_MANIFEST, &text)
    }

    #[test]
    fn manifest_schema_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&eight_line(dir.path())).unwrap();
        assert_eq!(m.schema.size(Axis::Artist), 4);
        assert_eq!(m.schema.size(Axis::Period), 2);
        assert_eq!(m.schema.labels(Axis::Genre), ["cubism", "impressionism"]);
        assert_eq!(m.counts[&("monet".to_string(), "late".to_string())], 2);
        assert_eq!(m.labels(0), [2, 0, 1]);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let empty = write(d, "empty.jsonl", "\n");
        assert!(load_manifest(&empty).unwrap_err().to_string().contains("empty manifest"));
        solid(d, "a.png", 4, 4, 0);
        let bad = write(d, "bad.jsonl", "{\"path\":\"a.png\"}\nnot json\n");
        let err = load_content_manifest(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let unknown = write(d, "unk.jsonl", "{\"path\":\"a.png\",\"size\":3}\n");
        assert!(load_content_manifest(&unknown).unwrap_err().to_string().contains("size"));
        let missing = write(d, "miss.jsonl", "{\"path\":\"nope.png\"}\n");
        assert!(load_content_manifest(&missing).unwrap_err().to_string().contains("nope.png"));
    }

    #[test]
    fn preprocess_ranges_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        solid(d, "white.png", 100, 80, 255);
        let t = preprocess(&d.join("white.png"), 64).unwrap();
        assert_eq!(t.dims(), (1, 3, 64, 64));
        assert!(t.tensor().data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        // 16-bit mid-gray: 32768 / 65535 is within 1/65535 of one half
        let gray: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_pixel(70, 70, Rgb([32768; 3]));
        gray.save(d.join("gray.png")).unwrap();
        let t = preprocess(&d.join("gray.png"), 64).unwrap();
        assert!(t.tensor().data().iter().all(|v| v.abs() < 1.0 / 255.0));
        assert_eq!(t, preprocess(&d.join("gray.png"), 64).unwrap());
    }

    #[test]
    fn preprocess_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        ImageBuffer::from_pixel(8, 8, Rgba([1u8, 2, 3, 4])).save(d.join("rgba.png")).unwrap();
        let err = preprocess(&d.join("rgba.png"), 8).unwrap_err().to_string();
        assert!(err.contains("wrong channel count"), "{err}");
        image::GrayImage::from_pixel(8, 8, image::Luma([9])).save(d.join("g.png")).unwrap();
        assert!(preprocess(&d.join("g.png"), 8).is_err());
        write(d, "junk.png", "not an image");
        assert!(preprocess(&d.join("junk.png"), 8).is_err());
    }

    #[test]
    fn center_crop_keeps_the_middle() {
        let dir = tempfile::tempdir().unwrap();
        let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(12, 4, Rgb([0, 0, 0]));
        for y in 0..4 {
            for x in 4..8 {
                img.put_pixel(x, y, Rgb([255, 255, 255]));
            }
        }
        img.save(dir.path().join("wide.png")).unwrap();
        let t = preprocess(&dir.path().join("wide.png"), 4).unwrap();
        assert!(t.tensor().data().iter().all(|&v| v == 1.0));
    }

    fn dataset(n_style: usize) -> Dataset {
        let schema = AttributeSchema::from_strs(&["a", "b", "c", "d"], &["e", "l"], &["x", "y"]).unwrap();
        let img = |v: f32| ImageTensor::new(Tensor::from_fn(&[1, 3, 4, 4], |i| v * (i % 4) as f32 / 4.0)).unwrap();
        Dataset {
            schema,
            style: (0..n_style).map(|i| img(i as f32 / n_style as f32)).collect(),
            style_labels: (0..n_style).map(|i| [i % 4, i % 2, 0]).collect(),
            style_entries: Vec::new(),
            content: vec![img(0.5), img(-0.5)],
            content_paths: Vec::new(),
            hflip: true,
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = dataset(8);
        let a = ds.sample_batch(&mut SeededRng::new(7), 2).unwrap();
        let b = ds.sample_batch(&mut SeededRng::new(7), 2).unwrap();
        assert_eq!(a, b);
        let four = ds.sample_batch(&mut SeededRng::new(1), 4).unwrap();
        assert_eq!(four.style_labels.len(), 4);
        assert_eq!(four.content.batch(), four.style.batch());
    }

    #[test]
    fn artist_frequencies_within_three_sigma() {
        let ds = dataset(8);
        let mut rng = SeededRng::new(3);
        let draws = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..draws / 4 {
            for l in ds.sample_batch(&mut rng, 4).unwrap().style_labels {
                counts[l[0]] += 1;
            }
        }
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let ds = dataset(2);
        let x = &ds.style[1];
        assert_ne!(&hflip(x), x);
        assert_eq!(&hflip(&hflip(x)), x);
    }

    #[test]
    fn empty_pools_are_rejected() {
        let mut ds = dataset(2);
        ds.content.clear();
        assert!(ds.sample_batch(&mut SeededRng::new(0), 1).is_err());
    }
}
