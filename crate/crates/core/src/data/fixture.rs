//! Procedural stand-in dataset.
//!
//! Artists differ by hue, periods by brightness and genres by texture, so
//! every attribute is visually separable. Each artist covers two of the
//! three genres; in particular cezanne never appears with surrealism, which
//! leaves that combination for zero-shot conditioning.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use super::{ContentEntry, ManifestEntry, CONTENT_MANIFEST, STYLE_MANIFEST};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const SIZE: u32 = 64;
pub const CONTENT_IMAGES: usize = 8;

/// `(artist, base colour, genres)`.
pub const ARTISTS: [(&str, [f64; 3], [&str; 2]); 4] = [
    ("picasso", [0.15, 0.30, 0.90], ["cubism", "surrealism"]),
    ("cezanne", [0.20, 0.75, 0.25], ["impressionism", "cubism"]),
    ("monet", [0.90, 0.40, 0.80], ["impressionism", "surrealism"]),
    ("vangogh", [0.95, 0.85, 0.10], ["impressionism", "surrealism"]),
];

pub const PERIODS: [(&str, f64); 2] = [("early", 0.55), ("late", 1.0)];

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A per-pixel shade in roughly `[0.4, 1.1]` encoding the genre texture.
fn texture(genre: &str, rng: &mut SeededRng) -> Vec<f64> {
    let n = SIZE as usize;
    let mut shade = vec![0.0; n * n];
    match genre {
        "impressionism" => {
            shade.iter_mut().for_each(|s| *s = 0.6);
            for _ in 0..140 {
                let (cx, cy) = (rng.index(n) as f64, rng.index(n) as f64);
                let r = 1.5 + 1.5 * rng.coin(0.5) as u8 as f64;
                let v = if rng.coin(0.5) { 1.05 } else { 0.85 };
                for y in 0..n {
                    for x in 0..n {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d <= r {
                            shade[y * n + x] = v;
                        }
                    }
                }
            }
        }
        "cubism" => {
            // facets: cells of an arrangement of random lines
            let lines: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    let a = rng.gaussian() * std::f64::consts::PI;
                    let off = (rng.index(n) as f64) - n as f64 / 2.0;
                    (a.cos(), a.sin(), off)
                })
                .collect();
            let levels = [0.45, 0.7, 0.95, 1.1];
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 - n as f64 / 2.0, y as f64 - n as f64 / 2.0);
                    let code = lines
                        .iter()
                        .enumerate()
                        .filter(|(_, (c, s, o))| c * px + s * py > *o)
                        .fold(0usize, |acc, (i, _)| acc + i + 1);
                    shade[y * n + x] = levels[code % levels.len()];
                }
            }
        }
        "surrealism" => {
            let (cx, cy) = (rng.index(n) as f64, rng.index(n) as f64);
            let r = 10.0 + rng.index(12) as f64;
            for y in 0..n {
                for x in 0..n {
                    let grad = 0.55 + 0.4 * y as f64 / n as f64;
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let disc = 0.5 * (-(d / r).powi(2)).exp();
                    shade[y * n + x] = grad + disc;
                }
            }
        }
        other => panic!("unknown fixture genre {other}"),
    }
    shade
}

pub fn style_image(base: [f64; 3], brightness: f64, genre: &str, rng: &mut SeededRng) -> RgbImage {
    let shade = texture(genre, rng);
    ImageBuffer::from_fn(SIZE, SIZE, |x, y| {
        let s = shade[(y * SIZE + x) as usize] * brightness;
        Rgb(base.map(|c| to_u8(c * s)))
    })
}

/// Greyish scenes: a sky gradient, a few blocks and a sun, lightly tinted.
pub fn content_image(rng: &mut SeededRng) -> RgbImage {
    let n = SIZE as f64;
    let tint = [0.0; 3].map(|_: f64| 0.04 * rng.gaussian());
    let horizon = n * (0.45 + 0.2 * (rng.index(100) as f64 / 100.0));
    let blocks: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let w = 6.0 + rng.index(14) as f64;
            let x0 = rng.index(SIZE as usize) as f64 - w / 2.0;
            let h = 8.0 + rng.index(20) as f64;
            let v = 0.2 + rng.index(40) as f64 / 100.0;
            (x0, w, h, v)
        })
        .collect();
    let (sx, sy) = (rng.index(SIZE as usize) as f64, rng.index((horizon as usize).max(1)) as f64);
    ImageBuffer::from_fn(SIZE, SIZE, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut v = if fy < horizon { 0.75 - 0.25 * fy / horizon } else { 0.45 };
        if ((fx - sx).powi(2) + (fy - sy).powi(2)).sqrt() < 5.0 {
            v = 0.95;
        }
        for &(x0, w, h, bv) in &blocks {
            if fx >= x0 && fx < x0 + w && fy >= horizon - h && fy < horizon + 6.0 {
                v = bv;
            }
        }
        Rgb([0, 1, 2].map(|c| to_u8(v + tint[c])))
    })
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes images and both manifests under `dir`.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for sub in ["style", "content"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut style = String::new();
    for (artist, base, genres) in ARTISTS {
        for (period, brightness) in PERIODS {
            for genre in genres {
                let rel = format!("style/{artist}_{period}_{genre}.png");
                save(&style_image(base, brightness, genre, &mut rng), &dir.join(&rel))?;
                let entry = ManifestEntry {
                    path: rel.into(),
                    artist: artist.into(),
                    period: period.into(),
                    genre: genre.into(),
                };
                style += &serde_json::to_string(&entry).expect("entry serializes");
                style.push('\n');
            }
        }
    }
    let mut content = String::new();
    for i in 0..CONTENT_IMAGES {
        let rel = format!("content/scene_{i}.png");
        save(&content_image(&mut rng), &dir.join(&rel))?;
        content += &serde_json::to_string(&ContentEntry { path: rel.into() }).expect("entry serializes");
        content.push('\n');
    }
    for (name, text) in [(STYLE_MANIFEST, style), (CONTENT_MANIFEST, content)] {
        std::fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, Dataset};
    use crate::schema::Axis;

    #[test]
    fn fixture_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 0).unwrap();
        let m = load_manifest(&dir.path().join(STYLE_MANIFEST)).unwrap();
        assert_eq!(m.entries.len(), 16);
        assert_eq!(m.schema.sizes(), [4, 2, 3]);
        assert!(m.counts.values().all(|&c| c == 2));
        assert!(!m.entries.iter().any(|e| e.artist == "cezanne" && e.genre == "surrealism"));
        let ds = Dataset::load(dir.path(), 64, false).unwrap();
        assert_eq!(ds.content.len(), 8);
        assert_eq!(ds.style[0].dims(), (1, 3, 64, 64));
        assert_eq!(ds.schema.labels(Axis::Artist), ["cezanne", "monet", "picasso", "vangogh"]);
    }

    #[test]
    fn fixture_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_fixture(a.path(), 3).unwrap();
        write_fixture(b.path(), 3).unwrap();
        for name in ["style.jsonl", "content.jsonl", "style/monet_late_surrealism.png", "content/scene_7.png"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
    }

    /// Nearest mean colour over the training images classifies every
    /// artist correctly, so the fixture is colour-separable.
    #[test]
    fn nearest_mean_colour_separates_artists() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 0).unwrap();
        let ds = Dataset::load(dir.path(), 64, false).unwrap();
        let chroma = |img: &crate::tensor::ImageTensor| {
            let d = img.tensor().data();
            let p = d.len() / 3;
            let m: Vec<f64> = (0..3).map(|c| d[c * p..(c + 1) * p].iter().map(|&v| v as f64).sum::<f64>() / p as f64).collect();
            // brightness-normalized colour, so periods do not interfere
            let s: f64 = m.iter().map(|v| v + 1.0).sum();
            [0, 1, 2].map(|c| (m[c] + 1.0) / s)
        };
        let feats: Vec<[f64; 3]> = ds.style.iter().map(chroma).collect();
        let mut means = [[0.0; 3]; 4];
        let mut counts = [0.0; 4];
        for (f, l) in feats.iter().zip(&ds.style_labels) {
            for c in 0..3 {
                means[l[0]][c] += f[c];
            }
            counts[l[0]] += 1.0;
        }
        for (m, n) in means.iter_mut().zip(counts) {
            m.iter_mut().for_each(|v| *v /= n);
        }
        let correct = feats
            .iter()
            .zip(&ds.style_labels)
            .filter(|(f, l)| {
                let dist = |m: &[f64; 3]| (0..3).map(|c| (f[c] - m[c]).powi(2)).sum::<f64>();
                let best = (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best == l[0]
            })
            .count();
        assert_eq!(correct, feats.len());
    }
}
