//! Palette-based codec between discrete semantic labels and continuous
//! RGB images, so a regression model can predict segmentation maps.

use crate::diffusion::Latent;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayView3};
use std::io::{BufRead, Write};
use std::path::Path;

/// Integer class indices per pixel, (height, width), values in `[0, K)`.
pub type LabelMap = Array2<u8>;

/// Maximum number of classes the default palette supports.
pub const MAX_CLASSES: usize = 16;

/// Fixed color table: greedy farthest-point selection over the 27-point
/// grid {−1, 0, 1}³ in lexicographic candidate order, seeded at
/// (−1,−1,−1). Any prefix of length K is the K-class default palette;
/// minimum pairwise distance is 2√3 at K=2 and 1.0 at K=16.
pub const DEFAULT_COLORS: [[f64; 3]; 16] = [
    [-1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 0.0, 1.0],
    [0.0, 1.0, -1.0],
    [1.0, -1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [0.0, -1.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 0.0, -1.0],
    [-1.0, -1.0, 0.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 0.0, -1.0],
    [-1.0, 0.0, 0.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [0.0, -1.0, -1.0],
];

/// Bijective label ↔ color table; channels live in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f64; 3]>,
    class_names: Vec<String>,
}

impl Palette {
    /// Builds a palette from explicit colors and names. Enforces K ≥ 2 and
    /// a minimum pairwise color distance of 0.5 so nearest-color decoding
    /// has a usable noise margin.
    pub fn new(colors: Vec<[f64; 3]>, class_names: Vec<String>) -> Result<Self> {
        if colors.len() < 2 {
            return Err(Error::invalid_argument("palette needs at least 2 colors"));
        }
        if colors.len() != class_names.len() {
            return Err(Error::invalid_argument(format!(
                "{} colors but {} class names",
                colors.len(),
                class_names.len()
            )));
        }
        for c in &colors {
            if c.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::invalid_argument(format!(
                    "color {c:?} outside [-1, 1]"
                )));
            }
        }
        for i in 0..colors.len() {
            for j in (i + 1)..colors.len() {
                if dist(&colors[i], &colors[j]) < 0.5 {
                    return Err(Error::invalid_argument(format!(
                        "colors {i} and {j} are closer than 0.5"
                    )));
                }
            }
        }
        Ok(Self {
            colors,
            class_names,
        })
    }

    /// The K-class default palette with generic class names.
    pub fn default_k(num_classes: usize) -> Result<Self> {
        if !(2..=MAX_CLASSES).contains(&num_classes) {
            return Err(Error::invalid_argument(format!(
                "num_classes must be in 2..=16, got {num_classes}"
            )));
        }
        let colors = DEFAULT_COLORS[..num_classes].to_vec();
        let names = (0..num_classes).map(|i| format!("class_{i}")).collect();
        Self::new(colors, names)
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Smallest Euclidean distance between any two palette colors; decoding
    /// tolerates any per-pixel perturbation below half this value.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.colors.len() {
            for j in (i + 1)..self.colors.len() {
                best = best.min(dist(&self.colors[i], &self.colors[j]));
            }
        }
        best
    }

    /// One `name r g b` line per class.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (name, c) in self.class_names.iter().zip(&self.colors) {
            writeln!(f, "{} {} {} {}", name, c[0], c[1], c[2])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut colors = Vec::new();
        let mut names = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::format(format!(
                    "palette line {} must be `name r g b`: {line:?}",
                    lineno + 1
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad number {s:?} on line {}", lineno + 1)))
            };
            names.push(parts[0].to_string());
            colors.push([parse(parts[1])?, parse(parts[2])?, parse(parts[3])?]);
        }
        Self::new(colors, names)
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-pixel palette lookup; returns a 3-channel image in [−1, 1].
pub fn encode_labels(labels: &LabelMap, palette: &Palette) -> Result<Latent> {
    let (h, w) = labels.dim();
    let k = palette.len() as u8;
    let mut out = Array3::zeros((3, h, w));
    for ((y, x), &label) in labels.indexed_iter() {
        if label >= k {
            return Err(Error::invalid_argument(format!(
                "label {label} at ({y}, {x}) >= {k} classes"
            )));
        }
        let c = palette.colors()[label as usize];
        out[[0, y, x]] = c[0];
        out[[1, y, x]] = c[1];
        out[[2, y, x]] = c[2];
    }
    Ok(out)
}

/// Per-pixel argmin of Euclidean distance to the palette colors; ties go to
/// the lowest class index.
pub fn decode_labels(image: ArrayView3<'_, f64>, palette: &Palette) -> Result<LabelMap> {
    let shape = image.shape();
    if shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            expected: "(3, h, w)".into(),
            got: format!("{shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = [image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]];
            let mut best = 0u8;
            let mut best_d = f64::INFINITY;
            for (i, c) in palette.colors().iter().enumerate() {
                let d = dist(&px, c);
                if d < best_d {
                    best_d = d;
                    best = i as u8;
                }
            }
            out[[y, x]] = best;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent greedy farthest-point selection over {−1,0,1}³.
    fn greedy_oracle(k: usize) -> Vec<[f64; 3]> {
        let mut cands = Vec::new();
        for r in [-1.0, 0.0, 1.0] {
            for g in [-1.0, 0.0, 1.0] {
                for b in [-1.0, 0.0, 1.0] {
                    cands.push([r, g, b]);
                }
            }
        }
        let mut sel = vec![0usize];
        while sel.len() < k {
            let mut best = None;
            let mut best_d = -1.0;
            for (i, c) in cands.iter().enumerate() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&j| dist(c, &cands[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d + 1e-12 {
                    best_d = d;
                    best = Some(i);
                }
            }
            sel.push(best.unwrap());
        }
        sel.into_iter().map(|i| cands[i]).collect()
    }

    #[test]
    fn shipped_table_matches_greedy_selection() {
        let oracle = greedy_oracle(16);
        for (a, b) in DEFAULT_COLORS.iter().zip(&oracle) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn two_class_palette_is_antipodal_pair() {
        let p = Palette::default_k(2).unwrap();
        assert_eq!(p.colors(), &[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]);
    }

    #[test]
    fn class_count_limits() {
        assert!(Palette::default_k(1).is_err());
        assert!(Palette::default_k(17).is_err());
        assert!(Palette::default_k(16).is_ok());
    }

    #[test]
    fn min_distance_at_least_half() {
        for k in 2..=16 {
            let p = Palette::default_k(k).unwrap();
            assert!(
                p.min_pairwise_distance() >= 0.5,
                "K={k}: {}",
                p.min_pairwise_distance()
            );
        }
    }

    #[test]
    fn constant_and_checkerboard_encode() {
        let p = Palette::default_k(4).unwrap();
        let constant = Array2::zeros((4, 4));
        let img = encode_labels(&constant, &p).unwrap();
        assert!(img
            .slice(ndarray::s![0, .., ..])
            .iter()
            .all(|&v| v == p.colors()[0][0]));

        let board = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8);
        let img = encode_labels(&board, &p).unwrap();
        assert_eq!(img[[0, 0, 0]], p.colors()[0][0]);
        assert_eq!(img[[0, 0, 1]], p.colors()[1][0]);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let p = Palette::default_k(2).unwrap();
        let labels = Array2::from_elem((2, 2), 2u8);
        assert!(encode_labels(&labels, &p).is_err());
    }

    #[test]
    fn exact_round_trip() {
        let p = Palette::default_k(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0..7u8));
        let decoded = decode_labels(encode_labels(&labels, &p).unwrap().view(), &p).unwrap();
        assert_eq!(labels, decoded);
    }

    #[test]
    fn robust_round_trip_below_half_min_distance() {
        let p = Palette::default_k(16).unwrap();
        let margin = p.min_pairwise_distance() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let labels = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0..16u8));
        let mut img = encode_labels(&labels, &p).unwrap();
        // per-pixel perturbation with norm strictly below the margin
        for y in 0..8 {
            for x in 0..8 {
                let dir: [f64; 3] = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let norm = (dir.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
                let scale = 0.95 * margin / norm;
                for c in 0..3 {
                    img[[c, y, x]] += dir[c] * scale;
                }
            }
        }
        let decoded = decode_labels(img.view(), &p).unwrap();
        assert_eq!(labels, decoded);
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        let p = Palette::default_k(2).unwrap();
        // midpoint of the two colors is equidistant
        let img = Array3::zeros((3, 1, 1));
        let decoded = decode_labels(img.view(), &p).unwrap();
        assert_eq!(decoded[[0, 0]], 0);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let p = Palette::default_k(2).unwrap();
        let img = Array3::zeros((4, 2, 2));
        assert!(decode_labels(img.view(), &p).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("palette.txt");
        let p = Palette::default_k(5).unwrap();
        p.save(&path).unwrap();
        let q = Palette::load(&path).unwrap();
        assert_eq!(p, q);
    }
}
