//! Grayscale image restoration by matrix factorization: an image is a
//! rating matrix with one user per pixel row and one item per pixel column.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::als::fit;
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::ratings::RatingMatrix;
use crate::report::FitReport;

/// Row-major pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Values are clamped to `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite pixel value".into()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        GrayImage::new(width, height, vec![value; width * height]).expect("sizes agree")
    }

    /// `height x width` matrix, clamped.
    pub fn from_matrix(m: &Array2<f64>) -> Result<Self> {
        let (h, w) = m.dim();
        GrayImage::new(w, h, m.iter().copied().collect())
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.height, self.width), self.pixels.clone()).expect("sizes agree")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (`P5`, maxval up to 255).
    pub fn read_pgm<R: Read>(reader: R) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::io("<pgm>", e))? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P5" {
            return Err(Error::Format(format!("expected P5 PGM, found {:?}", header[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
        let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        let mut bytes = vec![0u8; w * h];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("PGM body shorter than {} bytes", w * h)))?;
        let scale = maxval as f64;
        GrayImage::new(w, h, bytes.iter().map(|&b| b as f64 / scale).collect())
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<pgm>", e);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height).map_err(io)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes).map_err(io)
    }

    /// Comma-separated pixel rows on the 0..255 scale.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut pixels = Vec::new();
        let mut width = None;
        let mut height = 0;
        for rec in rd.records() {
            let rec = rec?;
            if width.is_some_and(|w| w != rec.len()) {
                return Err(Error::Format(format!("ragged image row {}", height + 1)));
            }
            width = Some(rec.len());
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad pixel value {field:?}")))?;
                pixels.push(v / 255.0);
            }
            height += 1;
        }
        GrayImage::new(width.unwrap_or(0), height, pixels)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in self.pixels.chunks(self.width.max(1)) {
            wr.write_record(row.iter().map(|v| format!("{:?}", v * 255.0)))?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Reads `.pgm` or `.csv` by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        match extension(path).as_str() {
            "pgm" => Self::read_pgm(file),
            "csv" => Self::read_csv(file),
            other => Err(Error::Format(format!("unsupported image format {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let w = std::io::BufWriter::new(file);
        match extension(path).as_str() {
            "pgm" => self.write_pgm(w),
            "csv" => self.write_csv(w),
            other => Err(Error::Format(format!("unsupported image format {other:?}"))),
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Drops exactly `round(fraction * W * H)` uniformly chosen pixels; the rest
/// become ratings `(row, column, value)`.
pub fn mask_image(img: &GrayImage, fraction: f64, seed: u64) -> Result<RatingMatrix> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!("mask fraction must lie in [0, 1), got {fraction}")));
    }
    let n = img.width * img.height;
    let k = (fraction * n as f64).round() as usize;
    let mut masked = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in index::sample(&mut rng, n, k) {
        masked[c] = true;
    }
    let entries: Vec<(usize, usize, f64)> = (0..n)
        .filter(|&c| !masked[c])
        .map(|c| (c / img.width, c % img.width, img.pixels[c]))
        .collect();
    RatingMatrix::new(img.height, img.width, &entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreConfig {
    pub solver: SolverConfig,
    /// Copy observed pixels through instead of using their predictions.
    pub keep_observed: bool,
}

impl RestoreConfig {
    pub fn new(solver: SolverConfig) -> Self {
        RestoreConfig {
            solver,
            keep_observed: false,
        }
    }
}

/// Fits the masked image and predicts every pixel, clamped to `[0, 1]`.
pub fn restore(masked: &RatingMatrix, cfg: &RestoreConfig) -> Result<(GrayImage, FactorPair, FitReport)> {
    let (factors, report) = fit(masked, &cfg.solver)?;
    let mut m = factors.reconstruct();
    if cfg.keep_observed {
        for e in masked.entries() {
            m[[e.user, e.item]] = e.rating;
        }
    }
    let img = GrayImage::from_matrix(&m)?;
    Ok((img, factors, report))
}

/// Mean squared pixel difference.
pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.pixels.is_empty() {
        return Err(Error::Degenerate("empty image".into()));
    }
    let s: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.pixels.len() as f64)
}

/// Cap reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

/// Best rank-`k` approximation of the image (truncated SVD), clamped.
pub fn truncate_rank(img: &GrayImage, k: usize) -> Result<GrayImage> {
    let m = DMatrix::from_row_slice(img.height, img.width, &img.pixels);
    let mut svd = m.svd(true, true);
    for (i, s) in svd.singular_values.iter_mut().enumerate() {
        if i >= k {
            *s = 0.0;
        }
    }
    let r = svd
        .recompose()
        .map_err(|e| Error::Degenerate(format!("svd recomposition: {e}")))?;
    let pixels = (0..img.height)
        .flat_map(|i| (0..img.width).map(move |j| (i, j)))
        .map(|(i, j)| r[(i, j)])
        .collect();
    GrayImage::new(img.width, img.height, pixels)
}
