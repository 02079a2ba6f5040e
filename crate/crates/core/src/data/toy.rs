use super::Dataset;
use crate::adcore::Tensor;
use crate::config::Task;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

pub const DEFAULT_TOY_N: usize = 40_000;

const DEFAULT_MASK: &str = include_str!("dgp_mask.pbm");

/// Binary raster over the unit square; row 0 is the top edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Mask {
    /// Parses a plain (`P1`) PBM image.
    pub fn parse_pbm(text: &str) -> Result<Self> {
        let tokens: Vec<&str> =
            text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace).collect();
        if tokens.first() != Some(&"P1") || tokens.len() < 3 {
            return Err(Error::Data("mask is not a plain PBM (P1) file".into()));
        }
        let dim = |t: &str| t.parse::<usize>().map_err(|_| Error::Data("bad PBM header".into()));
        let (width, height) = (dim(tokens[1])?, dim(tokens[2])?);
        let body = &tokens[3..];
        let bits: Vec<bool> = body
            .iter()
            .flat_map(|t| t.chars())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Data(format!("bad PBM pixel {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if bits.len() != width * height {
            return Err(Error::Data(format!("PBM has {} pixels, expected {}", bits.len(), width * height)));
        }
        Ok(Mask { width, height, bits })
    }

    /// Rasterized "DGP" glyphs, 200×100.
    pub fn default_letters() -> Self {
        Self::parse_pbm(DEFAULT_MASK).expect("embedded mask is valid")
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Mask { width, height, bits }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether the pixel containing `(x₁, x₂) ∈ [0,1]²` is set, with `x₂`
    /// measured upward from the bottom edge.
    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        let col = ((x1 * self.width as f64).floor() as usize).min(self.width - 1);
        let row = (((1.0 - x2) * self.height as f64).floor() as usize).min(self.height - 1);
        self.get(col, row)
    }
}

/// Uniform points on the unit square labelled 1 inside the letters.
pub fn gen_toy_letters(n: usize, seed: u64, mask: &Mask) -> Result<Dataset> {
    if mask.count_set() == 0 {
        return Err(Error::Data("mask has no set pixels".into()));
    }
    let mut rng = Rng::new(seed, stream::DATA);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b) = (rng.uniform(), rng.uniform());
        x.push(a);
        x.push(b);
        y.push(if mask.contains(a, b) { 1.0 } else { 0.0 });
    }
    Dataset::new(Tensor::matrix(n, 2, x), y, Task::Binary)
}
