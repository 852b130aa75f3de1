//! Binary raster masks and their run-length wire encoding.
//!
//! Runs are row-major and alternate false/true starting with a false run,
//! which may have length zero: `[false_run, true_run, false_run, ...]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("run lengths sum to {got}, expected {expected} ({width}x{height})")]
    LengthMismatch {
        width: u32,
        height: u32,
        expected: u64,
        got: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        if x < self.width && y < self.height {
            self.bits[(y * self.width + x) as usize] = v;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn encode_rle(&self) -> Vec<u64> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u64;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn decode_rle(width: u32, height: u32, runs: &[u64]) -> Result<Self, RleError> {
        let expected = width as u64 * height as u64;
        let got: u64 = runs.iter().sum();
        if got != expected {
            return Err(RleError::LengthMismatch {
                width,
                height,
                expected,
                got,
            });
        }
        let mut bits = Vec::with_capacity(expected as usize);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn to_wire(&self) -> RleMask {
        RleMask {
            width: self.width,
            height: self.height,
            counts: self.encode_rle(),
        }
    }
}

/// Wire form of a mask: `{"width", "height", "counts"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn decode(&self) -> Result<BinaryMask, RleError> {
        BinaryMask::decode_rle(self.width, self.height, &self.counts)
    }
}
