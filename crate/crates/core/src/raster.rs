//! Single-channel image and binary mask buffers (row-major).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    /// 0 = background, 1 = mass.
    pub data: Vec<u8>,
}

macro_rules! grid_common {
    ($t:ty, $elem:ty) => {
        impl $t {
            pub fn new(height: usize, width: usize, data: Vec<$elem>) -> Result<Self> {
                if data.len() != height * width {
                    return Err(Error::Data(format!(
                        "{} values for a {height}x{width} grid",
                        data.len()
                    )));
                }
                Ok(Self { height, width, data })
            }

            pub fn filled(height: usize, width: usize, v: $elem) -> Self {
                Self { height, width, data: vec![v; height * width] }
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            #[inline]
            pub fn at(&self, y: usize, x: usize) -> $elem {
                self.data[y * self.width + x]
            }

            #[inline]
            pub fn set(&mut self, y: usize, x: usize, v: $elem) {
                self.data[y * self.width + x] = v;
            }

            /// Rectangle `[top, top + h) x [left, left + w)`.
            pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
                assert!(top + h <= self.height && left + w <= self.width, "crop out of bounds");
                let mut data = Vec::with_capacity(h * w);
                for y in top..top + h {
                    data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
                }
                Self { height: h, width: w, data }
            }

            /// Mirror left-right.
            pub fn flip_horizontal(&self) -> Self {
                let mut out = self.clone();
                for row in out.data.chunks_mut(self.width.max(1)) {
                    row.reverse();
                }
                out
            }

            /// Mirror top-bottom.
            pub fn flip_vertical(&self) -> Self {
                let mut data = Vec::with_capacity(self.data.len());
                for row in self.data.chunks(self.width.max(1)).rev() {
                    data.extend_from_slice(row);
                }
                Self { height: self.height, width: self.width, data }
            }
        }
    };
}

grid_common!(Image, f32);
grid_common!(Mask, u8);

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// Positions of all mass pixels as `(y, x)`.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn same_dims(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }
}

impl Image {
    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}
