//! MSB/LSB plane split of a high bit-depth map.
//!
//! `msb = x / d`, `lsb = x % d`, and `x = msb * d + lsb` recovers the input.

use crate::depth_io::DepthMap;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlanes {
    width: usize,
    height: usize,
    bit_depth: u8,
    precision: u32,
    divisor: u32,
    msb: Vec<u32>,
    lsb: Vec<u32>,
}

/// Largest MSB value for a bit depth and divisor.
pub fn msb_max(bit_depth: u8, divisor: u32) -> u32 {
    (((1u64 << bit_depth) - 1) / u64::from(divisor)) as u32
}

impl SplitPlanes {
    pub fn from_parts(
        width: usize,
        height: usize,
        bit_depth: u8,
        precision: u32,
        divisor: u32,
        msb: Vec<u32>,
        lsb: Vec<u32>,
    ) -> Result<Self> {
        if divisor < 2 {
            return Err(Error::argument(format!("split divisor {divisor} < 2")));
        }
        if msb.len() != width * height || lsb.len() != width * height {
            return Err(Error::Data("plane dimensions disagree".into()));
        }
        let top = msb_max(bit_depth, divisor);
        if let Some(v) = lsb.iter().find(|&&v| v >= divisor) {
            return Err(Error::Data(format!("lsb {v} >= divisor {divisor}")));
        }
        if let Some(v) = msb.iter().find(|&&v| v > top) {
            return Err(Error::Data(format!("msb {v} exceeds {top}")));
        }
        Ok(SplitPlanes {
            width,
            height,
            bit_depth,
            precision,
            divisor,
            msb,
            lsb,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn divisor(&self) -> u32 {
        self.divisor
    }

    pub fn msb(&self) -> &[u32] {
        &self.msb
    }

    pub fn lsb(&self) -> &[u32] {
        &self.lsb
    }

    /// Channel `0` is the MSB plane, channel `1` the LSB plane.
    pub fn plane(&self, channel: usize) -> &[u32] {
        if channel == 0 {
            &self.msb
        } else {
            &self.lsb
        }
    }

    /// Per-channel maximum level: the normalization divisors of the network input.
    pub fn levels(&self) -> [u32; 2] {
        channel_levels(self.bit_depth, self.divisor)
    }
}

/// Per-channel maximum levels `(M, d - 1)`, with `M` replaced by 1 when zero.
pub fn channel_levels(bit_depth: u8, divisor: u32) -> [u32; 2] {
    [msb_max(bit_depth, divisor).max(1), divisor - 1]
}

pub fn split(map: &DepthMap, divisor: u32) -> Result<SplitPlanes> {
    if divisor < 2 {
        return Err(Error::argument(format!("split divisor {divisor} < 2")));
    }
    let (msb, lsb) = map
        .data()
        .iter()
        .map(|&x| (x / divisor, x % divisor))
        .unzip();
    Ok(SplitPlanes {
        width: map.width(),
        height: map.height(),
        bit_depth: map.bit_depth(),
        precision: map.precision(),
        divisor,
        msb,
        lsb,
    })
}

pub fn merge(planes: &SplitPlanes) -> Result<DepthMap> {
    // re-validate: planes may have been assembled from decoded data
    let planes = SplitPlanes::from_parts(
        planes.width,
        planes.height,
        planes.bit_depth,
        planes.precision,
        planes.divisor,
        planes.msb.clone(),
        planes.lsb.clone(),
    )?;
    let data = planes
        .msb
        .iter()
        .zip(&planes.lsb)
        .map(|(&m, &l)| m * planes.divisor + l)
        .collect();
    DepthMap::new(
        planes.width,
        planes.height,
        planes.bit_depth,
        planes.precision,
        data,
    )
}

/// Two-channel `[1, 2, H, W]` network input with each plane scaled to [0, 1].
pub fn pack_normalized<T: Scalar>(planes: &SplitPlanes) -> Tensor<T> {
    let levels = planes.levels();
    let n = planes.width * planes.height;
    let mut data = Vec::with_capacity(2 * n);
    for (ch, level) in levels.iter().enumerate() {
        let scale = T::one() / T::from_u32(*level).unwrap();
        data.extend(
            planes
                .plane(ch)
                .iter()
                .map(|&v| T::from_u32(v).unwrap() * scale),
        );
    }
    Tensor::from_vec([1, 2, planes.height, planes.width], data).expect("shape by construction")
}
