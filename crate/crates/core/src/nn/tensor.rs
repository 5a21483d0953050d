use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "{} elements do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous slice holding one (sample, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("finite cast"))
                .collect(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// `(C*r*r, H, W) -> (C, H*r, W*r)`, sub-pixel order `c*r*r + i*r + j`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape(format!(
                "{c} channels not divisible by {r}^2"
            )));
        }
        let oc = c / (r * r);
        let mut out = Tensor::zeros([n, oc, h * r, w * r]);
        for b in 0..n {
            for ic in 0..c {
                let (o, sub) = (ic / (r * r), ic % (r * r));
                let (i, j) = (sub / r, sub % r);
                let src = self.plane(b, ic);
                for y in 0..h {
                    for x in 0..w {
                        let dst = out.index(b, o, y * r + i, x * r + j);
                        out.data[dst] = src[y * w + x];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(format!("{h}x{w} not divisible by {r}")));
        }
        let (oh, ow) = (h / r, w / r);
        let mut out = Tensor::zeros([n, c * r * r, oh, ow]);
        for b in 0..n {
            for oc in 0..c * r * r {
                let (ic, sub) = (oc / (r * r), oc % (r * r));
                let (i, j) = (sub / r, sub % r);
                for y in 0..oh {
                    for x in 0..ow {
                        let dst = out.index(b, oc, y, x);
                        out.data[dst] = self.at(b, ic, y * r + i, x * r + j);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Channel concatenation.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let [n, c1, h, w] = self.shape;
        let [n2, c2, h2, w2] = other.shape;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(format!(
                "concat {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        for b in 0..n {
            data.extend_from_slice(self.sample(b));
            data.extend_from_slice(other.sample(b));
        }
        Ok(Tensor {
            shape: [n, c1 + c2, h, w],
            data,
        })
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "channels {start}..{} of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Tensor {
            shape: [n, len, h, w],
            data,
        })
    }

    /// Top-left `h x w` window.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let [n, c, ih, iw] = self.shape;
        if h > ih || w > iw {
            return Err(Error::shape(format!("crop {h}x{w} from {ih}x{iw}")));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                let plane = self.plane(b, ch);
                for y in 0..h {
                    data.extend_from_slice(&plane[y * iw..y * iw + w]);
                }
            }
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Grows to `h x w` by repeating the last row and column.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Result<Self> {
        let [n, c, ih, iw] = self.shape;
        if h < ih || w < iw {
            return Err(Error::shape(format!("pad {ih}x{iw} to {h}x{w}")));
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                for y in 0..h {
                    let sy = y.min(ih - 1);
                    for x in 0..w {
                        let dst = out.index(b, ch, y, x);
                        out.data[dst] = src[sy * iw + x.min(iw - 1)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Concatenates tensors of equal per-sample shape along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }
}
