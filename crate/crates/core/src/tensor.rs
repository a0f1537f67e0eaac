//! Dense row-major tensors and the `RTNS` dump format.
//!
//! Feature maps use the `N×C×H×W` layout throughout. Element type is generic
//! over [`Real`] so the same network code runs in `f32` for training and in
//! `f64` for gradient checking.

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a tensor.
pub trait Real:
    Float + Debug + Default + AddAssign + SubAssign + MulAssign + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product helper: `c[m×n] (+)= a[m×k] · b[k×n]`, where
/// either operand may be read transposed.
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `c` is a unique borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(!shape.is_empty() && !shape.contains(&0), "bad shape {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert!(n > 0, "bad shape {shape:?}");
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `N×C×H×W`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected a 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cc, hh, ww) = self.dims4().expect("4-d tensor");
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Repeats a `1×C×H×W` tensor `n` times along the batch axis.
    pub fn repeat_batch(&self, n: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if b != 1 {
            return Err(Error::shape(format!("repeat_batch needs N=1, got {b}")));
        }
        let mut data = Vec::with_capacity(n * self.data.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    /// Stacks `1×C×H×W` (or `C×H×W`) tensors of identical shape into a batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let inner: Vec<usize> = match first.shape[..] {
            [1, c, h, w] => vec![c, h, w],
            [c, h, w] => vec![c, h, w],
            _ => return Err(Error::shape(format!("cannot stack shape {:?}", first.shape))),
        };
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.len() != first.len() {
                return Err(Error::shape("stack: mismatched tensor sizes"));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    /// Extracts batch element `n` of an `N×C×H×W` tensor as `1×C×H×W`.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if n >= b {
            return Err(Error::shape(format!("batch index {n} out of range {b}")));
        }
        let sz = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[n * sz..(n + 1) * sz].to_vec())
    }
}

pub const RTNS_MAGIC: &[u8; 4] = b"RTNS";
pub const RTNS_VERSION: u32 = 1;

/// Serializes a tensor as `RTNS`: magic, u32 version, u32 ndim, dims, f32 payload (all LE).
pub fn write_rtns<T: Real>(tensor: &Tensor<T>, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(RTNS_MAGIC)?;
    out.write_all(&RTNS_VERSION.to_le_bytes())?;
    out.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
    for &d in &tensor.shape {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 4);
    for v in &tensor.data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn save_rtns<T: Real>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_rtns(tensor, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PGM of a `rows×cols` plane, rescaled linearly so the minimum
/// maps to 0 and the maximum to 255. A constant plane is all zeros.
pub fn write_pgm<T: Real>(plane: &[T], rows: usize, cols: usize, mut out: impl Write) -> std::io::Result<()> {
    assert_eq!(plane.len(), rows * cols, "plane size");
    let (lo, hi) = plane
        .iter()
        .map(|v| v.as_f64())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    let pixels: Vec<u8> = plane
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v.as_f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    out.write_all(&pixels)
}

/// [`write_pgm`] of a tensor whose last two axes are the image; leading axes must be 1.
pub fn save_pgm<T: Real>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = tensor.shape.len();
    if n < 2 || tensor.shape[..n - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!("PGM needs a single plane, got {:?}", tensor.shape)));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_pgm(&tensor.data, tensor.shape[n - 2], tensor.shape[n - 1], &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_rtns(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_rtns(&bytes).map_err(|(offset, reason)| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    })
}

/// Parses an in-memory `RTNS` buffer; on failure returns the byte offset and reason.
pub fn parse_rtns(bytes: &[u8]) -> std::result::Result<Tensor<f32>, (u64, String)> {
    let word = |off: usize| -> std::result::Result<u32, (u64, String)> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or((off as u64, "truncated header".to_string()))
    };
    if bytes.get(0..4) != Some(RTNS_MAGIC.as_slice()) {
        return Err((0, "bad magic".into()));
    }
    let version = word(4)?;
    if version != RTNS_VERSION {
        return Err((4, format!("unsupported version {version}")));
    }
    let ndim = word(8)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(word(12 + 4 * i)? as usize);
    }
    let start = 12 + 4 * ndim;
    let count: usize = shape.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != count * 4 {
        return Err((
            start as u64,
            format!("payload has {} bytes, expected {}", payload.len(), count * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| (12, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_rescales_to_full_range() {
        let mut buf = Vec::new();
        write_pgm(&[-1.0f64, 0.0, 1.0, 0.5], 2, 2, &mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n2 2\n255\n");
        assert_eq!(&buf[11..], &[0, 128, 255, 191]);
        let mut flat = Vec::new();
        write_pgm(&[0.3f32; 3], 1, 3, &mut flat).unwrap();
        assert_eq!(&flat[flat.len() - 3..], &[0, 0, 0]);
        let t = Tensor::<f64>::zeros(vec![2, 1, 3, 3]);
        assert!(save_pgm(&t, std::env::temp_dir().join("never.pgm")).is_err());
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn rtns_header_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_rtns(&t, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"RTNS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[24..28].try_into().unwrap()), -2.5);
        assert_eq!(buf.len(), 28);
        assert_eq!(parse_rtns(&buf).unwrap(), t);
    }

    #[test]
    fn rtns_rejects_truncation() {
        let t = Tensor::<f32>::zeros(vec![3, 3]);
        let mut buf = Vec::new();
        write_rtns(&t, &mut buf).unwrap();
        buf.pop();
        let (offset, _) = parse_rtns(&buf).unwrap_err();
        assert_eq!(offset, 20);
        assert_eq!(parse_rtns(b"NOPE").unwrap_err().0, 0);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
