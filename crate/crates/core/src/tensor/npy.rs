//! `.npy` (format v1.0, little-endian, C order) reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::{NpyFile, Order, WriterBuilder};

use super::{Float, Tensor, TensorError};

fn npy_err(path: &Path, e: impl std::fmt::Display) -> TensorError {
    TensorError::Npy(format!("{}: {e}", path.display()))
}

pub fn write_tensor<T: Float>(path: &Path, tensor: &Tensor<T>) -> Result<(), TensorError> {
    let shape: Vec<u64> = tensor.shape().iter().map(|&d| d as u64).collect();
    write_raw(path, &shape, tensor.data().iter().copied())
}

pub fn write_i64(path: &Path, shape: &[usize], data: &[i64]) -> Result<(), TensorError> {
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    write_raw(path, &shape, data.iter().copied())
}

fn write_raw<S: npyz::AutoSerialize>(
    path: &Path,
    shape: &[u64],
    data: impl IntoIterator<Item = S>,
) -> Result<(), TensorError> {
    let file = File::create(path).map_err(|e| npy_err(path, e))?;
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(|e| npy_err(path, e))?;
    writer.extend(data).map_err(|e| npy_err(path, e))?;
    writer.finish().map_err(|e| npy_err(path, e))
}

fn open(path: &Path) -> Result<NpyFile<BufReader<File>>, TensorError> {
    let file = File::open(path).map_err(|e| npy_err(path, e))?;
    let npy = NpyFile::new(BufReader::new(file)).map_err(|e| npy_err(path, e))?;
    if npy.order() != Order::C && npy.shape().len() > 1 {
        return Err(npy_err(path, "Fortran-ordered arrays are not supported"));
    }
    Ok(npy)
}

/// Read a floating-point array (`<f4` or `<f8`) into a tensor of `T`.
pub fn read_tensor<T: Float>(path: &Path) -> Result<Tensor<T>, TensorError> {
    let npy = open(path)?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let data: Vec<T> = match npy.try_data::<f64>() {
        Ok(r) => r
            .into_iter()
            .map(|v| v.map(T::of))
            .collect::<std::io::Result<_>>()
            .map_err(|e| npy_err(path, e))?,
        Err(npy) => match npy.try_data::<f32>() {
            Ok(r) => r
                .into_iter()
                .map(|v| v.map(|x| T::of(x as f64)))
                .collect::<std::io::Result<_>>()
                .map_err(|e| npy_err(path, e))?,
            Err(npy) => {
                return Err(npy_err(
                    path,
                    format!("unsupported dtype {:?}", npy.dtype()),
                ))
            }
        },
    };
    Tensor::new(shape, data)
}

/// Read an integer array (`<i8`, `<i4`, `<u1`...) as `i64` values plus shape.
pub fn read_integers(path: &Path) -> Result<(Vec<usize>, Vec<i64>), TensorError> {
    let npy = open(path)?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    macro_rules! attempt {
        ($npy:expr, $($ty:ty),*) => {{
            let npy = $npy;
            $(
                let npy = match npy.try_data::<$ty>() {
                    Ok(r) => {
                        let v = r
                            .into_iter()
                            .map(|x| x.map(|x| x as i64))
                            .collect::<std::io::Result<Vec<i64>>>()
                            .map_err(|e| npy_err(path, e))?;
                        return Ok((shape, v));
                    }
                    Err(npy) => npy,
                };
            )*
            return Err(npy_err(path, format!("unsupported integer dtype {:?}", npy.dtype())));
        }};
    }
    attempt!(npy, i64, i32, i16, i8, u8, u16, u32)
}
