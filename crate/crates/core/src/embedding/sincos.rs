use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scalar::Scalar;
use crate::tensorcore::{Tape, Tensor, Var};

/// Denominators `e^(2j / (D/6))` for `j = 1..=D/6`.
pub fn sincos_frequencies(dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(6) {
        return Err(Error::contract(format!(
            "sin-cos embedding width {dim} is not a positive multiple of 6"
        )));
    }
    let sixth = (dim / 6) as f64;
    Ok((1..=dim / 6)
        .map(|j| (2.0 * j as f64 / sixth).exp())
        .collect())
}

/// Fixed embedding of 3-D centers: for each coordinate in x, y, z order, the
/// interleaved pairs `sin(c/ω_j), cos(c/ω_j)`. Returns `[n, D]`.
pub fn sincos_pe<T: Scalar>(centers: &[Point<T>], dim: usize) -> Result<Tensor<T>> {
    let freqs = sincos_frequencies(dim)?;
    if centers.is_empty() {
        return Err(Error::contract("sin-cos embedding of no centers"));
    }
    let mut data = Vec::with_capacity(centers.len() * dim);
    for c in centers {
        for coord in c {
            let v = coord.to_f64().unwrap_or(f64::NAN);
            for w in &freqs {
                let a = v / w;
                data.push(T::lit(a.sin()));
                data.push(T::lit(a.cos()));
            }
        }
    }
    Tensor::new(&[centers.len(), dim], data)
}

/// Differentiable version of [`sincos_pe`] for coordinates `[.., 3]` held on
/// a tape. Returns `[.., D]`.
pub fn sincos_pe_var<T: Scalar>(tape: &mut Tape<T>, coords: Var, dim: usize) -> Result<Var> {
    let freqs = sincos_frequencies(dim)?;
    let shape = tape.shape(coords).to_vec();
    if shape.last() != Some(&3) {
        return Err(Error::shape("sincos_pe", &shape, &[3]));
    }
    let mut col = shape.clone();
    col.push(1);
    let x = tape.reshape(coords, &col)?;
    let inv = Tensor::new(
        &[freqs.len()],
        freqs.iter().map(|w| T::lit(1.0 / w)).collect(),
    )?;
    let inv = tape.constant(inv);
    let angles = tape.mul(x, inv)?;
    let mut pair = tape.shape(angles).to_vec();
    pair.push(1);
    let s = tape.sin(angles);
    let c = tape.cos(angles);
    let s = tape.reshape(s, &pair)?;
    let c = tape.reshape(c, &pair)?;
    let sc = tape.concat(&[s, c], pair.len() - 1)?;
    let mut out = shape;
    *out.last_mut().unwrap() = dim;
    tape.reshape(sc, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_alternates_zero_one() {
        for dim in [6, 96, 384] {
            let pe = sincos_pe(&[[0.0f64; 3]], dim).unwrap();
            assert_eq!(pe.shape(), &[1, dim]);
            for (i, &v) in pe.data().iter().enumerate() {
                assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn width_six_uses_e_squared() {
        let pe = sincos_pe(&[[1.0f64; 3]], 6).unwrap();
        let a = 1.0 / std::f64::consts::E.powi(2);
        for block in pe.data().chunks(2) {
            assert_eq!(block, &[a.sin(), a.cos()]);
        }
    }

    #[test]
    fn rejects_width_not_multiple_of_six() {
        assert!(sincos_pe(&[[0.0f64; 3]], 10).is_err());
    }

    #[test]
    fn tape_version_matches() {
        let centers = [[0.3f64, -0.7, 0.9], [1.0, 0.0, -1.0]];
        let plain = sincos_pe(&centers, 24).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(&[2, 3], centers.concat()).unwrap());
        let v = sincos_pe_var(&mut tape, c, 24).unwrap();
        assert!(tape.value(v).max_abs_diff(&plain) < 1e-15);
    }
}
