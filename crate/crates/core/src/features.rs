//! Spatial-feature and token primitives: flattening, pixel shuffle and fixed
//! positional encodings.

use ndarray::IxDyn;

use crate::autograd::{Arr, Var};
use crate::error::{Error, Result};

/// A spatial activation grid `H' x W' x C` with its downsample rate relative
/// to the network input (input size / feature size).
#[derive(Clone)]
pub struct FeatureMap {
    pub data: Var,
    pub rate: usize,
}

impl FeatureMap {
    /// Wrap an existing graph value. Panics on rank != 3; rejects non-finite
    /// data when constructed from a raw array via [`FeatureMap::from_array`].
    pub fn new(data: Var, rate: usize) -> Self {
        assert_eq!(data.shape().len(), 3, "feature maps are H x W x C");
        assert!(rate >= 1, "downsample rate must be positive");
        FeatureMap { data, rate }
    }

    pub fn from_array(data: Arr, rate: usize) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::DimMismatch {
                context: "feature map".into(),
                expected: "rank-3 array".into(),
                got: format!("rank-{}", data.ndim()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(FeatureMap::new(Var::constant(data), rate))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn value(&self) -> &Arr {
        self.data.value()
    }
}

/// `L` tokens of width `d`, flattened from a spatial grid in row-major scan
/// order, with the originating grid recorded.
#[derive(Clone)]
pub struct TokenSequence {
    pub data: Var,
    pub origin_height: usize,
    pub origin_width: usize,
    pub origin_rate: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn value(&self) -> &Arr {
        self.data.value()
    }
}

/// Fixed 2-D sine/cosine positional encoding, `L x d` with entries in [-1, 1].
#[derive(Clone)]
pub struct PositionalEncoding {
    pub data: Arr,
}

/// Flatten a feature map to tokens: token `t = row * W' + col` carries the
/// channel vector at that location.
pub fn flatten_to_tokens(fm: &FeatureMap) -> TokenSequence {
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    TokenSequence {
        data: fm.data.reshape(&[h * w, c]),
        origin_height: h,
        origin_width: w,
        origin_rate: fm.rate,
    }
}

/// Exact inverse of [`flatten_to_tokens`] for the stated grid.
pub fn tokens_to_feature(ts: &TokenSequence, height: usize, width: usize) -> Result<FeatureMap> {
    if ts.len() != height * width {
        return Err(Error::DimMismatch {
            context: "tokens_to_feature".into(),
            expected: format!("{} tokens for a {height}x{width} grid", height * width),
            got: format!("{}", ts.len()),
        });
    }
    let c = ts.dim();
    Ok(FeatureMap::new(
        ts.data.reshape(&[height, width, c]),
        ts.origin_rate,
    ))
}

/// Channel-to-space rearrangement by factor `s`: output is
/// `(sH') x (sW') x (C / s^2)` and a permutation of the input elements.
pub fn pixel_shuffle(fm: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 0 {
        return Err(Error::Config("pixel shuffle factor must be >= 1".into()));
    }
    let c = fm.channels();
    if c % (s * s) != 0 {
        return Err(Error::NotDivisible {
            context: "pixel_shuffle".into(),
            channels: c,
            divisor: s * s,
        });
    }
    // The shuffle moves the map s times closer to the input resolution.
    let rate = if fm.rate % s == 0 { fm.rate / s } else { fm.rate };
    Ok(FeatureMap::new(fm.data.pixel_shuffle(s), rate))
}

/// Invert the pixel-shuffle index map; used by the permutation tests.
pub fn pixel_unshuffle_array(x: &Arr, s: usize) -> Arr {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    assert!(h % s == 0 && w % s == 0);
    let mut out = Arr::zeros(IxDyn(&[h / s, w / s, c * s * s]));
    for y in 0..h {
        for xw in 0..w {
            for ch in 0..c {
                let src_c = ch * s * s + s * (y % s) + (xw % s);
                out[[y / s, xw / s, src_c]] = x[[y, xw, ch]];
            }
        }
    }
    out
}

/// Fixed 2-D sine/cosine encoding over an `H' x W'` grid with `d` channels.
///
/// Half the channels encode the row coordinate and half the column, each as
/// interleaved (sin, cos) pairs over geometrically spaced frequencies with
/// temperature 10000. Deterministic; entries in [-1, 1]; the all-zero
/// position maps to alternating (0, 1).
pub fn sine_positional_encoding(height: usize, width: usize, d: usize) -> Result<PositionalEncoding> {
    if d % 4 != 0 || d == 0 {
        return Err(Error::NotDivisible {
            context: "sine_positional_encoding".into(),
            channels: d,
            divisor: 4,
        });
    }
    let pairs = d / 4; // frequency pairs per axis
    let mut data = Arr::zeros(IxDyn(&[height * width, d]));
    for row in 0..height {
        for col in 0..width {
            let t = row * width + col;
            for k in 0..pairs {
                let omega = 1.0 / 10000f64.powf(4.0 * k as f64 / d as f64);
                let ry = row as f64 * omega;
                let rx = col as f64 * omega;
                data[[t, 2 * k]] = ry.sin();
                data[[t, 2 * k + 1]] = ry.cos();
                data[[t, d / 2 + 2 * k]] = rx.sin();
                data[[t, d / 2 + 2 * k + 1]] = rx.cos();
            }
        }
    }
    Ok(PositionalEncoding { data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> FeatureMap {
        let mut a = Arr::zeros(IxDyn(&[h, w, c]));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    a[[y, x, ch]] = f(y, x, ch);
                }
            }
        }
        FeatureMap::from_array(a, 1).unwrap()
    }

    #[test]
    fn flatten_is_row_major() {
        let fm = map_from_fn(2, 2, 3, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let ts = flatten_to_tokens(&fm);
        assert_eq!(ts.len(), 4);
        assert_eq!(ts.dim(), 3);
        // token 1 is map[0, 1, :]
        for c in 0..3 {
            assert_eq!(ts.value()[[1, c]], (10 + c) as f64);
        }
        assert_eq!(ts.origin_height, 2);
        assert_eq!(ts.origin_width, 2);
    }

    #[test]
    fn single_location_flatten_is_identity() {
        let fm = map_from_fn(1, 1, 5, |_, _, c| c as f64 + 0.5);
        let ts = flatten_to_tokens(&fm);
        assert_eq!(ts.len(), 1);
        for c in 0..5 {
            assert_eq!(ts.value()[[0, c]], c as f64 + 0.5);
        }
    }

    #[test]
    fn unflatten_rejects_bad_grid() {
        let fm = map_from_fn(2, 3, 1, |y, x, _| (y + x) as f64);
        let ts = flatten_to_tokens(&fm);
        match tokens_to_feature(&ts, 2, 2) {
            Err(Error::DimMismatch { .. }) => {}
            _ => panic!("expected dimension mismatch"),
        }
    }

    #[test]
    fn round_trip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fm = map_from_fn(4, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let ts = flatten_to_tokens(&fm);
        let back = tokens_to_feature(&ts, 4, 5).unwrap();
        assert_eq!(back.value(), fm.value());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_inverse(h in 1usize..8, w in 1usize..8, c in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = map_from_fn(h, w, c, |_, _, _| rng.gen_range(-10.0..10.0));
            let back = tokens_to_feature(&flatten_to_tokens(&fm), h, w).unwrap();
            prop_assert_eq!(back.value(), fm.value());
        }

        #[test]
        fn pixel_shuffle_is_permutation(h in 1usize..4, w in 1usize..4, base in 1usize..4, s in 1usize..3, seed in 0u64..1000) {
            let s = s + 1; // 2..=3
            let c = base * s * s;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = map_from_fn(h, w, c, |_, _, _| rng.gen_range(-10.0..10.0));
            let out = pixel_shuffle(&fm, s).unwrap();
            prop_assert_eq!(out.value().shape(), &[s * h, s * w, c / (s * s)]);
            let mut a: Vec<f64> = fm.value().iter().cloned().collect();
            let mut b: Vec<f64> = out.value().iter().cloned().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            // composing with the inverse map restores the input
            let restored = pixel_unshuffle_array(out.value(), s);
            prop_assert_eq!(&restored, fm.value());
        }
    }

    #[test]
    fn pixel_shuffle_identity_at_one() {
        let fm = map_from_fn(3, 2, 4, |y, x, c| (y * 8 + x * 4 + c) as f64);
        let out = pixel_shuffle(&fm, 1).unwrap();
        assert_eq!(out.value(), fm.value());
    }

    #[test]
    fn pixel_shuffle_enumerated_2x2() {
        // 1x1x4 [a, b, c, d] with s = 2 lands as [[a, b], [c, d]]:
        // out[h, w, 0] = in[0, 0, 2*(h%2) + (w%2)]
        let fm = map_from_fn(1, 1, 4, |_, _, c| [10.0, 20.0, 30.0, 40.0][c]);
        let out = pixel_shuffle(&fm, 2).unwrap();
        assert_eq!(out.value().shape(), &[2, 2, 1]);
        assert_eq!(out.value()[[0, 0, 0]], 10.0);
        assert_eq!(out.value()[[0, 1, 0]], 20.0);
        assert_eq!(out.value()[[1, 0, 0]], 30.0);
        assert_eq!(out.value()[[1, 1, 0]], 40.0);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let fm = map_from_fn(2, 2, 6, |_, _, _| 0.0);
        assert!(matches!(
            pixel_shuffle(&fm, 2),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn positional_encoding_origin_and_range() {
        let pe = sine_positional_encoding(3, 3, 8).unwrap();
        // position (0, 0): sine channels 0, cosine channels 1
        for k in 0..2 {
            assert_eq!(pe.data[[0, 2 * k]], 0.0);
            assert_eq!(pe.data[[0, 2 * k + 1]], 1.0);
            assert_eq!(pe.data[[0, 4 + 2 * k]], 0.0);
            assert_eq!(pe.data[[0, 4 + 2 * k + 1]], 1.0);
        }
        assert!(pe.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn positional_encoding_rows_distinct() {
        let pe = sine_positional_encoding(2, 2, 4).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let same = (0..4).all(|c| {
                    (pe.data[[i, c]] - pe.data[[j, c]]).abs() < 1e-12
                });
                assert!(!same, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn positional_encoding_deterministic() {
        let a = sine_positional_encoding(5, 7, 16).unwrap();
        let b = sine_positional_encoding(5, 7, 16).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn positional_encoding_rejects_bad_width() {
        assert!(matches!(
            sine_positional_encoding(2, 2, 6),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let mut a = Arr::zeros(IxDyn(&[1, 1, 2]));
        a[[0, 0, 1]] = f64::NAN;
        assert!(matches!(
            FeatureMap::from_array(a, 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn shuffle_rate_tracks_upsampling() {
        let fm = FeatureMap::new(Var::constant(Arr::zeros(IxDyn(&[2, 2, 8]))), 8);
        let out = pixel_shuffle(&fm, 2).unwrap();
        assert_eq!(out.rate, 4);
    }

    #[test]
    fn positional_encoding_values_match_formula() {
        let pe = sine_positional_encoding(2, 2, 4).unwrap();
        // d = 4: one frequency pair per axis at omega = 1
        assert_abs_diff_eq!(pe.data[[3, 0]], 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(pe.data[[3, 1]], 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(pe.data[[1, 2]], 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(pe.data[[1, 3]], 1f64.cos(), epsilon = 1e-15);
    }
}
