//! Finite scalar quantization onto an implicit, enumerable codebook.
//!
//! Every latent dimension carries `b` channels. Channel `i` is squashed with
//! `tanh`, scaled by `⌊L_i/2⌋`, rounded, and normalised back into `[-1, 1]`.
//! The Cartesian product of the per-channel symbol sets is the codebook; a
//! code's index is its mixed-radix number with channel 0 most significant.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    pub levels: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for FsqConfig {
    fn default() -> Self {
        FsqConfig {
            levels: vec![5, 3],
            latent_dim: 512,
        }
    }
}

impl FsqConfig {
    pub fn new(levels: &[usize], latent_dim: usize) -> Result<Self> {
        let cfg = FsqConfig {
            levels: levels.to_vec(),
            latent_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("FSQ needs at least one channel".into()));
        }
        if let Some(&l) = self.levels.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("FSQ level {l} < 2")));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels.iter().product()
    }

    /// Width of a flattened latent code, `d * b`.
    pub fn code_width(&self) -> usize {
        self.latent_dim * self.channels()
    }

    fn half(&self, ch: usize) -> i64 {
        (self.levels[ch] / 2) as i64
    }

    /// Smallest reachable integer on a channel. Even levels drop `-⌊L/2⌋`
    /// so exactly `L` integers remain.
    fn min_int(&self, ch: usize) -> i64 {
        let h = self.half(ch);
        if self.levels[ch].is_multiple_of(2) {
            -h + 1
        } else {
            -h
        }
    }

    fn quantize_scalar<T: Scalar>(&self, ch: usize, x: T) -> (i64, T) {
        let h = self.half(ch);
        let q = (T::lit(h as f64) * x.tanh()).round().as_f64() as i64;
        let q = q.clamp(self.min_int(ch), h);
        (q, T::lit(q as f64) / T::lit(h as f64))
    }
}

/// The enumerated code table, `|C|` rows of `b` normalised symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    cfg: FsqConfig,
    codes: Matrix<T>,
    strides: Vec<usize>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(cfg: &FsqConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.channels();
        let mut strides = vec![1usize; b];
        for ch in (0..b.saturating_sub(1)).rev() {
            strides[ch] = strides[ch + 1] * cfg.levels[ch + 1];
        }
        let size = cfg.codebook_size();
        let codes = Matrix::from_fn(size, b, |idx, ch| {
            let digit = (idx / strides[ch]) % cfg.levels[ch];
            let q = cfg.min_int(ch) + digit as i64;
            T::lit(q as f64) / T::lit(cfg.half(ch) as f64)
        });
        Ok(Codebook {
            cfg: cfg.clone(),
            codes,
            strides,
        })
    }

    pub fn config(&self) -> &FsqConfig {
        &self.cfg
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn channels(&self) -> usize {
        self.codes.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// `|C| x b` table of code rows.
    pub fn codes(&self) -> &Matrix<T> {
        &self.codes
    }

    pub fn index_to_code(&self, index: usize) -> &[T] {
        self.codes.row(index)
    }

    pub fn code_to_index(&self, row: &[T]) -> Result<usize> {
        let invalid = || Error::InvalidCode(row.iter().map(|v| v.as_f64()).collect());
        if row.len() != self.channels() {
            return Err(invalid());
        }
        let mut index = 0;
        for (ch, &sym) in row.iter().enumerate() {
            let h = self.cfg.half(ch);
            let scaled = sym * T::lit(h as f64);
            if !scaled.is_finite() {
                return Err(invalid());
            }
            let q = scaled.round().as_f64() as i64;
            if q < self.cfg.min_int(ch) || q > h || T::lit(q as f64) / T::lit(h as f64) != sym {
                return Err(invalid());
            }
            index += (q - self.cfg.min_int(ch)) as usize * self.strides[ch];
        }
        Ok(index)
    }

    /// Writes `index,symbol_1,...,symbol_b` rows with a header.
    pub fn dump_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["index".to_string()];
        header.extend((1..=self.channels()).map(|c| format!("symbol_{c}")));
        w.write_record(&header)?;
        for (i, row) in self.codes.iter_rows().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A batch of quantized latent states.
///
/// `symbols` holds one row per batch element laid out as `d` consecutive
/// groups of `b` normalised symbols; `indices` holds the matching `d`
/// codebook indices per element.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub symbols: Matrix<T>,
    pub indices: Vec<usize>,
    pub latent_dim: usize,
}

impl<T: Scalar> LatentCode<T> {
    pub fn batch(&self) -> usize {
        self.symbols.rows()
    }

    pub fn channels(&self) -> usize {
        self.symbols.cols() / self.latent_dim.max(1)
    }

    /// `d x b` symbol grid of one batch element.
    pub fn grid(&self, element: usize) -> Matrix<T> {
        let b = self.channels();
        Matrix::from_vec(self.latent_dim, b, self.symbols.row(element).to_vec()).expect("grid shape")
    }

    pub fn element_indices(&self, element: usize) -> &[usize] {
        &self.indices[element * self.latent_dim..(element + 1) * self.latent_dim]
    }

    /// Builds codes directly from codebook indices (`batch * d` of them).
    pub fn from_indices(indices: Vec<usize>, codebook: &Codebook<T>) -> Result<Self> {
        let d = codebook.latent_dim();
        let b = codebook.channels();
        if !indices.len().is_multiple_of(d) {
            return Err(Error::dim("LatentCode::from_indices", format!("multiple of {d}"), indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook.size()) {
            return Err(Error::Input(format!("code index {bad} outside codebook of {}", codebook.size())));
        }
        let batch = indices.len() / d;
        let mut symbols = Matrix::zeros(batch, d * b);
        for (k, &idx) in indices.iter().enumerate() {
            let (r, j) = (k / d, k % d);
            symbols.row_mut(r)[j * b..(j + 1) * b].copy_from_slice(codebook.index_to_code(idx));
        }
        Ok(LatentCode {
            symbols,
            indices,
            latent_dim: d,
        })
    }

    pub fn select(&self, elements: &[usize]) -> Self {
        let d = self.latent_dim;
        LatentCode {
            symbols: self.symbols.select_rows(elements),
            indices: elements.iter().flat_map(|&e| self.indices[e * d..(e + 1) * d].iter().copied()).collect(),
            latent_dim: d,
        }
    }
}

/// Quantizes `x` (`batch x d*b`) onto the codebook.
pub fn quantize<T: Scalar>(x: &Matrix<T>, codebook: &Codebook<T>) -> Result<LatentCode<T>> {
    let cfg = codebook.config();
    let (d, b) = (cfg.latent_dim, cfg.channels());
    if x.cols() != d * b {
        return Err(Error::dim("quantize input width", d * b, x.cols()));
    }
    let mut symbols = Matrix::zeros(x.rows(), d * b);
    let mut indices = Vec::with_capacity(x.rows() * d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let sr = symbols.row_mut(r);
        for j in 0..d {
            let mut index = 0;
            for ch in 0..b {
                let (q, s) = cfg.quantize_scalar(ch, xr[j * b + ch]);
                sr[j * b + ch] = s;
                index += (q - cfg.min_int(ch)) as usize * codebook.strides[ch];
            }
            indices.push(index);
        }
    }
    Ok(LatentCode {
        symbols,
        indices,
        latent_dim: d,
    })
}

/// Straight-through backward of [`quantize`]: rounding is passed through,
/// so the gradient is that of `tanh(x)`.
pub fn quantize_backward<T: Scalar>(x: &Matrix<T>, upstream: &Matrix<T>) -> Matrix<T> {
    let mut dx = upstream.clone();
    for (g, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let t = xv.tanh();
        *g *= T::one() - t * t;
    }
    dx
}

/// Smooth pre-image of [`quantize`] (`tanh(x)` per entry), the path the
/// straight-through estimator differentiates.
pub fn quantize_surrogate<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.tanh())
}

/// `batch x d*|C|` one-hot rows.
pub fn one_hot_encode<T: Scalar>(code: &LatentCode<T>, codebook: &Codebook<T>) -> Matrix<T> {
    let d = code.latent_dim;
    let n = codebook.size();
    let mut out = Matrix::zeros(code.batch(), d * n);
    for (k, &idx) in code.indices.iter().enumerate() {
        out[(k / d, (k % d) * n + idx)] = T::one();
    }
    out
}

/// 1-based labels, one per latent dimension.
pub fn label_encode<T: Scalar>(code: &LatentCode<T>) -> Vec<usize> {
    code.indices.iter().map(|&i| i + 1).collect()
}

/// Affine map of a 1-based label onto `[-1, 1]`.
pub fn scaled_label<T: Scalar>(label: usize, codebook_size: usize) -> T {
    if codebook_size <= 1 {
        return T::zero();
    }
    T::lit(2.0 * (label as f64 - 1.0) / (codebook_size as f64 - 1.0) - 1.0)
}

/// Fraction of the codebook observed in a history of indices.
pub fn active_code_fraction<I: IntoIterator<Item = usize>>(history: I, codebook_size: usize) -> Result<f64> {
    let seen: HashSet<usize> = history.into_iter().collect();
    if seen.is_empty() {
        return Err(Error::Input("active_code_fraction needs a non-empty history".into()));
    }
    Ok(seen.len() as f64 / codebook_size as f64)
}

/// Which representation of a latent code the reward, value and policy
/// networks consume. The dynamics model always consumes codebook symbols.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingVariant {
    #[default]
    Codes,
    OneHot,
    Label,
}

impl std::str::FromStr for EncodingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codes" => Ok(EncodingVariant::Codes),
            "one-hot" | "onehot" => Ok(EncodingVariant::OneHot),
            "label" => Ok(EncodingVariant::Label),
            other => Err(Error::Config(format!("unknown encoding variant `{other}`"))),
        }
    }
}

/// Linear embedding of code distributions for one encoding variant.
///
/// A latent distribution `p` over the codebook (one `|C|`-row per latent
/// dimension) is embedded as `p · E`, where `E` is `|C| x width`. A hard code
/// is the one-hot special case; an expected code is `p · codebook`.
#[derive(Clone, Debug)]
pub struct Embedding<T> {
    pub variant: EncodingVariant,
    table: Matrix<T>,
    latent_dim: usize,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(variant: EncodingVariant, codebook: &Codebook<T>) -> Self {
        let n = codebook.size();
        let table = match variant {
            EncodingVariant::Codes => codebook.codes().clone(),
            EncodingVariant::OneHot => Matrix::identity(n),
            EncodingVariant::Label => Matrix::from_fn(n, 1, |i, _| scaled_label(i + 1, n)),
        };
        Embedding {
            variant,
            table,
            latent_dim: codebook.latent_dim(),
        }
    }

    /// Per-dimension width of the embedding.
    pub fn width(&self) -> usize {
        self.table.cols()
    }

    /// Total feature width, `d * width`.
    pub fn feature_dim(&self) -> usize {
        self.latent_dim * self.width()
    }

    pub fn table(&self) -> &Matrix<T> {
        &self.table
    }

    /// Features of hard codes; for `Codes` these are the symbols verbatim.
    pub fn embed_code(&self, code: &LatentCode<T>) -> Matrix<T> {
        match self.variant {
            EncodingVariant::Codes => code.symbols.clone(),
            _ => {
                let d = self.latent_dim;
                let w = self.width();
                let mut out = Matrix::zeros(code.batch(), d * w);
                for (k, &idx) in code.indices.iter().enumerate() {
                    out.row_mut(k / d)[(k % d) * w..(k % d + 1) * w].copy_from_slice(self.table.row(idx));
                }
                out
            }
        }
    }

    /// Features of code distributions (`batch x d*|C|`).
    pub fn embed_probs(&self, probs: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.table.rows();
        if probs.cols() != self.latent_dim * n {
            return Err(Error::dim("embed_probs width", self.latent_dim * n, probs.cols()));
        }
        let batch = probs.rows();
        let flat = probs.clone().reshape(batch * self.latent_dim, n)?;
        flat.matmul(&self.table)?.reshape(batch, self.feature_dim())
    }

    /// Gradient of [`Embedding::embed_probs`] with respect to the probabilities.
    pub fn embed_probs_backward(&self, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let batch = upstream.rows();
        let flat = upstream.clone().reshape(batch * self.latent_dim, self.width())?;
        flat.matmul_t(&self.table)?.reshape(batch, self.latent_dim * self.table.rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn book(levels: &[usize], d: usize) -> Codebook<f64> {
        Codebook::new(&FsqConfig::new(levels, d).unwrap()).unwrap()
    }

    #[test]
    fn default_codebook_has_fifteen_codes() {
        let cfg = FsqConfig::new(&[5, 3], 32).unwrap();
        assert_eq!(cfg.channels(), 2);
        assert_eq!(cfg.codebook_size(), 15);
        let cb = Codebook::<f32>::new(&cfg).unwrap();
        assert_eq!(cb.codes().shape(), (15, 2));
        assert_eq!(cb.index_to_code(0), &[-1.0, -1.0]);
        assert_eq!(cb.index_to_code(14), &[1.0, 1.0]);
        assert_eq!(cb.code_to_index(&[1.0, 1.0]).unwrap(), 14);
        assert_eq!(cb.code_to_index(&[-1.0, -1.0]).unwrap(), 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(FsqConfig::new(&[], 4).is_err());
        assert!(FsqConfig::new(&[5, 1], 4).is_err());
        assert!(FsqConfig::new(&[5, 3], 0).is_err());
    }

    #[test]
    fn even_levels_keep_exactly_l_symbols() {
        let cb = book(&[4], 1);
        let syms: Vec<f64> = cb.codes().as_slice().to_vec();
        assert_eq!(syms, vec![-0.5, 0.0, 0.5, 1.0]);
        // very negative input lands on the smallest kept symbol
        let code = quantize(&Matrix::filled(1, 1, -10.0), &cb).unwrap();
        assert_eq!(code.symbols[(0, 0)], -0.5);
        assert_eq!(code.indices, vec![0]);
    }

    #[test]
    fn hand_evaluated_quantization() {
        let cb = book(&[5, 3], 1);
        let zero = quantize(&Matrix::zeros(1, 2), &cb).unwrap();
        assert_eq!(zero.symbols.as_slice(), &[0.0, 0.0]);
        assert_eq!(zero.indices[0], cb.code_to_index(&[0.0, 0.0]).unwrap());
        // L=5, x=10 → round(2 tanh 10) = 2 → 1.0; L=3, x=0.3 → round(0.2913) = 0
        let code = quantize(&Matrix::from_rows(&[vec![10.0, 0.3]]).unwrap(), &cb).unwrap();
        assert_eq!(code.symbols.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn non_codebook_rows_are_rejected() {
        let cb = book(&[5, 3], 1);
        assert!(matches!(cb.code_to_index(&[0.25, 0.0]), Err(Error::InvalidCode(_))));
        assert!(cb.code_to_index(&[1.5, 0.0]).is_err());
        assert!(cb.code_to_index(&[0.0]).is_err());
        assert!(cb.code_to_index(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn one_hot_matches_preliminaries_example() {
        let cb = book(&[3], 1);
        let code = LatentCode::from_indices(vec![0], &cb).unwrap();
        assert_eq!(one_hot_encode(&code, &cb).as_slice(), &[1.0, 0.0, 0.0]);
        // distinct one-hot rows are √2 apart
        let a = one_hot_encode(&LatentCode::from_indices(vec![0], &cb).unwrap(), &cb);
        let b = one_hot_encode(&LatentCode::from_indices(vec![2], &cb).unwrap(), &cb);
        let dist: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn labels_are_one_based_and_ordinal() {
        let cb = book(&[5, 3], 1);
        let codes = LatentCode::<f64>::from_indices(vec![0, 4, 9], &Codebook::new(&FsqConfig::new(&[5, 3], 3).unwrap()).unwrap())
            .unwrap();
        let labels = label_encode(&codes);
        assert_eq!(labels, vec![1, 5, 10]);
        let e = |l: usize| scaled_label::<f64>(l, cb.size());
        assert!((e(1) - e(5)).abs() < (e(1) - e(10)).abs());
        assert_eq!(e(1), -1.0);
        assert_eq!(e(15), 1.0);
    }

    #[test]
    fn active_fraction_counts_distinct_codes() {
        assert_eq!(active_code_fraction([3, 3, 3], 15).unwrap(), 1.0 / 15.0);
        assert_eq!(active_code_fraction(0..15, 15).unwrap(), 1.0);
        assert_eq!(active_code_fraction((0..8).cycle().take(100), 15).unwrap(), 8.0 / 15.0);
        assert!(active_code_fraction(std::iter::empty(), 15).is_err());
    }

    #[test]
    fn codebook_csv_dump() {
        let cb = book(&[5, 3], 1);
        let mut buf = Vec::new();
        cb.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 16);
        assert_eq!(lines[0], "index,symbol_1,symbol_2");
        assert_eq!(lines[1], "0,-1,-1");
        assert_eq!(lines[15], "14,1,1");
    }

    #[test]
    fn embeddings_agree_on_hard_codes() {
        let cfg = FsqConfig::new(&[5, 3], 3).unwrap();
        let cb = Codebook::<f64>::new(&cfg).unwrap();
        let code = LatentCode::from_indices(vec![0, 7, 14, 3, 3, 11], &cb).unwrap();
        let onehot = one_hot_encode(&code, &cb);
        for variant in [EncodingVariant::Codes, EncodingVariant::OneHot, EncodingVariant::Label] {
            let emb = Embedding::new(variant, &cb);
            assert_eq!(emb.embed_code(&code), emb.embed_probs(&onehot).unwrap(), "{variant:?}");
        }
        assert_eq!(Embedding::new(EncodingVariant::OneHot, &cb).feature_dim(), 3 * 15);
    }

    proptest! {
        #[test]
        fn quantize_outputs_are_codebook_rows(xs in prop::collection::vec(-6.0f64..6.0, 8)) {
            let cb = book(&[5, 3], 4);
            let x = Matrix::from_vec(1, 8, xs).unwrap();
            let code = quantize(&x, &cb).unwrap();
            for j in 0..4 {
                let row = &code.symbols.row(0)[2 * j..2 * j + 2];
                prop_assert_eq!(cb.code_to_index(row).unwrap(), code.indices[j]);
                prop_assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            // codes are fixed points under atanh
            let back = quantize(&code.symbols.map(f64::atanh), &cb).unwrap();
            prop_assert_eq!(back.symbols, code.symbols);
        }

        #[test]
        fn quantization_is_monotone_per_channel(a in -5.0f64..5.0, b in -5.0f64..5.0, levels in prop::sample::select(vec![2usize, 3, 4, 5, 7, 8])) {
            let cb = book(&[levels], 1);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ql = quantize(&Matrix::filled(1, 1, lo), &cb).unwrap();
            let qh = quantize(&Matrix::filled(1, 1, hi), &cb).unwrap();
            prop_assert!(ql.symbols[(0, 0)] <= qh.symbols[(0, 0)]);
        }

        #[test]
        fn index_round_trip(levels in prop::collection::vec(2usize..7, 1..4)) {
            let cb = book(&levels, 1);
            for i in 0..cb.size() {
                prop_assert_eq!(cb.code_to_index(cb.index_to_code(i)).unwrap(), i);
            }
        }
    }
}
