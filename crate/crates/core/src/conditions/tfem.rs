//! Glyph feature enhancement: per-crop features with positional codes,
//! fused into the whole-glyph-image tokens by single-head cross-attention.

use super::pos::position_encoding_2d;
use crate::arraymath::{
    col_sums, draw_normal, gelu_grad_scalar, gelu_scalar, layer_norm_backward, layer_norm_fwd,
    lit, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, DenseArray, RngState,
    Scalar,
};
use crate::error::{Error, Result};
use crate::synthdata::GlyphCrop;

/// Crop bitmaps are resampled to this square before the feature MLP.
pub const CROP_RESAMPLE: usize = 8;

/// Learnable pieces of the glyph feature encoder.
#[derive(Clone, Debug)]
pub struct TfemWeights<T> {
    pub ocr_w1: DenseArray<T>, // 64 x d
    pub ocr_b1: DenseArray<T>, // d
    pub ocr_w2: DenseArray<T>, // d x d
    pub ocr_b2: DenseArray<T>, // d
    pub wq: DenseArray<T>,     // d x d
    pub wk: DenseArray<T>,
    pub wv: DenseArray<T>,
    pub ffn_w1: DenseArray<T>, // d x 4d
    pub ffn_b1: DenseArray<T>,
    pub ffn_w2: DenseArray<T>, // 4d x d
    pub ffn_b2: DenseArray<T>,
    pub norm_gamma: DenseArray<T>,
    pub norm_beta: DenseArray<T>,
    /// Learned font-size table, one row per scale class.
    pub font_size: DenseArray<T>, // F x d
}

/// Gradients in the same layout as [`TfemWeights`].
pub type TfemGrads<T> = TfemWeights<T>;

impl<T: Scalar> TfemWeights<T> {
    pub fn zeros_like(&self) -> TfemWeights<T> {
        TfemWeights {
            ocr_w1: DenseArray::zeros(self.ocr_w1.shape()),
            ocr_b1: DenseArray::zeros(self.ocr_b1.shape()),
            ocr_w2: DenseArray::zeros(self.ocr_w2.shape()),
            ocr_b2: DenseArray::zeros(self.ocr_b2.shape()),
            wq: DenseArray::zeros(self.wq.shape()),
            wk: DenseArray::zeros(self.wk.shape()),
            wv: DenseArray::zeros(self.wv.shape()),
            ffn_w1: DenseArray::zeros(self.ffn_w1.shape()),
            ffn_b1: DenseArray::zeros(self.ffn_b1.shape()),
            ffn_w2: DenseArray::zeros(self.ffn_w2.shape()),
            ffn_b2: DenseArray::zeros(self.ffn_b2.shape()),
            norm_gamma: DenseArray::zeros(self.norm_gamma.shape()),
            norm_beta: DenseArray::zeros(self.norm_beta.shape()),
            font_size: DenseArray::zeros(self.font_size.shape()),
        }
    }

    pub fn init(rng: &RngState, d: usize, font_classes: usize) -> TfemWeights<T> {
        let lin = |tag: u64, rows: usize, cols: usize| -> DenseArray<T> {
            let mut r = rng.fork(tag);
            draw_normal::<T>(&mut r, rows * cols)
                .scale(lit::<T>(1.0 / (rows as f64).sqrt()))
                .reshape(vec![rows, cols])
                .unwrap()
        };
        let mut font_rng = rng.fork(90);
        TfemWeights {
            ocr_w1: lin(80, CROP_RESAMPLE * CROP_RESAMPLE, d),
            ocr_b1: DenseArray::zeros(&[d]),
            ocr_w2: lin(81, d, d),
            ocr_b2: DenseArray::zeros(&[d]),
            wq: lin(82, d, d),
            wk: lin(83, d, d),
            wv: lin(84, d, d),
            ffn_w1: lin(85, d, 4 * d),
            ffn_b1: DenseArray::zeros(&[4 * d]),
            ffn_w2: lin(86, 4 * d, d),
            ffn_b2: DenseArray::zeros(&[d]),
            norm_gamma: DenseArray::filled(&[d], T::one()),
            norm_beta: DenseArray::zeros(&[d]),
            font_size: draw_normal::<T>(&mut font_rng, font_classes * d)
                .scale(lit::<T>(1.0 / (d as f64).sqrt()))
                .reshape(vec![font_classes, d])
                .unwrap(),
        }
    }
}

/// Nearest-neighbor resample of a crop bitmap to 8x8, values 0/1.
fn resample_bitmap<T: Scalar>(crop: &GlyphCrop) -> Vec<T> {
    let (_, _, w, h) = crop.bbox;
    let mut out = Vec::with_capacity(CROP_RESAMPLE * CROP_RESAMPLE);
    for oy in 0..CROP_RESAMPLE {
        let sy = oy * h / CROP_RESAMPLE;
        for ox in 0..CROP_RESAMPLE {
            let sx = ox * w / CROP_RESAMPLE;
            out.push(if crop.bitmap[sy * w + sx] != 0 {
                T::one()
            } else {
                T::zero()
            });
        }
    }
    out
}

/// Mean local positional code over all cells of a (w, h) crop grid.
fn local_pos_mean<T: Scalar>(d: usize, w: usize, h: usize) -> DenseArray<T> {
    let mut acc = DenseArray::zeros(&[d]);
    for y in 0..h {
        for x in 0..w {
            acc.add_assign(&position_encoding_2d::<T>(d, x as f64, y as f64));
        }
    }
    acc.scale(T::one() / lit::<T>((w * h) as f64))
}

/// The positional part of a crop feature: absolute bbox-center code plus
/// the font-size row plus the mean crop-local code.
fn crop_position_sum<T: Scalar>(
    crop: &GlyphCrop,
    weights: &TfemWeights<T>,
) -> Result<DenseArray<T>> {
    let d = weights.wq.cols();
    if crop.font_size_class >= weights.font_size.rows() {
        return Err(Error::contract(format!(
            "font size class {} out of range ({} classes)",
            crop.font_size_class,
            weights.font_size.rows()
        )));
    }
    let (x, y, w, h) = crop.bbox;
    let cx = x as f64 + w as f64 / 2.0;
    let cy = y as f64 + h as f64 / 2.0;
    let mut sum = position_encoding_2d::<T>(d, cx, cy);
    let font_row = weights.font_size.row(crop.font_size_class);
    for (o, &f) in sum.data_mut().iter_mut().zip(font_row) {
        *o += f;
    }
    sum.add_assign(&local_pos_mean::<T>(d, w, h));
    Ok(sum)
}

/// Saved activations for the crop-feature backward pass.
#[derive(Clone, Debug)]
pub struct CropFeatureTape<T> {
    pub inputs: DenseArray<T>,  // n x 64 resampled bitmaps
    pub h1: DenseArray<T>,      // n x d pre-activation
    pub classes: Vec<usize>,
}

/// Features for every crop: ocr_mlp(resampled bitmap) + positional codes.
/// Returns one token row per crop.
pub fn tfem_crop_features<T: Scalar>(
    crops: &[GlyphCrop],
    weights: &TfemWeights<T>,
) -> Result<(DenseArray<T>, CropFeatureTape<T>)> {
    let d = weights.wq.cols();
    let n = crops.len();
    let mut inputs = DenseArray::zeros(&[n, CROP_RESAMPLE * CROP_RESAMPLE]);
    for (i, c) in crops.iter().enumerate() {
        inputs.row_mut(i).copy_from_slice(&resample_bitmap::<T>(c));
    }
    let mut h1 = matmul(&inputs, &weights.ocr_w1)?;
    crate::arraymath::add_bias_rows(&mut h1, &weights.ocr_b1);
    let act = h1.map(gelu_scalar);
    let mut feats = matmul(&act, &weights.ocr_w2)?;
    crate::arraymath::add_bias_rows(&mut feats, &weights.ocr_b2);
    let mut classes = Vec::with_capacity(n);
    for (i, c) in crops.iter().enumerate() {
        let pos = crop_position_sum(c, weights)?;
        let row = feats.row_mut(i);
        for (o, &p) in row.iter_mut().zip(pos.data()) {
            *o += p;
        }
        classes.push(c.font_size_class);
    }
    debug_assert_eq!(feats.cols(), d);
    Ok((
        feats,
        CropFeatureTape {
            inputs,
            h1,
            classes,
        },
    ))
}

/// Single crop encoding (row 0 of the batch path).
pub fn encode_glyph_crop<T: Scalar>(
    crop: &GlyphCrop,
    weights: &TfemWeights<T>,
) -> Result<DenseArray<T>> {
    let (feats, _) = tfem_crop_features(std::slice::from_ref(crop), weights)?;
    DenseArray::new(vec![weights.wq.cols()], feats.row(0).to_vec())
}

/// Backward of [`tfem_crop_features`]: accumulates parameter gradients.
/// Crop bitmaps are data, so no input gradient is returned.
pub fn tfem_crop_features_backward<T: Scalar>(
    d_out: &DenseArray<T>,
    tape: &CropFeatureTape<T>,
    weights: &TfemWeights<T>,
    grads: &mut TfemGrads<T>,
) {
    for (i, &class) in tape.classes.iter().enumerate() {
        let drow = d_out.row(i);
        let w = grads.font_size.cols();
        let base = class * w;
        let g = grads.font_size.data_mut();
        for j in 0..w {
            g[base + j] += drow[j];
        }
    }
    let act = tape.h1.map(gelu_scalar);
    // feats = act . W2 + b2
    grads.ocr_w2.add_assign(&matmul_tn(&act, d_out).unwrap());
    grads.ocr_b2.add_assign(&col_sums(d_out));
    let d_act = matmul_nt(d_out, &weights.ocr_w2).unwrap();
    let mut d_h1 = DenseArray::zeros(tape.h1.shape());
    for ((o, &h), &da) in d_h1
        .data_mut()
        .iter_mut()
        .zip(tape.h1.data())
        .zip(d_act.data())
    {
        *o = gelu_grad_scalar(h) * da;
    }
    grads
        .ocr_w1
        .add_assign(&matmul_tn(&tape.inputs, &d_h1).unwrap());
    grads.ocr_b1.add_assign(&col_sums(&d_h1));
}

/// Saved activations for the fuse backward pass.
#[derive(Clone, Debug)]
pub struct TfemFuseTape<T> {
    pub h_c1: DenseArray<T>,
    pub h_c2: DenseArray<T>,
    pub q: Option<DenseArray<T>>,
    pub k: Option<DenseArray<T>>,
    pub v: Option<DenseArray<T>>,
    pub probs: Option<DenseArray<T>>,
    pub pre: DenseArray<T>,  // cross-attention output + residual
    pub f1: DenseArray<T>,   // pre-activation of the FFN hidden layer
    pub xhat: DenseArray<T>, // layer-norm internals
    pub rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-6;

/// Fuses whole-image glyph tokens with crop features:
/// softmax((h_c1 Wq)(h_c2 Wk)^T / sqrt(d)) (h_c2 Wv) + h_c1, then a
/// layer-normalized feed-forward. Output length always equals |h_c1|;
/// with no crops the cross-attention term is skipped.
pub fn tfem_fuse<T: Scalar>(
    h_c1: &DenseArray<T>,
    h_c2: &DenseArray<T>,
    weights: &TfemWeights<T>,
) -> Result<(DenseArray<T>, TfemFuseTape<T>)> {
    let d = weights.wq.cols();
    if h_c1.cols() != d || (h_c2.rows() > 0 && h_c2.cols() != d) {
        return Err(Error::ShapeMismatch {
            op: "tfem_fuse",
            detail: format!("token width {} vs model {}", h_c1.cols(), d),
        });
    }
    let (pre, q, k, v, probs) = if h_c2.rows() == 0 {
        (h_c1.clone(), None, None, None, None)
    } else {
        let q = matmul(h_c1, &weights.wq)?;
        let k = matmul(h_c2, &weights.wk)?;
        let v = matmul(h_c2, &weights.wv)?;
        let scale = lit::<T>(1.0 / (d as f64).sqrt());
        let scores = matmul_nt(&q, &k)?.scale(scale);
        let probs = softmax_rows(&scores);
        let mut pre = matmul(&probs, &v)?;
        pre.add_assign(h_c1);
        (pre, Some(q), Some(k), Some(v), Some(probs))
    };
    let mut f1 = matmul(&pre, &weights.ffn_w1)?;
    crate::arraymath::add_bias_rows(&mut f1, &weights.ffn_b1);
    let act = f1.map(gelu_scalar);
    let mut f2 = matmul(&act, &weights.ffn_w2)?;
    crate::arraymath::add_bias_rows(&mut f2, &weights.ffn_b2);
    let (out, xhat, rstd) = layer_norm_fwd(&f2, &weights.norm_gamma, &weights.norm_beta, LN_EPS)?;
    Ok((
        out,
        TfemFuseTape {
            h_c1: h_c1.clone(),
            h_c2: h_c2.clone(),
            q,
            k,
            v,
            probs,
            pre,
            f1,
            xhat,
            rstd,
        },
    ))
}

/// Backward of [`tfem_fuse`]; returns (d_h_c1, d_h_c2).
pub fn tfem_fuse_backward<T: Scalar>(
    d_out: &DenseArray<T>,
    tape: &TfemFuseTape<T>,
    weights: &TfemWeights<T>,
    grads: &mut TfemGrads<T>,
) -> (DenseArray<T>, DenseArray<T>) {
    let d = weights.wq.cols();
    let d_f2 = layer_norm_backward(
        d_out,
        &tape.xhat,
        &tape.rstd,
        &weights.norm_gamma,
        &mut grads.norm_gamma,
        &mut grads.norm_beta,
    );
    let act = tape.f1.map(gelu_scalar);
    grads.ffn_w2.add_assign(&matmul_tn(&act, &d_f2).unwrap());
    grads.ffn_b2.add_assign(&col_sums(&d_f2));
    let d_act = matmul_nt(&d_f2, &weights.ffn_w2).unwrap();
    let mut d_f1 = DenseArray::zeros(tape.f1.shape());
    for ((o, &h), &da) in d_f1
        .data_mut()
        .iter_mut()
        .zip(tape.f1.data())
        .zip(d_act.data())
    {
        *o = gelu_grad_scalar(h) * da;
    }
    grads
        .ffn_w1
        .add_assign(&matmul_tn(&tape.pre, &d_f1).unwrap());
    grads.ffn_b1.add_assign(&col_sums(&d_f1));
    let d_pre = matmul_nt(&d_f1, &weights.ffn_w1).unwrap();

    if tape.h_c2.rows() == 0 {
        return (d_pre, DenseArray::zeros(&[0, d]));
    }
    let (q, k, v, probs) = (
        tape.q.as_ref().unwrap(),
        tape.k.as_ref().unwrap(),
        tape.v.as_ref().unwrap(),
        tape.probs.as_ref().unwrap(),
    );
    let mut d_h_c1 = d_pre.clone(); // residual
    let d_ctx = &d_pre;
    let d_probs = matmul_nt(d_ctx, v).unwrap();
    let d_v = matmul_tn(probs, d_ctx).unwrap();
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    let d_scores = softmax_rows_backward(probs, &d_probs).scale(scale);
    let d_q = matmul(&d_scores, k).unwrap();
    let d_k = matmul_tn(&d_scores, q).unwrap();

    grads.wq.add_assign(&matmul_tn(&tape.h_c1, &d_q).unwrap());
    grads.wk.add_assign(&matmul_tn(&tape.h_c2, &d_k).unwrap());
    grads.wv.add_assign(&matmul_tn(&tape.h_c2, &d_v).unwrap());
    d_h_c1.add_assign(&matmul_nt(&d_q, &weights.wq).unwrap());
    let mut d_h_c2 = matmul_nt(&d_k, &weights.wk).unwrap();
    d_h_c2.add_assign(&matmul_nt(&d_v, &weights.wv).unwrap());
    (d_h_c1, d_h_c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sample, GenSpec};

    fn weights(d: usize) -> TfemWeights<f64> {
        TfemWeights::init(&RngState::new(31), d, 2)
    }

    fn crops() -> Vec<GlyphCrop> {
        let spec = GenSpec::default();
        generate_sample(12, &spec).unwrap().crops
    }

    #[test]
    fn crop_encoding_is_deterministic_and_position_sensitive() {
        let w = weights(16);
        let cs = crops();
        let a = encode_glyph_crop(&cs[0], &w).unwrap();
        let b = encode_glyph_crop(&cs[0], &w).unwrap();
        assert_eq!(a, b);

        // same bitmap and class, shifted bbox center -> different encoding
        let mut moved = cs[0].clone();
        moved.bbox.0 += 3;
        let c = encode_glyph_crop(&moved, &w).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_bitmap_reduces_to_mlp_of_zero_plus_positions() {
        let w = weights(16);
        let mut crop = crops()[0].clone();
        crop.bitmap = vec![0; crop.bitmap.len()];
        let got = encode_glyph_crop(&crop, &w).unwrap();
        // additive decomposition computed by hand
        let zero_in = DenseArray::<f64>::zeros(&[1, 64]);
        let mut h1 = matmul(&zero_in, &w.ocr_w1).unwrap();
        crate::arraymath::add_bias_rows(&mut h1, &w.ocr_b1);
        let act = h1.map(gelu_scalar);
        let mut f = matmul(&act, &w.ocr_w2).unwrap();
        crate::arraymath::add_bias_rows(&mut f, &w.ocr_b2);
        let pos = crop_position_sum(&crop, &w).unwrap();
        for j in 0..16 {
            assert!((got.data()[j] - (f.at(0, j) + pos.data()[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn class_out_of_range_is_contract_error() {
        let w = weights(16);
        let mut crop = crops()[0].clone();
        crop.font_size_class = 5;
        assert!(encode_glyph_crop(&crop, &w).is_err());
    }

    #[test]
    fn fuse_preserves_length_and_residual_branch() {
        let w = weights(16);
        let mut rng = RngState::new(4);
        let h_c1 = draw_normal::<f64>(&mut rng, 6 * 16).reshape(vec![6, 16]).unwrap();
        let (feats, _) = tfem_crop_features(&crops(), &w).unwrap();
        let (fused, _) = tfem_fuse(&h_c1, &feats, &w).unwrap();
        assert_eq!(fused.rows(), 6);

        // empty crop set skips cross-attention entirely
        let empty = DenseArray::<f64>::zeros(&[0, 16]);
        let (fused0, tape0) = tfem_fuse(&h_c1, &empty, &w).unwrap();
        assert_eq!(fused0.rows(), 6);
        assert_eq!(tape0.pre, h_c1);

        // zero value projection makes the pre-FFN activation equal h_c1
        let mut wz = w.clone();
        wz.wv = DenseArray::zeros(&[16, 16]);
        let (_, tape) = tfem_fuse(&h_c1, &feats, &wz).unwrap();
        for (a, b) in tape.pre.data().iter().zip(h_c1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_crop_softmax_weight_is_one() {
        let w = weights(16);
        let mut rng = RngState::new(5);
        let h_c1 = draw_normal::<f64>(&mut rng, 3 * 16).reshape(vec![3, 16]).unwrap();
        let (feats, _) = tfem_crop_features(&crops()[..1], &w).unwrap();
        let (_, tape) = tfem_fuse(&h_c1, &feats, &w).unwrap();
        let probs = tape.probs.unwrap();
        assert_eq!(probs.cols(), 1);
        for &p in probs.data() {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_codes_injective_over_data_spec_grid() {
        // every realizable (bbox center, class) pair under the default spec
        let spec = GenSpec::default();
        let w = weights(64);
        let mut seen: Vec<(Vec<u64>, String)> = Vec::new();
        for (class, &scale) in spec.scales.iter().enumerate() {
            let cw = 3 * scale;
            let ch = 5 * scale;
            for y in 0..spec.height.saturating_sub(ch) {
                for x in 0..spec.width.saturating_sub(cw) {
                    let crop = GlyphCrop {
                        bitmap: vec![0; cw * ch],
                        bbox: (x, y, cw, ch),
                        font_size_class: class,
                        char_id: 0,
                    };
                    let sum = crop_position_sum(&crop, &w).unwrap();
                    let bits: Vec<u64> = sum.data().iter().map(|v| v.to_bits()).collect();
                    seen.push((bits, format!("class {class} at ({x},{y})")));
                }
            }
        }
        seen.sort();
        for pair in seen.windows(2) {
            assert_ne!(pair[0].0, pair[1].0, "{} vs {}", pair[0].1, pair[1].1);
        }
    }

    #[test]
    fn fuse_backward_matches_finite_difference() {
        let d = 8;
        let w = TfemWeights::<f64>::init(&RngState::new(77), d, 2);
        let mut rng = RngState::new(6);
        let h_c1 = draw_normal::<f64>(&mut rng, 4 * d).reshape(vec![4, d]).unwrap();
        let h_c2 = draw_normal::<f64>(&mut rng, 3 * d).reshape(vec![3, d]).unwrap();
        let upstream = draw_normal::<f64>(&mut rng, 4 * d).reshape(vec![4, d]).unwrap();

        let loss = |c1: &DenseArray<f64>, c2: &DenseArray<f64>, wt: &TfemWeights<f64>| -> f64 {
            let (out, _) = tfem_fuse(c1, c2, wt).unwrap();
            out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };

        let (out, tape) = tfem_fuse(&h_c1, &h_c2, &w).unwrap();
        let _ = out;
        let mut grads = w.zeros_like();
        let (d_c1, d_c2) = tfem_fuse_backward(&upstream, &tape, &w, &mut grads);

        let h = 1e-6;
        // inputs
        for (arr, darr) in [(&h_c1, &d_c1), (&h_c2, &d_c2)] {
            for idx in [0usize, 5, arr.len() - 1] {
                let mut p = arr.clone();
                p.data_mut()[idx] += h;
                let mut m = arr.clone();
                m.data_mut()[idx] -= h;
                let (up, dn) = if std::ptr::eq(arr, &h_c1) {
                    (loss(&p, &h_c2, &w), loss(&m, &h_c2, &w))
                } else {
                    (loss(&h_c1, &p, &w), loss(&h_c1, &m, &w))
                };
                let num = (up - dn) / (2.0 * h);
                assert!((darr.data()[idx] - num).abs() < 1e-5, "input idx {idx}");
            }
        }
        // a few weight slots across groups
        let check_w = |get: &dyn Fn(&TfemWeights<f64>) -> &DenseArray<f64>,
                       gval: &DenseArray<f64>,
                       idx: usize,
                       label: &str| {
            let mut wp = w.clone();
            let mut wm = w.clone();
            {
                let base = get(&wp).clone();
                let mut v = base.clone();
                v.data_mut()[idx] += h;
                *match label {
                    "wq" => &mut wp.wq,
                    "ffn_w1" => &mut wp.ffn_w1,
                    "norm_gamma" => &mut wp.norm_gamma,
                    _ => unreachable!(),
                } = v;
                let mut v2 = base;
                v2.data_mut()[idx] -= h;
                *match label {
                    "wq" => &mut wm.wq,
                    "ffn_w1" => &mut wm.ffn_w1,
                    "norm_gamma" => &mut wm.norm_gamma,
                    _ => unreachable!(),
                } = v2;
            }
            let num = (loss(&h_c1, &h_c2, &wp) - loss(&h_c1, &h_c2, &wm)) / (2.0 * h);
            assert!(
                (gval.data()[idx] - num).abs() < 1e-5,
                "{label}[{idx}]: {} vs {num}",
                gval.data()[idx]
            );
        };
        check_w(&|w| &w.wq, &grads.wq, 3, "wq");
        check_w(&|w| &w.ffn_w1, &grads.ffn_w1, 10, "ffn_w1");
        check_w(&|w| &w.norm_gamma, &grads.norm_gamma, 2, "norm_gamma");
    }
}
