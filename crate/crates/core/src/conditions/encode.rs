//! Prompt, patch, style, and subject encoders.

use super::{SegmentTag, StyleMode, TokenSeq};
use crate::arraymath::{
    add_bias_rows, draw_normal, lit, DenseArray, RngState, Scalar,
};
use crate::error::{Error, Result};
use crate::synthdata::RgbImage;

/// FNV-1a over the word bytes; feeds the embedding stream.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic embedding row for one word: a seeded normal draw scaled
/// by 1/sqrt(d). The salt decorrelates vocabularies across models.
pub fn word_embedding<T: Scalar>(word: &str, d: usize, salt: u64) -> DenseArray<T> {
    let mut rng = RngState::new(salt).fork(fnv1a64(word.as_bytes()));
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    draw_normal::<T>(&mut rng, d).scale(scale)
}

fn pad_embedding<T: Scalar>(d: usize, salt: u64) -> DenseArray<T> {
    // reserved stream: tag 1 under the salt's fork space cannot collide with
    // word hashes routed through fork(fnv)
    let mut rng = RngState::new(salt).fork(1).fork(0x50414444); // "PADD"
    let scale = lit::<T>(1.0 / (d as f64).sqrt());
    draw_normal::<T>(&mut rng, d).scale(scale)
}

/// Whitespace-tokenizes `text` and embeds each word. Non-empty prompts are
/// truncated or padded to exactly `length_cap` tokens; an empty prompt
/// yields an empty segment.
pub fn encode_prompt<T: Scalar>(
    text: &str,
    d: usize,
    length_cap: usize,
    salt: u64,
    tag: SegmentTag,
) -> TokenSeq<T> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return TokenSeq::uniform(DenseArray::zeros(&[0, d]), tag);
    }
    let pad = pad_embedding::<T>(d, salt);
    let mut rows = Vec::with_capacity(length_cap);
    for i in 0..length_cap {
        if i < words.len() {
            rows.push(word_embedding::<T>(words[i], d, salt));
        } else {
            rows.push(pad.clone());
        }
    }
    let mut tokens = DenseArray::zeros(&[length_cap, d]);
    for (i, r) in rows.iter().enumerate() {
        tokens.row_mut(i).copy_from_slice(r.data());
    }
    TokenSeq::uniform(tokens, tag)
}

/// Maps pixel bytes to the unit interval [0, 1]; black stays exactly zero,
/// which makes masked-out regions encode to zero tokens.
#[inline]
pub fn pixels_to_unit<T: Scalar>(v: u8) -> T {
    lit::<T>(v as f64 / 255.0)
}

/// Inverse of [`pixels_to_unit`] with clamping.
#[inline]
pub fn unit_to_pixel<T: Scalar>(v: T) -> u8 {
    let x = v.to_f64().unwrap_or(0.0) * 255.0;
    x.round().clamp(0.0, 255.0) as u8
}

/// Row-major patch matrix: one row per patch, width patch*patch*3,
/// channels interleaved per pixel, values in [-1, 1].
pub fn patchify<T: Scalar>(img: &RgbImage, patch: usize) -> Result<DenseArray<T>> {
    if patch == 0 || img.h % patch != 0 || img.w % patch != 0 {
        return Err(Error::contract(format!(
            "image {}x{} not divisible by patch {patch}",
            img.h, img.w
        )));
    }
    let (gh, gw) = (img.h / patch, img.w / patch);
    let width = patch * patch * 3;
    let mut out = DenseArray::zeros(&[gh * gw, width]);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let c = img.px(gy * patch + py, gx * patch + px);
                    row[k] = pixels_to_unit(c[0]);
                    row[k + 1] = pixels_to_unit(c[1]);
                    row[k + 2] = pixels_to_unit(c[2]);
                    k += 3;
                }
            }
        }
    }
    Ok(out)
}

/// Linear patch embedding: token = flat(patch) . W + b, row-major patch
/// order, patch grid coordinates recorded per token.
pub fn patch_encode<T: Scalar>(
    img: &RgbImage,
    patch: usize,
    w: &DenseArray<T>,
    b: &DenseArray<T>,
    tag: SegmentTag,
) -> Result<TokenSeq<T>> {
    let flat = patchify::<T>(img, patch)?;
    if w.rows() != flat.cols() || b.len() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "patch_encode",
            detail: format!(
                "patch width {} vs embed {:?}/{:?}",
                flat.cols(),
                w.shape(),
                b.shape()
            ),
        });
    }
    let mut tokens = crate::arraymath::matmul(&flat, w)?;
    add_bias_rows(&mut tokens, b);
    let (gh, gw) = (img.h / patch, img.w / patch);
    let patch_pos = (0..gh)
        .flat_map(|r| (0..gw).map(move |c| Some((r, c))))
        .collect();
    TokenSeq::new(tokens, vec![tag; gh * gw], patch_pos)
}

/// Inverse of [`patchify`]: reassembles a patch-pixel matrix into an RGB
/// image, clamping values back to bytes.
pub fn unpatchify<T: Scalar>(
    flat: &DenseArray<T>,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<crate::synthdata::RgbImage> {
    let (gh, gw) = (h / patch, w / patch);
    if flat.rows() != gh * gw || flat.cols() != patch * patch * 3 {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            detail: format!("{:?} for {h}x{w} patch {patch}", flat.shape()),
        });
    }
    let mut img = crate::synthdata::RgbImage::new(h, w);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = flat.row(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    img.set_px(
                        gy * patch + py,
                        gx * patch + px,
                        [
                            unit_to_pixel(row[k]),
                            unit_to_pixel(row[k + 1]),
                            unit_to_pixel(row[k + 2]),
                        ],
                    );
                    k += 3;
                }
            }
        }
    }
    Ok(img)
}

/// Zeroes every pixel outside the mask.
pub fn mask_subject(img: &RgbImage, mask: &crate::synthdata::BinImage) -> Result<RgbImage> {
    if (img.h, img.w) != (mask.h, mask.w) {
        return Err(Error::contract(format!(
            "subject image {}x{} vs mask {}x{}",
            img.h, img.w, mask.h, mask.w
        )));
    }
    let mut out = RgbImage::new(img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            if mask.get(y, x) == 1 {
                out.set_px(y, x, img.px(y, x));
            }
        }
    }
    Ok(out)
}

/// Subject tokens: black-fill outside the mask, then patch-encode.
pub fn build_subject_tokens<T: Scalar>(
    subject_image: &RgbImage,
    subject_mask: &crate::synthdata::BinImage,
    patch: usize,
    w: &DenseArray<T>,
    b: &DenseArray<T>,
) -> Result<TokenSeq<T>> {
    let masked = mask_subject(subject_image, subject_mask)?;
    patch_encode(&masked, patch, w, b, SegmentTag::Subject)
}

/// Style tokens. Prompt mode embeds the style prompt; image mode
/// patch-encodes the style image and appends the fixed anchor tokens.
#[allow(clippy::too_many_arguments)]
pub fn build_style_tokens<T: Scalar>(
    style_mode: StyleMode,
    style_prompt: Option<&str>,
    style_image: Option<&RgbImage>,
    anchor: &DenseArray<T>,
    patch: usize,
    w: &DenseArray<T>,
    b: &DenseArray<T>,
    prompt_cap: usize,
    salt: u64,
) -> Result<TokenSeq<T>> {
    match style_mode {
        StyleMode::Prompt => {
            let text = style_prompt
                .ok_or_else(|| Error::contract("style prompt required when style_mode=prompt"))?;
            Ok(encode_prompt(text, w.cols(), prompt_cap, salt, SegmentTag::Style))
        }
        StyleMode::Image => {
            let img = style_image
                .ok_or_else(|| Error::contract("style image required when style_mode=image"))?;
            let image_tokens = patch_encode(img, patch, w, b, SegmentTag::Style)?;
            let anchor_seq = TokenSeq::uniform(anchor.clone(), SegmentTag::Style);
            TokenSeq::concat(&[&image_tokens, &anchor_seq])
        }
    }
}
