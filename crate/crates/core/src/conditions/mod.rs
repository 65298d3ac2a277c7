//! Condition tokenization: prompt, style, subject, and glyph inputs all
//! land in the shared `d`-wide token space, tagged by segment.
//!
//! Segment order is fixed everywhere in the crate:
//! PROMPT, NOISE, STYLE, SUBJECT, GLYPH.

mod encode;
mod pos;
mod tfem;

pub use encode::{
    build_style_tokens, build_subject_tokens, encode_prompt, mask_subject, patch_encode, patchify,
    pixels_to_unit, unit_to_pixel, unpatchify, word_embedding,
};
pub use pos::{patch_position_encoding, position_encoding_2d};
pub use tfem::{
    encode_glyph_crop, tfem_crop_features, tfem_crop_features_backward, tfem_fuse,
    tfem_fuse_backward, CropFeatureTape, TfemFuseTape, TfemGrads, TfemWeights,
};

use crate::arraymath::{DenseArray, Scalar};
use crate::error::{Error, Result};
use crate::synthdata::{BinImage, GlyphCrop, PosterSample, RgbImage};

/// Token provenance tag. Order of declaration is the canonical segment order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentTag {
    Prompt,
    Noise,
    Style,
    Subject,
    Glyph,
}

pub const SEGMENT_ORDER: [SegmentTag; 5] = [
    SegmentTag::Prompt,
    SegmentTag::Noise,
    SegmentTag::Style,
    SegmentTag::Subject,
    SegmentTag::Glyph,
];

/// The three prunable condition segments, in canonical order.
pub const CONDITION_TAGS: [SegmentTag; 3] =
    [SegmentTag::Style, SegmentTag::Subject, SegmentTag::Glyph];

impl SegmentTag {
    pub fn name(self) -> &'static str {
        match self {
            SegmentTag::Prompt => "prompt",
            SegmentTag::Noise => "noise",
            SegmentTag::Style => "style",
            SegmentTag::Subject => "subject",
            SegmentTag::Glyph => "glyph",
        }
    }

    pub fn order_index(self) -> usize {
        SEGMENT_ORDER.iter().position(|&t| t == self).unwrap()
    }

    /// Index into condition-indexed tables (style 0, subject 1, glyph 2).
    pub fn condition_index(self) -> Option<usize> {
        CONDITION_TAGS.iter().position(|&t| t == self)
    }

    pub fn is_condition(self) -> bool {
        self.condition_index().is_some()
    }
}

/// A tagged token sequence: N tokens of width d, each with a segment tag and
/// an optional source patch coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<T> {
    pub tokens: DenseArray<T>,
    pub tags: Vec<SegmentTag>,
    pub patch_pos: Vec<Option<(usize, usize)>>,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn new(
        tokens: DenseArray<T>,
        tags: Vec<SegmentTag>,
        patch_pos: Vec<Option<(usize, usize)>>,
    ) -> Result<Self> {
        if tokens.rows() != tags.len() || tags.len() != patch_pos.len() {
            return Err(Error::ShapeMismatch {
                op: "TokenSeq::new",
                detail: format!(
                    "{} tokens, {} tags, {} positions",
                    tokens.rows(),
                    tags.len(),
                    patch_pos.len()
                ),
            });
        }
        let seq = Self {
            tokens,
            tags,
            patch_pos,
        };
        seq.check_segment_order()?;
        Ok(seq)
    }

    /// Uniformly tagged segment without patch positions.
    pub fn uniform(tokens: DenseArray<T>, tag: SegmentTag) -> Self {
        let n = tokens.rows();
        Self {
            tokens,
            tags: vec![tag; n],
            patch_pos: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Per-tag token counts in canonical order.
    pub fn seg_lengths(&self) -> [usize; 5] {
        let mut out = [0usize; 5];
        for t in &self.tags {
            out[t.order_index()] += 1;
        }
        out
    }

    /// Row range occupied by a tag (empty range if absent).
    pub fn segment_range(&self, tag: SegmentTag) -> std::ops::Range<usize> {
        let start = self
            .tags
            .iter()
            .position(|&t| t == tag)
            .unwrap_or(self.tags.len());
        let mut end = start;
        while end < self.tags.len() && self.tags[end] == tag {
            end += 1;
        }
        start..end
    }

    /// Tags must appear grouped in canonical order.
    pub fn check_segment_order(&self) -> Result<()> {
        let mut last = 0usize;
        for (i, t) in self.tags.iter().enumerate() {
            let idx = t.order_index();
            if idx < last {
                return Err(Error::contract(format!(
                    "segment order violated at token {i}: {} after {}",
                    t.name(),
                    SEGMENT_ORDER[last].name()
                )));
            }
            last = idx;
        }
        Ok(())
    }

    /// Concatenates segments, enforcing the canonical order.
    pub fn concat(parts: &[&TokenSeq<T>]) -> Result<Self> {
        let arrays: Vec<&DenseArray<T>> = parts.iter().map(|p| &p.tokens).collect();
        let tokens = DenseArray::vstack(&arrays)?;
        let mut tags = Vec::new();
        let mut patch_pos = Vec::new();
        for p in parts {
            tags.extend_from_slice(&p.tags);
            patch_pos.extend_from_slice(&p.patch_pos);
        }
        Self::new(tokens, tags, patch_pos)
    }

    pub fn cast<U: Scalar>(&self) -> TokenSeq<U> {
        TokenSeq {
            tokens: self.tokens.cast(),
            tags: self.tags.clone(),
            patch_pos: self.patch_pos.clone(),
        }
    }
}

/// How the background style is specified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleMode {
    /// m = 0: a style prompt.
    Prompt,
    /// m = 1: a style image (plus the fixed anchor prompt).
    Image,
}

/// All user-facing control inputs for one generation.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    pub prompt: String,
    pub style_mode: StyleMode,
    pub style_prompt: Option<String>,
    pub style_image: Option<RgbImage>,
    pub subject_image: RgbImage,
    pub subject_mask: BinImage,
    pub glyph_image: BinImage,
    pub crops: Vec<GlyphCrop>,
}

impl ConditionBundle {
    pub fn validate(&self) -> Result<()> {
        match self.style_mode {
            StyleMode::Image if self.style_image.is_none() => Err(Error::contract(
                "style_mode = image requires a style image",
            )),
            StyleMode::Prompt if self.style_prompt.is_none() => Err(Error::contract(
                "style_mode = prompt requires a style prompt",
            )),
            _ => {
                if (self.subject_image.h, self.subject_image.w)
                    != (self.subject_mask.h, self.subject_mask.w)
                {
                    return Err(Error::contract("subject image/mask extents differ"));
                }
                Ok(())
            }
        }
    }

    /// The standard bundle for a dataset sample: style given as an image.
    pub fn from_sample(s: &PosterSample) -> Self {
        Self {
            prompt: s.prompt.clone(),
            style_mode: StyleMode::Image,
            style_prompt: None,
            style_image: Some(s.style_image.clone()),
            subject_image: s.subject_image.clone(),
            subject_mask: s.subject_mask.clone(),
            glyph_image: s.glyph_image.clone(),
            crops: s.crops.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arraymath::DenseArray;

    #[test]
    fn segment_order_is_enforced() {
        let ok = TokenSeq::<f64>::new(
            DenseArray::zeros(&[3, 4]),
            vec![SegmentTag::Prompt, SegmentTag::Noise, SegmentTag::Glyph],
            vec![None; 3],
        );
        assert!(ok.is_ok());
        let bad = TokenSeq::<f64>::new(
            DenseArray::zeros(&[2, 4]),
            vec![SegmentTag::Style, SegmentTag::Noise],
            vec![None; 2],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn ranges_and_lengths_agree() {
        let seq = TokenSeq::<f64>::new(
            DenseArray::zeros(&[5, 2]),
            vec![
                SegmentTag::Prompt,
                SegmentTag::Prompt,
                SegmentTag::Noise,
                SegmentTag::Subject,
                SegmentTag::Subject,
            ],
            vec![None; 5],
        )
        .unwrap();
        assert_eq!(seq.seg_lengths(), [2, 1, 0, 2, 0]);
        assert_eq!(seq.segment_range(SegmentTag::Noise), 2..3);
        assert_eq!(seq.segment_range(SegmentTag::Style), 5..5);
        assert_eq!(seq.segment_range(SegmentTag::Subject), 3..5);
    }
}
