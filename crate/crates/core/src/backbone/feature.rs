use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One scale of a feature pyramid, held on a tape in token form `[H·W, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    /// 1-based stage index.
    pub scale: usize,
    /// Input pixels per grid cell.
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tokens: Var,
}

impl FeatureMap {
    /// Wraps a `[H·W, C]` node, checking its shape.
    pub fn new(tape: &Tape, tokens: Var, scale: usize, stride: usize, height: usize, width: usize) -> Result<Self> {
        match tape.shape(tokens) {
            [l, c] if *l == height * width => Ok(FeatureMap { scale, stride, height, width, channels: *c, tokens }),
            s => Err(Error::shape("feature_map", format!("tokens {s:?} for grid {height}x{width}"))),
        }
    }

    /// Places a channels-last `[H, W, C]` tensor on the tape as a constant map.
    pub fn constant(tape: &mut Tape, value: Tensor, scale: usize, stride: usize) -> Result<Self> {
        let (h, w, c) = match value.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::shape("feature_map", format!("expected [H, W, C], got {s:?}"))),
        };
        let v = tape.constant(value.reshape(&[h * w, c])?)?;
        Self::new(tape, v, scale, stride, h, w)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    /// Same geometry, different tokens.
    pub fn with_tokens(&self, tape: &Tape, tokens: Var) -> Result<Self> {
        Self::new(tape, tokens, self.scale, self.stride, self.height, self.width)
    }

    /// Channels-last copy of the map's current value.
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        tape.value(self.tokens)
            .clone()
            .reshape(&[self.height, self.width, self.channels])
            .expect("feature map shape")
    }
}

/// The fused outputs `[x₁*, …, x_S*]`, stride-ascending, all at the fusing width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Invalid("empty feature pyramid".into()));
        }
        let width = maps[0].channels;
        for pair in maps.windows(2) {
            if pair[1].stride <= pair[0].stride {
                return Err(Error::Invalid(format!(
                    "pyramid strides must increase: {} then {}",
                    pair[0].stride, pair[1].stride
                )));
            }
        }
        if let Some(m) = maps.iter().find(|m| m.channels != width) {
            return Err(Error::Invalid(format!("pyramid channel mismatch: {} vs {width}", m.channels)));
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn last(&self) -> &FeatureMap {
        self.maps.last().expect("non-empty pyramid")
    }

    pub fn strides(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.stride).collect()
    }

    pub fn by_stride(&self, stride: usize) -> Option<&FeatureMap> {
        self.maps.iter().find(|m| m.stride == stride)
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels
    }
}
