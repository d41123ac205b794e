use rand::Rng;

use crate::attention::layers::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `GELU(x W₁ + b₁) W₂ + b₂`, optionally with a depthwise 3×3 convolution
/// between the expansion and the activation.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub depthwise: Option<ParamId>,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        ratio: usize,
        convolutional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = channels * ratio;
        let fc1 = Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng)?;
        let depthwise = if convolutional {
            let k = Tensor::randn(&[3, 3, hidden], 1.0 / 3.0, rng);
            Some(store.add(format!("{name}.dwconv.weight"), k)?)
        } else {
            None
        };
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng)?;
        Ok(FeedForward { fc1, fc2, depthwise })
    }

    pub fn is_convolutional(&self) -> bool {
        self.depthwise.is_some()
    }

    /// `x: [L, C]`; `grid` gives `(H, W)` with `H·W = L` and is required
    /// in convolutional mode.
    pub fn forward(&self, g: &mut Graph, x: Var, grid: Option<(usize, usize)>) -> Result<Var> {
        let hidden = g.scoped("fc1", |g| self.fc1.forward(g, x))?;
        let hidden = match self.depthwise {
            Some(k) => {
                let (h, w) = grid.ok_or_else(|| {
                    Error::Invalid("convolutional feed-forward needs the token grid shape".into())
                })?;
                let width = g.shape(hidden)[1];
                if h * w != g.shape(hidden)[0] {
                    return Err(Error::shape("feed_forward", format!("grid {h}x{w} for {} tokens", g.shape(hidden)[0])));
                }
                g.scoped("dwconv", |g| {
                    let spatial = g.reshape(hidden, &[h, w, width])?;
                    let kv = g.param(k)?;
                    let y = g.depthwise_conv3x3(spatial, kv)?;
                    g.reshape(y, &[h * w, width])
                })?
            }
            None => hidden,
        };
        let act = g.scoped("act", |g| g.gelu(hidden))?;
        g.scoped("fc2", |g| self.fc2.forward(g, act))
    }
}

/// Free-function form of [`FeedForward::forward`].
pub fn feed_forward(g: &mut Graph, x: Var, ffn: &FeedForward, grid: Option<(usize, usize)>) -> Result<Var> {
    ffn.forward(g, x, grid)
}
