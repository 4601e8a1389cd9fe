//! Mapping network from an image feature vector to LM prefix embeddings.
//!
//! A linear layer expands the `d_vis` features into `k` rows of width `d_lm`.
//! A learned constant of `n` rows joins them, a non-causal transformer stack
//! mixes all `n + k` rows, and a slice selects the rows handed to the LM.

use serde::{Deserialize, Serialize};

use crate::lm::{block_forward, block_param_count, init_block, BlockLayout, Init, ModelError, ParamSet, INIT_STD};
use crate::tensor::{Graph, Tensor, TensorError, Var};

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSlice {
    /// The `k` rows that started as image features.
    #[default]
    ImagePositions,
    /// The `n` rows that started as the learned prefix.
    PrefixPositions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub d_vis: usize,
    pub d_lm: usize,
    /// `k`: rows produced by the expansion layer.
    pub clip_length: usize,
    /// `n`: rows of the learned constant.
    pub prefix_length: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub output_slice: OutputSlice,
    pub positional_encoding: bool,
    /// Place the learned constant before the image rows.
    pub prefix_first: bool,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_vis: 512,
            d_lm: 1024,
            clip_length: 64,
            prefix_length: 64,
            n_layers: 8,
            n_heads: 8,
            output_slice: OutputSlice::ImagePositions,
            positional_encoding: false,
            prefix_first: true,
            seed: 0,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.clip_length == 0 {
            return fail("clip_length must be at least 1".into());
        }
        if self.d_vis == 0 || self.d_lm == 0 {
            return fail("d_vis and d_lm must be positive".into());
        }
        if self.n_heads == 0 || self.d_lm % self.n_heads != 0 {
            return fail(format!("d_lm {} is not divisible by n_heads {}", self.d_lm, self.n_heads));
        }
        Ok(())
    }

    /// Shape of the expansion matrix, `d_vis × (k · d_lm)`.
    pub fn expansion_shape(&self) -> [usize; 2] {
        [self.d_vis, self.clip_length * self.d_lm]
    }

    /// Rows of the projector output.
    pub fn output_rows(&self) -> usize {
        match self.output_slice {
            OutputSlice::PrefixPositions if self.prefix_length > 0 => self.prefix_length,
            _ => self.clip_length,
        }
    }

    /// Exact trainable scalar count.
    pub fn count_params(&self) -> usize {
        let d = self.d_lm;
        let [r, c] = self.expansion_shape();
        let pos = if self.positional_encoding {
            (self.prefix_length + self.clip_length) * d
        } else {
            0
        };
        r * c + c + self.prefix_length * d + pos + self.n_layers * block_param_count(d, 4 * d)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ProjectorLayout {
    expand_w: usize,
    expand_b: usize,
    prefix: Option<usize>,
    pos: Option<usize>,
    blocks: Vec<BlockLayout>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    cfg: ProjectorConfig,
    layout: ProjectorLayout,
    params: ParamSet,
}

impl Projector {
    /// Fresh projector with N(0, 0.02) weights and prefix constant.
    pub fn new(cfg: ProjectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.seed, INIT_STD);
        let mut ps = ParamSet::new();
        let d = cfg.d_lm;
        let expand_w = ps.push("expand.weight", init.normal(&cfg.expansion_shape()));
        let expand_b = ps.push("expand.bias", Tensor::zeros(&[cfg.clip_length * d]));
        let prefix = (cfg.prefix_length > 0).then(|| ps.push("prefix", init.normal(&[cfg.prefix_length, d])));
        let pos = cfg
            .positional_encoding
            .then(|| ps.push("pos_emb", init.normal(&[cfg.prefix_length + cfg.clip_length, d])));
        let blocks = (0..cfg.n_layers)
            .map(|l| init_block(&mut ps, &mut init, &format!("block{l}"), d, cfg.n_heads, 4 * d))
            .collect();
        Ok(Self {
            cfg,
            layout: ProjectorLayout {
                expand_w,
                expand_b,
                prefix,
                pos,
                blocks,
            },
            params: ps,
        })
    }

    pub fn from_params(cfg: ProjectorConfig, params: &ParamSet) -> Result<Self> {
        let mut p = Self::new(cfg)?;
        p.params.load_from(params)?;
        Ok(p)
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Record the projection of `features` (shape `[d_vis]` or `[1, d_vis]`).
    pub fn forward(&self, g: &mut Graph, p: &[Var], features: Var) -> Result<Var> {
        let cfg = &self.cfg;
        if g.value(features).len() != cfg.d_vis {
            return Err(TensorError::Shape {
                op: "project",
                lhs: g.shape(features).to_vec(),
                rhs: vec![cfg.d_vis],
            }
            .into());
        }
        let f = g.reshape(features, &[1, cfg.d_vis])?;
        let e = g.matmul(f, p[self.layout.expand_w])?;
        let e = g.add(e, p[self.layout.expand_b])?;
        let image = g.reshape(e, &[cfg.clip_length, cfg.d_lm])?;
        let n = cfg.prefix_length;
        let mut x = match self.layout.prefix {
            Some(pi) if cfg.prefix_first => g.concat_rows(&[p[pi], image])?,
            Some(pi) => g.concat_rows(&[image, p[pi]])?,
            None => image,
        };
        if let Some(pi) = self.layout.pos {
            x = g.add(x, p[pi])?;
        }
        for b in &self.layout.blocks {
            x = block_forward(g, p, b, x, false)?;
        }
        let k = cfg.clip_length;
        let (image_start, prefix_start) = if cfg.prefix_first { (n, 0) } else { (0, k) };
        let out = match cfg.output_slice {
            OutputSlice::PrefixPositions if n > 0 => g.slice_rows(x, prefix_start, prefix_start + n)?,
            _ => g.slice_rows(x, image_start, image_start + k)?,
        };
        Ok(out)
    }

    /// Prefix embeddings for one feature vector, without gradient tracking.
    pub fn project(&self, features: &[f64]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(Tensor::new(vec![features.len()], features.to_vec())?);
        let out = self.forward(&mut g, &p, f)?;
        Ok(g.value(out).clone())
    }
}
