//! Bottom-up grouping vision encoder.
//!
//! An image is cut into non-overlapping patches, embedded, and processed by
//! transformer blocks together with a set of learnable group tokens. At the
//! end of every stage a grouping block assigns each token to one group token
//! and merges the tokens of each group into a single new token. After the last
//! stage exactly `K` segment tokens remain; the per-stage assignment matrices
//! multiply into a patch-to-segment map.

use rand::Rng;

use crate::autodiff::{concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on a group's assignment mass when averaging its tokens. Hard
/// assignments give every non-empty group a mass of at least one, so their
/// mean is exact; empty groups divide by one instead of a vanishing number,
/// which keeps the straight-through gradient bounded.
pub const GROUP_MASS_MIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    /// Softmax assignment in both passes.
    Soft,
    /// One-hot argmax in the forward pass, softmax gradient in the backward pass.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Transformer blocks before each grouping stage; one optional extra entry
    /// gives the blocks run over the final segment tokens.
    pub depth_per_stage: Vec<usize>,
    pub heads: usize,
    /// Group tokens per stage, strictly decreasing, ending in `K`.
    pub group_token_counts: Vec<usize>,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// ViT-S sized two-stage grouping backbone (224px input, 16px patches, width 384, K = 8).
    pub fn paper() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            depth_per_stage: vec![6, 3, 3],
            heads: 6,
            group_token_counts: vec![64, 8],
            mlp_ratio: 4,
        }
    }

    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            depth_per_stage: vec![1, 1],
            heads: 2,
            group_token_counts: vec![8, 4],
            mlp_ratio: 2,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_segments(&self) -> usize {
        *self.group_token_counts.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::shape(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.group_token_counts.is_empty() || self.group_token_counts.contains(&0) {
            return Err(Error::config("group_token_counts must be non-empty and positive"));
        }
        if self.group_token_counts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("group_token_counts must be strictly decreasing"));
        }
        if self.group_token_counts[0] >= self.num_patches() {
            return Err(Error::config(format!(
                "{} groups for {} patches: grouping needs fewer groups than tokens",
                self.group_token_counts[0],
                self.num_patches()
            )));
        }
        let stages = self.group_token_counts.len();
        if self.depth_per_stage.len() != stages && self.depth_per_stage.len() != stages + 1 {
            return Err(Error::config("depth_per_stage needs one entry per stage (plus optional final)"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("embed_dim must divide into heads; channels and mlp_ratio positive"));
        }
        Ok(())
    }
}

/// Assigns `N` tokens to `G` group tokens and merges each group.
#[derive(Clone, Debug)]
pub struct GroupingBlock {
    pub norm_tokens: LayerNorm,
    pub norm_groups: LayerNorm,
    pub to_key: Linear,
    pub to_query: Linear,
    pub mix: Linear,
}

pub struct Grouped<'t, T: Scalar> {
    /// `G × d` merged tokens.
    pub grouped: Var<'t, T>,
    /// `N × G` assignment used in the forward pass (one-hot rows in hard mode).
    pub assignment: Var<'t, T>,
    /// `N × G` softmax assignment.
    pub soft: Var<'t, T>,
}

impl GroupingBlock {
    pub fn new(name: &str, dim: usize) -> Self {
        GroupingBlock {
            norm_tokens: LayerNorm::new(&format!("{name}.norm_tokens"), dim),
            norm_groups: LayerNorm::new(&format!("{name}.norm_groups"), dim),
            to_key: Linear::new(&format!("{name}.to_key"), dim, dim),
            to_query: Linear::new(&format!("{name}.to_query"), dim, dim),
            mix: Linear::new(&format!("{name}.mix"), dim, dim),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm_tokens.init(store);
        self.norm_groups.init(store);
        self.to_key.init(store, rng);
        self.to_query.init(store, rng);
        self.mix.init(store, rng);
    }

    /// Attention logits `N × G` between tokens and group tokens.
    pub fn logits<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>, groups: Var<'t, T>) -> Result<Var<'t, T>> {
        let k = self.to_key.forward(p, self.norm_tokens.forward(p, tokens)?)?;
        let q = self.to_query.forward(p, self.norm_groups.forward(p, groups)?)?;
        let scale = T::one() / T::of(k.cols() as f64).sqrt();
        k.matmul_t(q)?.scale(scale)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
        groups: Var<'t, T>,
        mode: AssignMode,
    ) -> Result<Grouped<'t, T>> {
        if groups.rows() > tokens.rows() || (groups.rows() == tokens.rows() && tokens.rows() > 1) {
            return Err(Error::config(format!(
                "grouping {} tokens into {} groups",
                tokens.rows(),
                groups.rows()
            )));
        }
        let soft = self.logits(p, tokens, groups)?.softmax_rows(None)?;
        let assignment = match mode {
            AssignMode::Soft => soft,
            AssignMode::Hard => soft.straight_through_one_hot()?,
        };
        let per_group = assignment.transpose()?;
        let mass = per_group.row_sum()?.clamp_min(T::of(GROUP_MASS_MIN))?;
        let mean = per_group.matmul(tokens)?.div_rows(mass)?;
        let grouped = self.mix.forward(p, mean)?;
        Ok(Grouped { grouped, assignment, soft })
    }
}

#[derive(Clone, Debug)]
struct Stage {
    group_tokens: String,
    blocks: Vec<Block>,
    grouping: GroupingBlock,
    norm_out: LayerNorm,
    mlp_out: Mlp,
}

/// Result of encoding one view.
pub struct Encoded<'t, T: Scalar> {
    /// `K × d` segment tokens; row `k` comes from the `k`-th final group token.
    pub segments: Var<'t, T>,
    /// Forward-pass assignment of each stage (`N_s × G_s`).
    pub stage_assignments: Vec<Tensor<T>>,
    /// Patch-to-segment map `P × K`: the product of the stage assignments.
    pub assignment: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GroupEncoder {
    config: EncoderConfig,
    prefix: String,
    patch_embed: Linear,
    pos_embed: String,
    stages: Vec<Stage>,
    final_blocks: Vec<Block>,
    norm_final: LayerNorm,
}

impl GroupEncoder {
    /// `prefix` namespaces every parameter, e.g. `"student/"` or `"teacher/"`.
    pub fn new(config: EncoderConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_dim = config.patch_size * config.patch_size * config.channels;
        let mut stages = Vec::new();
        for s in 0..config.group_token_counts.len() {
            let name = format!("{prefix}stage{s}");
            let blocks = (0..config.depth_per_stage[s])
                .map(|b| Block::new(&format!("{name}.block{b}"), d, config.heads, config.mlp_ratio))
                .collect::<Result<_>>()?;
            stages.push(Stage {
                group_tokens: format!("{name}.group_tokens"),
                blocks,
                grouping: GroupingBlock::new(&format!("{name}.grouping"), d),
                norm_out: LayerNorm::new(&format!("{name}.norm_out"), d),
                mlp_out: Mlp::new(&format!("{name}.mlp_out"), d, d * config.mlp_ratio, d),
            });
        }
        let n_final = config.depth_per_stage.get(config.group_token_counts.len()).copied().unwrap_or(0);
        let final_blocks = (0..n_final)
            .map(|b| Block::new(&format!("{prefix}final.block{b}"), d, config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(GroupEncoder {
            patch_embed: Linear::new(&format!("{prefix}patch_embed"), patch_dim, d),
            pos_embed: format!("{prefix}pos_embed"),
            norm_final: LayerNorm::new(&format!("{prefix}norm_final"), d),
            stages,
            final_blocks,
            prefix: prefix.to_string(),
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Name of the learnable group tokens of `stage`.
    pub fn group_token_name(&self, stage: usize) -> &str {
        &self.stages[stage].group_tokens
    }

    pub fn pos_embed_name(&self) -> &str {
        &self.pos_embed
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = self.config.embed_dim;
        self.patch_embed.init(store, rng);
        store.insert(&self.pos_embed, Tensor::randn(&[self.config.num_patches(), d], 0.02, rng));
        for (stage, &g) in self.stages.iter().zip(&self.config.group_token_counts) {
            store.insert(&stage.group_tokens, Tensor::randn(&[g, d], 0.02, rng));
            stage.blocks.iter().for_each(|b| b.init(store, rng));
            stage.grouping.init(store, rng);
            stage.norm_out.init(store);
            stage.mlp_out.init(store, rng);
        }
        self.final_blocks.iter().for_each(|b| b.init(store, rng));
        self.norm_final.init(store);
    }

    /// Rearranges an `S × S × C` image (values already scaled) into
    /// `(S/p)² × (p·p·C)` patch rows, row-major over the patch grid.
    pub fn patch_rows<T: Scalar>(&self, image: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
        let c = &self.config;
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != c.channels || shape[0] != shape[1] {
            return Err(Error::shape(format!("expected square S×S×{} image, got {shape:?}", c.channels)));
        }
        let size = shape[0];
        if size % c.patch_size != 0 {
            return Err(Error::shape(format!("image size {size} not divisible by patch {}", c.patch_size)));
        }
        let grid = size / c.patch_size;
        let p = c.patch_size;
        let mut data = Vec::with_capacity(image.len());
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..p {
                    let row = (gy * p + y) * size;
                    let start = (row + gx * p) * c.channels;
                    data.extend_from_slice(&image.data()[start..start + p * c.channels]);
                }
            }
        }
        Ok((grid, Tensor::matrix(grid * grid, p * p * c.channels, data)?))
    }

    /// Patch embedding plus positional embedding: `P × d`.
    ///
    /// Inputs at the configured size use the learned positional table
    /// directly; other sizes use a bilinear resampling of it (inference only).
    pub fn patchify<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
        let (grid, rows) = self.patch_rows(image)?;
        let pos = p.get(&self.pos_embed)?;
        let tape = pos.tape();
        let tokens = self.patch_embed.forward(p, tape.constant(rows))?;
        let pos = if grid == self.config.grid() {
            pos
        } else {
            tape.constant(resample_grid(&pos.value(), self.config.grid(), grid)?)
        };
        tokens.add(pos)
    }

    pub fn encode<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: &Tensor<T>, mode: AssignMode) -> Result<Encoded<'t, T>> {
        let mut x = self.patchify(p, image)?;
        let mut stage_assignments = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let n = x.rows();
            let groups = p.get(&stage.group_tokens)?;
            let g = groups.rows();
            let mut h = concat_rows(&[x, groups])?;
            for block in &stage.blocks {
                h = block.forward(p, h, None)?;
            }
            let tokens = h.slice_rows(0, n)?;
            let group_state = h.slice_rows(n, g)?;
            let out = stage.grouping.forward(p, tokens, group_state, mode)?;
            stage_assignments.push(out.assignment.value());
            let merged = out.grouped.add(group_state)?;
            x = merged.add(stage.mlp_out.forward(p, stage.norm_out.forward(p, merged)?)?)?;
        }
        for block in &self.final_blocks {
            x = block.forward(p, x, None)?;
        }
        let segments = self.norm_final.forward(p, x)?;
        let assignment = compose_assignments(&stage_assignments)?;
        Ok(Encoded { segments, stage_assignments, assignment })
    }

    /// Encodes on a private tape without gradients; returns `(segments, assignment)`.
    pub fn encode_values<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        image: &Tensor<T>,
        mode: AssignMode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let out = self.encode(&bound, image, mode)?;
        Ok((out.segments.value(), out.assignment))
    }
}

/// Chain product of stage assignment matrices.
pub fn compose_assignments<T: Scalar>(stages: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut it = stages.iter();
    let first = it.next().ok_or_else(|| Error::shape("no stages"))?.clone();
    it.try_fold(first, |acc, s| acc.matmul(s))
}

/// Bilinear resampling of a `from² × d` grid table to `to² × d` (half-pixel centers).
pub fn resample_grid<T: Scalar>(table: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let d = table.cols();
    if table.rows() != from * from {
        return Err(Error::shape("positional table does not match grid"));
    }
    let coord = |i: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(to * to * d);
    for y in 0..to {
        let (y0, y1, fy) = coord(y);
        for x in 0..to {
            let (x0, x1, fx) = coord(x);
            for c in 0..d {
                let v = |yy: usize, xx: usize| table.at(yy * from + xx, c).f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(T::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::matrix(to * to, d, out)
}
