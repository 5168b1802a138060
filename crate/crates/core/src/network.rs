//! The tracking network: convolutional backbone, transformer that predicts per-sequence
//! target-model filters, the soft keypoint-map predictor, the offset adapter and the heads.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EmbeddingFlags, EmbeddingSet, EncodingConfig, FrameState, KeypointState, TargetStateMaps};
use crate::nn::{self, ConvNormRelu, ConvSpec, DecoderLayer, EncoderLayer, Linear};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

type Result<T> = core::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoding: EncodingConfig,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_width: usize,
    /// Output widths of the first three backbone blocks; the fourth emits `n` channels.
    pub backbone_widths: [usize; 3],
    /// Hidden width of the head, adapter and soft-map convolutions.
    pub head_width: usize,
    /// Fixed multipliers on the linear offset outputs, in pixels.
    pub bbox_offset_scale: f64,
    pub kp_offset_scale: f64,
    /// Initial bias of the score-map logits.
    pub score_bias_init: f64,
    pub use_gmsp: bool,
    pub use_phi_loc: bool,
    pub use_phi_kp: bool,
    pub use_phi_test: bool,
    pub use_x_test: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoding: EncodingConfig::default(),
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_width: 256,
            backbone_widths: [16, 32, 64],
            head_width: 32,
            bbox_offset_scale: 64.0,
            kp_offset_scale: 16.0,
            score_bias_init: -2.0,
            use_gmsp: true,
            use_phi_loc: true,
            use_phi_kp: true,
            use_phi_test: true,
            use_x_test: true,
        }
    }
}

impl ModelConfig {
    pub fn n(&self) -> usize {
        self.encoding.channels
    }

    pub fn k(&self) -> usize {
        self.encoding.num_keypoints
    }

    pub fn num_queries(&self) -> usize {
        2 + 2 * self.k()
    }

    pub fn validate(&self) -> core::result::Result<(), &'static str> {
        self.encoding.validate()?;
        if self.encoding.stride != 16 {
            return Err("the backbone has four stride-2 blocks, so the stride must be 16");
        }
        if self.heads == 0 || !self.n().is_multiple_of(self.heads) {
            return Err("channels must be divisible by the number of heads");
        }
        if !self.n().is_multiple_of(4) {
            return Err("channels must be a multiple of 4 for the 2-D position code");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_width == 0 || self.head_width == 0 {
            return Err("layer counts and widths must be positive");
        }
        if self.backbone_widths.contains(&0) {
            return Err("backbone widths must be positive");
        }
        if self.use_gmsp && (self.encoding.feat_h % 4 != 2 || self.encoding.feat_w % 4 != 2) {
            return Err("the soft-map encoder/decoder needs feature extents of the form 4m+2");
        }
        Ok(())
    }

    fn embedding_flags(&self) -> EmbeddingFlags {
        EmbeddingFlags {
            phi_loc: self.use_phi_loc,
            phi_kp: self.use_phi_kp,
            phi_test: self.use_phi_test,
            x_test: self.use_x_test,
            psi_kp: !self.use_gmsp,
        }
    }
}

/// Stack of 3×3 blocks followed by a pointwise projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MapHead {
    pub blocks: Vec<ConvNormRelu>,
    pub out: Linear,
    pub sigmoid: bool,
    pub scale: f64,
}

impl MapHead {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        width: usize,
        out_ch: usize,
        output: HeadOutput,
    ) -> Self {
        let blocks = (0..3)
            .map(|i| {
                let c = if i == 0 { in_ch } else { width };
                ConvNormRelu::new(store, rng, &format!("{name}.block{i}"), ConvSpec::same3(c, width))
            })
            .collect();
        let out = Linear::new(store, rng, &format!("{name}.out"), width, out_ch);
        let (sigmoid, scale) = match output {
            HeadOutput::Score { bias } => {
                store.get_mut(out.b.expect("head has a bias")).value = Tensor::full(&[out_ch], bias);
                (true, 1.0)
            }
            HeadOutput::Offsets { scale } => (false, scale),
        };
        MapHead { blocks, out, sigmoid, scale }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, att: Var) -> Result<Var> {
        let h = nn::run_stack(&self.blocks, g, store, att)?;
        let y = self.out.pointwise(g, store, h)?;
        Ok(if self.sigmoid { g.sigmoid(y) } else { g.scale(y, self.scale) })
    }
}

enum HeadOutput {
    Score { bias: f64 },
    Offsets { scale: f64 },
}

/// Soft all-object keypoint map predicted from backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmsp {
    pub down: [ConvNormRelu; 2],
    pub up: [ConvNormRelu; 2],
    pub out: Linear,
}

impl Gmsp {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, n: usize, width: usize, k: usize, bias: f64) -> Self {
        let spec = |in_ch, kernel| ConvSpec { in_ch, out_ch: width, kernel, stride: 2, pad: 1 };
        let gmsp = Gmsp {
            // 18 → 9 → 5, then 5 → 9 → 18
            down: [
                ConvNormRelu::new(store, rng, "gmsp.down0", spec(n, 4)),
                ConvNormRelu::new(store, rng, "gmsp.down1", spec(width, 3)),
            ],
            up: [
                ConvNormRelu::transposed(store, rng, "gmsp.up0", spec(width, 3)),
                ConvNormRelu::transposed(store, rng, "gmsp.up1", spec(width, 4)),
            ],
            out: Linear::new(store, rng, "gmsp.out", width, k),
        };
        store.get_mut(gmsp.out.b.expect("bias")).value = Tensor::full(&[k], bias);
        gmsp
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = nn::run_stack(&self.down, g, store, x)?;
        let h = nn::run_stack(&self.up, g, store, h)?;
        let y = self.out.pointwise(g, store, h)?;
        Ok(g.sigmoid(y))
    }
}

/// Keypoint offset regressor: a filter-attention tower and an optional soft-map tower, fused.
#[derive(Debug, Clone, PartialEq)]
pub struct Omra {
    pub tower_att: Vec<ConvNormRelu>,
    pub tower_soft: Option<Vec<ConvNormRelu>>,
    pub fuse: Vec<ConvNormRelu>,
    pub out: Linear,
    pub scale: f64,
}

impl Omra {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let (k, w) = (cfg.k(), cfg.head_width);
        let stack = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_ch: usize, depth: usize| {
            (0..depth)
                .map(|i| {
                    let c = if i == 0 { in_ch } else { w };
                    ConvNormRelu::new(store, rng, &format!("{name}{i}"), ConvSpec::same3(c, w))
                })
                .collect::<Vec<_>>()
        };
        let tower_att = stack(store, rng, "omra.att", k, 3);
        let tower_soft = cfg.use_gmsp.then(|| stack(store, rng, "omra.soft", k, 4));
        let fuse_in = if cfg.use_gmsp { 2 * w } else { w };
        let fuse = stack(store, rng, "omra.fuse", fuse_in, 4);
        let out = Linear::new(store, rng, "omra.out", w, 2 * k);
        Omra { tower_att, tower_soft, fuse, out, scale: cfg.kp_offset_scale }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, att: Var, soft: Option<Var>) -> Result<Var> {
        let a = nn::run_stack(&self.tower_att, g, store, att)?;
        let joined = match (&self.tower_soft, soft) {
            (Some(tower), Some(s)) => {
                let b = nn::run_stack(tower, g, store, s)?;
                g.concat(&[a, b], 0)?
            }
            (None, _) => a,
            (Some(_), None) => return Err(TensorError::dim("omra", "soft keypoint map required")),
        };
        let h = nn::run_stack(&self.fuse, g, store, joined)?;
        let y = self.out.pointwise(g, store, h)?;
        Ok(g.scale(y, self.scale))
    }
}

/// Predicted filters, one row per decoder query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelWeights {
    /// `[1×n]`
    pub w_loc: Var,
    /// `[1×n]`
    pub w_br: Var,
    /// `[k×n]`
    pub w_kloc: Var,
    /// `[k×n]`
    pub w_kp: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutputs {
    pub bbox_gm: Var,
    pub bbox_om: Var,
    pub kp_gm: Var,
    pub kp_om: Var,
    /// Soft-map predictions for each train frame (empty without the soft-map module).
    pub gmsp_train: Vec<Var>,
    /// Detached soft map of the test frame that drives the offset adapter.
    pub gmsp_test: Option<Var>,
    pub weights: ModelWeights,
    pub z_test: Var,
}

/// A train frame as seen by the transformer: backbone features plus target state.
#[derive(Debug, Clone, Copy)]
pub struct EncodedFrame<'a> {
    pub features: Var,
    pub state: &'a FrameState,
}

/// Training input for one annotated frame.
#[derive(Debug, Clone, Copy)]
pub struct TrainFrame<'a> {
    pub image: &'a Tensor,
    pub maps: &'a TargetStateMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub cfg: ModelConfig,
    pub backbone: [ConvNormRelu; 4],
    pub emb: EmbeddingSet,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub queries: ParamId,
    pub gmsp: Option<Gmsp>,
    pub omra: Omra,
    pub loc_head: MapHead,
    pub kloc_head: MapHead,
    pub bbox_head: MapHead,
    pos: Tensor,
}

impl StepModel {
    /// Builds the model and registers its parameters, initialised from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> core::result::Result<(StepModel, ParamStore), &'static str> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let s = &mut store;
        let (n, k, hw) = (cfg.n(), cfg.k(), cfg.head_width);
        let [c1, c2, c3] = cfg.backbone_widths;
        let down = |in_ch, out_ch| ConvSpec { in_ch, out_ch, kernel: 4, stride: 2, pad: 1 };
        let backbone = [
            ConvNormRelu::new(s, r, "backbone.0", down(3, c1)),
            ConvNormRelu::new(s, r, "backbone.1", down(c1, c2)),
            ConvNormRelu::new(s, r, "backbone.2", down(c2, c3)),
            ConvNormRelu::new(s, r, "backbone.3", down(c3, n)),
        ];
        let emb = EmbeddingSet::new(s, r, "embed", &cfg.encoding, cfg.embedding_flags());
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(s, r, &format!("transformer.enc{i}"), n, cfg.heads, cfg.ffn_width))
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(s, r, &format!("transformer.dec{i}"), n, cfg.heads, cfg.ffn_width))
            .collect();
        let queries = s.init("transformer.queries", &[cfg.num_queries(), n], Init::Normal { std: 1.0 }, r);
        let gmsp = cfg.use_gmsp.then(|| Gmsp::new(s, r, n, hw, k, cfg.score_bias_init));
        let omra = Omra::new(s, r, cfg);
        let score = HeadOutput::Score { bias: cfg.score_bias_init };
        let loc_head = MapHead::new(s, r, "head.loc", 1, hw, 1, score);
        let score = HeadOutput::Score { bias: cfg.score_bias_init };
        let kloc_head = MapHead::new(s, r, "head.kloc", k, hw, k, score);
        let bbox_head = MapHead::new(s, r, "head.bbox", 1, hw, 4, HeadOutput::Offsets { scale: cfg.bbox_offset_scale });
        let pos = nn::sinusoidal_2d(cfg.encoding.feat_h, cfg.encoding.feat_w, n);
        let model = StepModel {
            cfg: cfg.clone(),
            backbone,
            emb,
            encoder,
            decoder,
            queries,
            gmsp,
            omra,
            loc_head,
            kloc_head,
            bbox_head,
            pos,
        };
        Ok((model, store))
    }

    fn grid(&self) -> (usize, usize) {
        (self.cfg.encoding.feat_h, self.cfg.encoding.feat_w)
    }

    /// Image `3×H_i×W_i` in `[0, 1]` to features `n×H_f×W_f`.
    pub fn backbone_forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let e = &self.cfg.encoding;
        let want = [3, e.image_h(), e.image_w()];
        if image.shape() != want {
            return Err(TensorError::mismatch("backbone", image.shape(), &want));
        }
        let centred = Tensor::from_fn(image.shape(), |i| image.data()[i] - 0.5);
        let x = g.constant(centred);
        nn::run_stack(&self.backbone, g, store, x)
    }

    /// Backbone on an already-centred image held in a graph variable.
    pub fn backbone_from_var(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        nn::run_stack(&self.backbone, g, store, image)
    }

    pub fn gmsp_forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gmsp =
            self.gmsp.as_ref().ok_or_else(|| TensorError::dim("gmsp", "model built without the soft-map module"))?;
        gmsp.forward(g, store, x)
    }

    /// Soft map on a path that sends no gradient to the module or to its input.
    pub fn gmsp_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Option<Var>> {
        if self.gmsp.is_none() {
            return Ok(None);
        }
        let x = g.detach(x);
        let y = self.gmsp_forward(g, store, x)?;
        Ok(Some(g.detach(y)))
    }

    fn tokens(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let (h, w) = self.grid();
        let flat = g.reshape(f, &[self.cfg.n(), h * w])?;
        let t = g.transpose(flat)?;
        let pos = g.constant(self.pos.clone());
        g.add(t, pos)
    }

    /// Encoder over all train and test tokens, decoder over the filter queries.
    pub fn transformer_predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_train: &[Var],
        f_test: Var,
    ) -> Result<(Var, ModelWeights)> {
        if f_train.is_empty() {
            return Err(TensorError::dim("transformer", "at least one train frame is required"));
        }
        let (h, w) = self.grid();
        let (n, k) = (self.cfg.n(), self.cfg.k());
        let mut parts = Vec::with_capacity(f_train.len() + 1);
        for &f in f_train.iter().chain(core::iter::once(&f_test)) {
            if g.shape(f) != [n, h, w] {
                return Err(TensorError::mismatch("transformer", g.shape(f), &[n, h, w]));
            }
            parts.push(self.tokens(g, f)?);
        }
        let mut mem = g.concat(&parts, 0)?;
        for layer in &self.encoder {
            mem = layer.forward(g, store, mem)?;
        }
        let test_rows = g.narrow(mem, 0, f_train.len() * h * w, h * w)?;
        let z = g.transpose(test_rows)?;
        let z_test = g.reshape(z, &[n, h, w])?;
        let mut q = g.param(store, self.queries);
        for layer in &self.decoder {
            q = layer.forward(g, store, q, mem)?;
        }
        let weights = ModelWeights {
            w_loc: g.narrow(q, 0, 0, 1)?,
            w_br: g.narrow(q, 0, 1, 1)?,
            w_kloc: g.narrow(q, 0, 2, k)?,
            w_kp: g.narrow(q, 0, 2 + k, k)?,
        };
        Ok((z_test, weights))
    }

    /// Per-cell inner products of filter rows `[R×n]` with `z[n×H×W]`, giving `R×H×W`.
    pub fn attention_map(&self, g: &mut Graph, filters: Var, z: Var) -> Result<Var> {
        let (h, w) = self.grid();
        let zf = g.reshape(z, &[self.cfg.n(), h * w])?;
        let a = g.matmul(filters, zf)?;
        let r = g.shape(filters)[0];
        g.reshape(a, &[r, h, w])
    }

    /// Heads applied to the test representation.
    pub fn heads_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_test: Var,
        weights: &ModelWeights,
        gmsp_test: Option<Var>,
    ) -> Result<(Var, Var, Var, Var)> {
        let a_loc = self.attention_map(g, weights.w_loc, z_test)?;
        let a_br = self.attention_map(g, weights.w_br, z_test)?;
        let a_kloc = self.attention_map(g, weights.w_kloc, z_test)?;
        let a_kp = self.attention_map(g, weights.w_kp, z_test)?;
        let bbox_gm = self.loc_head.forward(g, store, a_loc)?;
        let bbox_om = self.bbox_head.forward(g, store, a_br)?;
        let kp_gm = self.kloc_head.forward(g, store, a_kloc)?;
        let kp_om = self.omra.forward(g, store, a_kp, gmsp_test)?;
        Ok((bbox_gm, bbox_om, kp_gm, kp_om))
    }

    /// Predicts test-frame maps from already-encoded train frames and test features.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        train: &[EncodedFrame<'_>],
        x_test: Var,
    ) -> Result<NetworkOutputs> {
        let gmsp_test = self.gmsp_frozen(g, store, x_test)?;
        self.predict_with(g, store, train, x_test, gmsp_test)
    }

    /// [`StepModel::predict`] with the test soft map supplied by the caller.
    pub fn predict_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        train: &[EncodedFrame<'_>],
        x_test: Var,
        gmsp_test: Option<Var>,
    ) -> Result<NetworkOutputs> {
        if gmsp_test.is_some() != self.gmsp.is_some() {
            return Err(TensorError::dim(
                "predict",
                "test soft map must be given exactly when the model has the soft-map module",
            ));
        }
        let mut f_train = Vec::with_capacity(train.len());
        for t in train {
            f_train.push(self.emb.compose_train(g, store, t.features, t.state)?);
        }
        let f_test = self.emb.compose_test(g, store, x_test)?;
        let (z_test, weights) = self.transformer_predict(g, store, &f_train, f_test)?;
        let (bbox_gm, bbox_om, kp_gm, kp_om) = self.heads_forward(g, store, z_test, &weights, gmsp_test)?;
        Ok(NetworkOutputs { bbox_gm, bbox_om, kp_gm, kp_om, gmsp_train: Vec::new(), gmsp_test, weights, z_test })
    }

    /// Target state of a train frame whose box is known. With the soft-map module the
    /// keypoints enter through the frame's (detached) soft map; otherwise through the given
    /// keypoint maps.
    pub fn train_state(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        maps: &TargetStateMaps,
    ) -> Result<(FrameState, Option<Var>)> {
        if self.gmsp.is_some() {
            let soft = self.gmsp_forward(g, store, x)?;
            let value = g.value(soft).clone();
            let state = FrameState {
                bbox_om: maps.bbox_om.clone(),
                bbox_gm: maps.bbox_gm.clone(),
                keypoints: KeypointState::Soft(value),
            };
            Ok((state, Some(soft)))
        } else {
            Ok((FrameState::from_maps(maps), None))
        }
    }

    /// The full training forward pass over annotated train frames and a test image.
    pub fn full_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        train: &[TrainFrame<'_>],
        test_image: &Tensor,
    ) -> Result<NetworkOutputs> {
        self.forward_with_soft(g, store, train, test_image, None)
    }

    /// [`StepModel::full_forward`] where `frozen` optionally replaces the values of the
    /// detached soft maps (one per train frame, then the test frame). Holding them fixed
    /// lets finite differences see exactly the gradient paths the training pass keeps.
    pub fn forward_with_soft(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        train: &[TrainFrame<'_>],
        test_image: &Tensor,
        frozen: Option<(&[Tensor], &Tensor)>,
    ) -> Result<NetworkOutputs> {
        if let Some((t, _)) = frozen {
            if t.len() != train.len() || self.gmsp.is_none() {
                return Err(TensorError::dim(
                    "forward",
                    "frozen soft maps need the soft-map module and one map per train frame",
                ));
            }
        }
        let mut feats = Vec::with_capacity(train.len());
        let mut states = Vec::with_capacity(train.len());
        let mut soft = Vec::new();
        for (i, t) in train.iter().enumerate() {
            let x = self.backbone_forward(g, store, t.image)?;
            let (mut state, s) = self.train_state(g, store, x, t.maps)?;
            if let Some((maps, _)) = frozen {
                state.keypoints = KeypointState::Soft(maps[i].clone());
            }
            feats.push(x);
            states.push(state);
            soft.extend(s);
        }
        let x_test = self.backbone_forward(g, store, test_image)?;
        let gmsp_test = match frozen {
            Some((_, t)) => Some(g.constant(t.clone())),
            None => self.gmsp_frozen(g, store, x_test)?,
        };
        let encoded: Vec<EncodedFrame<'_>> =
            feats.iter().zip(&states).map(|(&features, state)| EncodedFrame { features, state }).collect();
        let mut out = self.predict_with(g, store, &encoded, x_test, gmsp_test)?;
        out.gmsp_train = soft;
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{Annotation, BBox, Keypoint};
    use crate::tensor::gradcheck::{grad_check, grad_check_params};
    use alloc::vec;
    use rand::Rng;

    /// Small model on a 6×6 grid (96×96 images).
    pub(crate) fn tiny_config(use_gmsp: bool) -> ModelConfig {
        ModelConfig {
            encoding: EncodingConfig { stride: 16, num_keypoints: 2, channels: 8, sigma: 1.0, feat_h: 6, feat_w: 6 },
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_width: 16,
            backbone_widths: [3, 4, 6],
            head_width: 4,
            use_gmsp,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let e = &cfg.encoding;
        Tensor::from_fn(&[3, e.image_h(), e.image_w()], |_| r.gen_range(0.0..1.0))
    }

    pub(crate) fn annotation(shift: f64) -> Annotation {
        Annotation {
            target_id: 1,
            bbox: BBox::new(20.0 + shift, 24.0, 70.0 + shift, 80.0),
            keypoints: vec![Keypoint::new(30.0 + shift, 40.0, 2), Keypoint::new(60.0 + shift, 66.0, 2)],
        }
    }

    #[test]
    fn full_size_shapes() {
        let cfg = ModelConfig {
            encoding: EncodingConfig { num_keypoints: 17, ..EncodingConfig::default() },
            ..ModelConfig::default()
        };
        let (model, store) = StepModel::new(&cfg, 0).unwrap();
        let mut g = Graph::inference();
        let img = random_image(&cfg, 1);
        let x = model.backbone_forward(&mut g, &store, &img).unwrap();
        assert_eq!(g.shape(x), &[64, 18, 18]);
        let soft = model.gmsp_forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(soft), &[17, 18, 18]);
        let (z, w) = model.transformer_predict(&mut g, &store, &[x, x], x).unwrap();
        assert_eq!(g.shape(z), &[64, 18, 18]);
        assert_eq!(g.shape(w.w_kloc), &[17, 64]);
        assert_eq!(g.shape(w.w_kp), &[17, 64]);
        assert_eq!(g.shape(w.w_loc), &[1, 64]);
        let (bgm, bom, kgm, kom) = model.heads_forward(&mut g, &store, z, &w, Some(soft)).unwrap();
        assert_eq!(g.shape(bgm), &[1, 18, 18]);
        assert_eq!(g.shape(bom), &[4, 18, 18]);
        assert_eq!(g.shape(kgm), &[17, 18, 18]);
        assert_eq!(g.shape(kom), &[34, 18, 18]);
        for v in [bgm, kgm, soft] {
            assert!(g.value(v).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn wrong_image_extent_is_rejected() {
        let cfg = tiny_config(true);
        let (model, store) = StepModel::new(&cfg, 0).unwrap();
        let mut g = Graph::inference();
        let bad = Tensor::zeros(&[3, 64, 96]);
        assert!(matches!(model.backbone_forward(&mut g, &store, &bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config(true);
        c.encoding.feat_h = 4;
        assert!(c.validate().is_err());
        c.use_gmsp = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_filters_give_zero_attention() {
        let cfg = tiny_config(true);
        let (model, _) = StepModel::new(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_fn(&[8, 6, 6], |i| i as f64 * 0.1 - 3.0));
        let w = g.constant(Tensor::zeros(&[2, 8]));
        let a = model.attention_map(&mut g, w, z).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
    }

    fn run_full(model: &StepModel, store: &ParamStore, g: &mut Graph, swap: bool) -> NetworkOutputs {
        let cfg = &model.cfg;
        let (a, b) = (annotation(0.0), annotation(4.0));
        let ma = TargetStateMaps::new(&a, core::slice::from_ref(&a), &cfg.encoding);
        let mb = TargetStateMaps::new(&b, core::slice::from_ref(&b), &cfg.encoding);
        let (ia, ib, it) = (random_image(cfg, 1), random_image(cfg, 2), random_image(cfg, 3));
        let mut train = vec![TrainFrame { image: &ia, maps: &ma }, TrainFrame { image: &ib, maps: &mb }];
        if swap {
            train.swap(0, 1);
        }
        model.full_forward(g, store, &train, &it).unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_duplicate_consistent() {
        let cfg = tiny_config(true);
        let (model, store) = StepModel::new(&cfg, 4).unwrap();
        let mut g1 = Graph::inference();
        let o1 = run_full(&model, &store, &mut g1, false);
        let mut g2 = Graph::inference();
        let o2 = run_full(&model, &store, &mut g2, false);
        assert_eq!(g1.value(o1.kp_om), g2.value(o2.kp_om));
        assert_eq!(g1.value(o1.bbox_gm), g2.value(o2.bbox_gm));

        // identical train frames in either order give identical outputs
        let a = annotation(0.0);
        let ma = TargetStateMaps::new(&a, core::slice::from_ref(&a), &cfg.encoding);
        let (ia, it) = (random_image(&cfg, 1), random_image(&cfg, 3));
        let mut g = Graph::inference();
        let x = model.backbone_forward(&mut g, &store, &ia).unwrap();
        let (state, _) = model.train_state(&mut g, &store, x, &ma).unwrap();
        let xt = model.backbone_forward(&mut g, &store, &it).unwrap();
        let pair = [EncodedFrame { features: x, state: &state }, EncodedFrame { features: x, state: &state }];
        let o = model.predict(&mut g, &store, &pair, xt).unwrap();
        let full = model.full_forward(&mut g, &store, &[TrainFrame { image: &ia, maps: &ma }; 2], &it).unwrap();
        assert_eq!(g.value(o.kp_gm), g.value(full.kp_gm));
        assert_eq!(g.value(o.bbox_om), g.value(full.bbox_om));
    }

    #[test]
    fn swapping_train_frames_only_reorders_sums() {
        // train tokens carry no frame index, so attention is symmetric in the train frames
        let cfg = tiny_config(true);
        let (model, store) = StepModel::new(&cfg, 4).unwrap();
        let mut g3 = Graph::inference();
        let o3 = run_full(&model, &store, &mut g3, true);
        let mut g4 = Graph::inference();
        let o4 = run_full(&model, &store, &mut g4, false);
        // distinct frames: order may matter only through floating-point summation order
        for (a, b) in g3.value(o3.bbox_gm).data().iter().zip(g4.value(o4.bbox_gm).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn omra_sends_gradient_into_both_towers() {
        let cfg = tiny_config(true);
        let (model, mut store) = StepModel::new(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let att = g.input(Tensor::from_fn(&[2, 6, 6], |_| r.gen_range(-1.0..1.0)));
        let soft = g.input(Tensor::from_fn(&[2, 6, 6], |_| r.gen_range(0.0..1.0)));
        let y = model.omra.forward(&mut g, &store, att, Some(soft)).unwrap();
        let p = g.constant(Tensor::from_fn(&[4, 6, 6], |_| r.gen_range(-1.0..1.0)));
        let y = g.mul(y, p).unwrap();
        let l = g.sum(y);
        g.backward(l, &mut store).unwrap();
        assert!(g.grad(att).unwrap().max_abs() > 0.0);
        assert!(g.grad(soft).unwrap().max_abs() > 0.0);
    }

    fn proj_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = g.constant(Tensor::from_fn(g.shape(y), |_| r.gen_range(-1.0..1.0)));
        let m = g.mul(y, p)?;
        Ok(g.sum(m))
    }

    #[test]
    fn backbone_input_gradient_matches_finite_differences() {
        let mut cfg = tiny_config(false);
        cfg.encoding.feat_h = 2;
        cfg.encoding.feat_w = 2;
        let (model, store) = StepModel::new(&cfg, 2).unwrap();
        let img = random_image(&cfg, 5);
        let report = grad_check(
            |g, x| {
                let y = model.backbone_from_var(g, &store, x)?;
                proj_loss(g, y, 1)
            },
            &img,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn blocks_pass_parameter_gradient_checks() {
        let cfg = tiny_config(true);
        let (model, mut store) = StepModel::new(&cfg, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::from_fn(&[8, 6, 6], |_| r.gen_range(-1.0..1.0));
        let w1 = Tensor::from_fn(&[1, 8], |_| r.gen_range(-1.0..1.0));
        let wk = Tensor::from_fn(&[2, 8], |_| r.gen_range(-1.0..1.0));
        let soft = Tensor::from_fn(&[2, 6, 6], |_| r.gen_range(0.0..1.0));
        type Block<'a> = &'a dyn Fn(&mut Graph, &ParamStore) -> Result<Var>;
        let gmsp = |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(z.clone());
            let y = model.gmsp_forward(g, s, x)?;
            proj_loss(g, y, 2)
        };
        let loc = |g: &mut Graph, s: &ParamStore| {
            let (zv, w) = (g.constant(z.clone()), g.constant(w1.clone()));
            let a = model.attention_map(g, w, zv)?;
            let y = model.loc_head.forward(g, s, a)?;
            proj_loss(g, y, 3)
        };
        let kloc = |g: &mut Graph, s: &ParamStore| {
            let (zv, w) = (g.constant(z.clone()), g.constant(wk.clone()));
            let a = model.attention_map(g, w, zv)?;
            let y = model.kloc_head.forward(g, s, a)?;
            proj_loss(g, y, 4)
        };
        let bbox = |g: &mut Graph, s: &ParamStore| {
            let (zv, w) = (g.constant(z.clone()), g.constant(w1.clone()));
            let a = model.attention_map(g, w, zv)?;
            let y = model.bbox_head.forward(g, s, a)?;
            proj_loss(g, y, 5)
        };
        let omra = |g: &mut Graph, s: &ParamStore| {
            let (zv, w) = (g.constant(z.clone()), g.constant(wk.clone()));
            let a = model.attention_map(g, w, zv)?;
            let sv = g.constant(soft.clone());
            let y = model.omra.forward(g, s, a, Some(sv))?;
            proj_loss(g, y, 6)
        };
        let transformer = |g: &mut Graph, s: &ParamStore| {
            let zv = g.constant(z.clone());
            let (zt, w) = model.transformer_predict(g, s, &[zv, zv], zv)?;
            let a = proj_loss(g, zt, 7)?;
            let b = proj_loss(g, w.w_kp, 8)?;
            g.add(a, b)
        };
        let blocks: [(&str, Block); 6] = [
            ("gmsp", &gmsp),
            ("loc", &loc),
            ("kloc", &kloc),
            ("bbox", &bbox),
            ("omra", &omra),
            ("transformer", &transformer),
        ];
        for (name, f) in blocks {
            let report = grad_check_params(&mut store, f, 1e-5, 1e-4, 3, 0).unwrap();
            assert!(report.passed(), "{name}: {report:?}");
        }
    }
}
