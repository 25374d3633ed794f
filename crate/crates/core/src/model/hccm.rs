use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{MapExtents, ModelConfig, Variant};
use crate::data::{Behavior, ImageCatalog, Impression};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::nn::{batched_attention, EmbeddingTable, Mlp};
use crate::tensor::{
    conv2d_forward, Activation, ConvGeom, EmptyRows, Graph, Padding, ParamId, ParamStore, PoolKind, Tensor, Var,
};

const EMBED_INIT: f64 = 0.05;
const TABLE_SEED: u64 = 0x7ab1_e5ee_d000_0000;

/// Source of frozen-CNN feature maps by pic id.
pub trait FeatureSource {
    fn feature_map(&self, pic_id: u64) -> Result<Cow<'_, Tensor>>;
}

/// Source of final per-image representations by pic id.
pub trait RepresentationSource {
    fn representation(&self, pic_id: u64) -> Result<&[f64]>;
    fn dim(&self) -> usize;
}

/// Where the visual path gets its inputs.
#[derive(Clone, Copy)]
pub enum VisualInput<'a> {
    /// Run the visual stack on frozen feature maps.
    Maps(&'a dyn FeatureSource),
    /// Skip every CNN and read precomputed representations.
    Representations(&'a dyn RepresentationSource),
}

/// Computes feature maps from catalog images on every request.
pub struct OnTheFly<'a> {
    pub model: &'a HccmModel,
    pub catalog: &'a ImageCatalog,
}

impl FeatureSource for OnTheFly<'_> {
    fn feature_map(&self, pic_id: u64) -> Result<Cow<'_, Tensor>> {
        let entry = self
            .catalog
            .get(pic_id)
            .ok_or_else(|| Error::Validation(format!("pic id {pic_id} not in catalog")))?;
        Ok(Cow::Owned(self.model.fixed_cnn_forward(&entry.image)?))
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        frozen: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let limit = (6.0 / (k * k * cin) as f64).sqrt();
        let data = (0..k * k * cin * cout).map(|_| rng.random_range(-limit..=limit)).collect();
        let kernel = store.add(format!("{name}.kernel"), Tensor::new(&[k, k, cin, cout], data)?, frozen);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), frozen);
        Ok(ConvLayer {
            kernel,
            bias,
            stride,
            padding: Padding::Same,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.kernel)?;
        let b = g.param(self.bias)?;
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        let y = g.add_bias(y, b)?;
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct SparseEmbeddings {
    user: EmbeddingTable,
    context: EmbeddingTable,
    item: EmbeddingTable,
    pic: EmbeddingTable,
    category: EmbeddingTable,
}

#[derive(Clone, Debug)]
struct HybridCnn {
    attn_mlp: Mlp,
    prior: Option<ParamId>,
    convs: [ConvLayer; 2],
}

/// Parameters and forward pass of one model variant.
#[derive(Clone, Debug)]
pub struct HccmModel {
    config: ModelConfig,
    variant: Variant,
    store: ParamStore,
    emb: SparseEmbeddings,
    fixed: Vec<ConvLayer>,
    hybrid: Option<HybridCnn>,
    head: Mlp,
}

struct VisualBatch {
    cand: Vec<usize>,
    behaviors: Vec<usize>,
}

impl HccmModel {
    /// Declares parameters in checkpoint order: sparse embeddings, frozen CNN,
    /// channel-attention MLP, category prior, trainable CNN, head.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));
        let size = 1usize << config.table_bits;
        let d = config.embed_dim;
        let mut table = |store: &mut ParamStore, name: &str, i: u64| {
            EmbeddingTable::new(store, name, size, d, derive_seed(TABLE_SEED, i), EMBED_INIT, &mut rng)
        };
        let emb = SparseEmbeddings {
            user: table(&mut store, "emb.user", 0)?,
            context: table(&mut store, "emb.context", 1)?,
            item: table(&mut store, "emb.item", 2)?,
            pic: table(&mut store, "emb.pic", 3)?,
            category: table(&mut store, "emb.category", 4)?,
        };

        let fmap = config.feature_extents();
        let mut fixed = Vec::new();
        if variant.has_visual() {
            let mut frozen_rng = ChaCha8Rng::seed_from_u64(config.fixed_seed);
            let mut cin = config.image_channels;
            for (i, &cout) in config.fixed_channels.iter().enumerate() {
                fixed.push(ConvLayer::new(
                    &mut store,
                    &format!("fixed.{i}"),
                    config.fixed_kernel,
                    cin,
                    cout,
                    config.fixed_stride,
                    true,
                    &mut frozen_rng,
                )?);
                cin = cout;
            }
        }

        let hybrid = if variant.is_hybrid() {
            let c = fmap.channels;
            let prior_width = if variant.uses_prior() { fmap.area() } else { 0 };
            let attn_mlp = Mlp::new(
                &mut store,
                "channel_attn",
                &[c + prior_width, config.attn_hidden(), c],
                &[Some(Activation::Relu), None],
                &mut rng,
            )?;
            let prior = variant
                .uses_prior()
                .then(|| store.add("category_prior", Tensor::zeros(&[config.num_categories, fmap.area()]), false));
            let cin = c + usize::from(variant.uses_prior());
            let k = config.trainable_kernel;
            let convs = [
                ConvLayer::new(&mut store, "trainable.0", k, cin, config.trainable_hidden, 1, false, &mut rng)?,
                ConvLayer::new(&mut store, "trainable.1", k, config.trainable_hidden, config.repr_dim, 1, false, &mut rng)?,
            ];
            Some(HybridCnn { attn_mlp, prior, convs })
        } else {
            None
        };

        let visual_width = match variant {
            Variant::Din => 0,
            Variant::DinFixedCnn => 3 * fmap.channels,
            Variant::Hcm | Variant::Hccm => 3 * config.repr_dim,
        };
        let head_in = d * (config.context_fields + 6) + visual_width;
        let mut dims = vec![head_in];
        dims.extend(&config.hidden);
        dims.push(1);
        let mut acts = vec![Some(Activation::Relu); config.hidden.len()];
        acts.push(None);
        let head = Mlp::new(&mut store, "head", &dims, &acts, &mut rng)?;
        store.round_to_f32();

        Ok(HccmModel {
            config,
            variant,
            store,
            emb,
            fixed,
            hybrid,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn feature_extents(&self) -> MapExtents {
        self.config.feature_extents()
    }

    /// Width of the per-image representation the visual path produces.
    pub fn repr_dim(&self) -> Option<usize> {
        match self.variant {
            Variant::Din => None,
            Variant::DinFixedCnn => Some(self.feature_extents().channels),
            Variant::Hcm | Variant::Hccm => Some(self.config.repr_dim),
        }
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn channel_attention_mlp(&self) -> Option<&Mlp> {
        self.hybrid.as_ref().map(|h| &h.attn_mlp)
    }

    pub fn trainable_convs(&self) -> Option<&[ConvLayer; 2]> {
        self.hybrid.as_ref().map(|h| &h.convs)
    }

    pub fn fixed_convs(&self) -> &[ConvLayer] {
        &self.fixed
    }

    pub fn prior_param(&self) -> Option<ParamId> {
        self.hybrid.as_ref().and_then(|h| h.prior)
    }

    /// Checksum over the frozen CNN weights only.
    pub fn fixed_checksum(&self) -> u64 {
        self.store.checksum_where(|p| p.frozen)
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Frozen stack applied outside any tape. Output is rounded to `f32`
    /// precision, the precision at which feature maps are stored.
    pub fn fixed_cnn_forward(&self, image: &Tensor) -> Result<Tensor> {
        if self.fixed.is_empty() {
            return Err(Error::UnsupportedVariant(self.variant.to_string()));
        }
        let ext = self.config.image_extents();
        if image.shape() != ext.shape() {
            return Err(Error::shape(format!(
                "image shape {:?} does not match configured {:?}",
                image.shape(),
                ext.shape()
            )));
        }
        let mut x = image.clone();
        for layer in &self.fixed {
            let k = self.store.value(layer.kernel);
            let b = self.store.value(layer.bias).data();
            let geom = ConvGeom::new(x.shape(), k.shape(), layer.stride, layer.padding)?;
            let mut out = conv2d_forward(&geom, x.data(), k.data());
            for row in out.chunks_exact_mut(b.len()) {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v = (*v + bias).max(0.0);
                }
            }
            x = Tensor::new(&geom.out_shape(), out)?;
        }
        let data = x.into_data().into_iter().map(|v| v as f32 as f64).collect();
        Tensor::new(&self.feature_extents().shape(), data)
    }

    fn hybrid(&self) -> Result<&HybridCnn> {
        self.hybrid
            .as_ref()
            .ok_or_else(|| Error::UnsupportedVariant(format!("{} has no trainable CNN", self.variant)))
    }

    /// Learnable prior vectors `[U, w*h]` for the given categories (HCCM only).
    pub fn prior_vectors(&self, g: &mut Graph, categories: &[u32]) -> Result<Option<Var>> {
        let Some(prior) = self.hybrid()?.prior else {
            return Ok(None);
        };
        let rows = categories
            .iter()
            .map(|&c| self.check_category(c).map(|_| c as usize))
            .collect::<Result<Vec<_>>>()?;
        g.embed(prior, &rows).map(Some)
    }

    fn check_category(&self, c: u32) -> Result<()> {
        if c as usize >= self.config.num_categories {
            return Err(Error::Validation(format!(
                "category {c} outside 0..{}",
                self.config.num_categories
            )));
        }
        Ok(())
    }

    /// Channel gate `M = sigmoid(MLP([avg(F), v]) + MLP([max(F), v]))`, shape `[U, c]`.
    pub fn channel_attention(&self, g: &mut Graph, fmaps: Var, prior: Option<Var>) -> Result<Var> {
        let mlp = &self.hybrid()?.attn_mlp;
        let area = self.feature_extents().area();
        if let Some(v) = prior {
            let rows = g.shape(fmaps)[0];
            if g.shape(v) != [rows, area] {
                return Err(Error::shape(format!(
                    "prior shape {:?} does not match [{rows}, {area}]",
                    g.shape(v)
                )));
            }
        }
        let branch = |g: &mut Graph, kind: PoolKind| -> Result<Var> {
            let pooled = g.global_pool(kind, fmaps)?;
            let input = match prior {
                Some(v) => g.concat(&[pooled, v], 1)?,
                None => pooled,
            };
            mlp.forward(g, input)
        };
        let avg = branch(g, PoolKind::Avg)?;
        let max = branch(g, PoolKind::Max)?;
        let logits = g.add(avg, max)?;
        g.sigmoid(logits)
    }

    /// Gated map with the prior reshaped to one extra channel: `[U, h, w, c(+1)]`.
    pub fn fuse_prior(&self, g: &mut Graph, fmaps: Var, gate: Var, prior: Option<Var>) -> Result<Var> {
        let gated = g.channel_scale(fmaps, gate)?;
        let Some(v) = prior else {
            return Ok(gated);
        };
        let [u, h, w, _] = *g.shape(fmaps) else {
            return Err(Error::shape("fuse_prior expects [U,h,w,c] maps"));
        };
        if g.shape(v) != [u, h * w] {
            return Err(Error::shape(format!("prior shape {:?} does not match [{u}, {}]", g.shape(v), h * w)));
        }
        let plane = g.reshape(v, &[u, h, w, 1])?;
        g.concat(&[gated, plane], 3)
    }

    /// Trainable conv stack then global average pooling: `[U, dv]`.
    pub fn trainable_cnn_forward(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let [a, b] = &self.hybrid()?.convs;
        let h = a.forward(g, fused)?;
        let h = b.forward(g, h)?;
        g.global_pool(PoolKind::Avg, h)
    }

    /// Full hybrid visual path for `[U, h, w, c]` frozen maps.
    pub fn hybrid_representations(&self, g: &mut Graph, fmaps: Var, categories: &[u32]) -> Result<Var> {
        let prior = self.prior_vectors(g, categories)?;
        let gate = self.channel_attention(g, fmaps, prior)?;
        let fused = self.fuse_prior(g, fmaps, gate, prior)?;
        self.trainable_cnn_forward(g, fused)
    }

    /// Per-image representations `[U, dv]` computed from frozen maps.
    pub fn representations(&self, g: &mut Graph, images: &[(u64, u32)], source: &dyn FeatureSource) -> Result<Var> {
        let fmap = self.feature_extents();
        let mut data = Vec::with_capacity(images.len() * fmap.len());
        for &(pic, _) in images {
            let m = source.feature_map(pic)?;
            if m.shape() != fmap.shape() {
                return Err(Error::shape(format!(
                    "feature map for pic {pic} has shape {:?}, expected {:?}",
                    m.shape(),
                    fmap.shape()
                )));
            }
            data.extend_from_slice(m.data());
        }
        let maps = g.constant(Tensor::new(&[images.len(), fmap.height, fmap.width, fmap.channels], data)?)?;
        match self.variant {
            Variant::Din => Err(Error::UnsupportedVariant(self.variant.to_string())),
            Variant::DinFixedCnn => g.global_pool(PoolKind::Avg, maps),
            Variant::Hcm | Variant::Hccm => {
                let cats: Vec<u32> = images.iter().map(|&(_, c)| c).collect();
                self.hybrid_representations(g, maps, &cats)
            }
        }
    }

    /// Attention of the candidate vector over behavior vectors; zero vector
    /// when there are no behaviors.
    pub fn aggregate_behaviors(&self, g: &mut Graph, user_vecs: Option<Var>, item_vec: Var, mask: &[bool]) -> Result<Var> {
        let &[dv] = g.shape(item_vec) else {
            return Err(Error::shape("item vector must be one-dimensional"));
        };
        let Some(keys) = user_vecs else {
            return g.constant(Tensor::zeros(&[dv]));
        };
        let &[n, kd] = g.shape(keys) else {
            return Err(Error::shape("behavior vectors must be [n, dv]"));
        };
        if kd != dv || mask.len() != n {
            return Err(Error::shape(format!("behaviors [{n},{kd}] vs item {dv}, mask {}", mask.len())));
        }
        let q = g.reshape(item_vec, &[1, dv])?;
        let k = g.reshape(keys, &[1, n, dv])?;
        let out = batched_attention(g, q, k, k, mask, EmptyRows::Zero)?;
        g.reshape(out, &[dv])
    }

    fn validate(&self, imp: &Impression) -> Result<()> {
        if imp.context_ids.len() != self.config.context_fields {
            return Err(Error::Validation(format!(
                "expected {} context ids, got {}",
                self.config.context_fields,
                imp.context_ids.len()
            )));
        }
        self.check_category(imp.category)?;
        for b in &imp.behaviors {
            self.check_category(b.category)?;
        }
        Ok(())
    }

    /// Click probabilities `[B]` for a batch of impressions.
    pub fn forward(&self, g: &mut Graph, batch: &[&Impression], visual: Option<VisualInput<'_>>) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for imp in batch {
            self.validate(imp)?;
        }
        let b = batch.len();
        let d = self.config.embed_dim;
        let limit = self.config.max_behaviors;
        let n = batch.iter().map(|s| s.recent_behaviors(limit).len()).max().unwrap_or(0).max(1);
        let mut mask = vec![false; b * n];
        for (i, imp) in batch.iter().enumerate() {
            for j in 0..imp.recent_behaviors(limit).len() {
                mask[i * n + j] = true;
            }
        }
        let padded = |f: &mut dyn FnMut(&Behavior) -> usize| -> Vec<usize> {
            let mut rows = vec![0; b * n];
            for (i, imp) in batch.iter().enumerate() {
                for (j, beh) in imp.recent_behaviors(limit).iter().enumerate() {
                    rows[i * n + j] = f(beh);
                }
            }
            rows
        };

        let e = &self.emb;
        let ids = |f: fn(&Impression) -> u64| batch.iter().map(|s| f(s)).collect::<Vec<_>>();
        let mut parts = vec![e.user.lookup(g, &ids(|s| s.user_id))?];
        if self.config.context_fields > 0 {
            let rows: Vec<usize> = batch
                .iter()
                .flat_map(|s| s.context_ids.iter().enumerate().map(|(f, &id)| e.context.field_row(f, id)))
                .collect();
            let ctx = g.embed(e.context.param, &rows)?;
            parts.push(g.reshape(ctx, &[b, self.config.context_fields * d])?);
        }
        parts.push(e.item.lookup(g, &ids(|s| s.item_id))?);
        let cand_pic = e.pic.lookup(g, &ids(|s| s.pic_id))?;
        let cand_cat = e.category.lookup(g, &ids(|s| s.category as u64))?;
        parts.push(cand_pic);
        parts.push(cand_cat);

        let beh_pic = g.embed(e.pic.param, &padded(&mut |beh| e.pic.row(beh.pic_id)))?;
        let beh_cat = g.embed(e.category.param, &padded(&mut |beh| e.category.row(beh.category as u64)))?;
        let keys = g.concat(&[beh_pic, beh_cat], 1)?;
        let keys = g.reshape(keys, &[b, n, 2 * d])?;
        let query = g.concat(&[cand_pic, cand_cat], 1)?;
        parts.push(batched_attention(g, query, keys, keys, &mask, EmptyRows::Zero)?);

        if self.variant.has_visual() {
            let visual = visual.ok_or_else(|| {
                Error::Contract(format!("{} needs feature maps or a representation table", self.variant))
            })?;
            let mut unique: Vec<(u64, u32)> = Vec::new();
            let mut index: HashMap<(u64, u32), usize> = HashMap::new();
            let mut slot = |key: (u64, u32)| {
                *index.entry(key).or_insert_with(|| {
                    unique.push(key);
                    unique.len() - 1
                })
            };
            let cand_slots: Vec<usize> = batch.iter().map(|s| slot((s.pic_id, s.category))).collect();
            let beh_slots = padded(&mut |beh| slot((beh.pic_id, beh.category)));
            let vb = VisualBatch {
                cand: cand_slots,
                behaviors: beh_slots,
            };
            let reps = match visual {
                VisualInput::Maps(source) => self.representations(g, &unique, source)?,
                VisualInput::Representations(table) => {
                    let dv = self.repr_dim().unwrap_or(0);
                    if table.dim() != dv {
                        return Err(Error::shape(format!(
                            "representation width {} does not match model width {dv}",
                            table.dim()
                        )));
                    }
                    let mut data = Vec::with_capacity(unique.len() * dv);
                    for &(pic, _) in &unique {
                        data.extend_from_slice(table.representation(pic)?);
                    }
                    g.constant(Tensor::new(&[unique.len(), dv], data)?)?
                }
            };
            let dv = g.shape(reps)[1];
            let cand = g.gather_rows(reps, &vb.cand)?;
            let beh = g.gather_rows(reps, &vb.behaviors)?;
            let beh = g.reshape(beh, &[b, n, dv])?;
            let x_v = batched_attention(g, cand, beh, beh, &mask, EmptyRows::Zero)?;
            let agreement = g.mul(x_v, cand)?;
            parts.extend([x_v, cand, agreement]);
        }

        let x = g.concat(&parts, 1)?;
        let logits = self.head.forward(g, x)?;
        let logits = g.reshape(logits, &[b])?;
        g.sigmoid(logits)
    }

    /// Single-impression click probability.
    pub fn predict(&self, imp: &Impression, visual: Option<VisualInput<'_>>) -> Result<f64> {
        let mut g = Graph::with_params(&self.store);
        let p = self.forward(&mut g, &[imp], visual)?;
        g.value(p).item()
    }

    /// Batch probabilities without recording gradients for later use.
    pub fn predict_batch(&self, batch: &[&Impression], visual: Option<VisualInput<'_>>) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let p = self.forward(&mut g, batch, visual)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Mean logloss of a labeled batch, recorded on `g`.
    pub fn loss(&self, g: &mut Graph, batch: &[&Impression], labels: &[f64], visual: Option<VisualInput<'_>>) -> Result<Var> {
        let p = self.forward(g, batch, visual)?;
        g.logloss(p, labels, crate::train::LOGLOSS_EPS)
    }
}
