//! Pre-norm vision transformer covering both the contrastive image tower
//! layout (`ln_pre`, QuickGELU, optional output projection) and the
//! ImageNet-classification layout (patch bias, exact GELU). The embedding is
//! the class token after the final layer norm.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Activation, LayerNormCache};
use super::params::{Grads, ParamId, ParamStore, Tensor};
use crate::preprocess::NormalizedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitFlavor {
    /// Contrastive image tower: `ln_pre`, QuickGELU, no patch bias.
    Contrastive,
    /// ImageNet classifier trunk: patch bias, exact GELU, no `ln_pre`.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub flavor: VitFlavor,
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Output projection width; `None` when the checkpoint has none.
    pub projection_dim: Option<usize>,
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn activation(&self) -> Activation {
        match self.flavor {
            VitFlavor::Contrastive => Activation::QuickGelu,
            VitFlavor::Classifier => Activation::Gelu,
        }
    }

    pub fn ln_eps(&self) -> f64 {
        match self.flavor {
            VitFlavor::Contrastive => 1e-5,
            VitFlavor::Classifier => 1e-6,
        }
    }

    pub fn layer_tags(&self) -> Vec<String> {
        (0..self.layers).map(|i| format!("block{i}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    ln1_w: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_w: ParamId,
    ln2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vit {
    pub cfg: VitConfig,
    patch_w: ParamId,
    patch_b: Option<ParamId>,
    cls: ParamId,
    pos: ParamId,
    ln_pre: Option<(ParamId, ParamId)>,
    blocks: Vec<BlockIds>,
    ln_post: (ParamId, ParamId),
    proj: Option<ParamId>,
}

pub(crate) fn block_param_names(i: usize) -> [String; 12] {
    let p = format!("transformer.resblocks.{i}");
    [
        format!("{p}.ln_1.weight"),
        format!("{p}.ln_1.bias"),
        format!("{p}.attn.in_proj_weight"),
        format!("{p}.attn.in_proj_bias"),
        format!("{p}.attn.out_proj.weight"),
        format!("{p}.attn.out_proj.bias"),
        format!("{p}.ln_2.weight"),
        format!("{p}.ln_2.bias"),
        format!("{p}.mlp.c_fc.weight"),
        format!("{p}.mlp.c_fc.bias"),
        format!("{p}.mlp.c_proj.weight"),
        format!("{p}.mlp.c_proj.bias"),
    ]
}

/// Expected `(name, shape)` of every parameter, in store order.
pub fn param_layout(cfg: &VitConfig, with_projection: bool) -> Vec<(String, Vec<usize>)> {
    let w = cfg.width;
    let mut out = vec![("conv1.weight".to_string(), vec![w, 3 * cfg.patch * cfg.patch])];
    if cfg.flavor == VitFlavor::Classifier {
        out.push(("conv1.bias".into(), vec![w]));
    }
    out.push(("class_embedding".into(), vec![w]));
    out.push(("positional_embedding".into(), vec![cfg.tokens(), w]));
    if cfg.flavor == VitFlavor::Contrastive {
        out.push(("ln_pre.weight".into(), vec![w]));
        out.push(("ln_pre.bias".into(), vec![w]));
    }
    for i in 0..cfg.layers {
        let n = block_param_names(i);
        let shapes = [
            vec![w],
            vec![w],
            vec![3 * w, w],
            vec![3 * w],
            vec![w, w],
            vec![w],
            vec![w],
            vec![w],
            vec![4 * w, w],
            vec![4 * w],
            vec![w, 4 * w],
            vec![w],
        ];
        out.extend(n.into_iter().zip(shapes));
    }
    out.push(("ln_post.weight".into(), vec![w]));
    out.push(("ln_post.bias".into(), vec![w]));
    if with_projection {
        if let Some(d) = cfg.projection_dim {
            out.push(("proj".into(), vec![w, d]));
        }
    }
    out
}

struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    fc_pre: Array2<f64>,
    fc_act: Array2<f64>,
}

struct Cache {
    patches: Array2<f64>,
    ln_pre: Option<LayerNormCache>,
    blocks: Vec<BlockCache>,
    ln_post: LayerNormCache,
    cls_out: Array1<f64>,
}

impl Vit {
    /// Random initialisation (truncated-free normal, std 0.02 for
    /// projections, unit LN gains), mostly for tests and from-scratch runs.
    pub fn init(cfg: VitConfig, with_projection: bool, seed: u64) -> (Self, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut store = ParamStore::new();
        for (name, shape) in param_layout(&cfg, with_projection) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("ln_1.weight")
                || name.ends_with("ln_2.weight")
                || name.ends_with("ln_pre.weight")
                || name.ends_with("ln_post.weight")
            {
                vec![1.0; n]
            } else if name.ends_with("bias") && !name.starts_with("conv1") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            store.add(name, Tensor::new(shape, data));
        }
        let vit = Self::bind(cfg, &store).expect("layout matches");
        (vit, store)
    }

    pub fn bind(cfg: VitConfig, store: &ParamStore) -> Option<Self> {
        let id = |n: &str| store.id(n);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = block_param_names(i);
                Some(BlockIds {
                    ln1_w: id(&n[0])?,
                    ln1_b: id(&n[1])?,
                    qkv_w: id(&n[2])?,
                    qkv_b: id(&n[3])?,
                    out_w: id(&n[4])?,
                    out_b: id(&n[5])?,
                    ln2_w: id(&n[6])?,
                    ln2_b: id(&n[7])?,
                    fc_w: id(&n[8])?,
                    fc_b: id(&n[9])?,
                    proj_w: id(&n[10])?,
                    proj_b: id(&n[11])?,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        let ln_pre = match cfg.flavor {
            VitFlavor::Contrastive => Some((id("ln_pre.weight")?, id("ln_pre.bias")?)),
            VitFlavor::Classifier => None,
        };
        let patch_b = match cfg.flavor {
            VitFlavor::Classifier => Some(id("conv1.bias")?),
            VitFlavor::Contrastive => None,
        };
        Some(Self {
            patch_w: id("conv1.weight")?,
            patch_b,
            cls: id("class_embedding")?,
            pos: id("positional_embedding")?,
            ln_pre,
            blocks,
            ln_post: (id("ln_post.weight")?, id("ln_post.bias")?),
            proj: id("proj"),
            cfg,
        })
    }

    pub fn has_projection(&self) -> bool {
        self.proj.is_some()
    }

    pub fn output_dim(&self) -> usize {
        match (self.proj, self.cfg.projection_dim) {
            (Some(_), Some(d)) => d,
            _ => self.cfg.width,
        }
    }

    /// Flattens patches in `(channel, py, px)` order to match conv weights.
    fn patches(&self, x: &NormalizedImage) -> Array2<f64> {
        let (p, g) = (self.cfg.patch, self.cfg.grid());
        let side = x.width;
        Array2::from_shape_fn((g * g, 3 * p * p), |(t, k)| {
            let (gy, gx) = (t / g, t % g);
            let c = k / (p * p);
            let (py, px) = ((k % (p * p)) / p, k % p);
            x.data[((gy * p + py) * side + gx * p + px) * 3 + c]
        })
    }

    fn attention(&self, qkv: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let (w, heads) = (self.cfg.width, self.cfg.heads);
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = qkv.nrows();
        let mut o = Array2::zeros((t, w));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., w + h * dh..w + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * w + h * dh..2 * w + (h + 1) * dh]);
            let mut a = q.dot(&k.t()) * scale;
            ops::softmax_rows(&mut a);
            o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
            probs.push(a);
        }
        (o, probs)
    }

    /// Runs the trunk; returns final token states and optional cache. If
    /// `stop_after` is set, returns right after that block.
    fn trunk(
        &self,
        p: &ParamStore,
        x: &NormalizedImage,
        keep: bool,
        stop_after: Option<usize>,
    ) -> (Array2<f64>, Vec<BlockCache>, Array2<f64>, Option<LayerNormCache>) {
        let eps = self.cfg.ln_eps();
        let act = self.cfg.activation();
        let patches = self.patches(x);
        let emb = ops::linear(
            patches.view(),
            p.mat(self.patch_w),
            self.patch_b.map(|b| p.vec(b)),
        );
        let t = self.cfg.tokens();
        let mut xs = Array2::zeros((t, self.cfg.width));
        xs.row_mut(0).assign(&p.vec(self.cls));
        xs.slice_mut(s![1.., ..]).assign(&emb);
        xs += &p.mat(self.pos);
        let mut ln_pre_cache = None;
        if let Some((g, b)) = self.ln_pre {
            let (y, c) = ops::layer_norm(xs.view(), p.vec(g), p.vec(b), eps);
            xs = y;
            ln_pre_cache = Some(c);
        }
        let mut caches = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let (h1, ln1) = ops::layer_norm(xs.view(), p.vec(blk.ln1_w), p.vec(blk.ln1_b), eps);
            let qkv = ops::linear(h1.view(), p.mat(blk.qkv_w), Some(p.vec(blk.qkv_b)));
            let (o, attn) = self.attention(&qkv);
            xs += &ops::linear(o.view(), p.mat(blk.out_w), Some(p.vec(blk.out_b)));
            let (h2, ln2) = ops::layer_norm(xs.view(), p.vec(blk.ln2_w), p.vec(blk.ln2_b), eps);
            let fc_pre = ops::linear(h2.view(), p.mat(blk.fc_w), Some(p.vec(blk.fc_b)));
            let fc_act = fc_pre.mapv(|v| act.apply(v));
            xs += &ops::linear(fc_act.view(), p.mat(blk.proj_w), Some(p.vec(blk.proj_b)));
            if keep {
                caches.push(BlockCache {
                    ln1,
                    h1,
                    qkv,
                    attn,
                    o,
                    ln2,
                    h2,
                    fc_pre,
                    fc_act,
                });
            }
            if stop_after == Some(i) {
                break;
            }
        }
        (xs, caches, patches, ln_pre_cache)
    }

    fn head(&self, p: &ParamStore, xs: &Array2<f64>) -> (Array1<f64>, LayerNormCache, Array1<f64>) {
        let cls = xs.slice(s![0..1, ..]);
        let (y, c) = ops::layer_norm(cls, p.vec(self.ln_post.0), p.vec(self.ln_post.1), self.cfg.ln_eps());
        let cls_out = y.row(0).to_owned();
        let emb = match self.proj {
            Some(proj) => cls_out.dot(&p.mat(proj)),
            None => cls_out.clone(),
        };
        (emb, c, cls_out)
    }

    pub fn forward(&self, p: &ParamStore, x: &NormalizedImage) -> Vec<f64> {
        let (xs, _, _, _) = self.trunk(p, x, false, None);
        self.head(p, &xs).0.to_vec()
    }

    fn forward_cached(&self, p: &ParamStore, x: &NormalizedImage) -> Cache {
        let (xs, blocks, patches, ln_pre) = self.trunk(p, x, true, None);
        let (_, ln_post, cls_out) = self.head(p, &xs);
        Cache {
            patches,
            ln_pre,
            blocks,
            ln_post,
            cls_out,
        }
    }

    pub fn backward(&self, p: &ParamStore, x: &NormalizedImage, d_out: &[f64], g: &mut Grads) {
        let cache = self.forward_cached(p, x);
        let act = self.cfg.activation();
        let (w, heads) = (self.cfg.width, self.cfg.heads);
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_emb = ArrayView1::from(d_out);

        let d_cls = match self.proj {
            Some(proj) => {
                let pm = p.mat(proj);
                let mut dp = g.mat_mut(proj, w);
                for i in 0..w {
                    for j in 0..d_emb.len() {
                        dp[[i, j]] += cache.cls_out[i] * d_emb[j];
                    }
                }
                pm.dot(&d_emb)
            }
            None => d_emb.to_owned(),
        };
        let (d_cls_in, dgam, dbet) = ops::layer_norm_backward(
            d_cls.view().insert_axis(Axis(0)),
            &cache.ln_post,
            p.vec(self.ln_post.0),
        );
        g.accumulate(self.ln_post.0, dgam);
        g.accumulate(self.ln_post.1, dbet);
        let mut dx = Array2::zeros((self.cfg.tokens(), w));
        dx.row_mut(0).assign(&d_cls_in.row(0));

        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch
            let (d_fc_act, dw, db) = ops::linear_backward(c.fc_act.view(), p.mat(blk.proj_w), dx.view());
            g.accumulate(blk.proj_w, dw);
            g.accumulate(blk.proj_b, db);
            let d_fc_pre = &d_fc_act * &c.fc_pre.mapv(|v| act.derivative(v));
            let (d_h2, dw, db) = ops::linear_backward(c.h2.view(), p.mat(blk.fc_w), d_fc_pre.view());
            g.accumulate(blk.fc_w, dw);
            g.accumulate(blk.fc_b, db);
            let (d_mid, dgam, dbet) = ops::layer_norm_backward(d_h2.view(), &c.ln2, p.vec(blk.ln2_w));
            g.accumulate(blk.ln2_w, dgam);
            g.accumulate(blk.ln2_b, dbet);
            dx += &d_mid;

            // attention branch
            let (d_o, dw, db) = ops::linear_backward(c.o.view(), p.mat(blk.out_w), dx.view());
            g.accumulate(blk.out_w, dw);
            g.accumulate(blk.out_b, db);
            let mut d_qkv = Array2::zeros(c.qkv.raw_dim());
            for h in 0..heads {
                let (qs, ks, vs) = (h * dh, w + h * dh, 2 * w + h * dh);
                let q = c.qkv.slice(s![.., qs..qs + dh]);
                let k = c.qkv.slice(s![.., ks..ks + dh]);
                let v = c.qkv.slice(s![.., vs..vs + dh]);
                let a = &c.attn[h];
                let d_oh = d_o.slice(s![.., h * dh..(h + 1) * dh]);
                let d_a = d_oh.dot(&v.t());
                d_qkv.slice_mut(s![.., vs..vs + dh]).assign(&a.t().dot(&d_oh));
                let d_s = ops::softmax_rows_backward(a.view(), d_a.view()) * scale;
                d_qkv.slice_mut(s![.., qs..qs + dh]).assign(&d_s.dot(&k));
                d_qkv.slice_mut(s![.., ks..ks + dh]).assign(&d_s.t().dot(&q));
            }
            let (d_h1, dw, db) = ops::linear_backward(c.h1.view(), p.mat(blk.qkv_w), d_qkv.view());
            g.accumulate(blk.qkv_w, dw);
            g.accumulate(blk.qkv_b, db);
            let (d_in, dgam, dbet) = ops::layer_norm_backward(d_h1.view(), &c.ln1, p.vec(blk.ln1_w));
            g.accumulate(blk.ln1_w, dgam);
            g.accumulate(blk.ln1_b, dbet);
            dx += &d_in;
        }

        if let (Some((gw, gb)), Some(lc)) = (self.ln_pre, cache.ln_pre.as_ref()) {
            let (d_in, dgam, dbet) = ops::layer_norm_backward(dx.view(), lc, p.vec(gw));
            g.accumulate(gw, dgam);
            g.accumulate(gb, dbet);
            dx = d_in;
        }
        g.accumulate(self.pos, dx.iter().copied().collect::<Vec<_>>());
        g.accumulate(self.cls, dx.row(0).iter().copied());
        let d_patch = dx.slice(s![1.., ..]);
        let dw = d_patch.t().dot(&cache.patches);
        g.accumulate(self.patch_w, dw);
        if let Some(b) = self.patch_b {
            g.accumulate(b, d_patch.sum_axis(Axis(0)));
        }
    }

    /// Per-channel patch-token grids of the output of block `blockN`.
    pub fn activation_maps(&self, p: &ParamStore, x: &NormalizedImage, tag: &str) -> Option<Vec<Array2<f64>>> {
        let idx: usize = tag.strip_prefix("block")?.parse().ok()?;
        if idx >= self.cfg.layers {
            return None;
        }
        let (xs, _, _, _) = self.trunk(p, x, false, Some(idx));
        let g = self.cfg.grid();
        let tokens = xs.slice(s![1.., ..]);
        Some(
            (0..self.cfg.width)
                .map(|c| Array2::from_shape_vec((g, g), tokens.column(c).to_vec()).expect("grid"))
                .collect(),
        )
    }
}
