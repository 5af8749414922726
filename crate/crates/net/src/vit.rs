//! Vision transformer backbone with pre-norm blocks and a class token.
//!
//! Parameter names follow the common `timm` layout (`patch_embed.proj`,
//! `cls_token`, `pos_embed`, `blocks.{i}.attn.qkv`, ...) under a `vit.`
//! prefix, so standard pre-trained checkpoints map onto them directly.

use crate::graph::{Graph, ParamId, Var};
use crate::params::{Binder, Conv, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "vit";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitShape {
    pub input: usize,
    pub patch: usize,
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitShape {
    pub fn grid(&self) -> usize {
        self.input / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Vit {
    shape: VitShape,
    patch_embed: Conv,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Vit {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, shape: VitShape) -> Self {
        let d = shape.embed;
        let p = shape.patch;
        let name = |s: &str| format!("{PREFIX}.{s}");
        let fan_in = 3 * p * p;
        let patch_embed = Conv {
            w: store.add(name("patch_embed.proj.weight"), init.uniform(&[d, 3, p, p], (1.0 / fan_in as f64).sqrt())),
            b: store.add(name("patch_embed.proj.bias"), Tensor::zeros(&[d])),
            stride: p,
            pad: 0,
        };
        let cls_token = store.add(name("cls_token"), init.trunc_normal(&[1, 1, d], 0.02));
        let pos_embed = store.add(name("pos_embed"), init.trunc_normal(&[1, shape.tokens(), d], 0.02));
        let mut linear = |store: &mut ParamStore<T>, n: String, i: usize, o: usize| {
            Linear::add(store, &n, init.trunc_normal(&[o, i], 0.02), Tensor::zeros(&[o]))
        };
        let hidden = d * shape.mlp_ratio;
        let blocks = (0..shape.depth)
            .map(|i| {
                let b = |s: &str| name(&format!("blocks.{i}.{s}"));
                Block {
                    norm1: LayerNorm::new(store, &b("norm1"), d),
                    qkv: linear(store, b("attn.qkv"), d, 3 * d),
                    proj: linear(store, b("attn.proj"), d, d),
                    norm2: LayerNorm::new(store, &b("norm2"), d),
                    fc1: linear(store, b("mlp.fc1"), d, hidden),
                    fc2: linear(store, b("mlp.fc2"), hidden, d),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, &name("norm"), d);
        Self {
            shape,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        }
    }

    pub fn shape(&self) -> VitShape {
        self.shape
    }

    /// `x [3, S, S] → class-token embedding [D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let s = self.shape;
        let d = s.embed;
        let n = s.tokens();
        assert_eq!(g.shape(x), &[3, s.input, s.input], "ViT input size");
        let patches = self.patch_embed.apply(g, p, x);
        let patches = g.reshape(patches, &[d, n - 1]);
        let patches = g.transpose(patches);
        let cls = p.bind(g, self.cls_token);
        let cls = g.reshape(cls, &[1, d]);
        let tokens = g.concat0(&[cls, patches]);
        let pos = p.bind(g, self.pos_embed);
        let pos = g.reshape(pos, &[n, d]);
        let mut x = g.add(tokens, pos);
        for b in &self.blocks {
            let h = b.norm1.apply(g, p, x);
            let h = self.attention(g, p, b, h);
            x = g.add(x, h);
            let h = b.norm2.apply(g, p, x);
            let h = b.fc1.apply(g, p, h);
            let h = g.gelu(h);
            let h = b.fc2.apply(g, p, h);
            x = g.add(x, h);
        }
        let x = self.norm.apply(g, p, x);
        let cls = g.slice_rows(x, 0, 1);
        g.reshape(cls, &[d])
    }

    fn attention<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, b: &Block, h: Var) -> Var {
        let d = self.shape.embed;
        let heads = self.shape.heads;
        let dh = d / heads;
        let qkv = b.qkv.apply(g, p, h);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let outs: Vec<Var> = (0..heads)
            .map(|i| {
                let q = g.slice_cols(qkv, i * dh, dh);
                let k = g.slice_cols(qkv, d + i * dh, dh);
                let v = g.slice_cols(qkv, 2 * d + i * dh, dh);
                let scores = g.matmul(q, k, false, true);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                g.matmul(attn, v, false, false)
            })
            .collect();
        let o = g.concat_cols(&outs);
        b.proj.apply(g, p, o)
    }
}
