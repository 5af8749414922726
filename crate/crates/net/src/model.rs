//! The fusion network: a global ViT path, a local correlation path and two
//! regression heads for the pose correction.

use std::fmt;
use std::str::FromStr;

use fuseloc_core::geometry::quat_normalize;
use fuseloc_core::Pose;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Conv, Init, Linear, ParamStore};
use crate::tensor::{conv_out, resize_bilinear, Scalar, Tensor};
use crate::vit::{Vit, VitShape};

/// Spatial reduction of the local path (four stride-2 stages).
pub const LOCAL_STRIDE: usize = 16;
const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Both inputs resized, separate stride-2 convs, channel concat.
    Fusion,
    /// Color resized straight to the ViT input size.
    RgbResize,
    /// Color resized, then a 3→3 stride-2 conv.
    RgbResizeConv,
    /// Color and depth stacked, resized, then a 4→3 stride-2 conv.
    RgbdResizeConv,
    /// Global feature replaced by zeros.
    LocalOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Fusion,
        AblationMode::RgbResize,
        AblationMode::RgbResizeConv,
        AblationMode::RgbdResizeConv,
        AblationMode::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Fusion => "fusion",
            AblationMode::RgbResize => "rgb_resize",
            AblationMode::RgbResizeConv => "rgb_resize_conv",
            AblationMode::RgbdResizeConv => "rgbd_resize_conv",
            AblationMode::LocalOnly => "local_only",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| NetError::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub vit_resize: usize,
    pub vit_input: usize,
    pub vit_patch: usize,
    pub vit_embed_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    pub cnn_channels: Vec<usize>,
    pub local_channels: usize,
    pub corr_max_disp: usize,
    pub mlp_hidden: Vec<usize>,
    pub ablation_mode: AblationMode,
}

impl NetworkConfig {
    /// Full-size network: 768-d global feature, 512-d local feature.
    pub fn reference(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vit_resize: 447,
            vit_input: 224,
            vit_patch: 16,
            vit_embed_dim: 768,
            vit_depth: 2,
            vit_heads: 4,
            vit_mlp_ratio: 4,
            cnn_channels: vec![16, 32, 64, 64],
            local_channels: 512,
            corr_max_disp: 4,
            mlp_hidden: vec![512, 256],
            ablation_mode: AblationMode::Fusion,
        }
    }

    /// Reference layout with every channel count divided by 8 and a single
    /// transformer block.
    pub fn reduced(height: usize, width: usize) -> Self {
        Self {
            vit_embed_dim: 96,
            vit_depth: 1,
            cnn_channels: vec![2, 4, 8, 8],
            local_channels: 64,
            mlp_hidden: vec![64, 32],
            ..Self::reference(height, width)
        }
    }

    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        self.ablation_mode = mode;
        self
    }

    /// Sets the ViT input side to `n` and the pre-conv resize to `2n − 1`,
    /// which a 3×3 stride-2 pad-1 conv maps back to `n`.
    pub fn with_vit_input(mut self, n: usize) -> Self {
        self.vit_input = n;
        self.vit_resize = 2 * n - 1;
        self
    }

    pub fn local_hw(&self) -> (usize, usize) {
        (self.height / LOCAL_STRIDE, self.width / LOCAL_STRIDE)
    }

    pub fn corr_channels(&self) -> usize {
        (2 * self.corr_max_disp + 1).pow(2)
    }

    pub fn fused_dim(&self) -> usize {
        self.local_channels + self.vit_embed_dim
    }

    pub fn vit_shape(&self) -> VitShape {
        VitShape {
            input: self.vit_input,
            patch: self.vit_patch,
            embed: self.vit_embed_dim,
            depth: self.vit_depth,
            heads: self.vit_heads,
            mlp_ratio: self.vit_mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad(format!(
                "input {}×{} must be non-zero multiples of 16",
                self.height, self.width
            ));
        }
        if self.vit_patch == 0 || self.vit_input == 0 || self.vit_input % self.vit_patch != 0 {
            return bad(format!(
                "ViT input {} must be a multiple of patch {}",
                self.vit_input, self.vit_patch
            ));
        }
        if self.vit_resize < 2 || conv_out(self.vit_resize, 3, 2, 1) != self.vit_input {
            return bad(format!(
                "a 3×3 stride-2 conv maps {} to {}, not the ViT input {}",
                self.vit_resize,
                conv_out(self.vit_resize.max(2), 3, 2, 1),
                self.vit_input
            ));
        }
        if self.vit_embed_dim == 0 || self.vit_heads == 0 || self.vit_embed_dim % self.vit_heads != 0 {
            return bad(format!(
                "embed dim {} must split evenly over {} heads",
                self.vit_embed_dim, self.vit_heads
            ));
        }
        if self.vit_mlp_ratio == 0 {
            return bad("ViT MLP ratio must be positive".into());
        }
        if self.cnn_channels.len() != STAGES || self.cnn_channels.contains(&0) {
            return bad(format!(
                "local CNN needs {STAGES} non-zero stage widths, got {:?}",
                self.cnn_channels
            ));
        }
        if self.local_channels == 0 || self.mlp_hidden.contains(&0) {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }

    /// Checks the full-size feature widths on top of [`Self::validate`].
    pub fn validate_reference(&self) -> Result<()> {
        self.validate()?;
        if self.ablation_mode == AblationMode::Fusion && self.vit_embed_dim != 768 {
            return Err(NetError::Config(format!(
                "global feature must be 768-d, config has {}",
                self.vit_embed_dim
            )));
        }
        if self.local_channels != 512 {
            return Err(NetError::Config(format!(
                "local feature must be 512-d, config has {}",
                self.local_channels
            )));
        }
        Ok(())
    }
}

/// Network inputs: color in `[0, 1]` as `[3, h, w]` and normalized depth as
/// `[1, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput<T> {
    pub color: Tensor<T>,
    pub depth: Tensor<T>,
}

/// Regression target: the correction from the rough camera frame to the
/// true one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl Target {
    pub fn from_poses(rough: &Pose, gt: &Pose) -> Self {
        let c = rough.inverse().compose(gt);
        Self {
            t: (*c.translation()).into(),
            q: c.quat_wxyz(),
        }
    }
}

/// Intermediate features of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    /// `F'_RGB`, the resized-and-convolved color (modes with a color conv).
    pub rgb_prime: Option<Tensor<T>>,
    /// `F'_Depth` (fusion mode only).
    pub depth_prime: Option<Tensor<T>>,
    /// The image fed to the ViT (`F'_RGBD` in fusion mode).
    pub vit_input: Option<Tensor<T>>,
    pub f_global: Tensor<T>,
    pub f_rgb: Tensor<T>,
    pub f_depth1: Tensor<T>,
    /// Correlation volume before `FE₁`.
    pub cost_volume: Tensor<T>,
    pub f_c: Tensor<T>,
    pub f_depth2: Tensor<T>,
    /// Per-channel spatial softmax of `F_Depth2`, `[L, h'·w']`.
    pub spatial_weights: Tensor<T>,
    pub f_l: Tensor<T>,
    pub f_local: Tensor<T>,
    /// `concat(F_Local, F_Global)`.
    pub f: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub t: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub q: [f64; 4],
    pub q_raw: [f64; 4],
    pub correction: Pose,
    pub absolute: Pose,
    pub features: FeatureBundle<T>,
}

/// Head outputs of [`Model::regress_pose`].
#[derive(Debug, Clone)]
pub struct PoseOutput {
    pub t: [f64; 3],
    pub q: [f64; 4],
    pub q_raw: [f64; 4],
    pub correction: Pose,
    pub absolute: Pose,
}

#[derive(Debug, Clone)]
enum GlobalStem {
    Fusion { rgb: Conv, depth: Conv },
    RgbResize,
    RgbResizeConv(Conv),
    RgbdResizeConv(Conv),
    None,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: GlobalStem,
    vit: Option<Vit>,
    conv_rgb: Vec<Conv>,
    conv_depth: Vec<Conv>,
    fe1: [Conv; 2],
    fe2: [Conv; 2],
    mlp_position: Vec<Linear>,
    mlp_posture: Vec<Linear>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub rgb_prime: Option<Var>,
    pub depth_prime: Option<Var>,
    pub vit_input: Option<Var>,
    pub f_global: Var,
    pub f_rgb: Var,
    pub f_depth1: Var,
    pub cost_volume: Var,
    pub f_c: Var,
    pub f_depth2: Var,
    pub spatial_weights: Var,
    pub f_l: Var,
    pub f_local: Var,
    pub f: Var,
    pub position_layers: Vec<Var>,
    pub posture_layers: Vec<Var>,
}

impl Trace {
    pub fn t(&self) -> Var {
        *self.position_layers.last().expect("position head")
    }

    pub fn q_raw(&self) -> Var {
        *self.posture_layers.last().expect("posture head")
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    layout: Layout,
}

pub(crate) struct LocalOut {
    pub f_rgb: Var,
    pub f_depth1: Var,
    pub cost_volume: Var,
    pub f_c: Var,
    pub f_depth2: Var,
    pub spatial_weights: Var,
    pub f_l: Var,
    pub f_local: Var,
}

pub(crate) struct GlobalOut {
    pub rgb_prime: Option<Var>,
    pub depth_prime: Option<Var>,
    pub vit_input: Option<Var>,
    pub f_global: Var,
}

fn shape_err(relation: &'static str, detail: String) -> NetError {
    NetError::ShapeContract { relation, detail }
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut s = ParamStore::default();
        let st = |cin, cout| (cin, cout, 3);
        let stem = match config.ablation_mode {
            AblationMode::Fusion => GlobalStem::Fusion {
                rgb: Conv::new(&mut s, &mut init, "conv_rgb_prime", st(3, 2), 2, 1),
                depth: Conv::new(&mut s, &mut init, "conv_depth_prime", st(1, 1), 2, 1),
            },
            AblationMode::RgbResize => GlobalStem::RgbResize,
            AblationMode::RgbResizeConv => {
                GlobalStem::RgbResizeConv(Conv::new(&mut s, &mut init, "conv_rgb_prime", st(3, 3), 2, 1))
            }
            AblationMode::RgbdResizeConv => {
                GlobalStem::RgbdResizeConv(Conv::new(&mut s, &mut init, "conv_rgbd_prime", st(4, 3), 2, 1))
            }
            AblationMode::LocalOnly => GlobalStem::None,
        };
        let vit = (config.ablation_mode != AblationMode::LocalOnly).then(|| Vit::new(&mut s, &mut init, config.vit_shape()));
        let stack = |s: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize| {
            let mut c = cin;
            config
                .cnn_channels
                .iter()
                .enumerate()
                .map(|(i, &o)| {
                    let conv = Conv::new(s, init, &format!("{name}.{i}"), st(c, o), 2, 1);
                    c = o;
                    conv
                })
                .collect::<Vec<_>>()
        };
        let conv_rgb = stack(&mut s, &mut init, "conv_rgb", 3);
        let conv_depth = stack(&mut s, &mut init, "conv_depth", 1);
        let l = config.local_channels;
        let c4 = config.cnn_channels[STAGES - 1];
        let fe1 = [
            Conv::new(&mut s, &mut init, "fe1.0", st(config.corr_channels(), l), 1, 1),
            Conv::new(&mut s, &mut init, "fe1.1", st(l, l), 1, 1),
        ];
        let fe2 = [
            Conv::new(&mut s, &mut init, "fe2.0", st(c4, l), 1, 1),
            Conv::new(&mut s, &mut init, "fe2.1", st(l, l), 1, 1),
        ];
        let mlp_position = mlp(&mut s, &mut init, "mlp_position", &config, 3, None);
        let mlp_posture = mlp(&mut s, &mut init, "mlp_posture", &config, 4, Some([1.0, 0.0, 0.0, 0.0]));
        Ok(Self {
            config,
            params: s,
            layout: Layout {
                stem,
                vit,
                conv_rgb,
                conv_depth,
                fe1,
                fe2,
                mlp_position,
                mlp_posture,
            },
        })
    }

    /// Rebuilds a model around existing parameters, checking that every
    /// name and shape matches the layout `config` implies.
    pub fn from_params(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if m.params.len() != params.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                m.params.len(),
                params.len()
            )));
        }
        for ((_, en, et), (_, gn, gt)) in m.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(NetError::Checkpoint(format!(
                    "parameter {gn} {:?} does not match expected {en} {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn check_input(&self, input: &FrameInput<T>) -> Result<()> {
        let (h, w) = (self.config.height, self.config.width);
        if input.color.shape() != [3, h, w] {
            return Err(shape_err(
                "color input is 3×h×w",
                format!("expected [3, {h}, {w}], got {:?}", input.color.shape()),
            ));
        }
        if input.depth.shape() != [1, h, w] {
            return Err(shape_err(
                "depth input is 1×h×w",
                format!("expected [1, {h}, {w}], got {:?}", input.depth.shape()),
            ));
        }
        Ok(())
    }

    pub(crate) fn build_global(&self, g: &mut Graph<T>, p: &mut Binder<T>, input: &FrameInput<T>) -> Result<GlobalOut> {
        let c = &self.config;
        let (r, n) = (c.vit_resize, c.vit_input);
        let (mut rgb_prime, mut depth_prime) = (None, None);
        let vit_in = match &self.layout.stem {
            GlobalStem::None => {
                return Ok(GlobalOut {
                    rgb_prime,
                    depth_prime,
                    vit_input: None,
                    f_global: g.leaf(Tensor::zeros(&[c.vit_embed_dim])),
                });
            }
            GlobalStem::Fusion { rgb, depth } => {
                let color = g.leaf(resize_bilinear(&input.color, r, r));
                let d = g.leaf(resize_bilinear(&input.depth, r, r));
                let fr = rgb.apply(g, p, color);
                let fd = depth.apply(g, p, d);
                if g.shape(fr)[0] + g.shape(fd)[0] != 3 {
                    return Err(shape_err(
                        "F'_RGBD = concat(F'_RGB, F'_Depth) has 3 channels",
                        format!("{:?} + {:?}", g.shape(fr), g.shape(fd)),
                    ));
                }
                rgb_prime = Some(fr);
                depth_prime = Some(fd);
                g.concat0(&[fr, fd])
            }
            GlobalStem::RgbResize => g.leaf(resize_bilinear(&input.color, n, n)),
            GlobalStem::RgbResizeConv(conv) => {
                let color = g.leaf(resize_bilinear(&input.color, r, r));
                let fr = conv.apply(g, p, color);
                rgb_prime = Some(fr);
                fr
            }
            GlobalStem::RgbdResizeConv(conv) => {
                let mut stacked = input.color.data().to_vec();
                stacked.extend_from_slice(input.depth.data());
                let stacked = Tensor::new(&[4, c.height, c.width], stacked);
                let x = g.leaf(resize_bilinear(&stacked, r, r));
                conv.apply(g, p, x)
            }
        };
        if g.shape(vit_in) != [3, n, n] {
            return Err(shape_err(
                "ViT input is 3×S×S",
                format!("expected [3, {n}, {n}], got {:?}", g.shape(vit_in)),
            ));
        }
        let vit = self.layout.vit.as_ref().expect("ViT present outside local_only");
        Ok(GlobalOut {
            rgb_prime,
            depth_prime,
            vit_input: Some(vit_in),
            f_global: vit.forward(g, p, vit_in),
        })
    }

    pub(crate) fn build_local(&self, g: &mut Graph<T>, p: &mut Binder<T>, input: &FrameInput<T>) -> Result<LocalOut> {
        let c = &self.config;
        let (hh, ww) = c.local_hw();
        let l = c.local_channels;
        let run = |g: &mut Graph<T>, p: &mut Binder<T>, convs: &[Conv], x: Var| {
            convs.iter().fold(x, |x, conv| {
                let y = conv.apply(g, p, x);
                g.gelu(y)
            })
        };
        let color = g.leaf(input.color.clone());
        let depth = g.leaf(input.depth.clone());
        let f_rgb = run(g, p, &self.layout.conv_rgb, color);
        let f_depth1 = run(g, p, &self.layout.conv_depth, depth);
        for (v, what) in [(f_rgb, "F_RGB"), (f_depth1, "F_Depth1")] {
            if g.shape(v)[1..] != [hh, ww] {
                return Err(shape_err(
                    "h' = h/16, w' = w/16",
                    format!("{what} is {:?}, expected spatial {hh}×{ww}", g.shape(v)),
                ));
            }
        }
        let cost_volume = g.corr(f_rgb, f_depth1, c.corr_max_disp);
        let h1 = self.layout.fe1[0].apply(g, p, cost_volume);
        let h1 = g.gelu(h1);
        let f_c = self.layout.fe1[1].apply(g, p, h1);
        let h2 = self.layout.fe2[0].apply(g, p, f_depth1);
        let h2 = g.gelu(h2);
        let f_depth2 = self.layout.fe2[1].apply(g, p, h2);
        debug_assert_eq!(g.shape(f_c), &[l, hh, ww]);
        let (spatial_weights, f_l, f_local) = pool_nodes(g, f_c, f_depth2);
        Ok(LocalOut {
            f_rgb,
            f_depth1,
            cost_volume,
            f_c,
            f_depth2,
            spatial_weights,
            f_l,
            f_local,
        })
    }

    fn heads(&self, g: &mut Graph<T>, p: &mut Binder<T>, f: Var) -> (Vec<Var>, Vec<Var>) {
        let x = g.reshape(f, &[1, self.config.fused_dim()]);
        let run = |g: &mut Graph<T>, p: &mut Binder<T>, layers: &[Linear]| {
            let mut outs = Vec::with_capacity(layers.len());
            let mut h = x;
            for (i, layer) in layers.iter().enumerate() {
                h = layer.apply(g, p, h);
                if i + 1 < layers.len() {
                    h = g.gelu(h);
                }
                outs.push(h);
            }
            outs
        };
        let pos = run(g, p, &self.layout.mlp_position);
        let rot = run(g, p, &self.layout.mlp_posture);
        (pos, rot)
    }

    /// Records the full forward pass on `g`.
    pub fn build(&self, g: &mut Graph<T>, p: &mut Binder<T>, input: &FrameInput<T>) -> Result<Trace> {
        self.check_input(input)?;
        let glob = self.build_global(g, p, input)?;
        let loc = self.build_local(g, p, input)?;
        let f = g.concat0(&[loc.f_local, glob.f_global]);
        if g.shape(f) != [self.config.fused_dim()] {
            return Err(shape_err(
                "F = concat(F_Local, F_Global)",
                format!("got {:?}", g.shape(f)),
            ));
        }
        let (position_layers, posture_layers) = self.heads(g, p, f);
        Ok(Trace {
            rgb_prime: glob.rgb_prime,
            depth_prime: glob.depth_prime,
            vit_input: glob.vit_input,
            f_global: glob.f_global,
            f_rgb: loc.f_rgb,
            f_depth1: loc.f_depth1,
            cost_volume: loc.cost_volume,
            f_c: loc.f_c,
            f_depth2: loc.f_depth2,
            spatial_weights: loc.spatial_weights,
            f_l: loc.f_l,
            f_local: loc.f_local,
            f,
            position_layers,
            posture_layers,
        })
    }

    /// Records forward pass plus loss against `target`; returns the loss node.
    pub fn build_loss(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        input: &FrameInput<T>,
        target: &Target,
        lambda: f64,
    ) -> Result<(Trace, Var)> {
        let trace = self.build(g, p, input)?;
        let loss = g.pose_loss(trace.t(), trace.q_raw(), target.t, target.q, lambda);
        Ok((trace, loss))
    }

    /// Class-token embedding of the global path.
    pub fn global_features(&self, input: &FrameInput<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let out = self.build_global(&mut g, &mut p, input)?;
        Ok(g.value(out.f_global).clone())
    }

    /// Pooled local feature.
    pub fn local_features(&self, input: &FrameInput<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let out = self.build_local(&mut g, &mut p, input)?;
        Ok(g.value(out.f_local).clone())
    }

    pub fn forward(&self, input: &FrameInput<T>, rough: &Pose) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let tr = self.build(&mut g, &mut p, input)?;
        let out = finish(&g, &tr.position_layers, &tr.posture_layers, Some(tr.f), rough)?;
        let v = |x: Var| g.value(x).clone();
        let features = FeatureBundle {
            rgb_prime: tr.rgb_prime.map(v),
            depth_prime: tr.depth_prime.map(v),
            vit_input: tr.vit_input.map(v),
            f_global: v(tr.f_global),
            f_rgb: v(tr.f_rgb),
            f_depth1: v(tr.f_depth1),
            cost_volume: v(tr.cost_volume),
            f_c: v(tr.f_c),
            f_depth2: v(tr.f_depth2),
            spatial_weights: v(tr.spatial_weights),
            f_l: v(tr.f_l),
            f_local: v(tr.f_local),
            f: v(tr.f),
        };
        Ok(Prediction {
            t: out.t,
            q: out.q,
            q_raw: out.q_raw,
            correction: out.correction,
            absolute: out.absolute,
            features,
        })
    }

    /// Runs both regression heads on precomputed features.
    pub fn regress_pose(&self, f_local: &Tensor<T>, f_global: &Tensor<T>, rough: &Pose) -> Result<PoseOutput> {
        let (l, d) = (self.config.local_channels, self.config.vit_embed_dim);
        if f_local.len() != l || f_global.len() != d {
            return Err(shape_err(
                "F = concat(F_Local, F_Global)",
                format!("expected lengths {l} and {d}, got {} and {}", f_local.len(), f_global.len()),
            ));
        }
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params);
        let a = g.leaf(f_local.clone().reshaped(&[l]));
        let b = g.leaf(f_global.clone().reshaped(&[d]));
        let f = g.concat0(&[a, b]);
        let (pos, rot) = self.heads(&mut g, &mut p, f);
        finish(&g, &pos, &rot, Some(f), rough)
    }
}

fn pool_nodes<T: Scalar>(g: &mut Graph<T>, f_c: Var, f_depth2: Var) -> (Var, Var, Var) {
    let [l, h, w] = match *g.shape(f_depth2) {
        [l, h, w] => [l, h, w],
        ref s => panic!("expected [C, H, W], got {s:?}"),
    };
    let flat = g.reshape(f_depth2, &[l, h * w]);
    let weights = g.softmax_rows(flat);
    let fc_flat = g.reshape(f_c, &[l, h * w]);
    let f_l = g.mul(fc_flat, weights);
    let f_local = g.sum_cols(f_l);
    (weights, f_l, f_local)
}

/// Softmax-weighted spatial pooling of the local path. Each channel of
/// `f_depth2` is turned into a softmax over the `h'·w'` positions; the
/// weights multiply `f_c` elementwise and each channel is summed. Returns
/// `(weights [L, h'·w'], F_L [L, h'·w'], F_Local [L])`.
pub fn spatial_pool<T: Scalar>(f_c: &Tensor<T>, f_depth2: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    assert_eq!(f_c.shape(), f_depth2.shape(), "spatial_pool operand shapes");
    let mut g = Graph::new();
    let a = g.leaf(f_c.clone());
    let b = g.leaf(f_depth2.clone());
    let (w, fl, f) = pool_nodes(&mut g, a, b);
    (g.value(w).clone(), g.value(fl).clone(), g.value(f).clone())
}

fn finish<T: Scalar>(g: &Graph<T>, pos: &[Var], rot: &[Var], f: Option<Var>, rough: &Pose) -> Result<PoseOutput> {
    if let Some(f) = f {
        if !g.value(f).all_finite() {
            return Err(NetError::NumericFailure {
                head: "fused feature",
                layer: 0,
            });
        }
    }
    for (head, layers) in [("mlp_position", pos), ("mlp_posture", rot)] {
        if let Some(i) = layers.iter().position(|v| !g.value(*v).all_finite()) {
            return Err(NetError::NumericFailure { head, layer: i });
        }
    }
    let td = g.value(*pos.last().expect("position head")).to_f64_vec();
    let qd = g.value(*rot.last().expect("posture head")).to_f64_vec();
    let t = [td[0], td[1], td[2]];
    let q_raw = [qd[0], qd[1], qd[2], qd[3]];
    let q = quat_normalize(q_raw).map_err(|_| NetError::NumericFailure {
        head: "mlp_posture",
        layer: rot.len() - 1,
    })?;
    let correction = Pose::new(Vector3::from(t), q).map_err(|_| NetError::NumericFailure {
        head: "mlp_posture",
        layer: rot.len() - 1,
    })?;
    let absolute = rough.compose(&correction);
    Ok(PoseOutput {
        t,
        q,
        q_raw,
        correction,
        absolute,
    })
}

/// Three fully connected layers with GELU between them. The last layer
/// starts near zero so an untrained head predicts the identity correction.
fn mlp<T: Scalar>(
    s: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    config: &NetworkConfig,
    out: usize,
    bias: Option<[f64; 4]>,
) -> Vec<Linear> {
    let mut dims = vec![config.fused_dim()];
    dims.extend_from_slice(&config.mlp_hidden);
    dims.push(out);
    let last = dims.len() - 2;
    (0..dims.len() - 1)
        .map(|i| {
            let (fi, fo) = (dims[i], dims[i + 1]);
            let (w, b) = if i == last {
                let b = match bias {
                    Some(b) => Tensor::from_f64(&[fo], &b[..fo]),
                    None => Tensor::zeros(&[fo]),
                };
                (init.normal(&[fo, fi], 1e-3), b)
            } else {
                (init.normal(&[fo, fi], (2.0 / fi as f64).sqrt()), Tensor::zeros(&[fo]))
            };
            Linear::add(s, &format!("{name}.{i}"), w, b)
        })
        .collect()
}
