//! The point-set detection network.
//!
//! A 3D residual backbone produces feature maps at strides 4, 8 and 16; a
//! feature pyramid fuses them into one `C`-channel map at the configured
//! stride. The map is flattened into tokens, summed with fixed sinusoidal
//! position codes and passed through a pre-norm transformer encoder. A
//! decoder turns `N` learned queries into `N` points in one pass.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nrtr_tensor::{read_records, Element, Group, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::points::{PointSet, PredPoint};
use crate::volume::Block;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: `{field}` {msg}")]
    Config { field: &'static str, msg: String },
    #[error("checkpoint was written for a different model config")]
    ConfigMismatch,
    #[error("input block is {found}³, model expects {expected}³")]
    BlockSize { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad config sidecar: {msg}")]
    Sidecar { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Depth presets of the residual backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    ResNet18,
    ResNet34,
    ResNet50,
}

impl Preset {
    /// (base width, residual blocks per stage, bottleneck blocks)
    fn plan(self) -> (usize, [usize; 3], bool) {
        match self {
            Preset::Small => (16, [2, 2, 2], false),
            Preset::ResNet18 => (32, [2, 2, 2], false),
            Preset::ResNet34 => (32, [3, 4, 6], false),
            Preset::ResNet50 => (32, [3, 4, 6], true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub block_size: usize,
    pub channels: usize,
    /// Stride of the fused feature map: 4, 8 or 16.
    pub downsample: usize,
    pub backbone: Preset,
    /// Overrides the preset's base width.
    pub base_width: Option<usize>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub queries: usize,
    /// Hidden width of the point regression head.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_size: 64,
            channels: 192,
            downsample: 8,
            backbone: Preset::Small,
            base_width: None,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 6,
            mlp_hidden: 768,
            queries: 64,
            head_hidden: 192,
        }
    }
}

fn config_err(field: &'static str, msg: impl Into<String>) -> NetError {
    NetError::Config {
        field,
        msg: msg.into(),
    }
}

/// Deepest backbone stride; blocks must tile evenly down to it.
const MAX_STRIDE: usize = 16;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !matches!(self.downsample, 4 | 8 | 16) {
            return Err(config_err("downsample", "must be 4, 8 or 16"));
        }
        if self.block_size == 0 || self.block_size % MAX_STRIDE != 0 || self.block_size % self.downsample != 0 {
            return Err(config_err("block_size", format!("must be a positive multiple of {MAX_STRIDE}")));
        }
        if self.channels == 0 || self.channels % 6 != 0 {
            return Err(config_err("channels", "must be a positive multiple of 6"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(config_err("heads", "must divide channels"));
        }
        for (field, v) in [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be >= 1"));
            }
        }
        if self.base_width == Some(0) {
            return Err(config_err("base_width", "must be >= 1"));
        }
        Ok(())
    }

    /// Feature-map extent per axis.
    pub fn grid(&self) -> usize {
        self.block_size / self.downsample
    }

    pub fn tokens(&self) -> usize {
        self.grid().pow(3)
    }

    /// SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }
}

/// Fixed 3-axis sinusoidal codes, `[grid³, C]`, token `x + g·(y + g·z)`.
///
/// Each axis gets `C/3` channels of interleaved `sin, cos` at frequencies
/// `10000^(−2i/(C/3))`; axes are concatenated x, y, z.
pub fn positional_encoding(cfg: &ModelConfig) -> Tensor<f64> {
    let g = cfg.grid();
    let c = cfg.channels;
    let per_axis = c / 3;
    let mut data = Vec::with_capacity(g * g * g * c);
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                for pos in [x, y, z] {
                    for i in 0..per_axis / 2 {
                        let freq = 10000f64.powf(-(2.0 * i as f64) / per_axis as f64);
                        let angle = pos as f64 * freq;
                        data.push(angle.sin());
                        data.push(angle.cos());
                    }
                }
            }
        }
    }
    Tensor::new(&[g * g * g, c], data).expect("encoding shape")
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    convs: Vec<Conv>,
    proj: Option<Conv>,
}

#[derive(Clone, Debug)]
enum Resample {
    /// Strided convolution with kernel = stride = factor.
    Down,
    Same,
    Up(usize),
}

#[derive(Clone, Debug)]
struct Lateral {
    conv: Conv,
    resample: Resample,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    mlp1: Mlp,
    norm3: Norm,
    cross_attn: Attention,
    norm4: Norm,
    mlp2: Mlp,
}

struct Init<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> Init<'_, T> {
    fn add(&mut self, name: String, group: Group, shape: &[usize], data: Vec<f64>) -> Result<ParamId, NetError> {
        let t = Tensor::from_f64(shape, &data)?;
        Ok(self.store.add(name, group, t)?)
    }

    fn normal(&mut self, name: String, group: Group, shape: &[usize], sd: f64) -> Result<ParamId, NetError> {
        let dist = Normal::new(0.0, sd).expect("positive sd");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.add(name, group, shape, data)
    }

    fn uniform(&mut self, name: String, group: Group, shape: &[usize], bound: f64) -> Result<ParamId, NetError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.add(name, group, shape, data)
    }

    fn constant(&mut self, name: String, group: Group, shape: &[usize], value: f64) -> Result<ParamId, NetError> {
        let n: usize = shape.iter().product();
        self.add(name, group, shape, vec![value; n])
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv, NetError> {
        let fan_in = (cin * k * k * k) as f64;
        let w = self.normal(format!("{name}.w"), Group::Backbone, &[cout, cin, k, k, k], (2.0 / fan_in).sqrt())?;
        Ok(Conv {
            w,
            stride,
            padding: if k == 3 { 1 } else { 0 },
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear, NetError> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Linear {
            w: self.uniform(format!("{name}.w"), Group::Transformer, &[din, dout], bound)?,
            b: self.constant(format!("{name}.b"), Group::Transformer, &[dout], 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm, NetError> {
        Ok(Norm {
            gain: self.constant(format!("{name}.gain"), Group::Transformer, &[c], 1.0)?,
            bias: self.constant(format!("{name}.bias"), Group::Transformer, &[c], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, c: usize) -> Result<Attention, NetError> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), c, c)?,
            k: self.linear(&format!("{name}.k"), c, c)?,
            v: self.linear(&format!("{name}.v"), c, c)?,
            o: self.linear(&format!("{name}.o"), c, c)?,
        })
    }

    fn mlp(&mut self, name: &str, c: usize, hidden: usize) -> Result<Mlp, NetError> {
        Ok(Mlp {
            fc1: self.linear(&format!("{name}.fc1"), c, hidden)?,
            fc2: self.linear(&format!("{name}.fc2"), hidden, c)?,
        })
    }
}

/// Initial radius output before training, in block units.
const INIT_RADIUS: f64 = 0.05;

pub struct Model<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    stem: Conv,
    stages: Vec<Vec<ResBlock>>,
    laterals: Vec<Lateral>,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    point_head: [Linear; 3],
    cls_head: Linear,
    pos: Tensor<T>,
}

const LN_EPS: f64 = 1e-5;

/// Parameters are initialized from `seed` in a fixed order.
pub fn build_model<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>, NetError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let (preset_width, blocks, bottleneck) = cfg.backbone.plan();
    let width = cfg.base_width.unwrap_or(preset_width);
    let expansion = if bottleneck { 4 } else { 1 };

    let stem = init.conv("backbone.stem", 1, width, 3, 2)?;
    let mut cin = width;
    let mut stages = Vec::new();
    let mut stage_out = Vec::new();
    for (s, &count) in blocks.iter().enumerate() {
        let mid = width << s;
        let cout = mid * expansion;
        let mut stage = Vec::new();
        for b in 0..count {
            let stride = if b == 0 { 2 } else { 1 };
            let name = format!("backbone.stage{s}.block{b}");
            let convs = if bottleneck {
                vec![
                    init.conv(&format!("{name}.conv0"), cin, mid, 1, 1)?,
                    init.conv(&format!("{name}.conv1"), mid, mid, 3, stride)?,
                    init.conv(&format!("{name}.conv2"), mid, cout, 1, 1)?,
                ]
            } else {
                vec![
                    init.conv(&format!("{name}.conv0"), cin, cout, 3, stride)?,
                    init.conv(&format!("{name}.conv1"), cout, cout, 3, 1)?,
                ]
            };
            let proj = if stride != 1 || cin != cout {
                Some(init.conv(&format!("{name}.proj"), cin, cout, 1, stride)?)
            } else {
                None
            };
            stage.push(ResBlock { convs, proj });
            cin = cout;
        }
        stages.push(stage);
        stage_out.push(cin);
    }

    let c = cfg.channels;
    let mut laterals = Vec::new();
    for (s, &ch) in stage_out.iter().enumerate() {
        let stride = 4usize << s;
        let name = format!("backbone.fpn.lateral{s}");
        let lateral = if stride < cfg.downsample {
            let f = cfg.downsample / stride;
            let mut conv = init.conv(&name, ch, c, f, f)?;
            conv.padding = 0;
            Lateral {
                conv,
                resample: Resample::Down,
            }
        } else if stride == cfg.downsample {
            Lateral {
                conv: init.conv(&name, ch, c, 1, 1)?,
                resample: Resample::Same,
            }
        } else {
            Lateral {
                conv: init.conv(&name, ch, c, 1, 1)?,
                resample: Resample::Up(stride / cfg.downsample),
            }
        };
        laterals.push(lateral);
    }

    let mut encoder = Vec::new();
    for l in 0..cfg.encoder_layers {
        let name = format!("encoder.layer{l}");
        encoder.push(EncoderLayer {
            norm1: init.norm(&format!("{name}.norm1"), c)?,
            attn: init.attention(&format!("{name}.attn"), c)?,
            norm2: init.norm(&format!("{name}.norm2"), c)?,
            mlp: init.mlp(&format!("{name}.mlp"), c, cfg.mlp_hidden)?,
        });
    }
    let enc_norm = init.norm("encoder.norm", c)?;
    let queries = init.normal("decoder.queries".into(), Group::Transformer, &[cfg.queries, c], 1.0)?;
    let mut decoder = Vec::new();
    for l in 0..cfg.decoder_layers {
        let name = format!("decoder.layer{l}");
        decoder.push(DecoderLayer {
            norm1: init.norm(&format!("{name}.norm1"), c)?,
            self_attn: init.attention(&format!("{name}.self_attn"), c)?,
            norm2: init.norm(&format!("{name}.norm2"), c)?,
            mlp1: init.mlp(&format!("{name}.mlp1"), c, cfg.mlp_hidden)?,
            norm3: init.norm(&format!("{name}.norm3"), c)?,
            cross_attn: init.attention(&format!("{name}.cross_attn"), c)?,
            norm4: init.norm(&format!("{name}.norm4"), c)?,
            mlp2: init.mlp(&format!("{name}.mlp2"), c, cfg.mlp_hidden)?,
        });
    }
    let dec_norm = init.norm("decoder.norm", c)?;
    let h = cfg.head_hidden;
    let point_head = [
        init.linear("head.point0", c, h)?,
        init.linear("head.point1", h, h)?,
        init.linear("head.point2", h, 4)?,
    ];
    let cls_head = init.linear("head.cls", c, 1)?;
    // start radii small so early boxes are on the scale of neurites
    let bias = &mut store.get_mut(point_head[2].b).value;
    bias.data_mut()[3] = T::from_f64((INIT_RADIUS / (1.0 - INIT_RADIUS)).ln());

    let pos = positional_encoding(cfg).cast();
    Ok(Model {
        cfg: cfg.clone(),
        store,
        stem,
        stages,
        laterals,
        encoder,
        enc_norm,
        queries,
        decoder,
        dec_norm,
        point_head,
        cls_head,
        pos,
    })
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.num_values()
    }

    fn conv(&self, t: &mut Tape<T>, c: &Conv, x: Var) -> Result<Var, NetError> {
        let w = t.param(&self.store, c.w);
        Ok(t.conv3d(x, w, None, c.stride, c.padding)?)
    }

    /// Convolution followed by channel normalization.
    fn conv_norm(&self, t: &mut Tape<T>, c: &Conv, x: Var) -> Result<Var, NetError> {
        let y = self.conv(t, c, x)?;
        Ok(t.layernorm(y, 1, LN_EPS)?)
    }

    fn res_block(&self, t: &mut Tape<T>, b: &ResBlock, x: Var) -> Result<Var, NetError> {
        let mut h = x;
        let last = b.convs.len() - 1;
        for (i, c) in b.convs.iter().enumerate() {
            h = self.conv_norm(t, c, h)?;
            if i != last {
                h = t.relu(h);
            }
        }
        let skip = match &b.proj {
            Some(p) => self.conv_norm(t, p, x)?,
            None => x,
        };
        let sum = t.add(h, skip)?;
        Ok(t.relu(sum))
    }

    /// Fused `[B, C, g, g, g]` feature map.
    fn backbone(&self, t: &mut Tape<T>, x: Var) -> Result<Var, NetError> {
        let h = self.conv_norm(t, &self.stem, x)?;
        let mut h = t.relu(h);
        let mut fused: Option<Var> = None;
        for (stage, lateral) in self.stages.iter().zip(&self.laterals) {
            for block in stage {
                h = self.res_block(t, block, h)?;
            }
            let mut l = self.conv(t, &lateral.conv, h)?;
            if let Resample::Up(f) = lateral.resample {
                l = t.upsample_nearest3d(l, f)?;
            }
            fused = Some(match fused {
                Some(acc) => t.add(acc, l)?,
                None => l,
            });
        }
        Ok(t.layernorm(fused.expect("three stages"), 1, LN_EPS)?)
    }

    fn linear(&self, t: &mut Tape<T>, l: &Linear, x: Var) -> Result<Var, NetError> {
        let w = t.param(&self.store, l.w);
        let b = t.param(&self.store, l.b);
        let y = t.matmul(x, w)?;
        Ok(t.add(y, b)?)
    }

    fn norm(&self, t: &mut Tape<T>, n: &Norm, x: Var) -> Result<Var, NetError> {
        let axis = t.shape(x).len() - 1;
        let y = t.layernorm(x, axis, LN_EPS)?;
        let g = t.param(&self.store, n.gain);
        let b = t.param(&self.store, n.bias);
        let y = t.mul(y, g)?;
        Ok(t.add(y, b)?)
    }

    fn split_heads(&self, t: &mut Tape<T>, x: Var) -> Result<Var, NetError> {
        let s = t.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let h = self.cfg.heads;
        let x = t.reshape(x, &[b, l, h, c / h])?;
        let x = t.permute(x, &[0, 2, 1, 3])?;
        Ok(t.reshape(x, &[b * h, l, c / h])?)
    }

    fn attention(&self, t: &mut Tape<T>, a: &Attention, x: Var, memory: Var) -> Result<Var, NetError> {
        let s = t.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let h = self.cfg.heads;
        let q = self.linear(t, &a.q, x)?;
        let k = self.linear(t, &a.k, memory)?;
        let v = self.linear(t, &a.v, memory)?;
        let q = self.split_heads(t, q)?;
        let k = self.split_heads(t, k)?;
        let v = self.split_heads(t, v)?;
        let y = t.attention(q, k, v)?;
        let y = t.reshape(y, &[b, h, l, c / h])?;
        let y = t.permute(y, &[0, 2, 1, 3])?;
        let y = t.reshape(y, &[b, l, c])?;
        self.linear(t, &a.o, y)
    }

    fn mlp(&self, t: &mut Tape<T>, m: &Mlp, x: Var) -> Result<Var, NetError> {
        let h = self.linear(t, &m.fc1, x)?;
        let h = t.gelu(h);
        self.linear(t, &m.fc2, h)
    }

    /// `x + f(norm(x))`
    fn residual(
        &self,
        t: &mut Tape<T>,
        x: Var,
        norm: &Norm,
        f: impl FnOnce(&Self, &mut Tape<T>, Var) -> Result<Var, NetError>,
    ) -> Result<Var, NetError> {
        let n = self.norm(t, norm, x)?;
        let y = f(self, t, n)?;
        Ok(t.add(x, y)?)
    }

    /// Encoder output `[B, n, C]` for backbone features `[B, C, g, g, g]`.
    pub fn encode_tokens(&self, t: &mut Tape<T>, tokens: Var) -> Result<Var, NetError> {
        let mut x = tokens;
        for layer in &self.encoder {
            x = self.residual(t, x, &layer.norm1, |m, t, n| m.attention(t, &layer.attn, n, n))?;
            x = self.residual(t, x, &layer.norm2, |m, t, n| m.mlp(t, &layer.mlp, n))?;
        }
        self.norm(t, &self.enc_norm, x)
    }

    /// Tokens with position codes added, `[B, n, C]`.
    pub fn tokenize(&self, t: &mut Tape<T>, features: Var) -> Result<Var, NetError> {
        let s = t.shape(features).to_vec();
        let x = t.reshape(features, &[s[0], s[1], s[2] * s[3] * s[4]])?;
        let x = t.permute(x, &[0, 2, 1])?;
        let pos = t.constant(self.pos.clone());
        Ok(t.add(x, pos)?)
    }

    fn decode(&self, t: &mut Tape<T>, memory: Var) -> Result<Var, NetError> {
        let batch = t.shape(memory)[0];
        let (n, c) = (self.cfg.queries, self.cfg.channels);
        let q = t.param(&self.store, self.queries);
        let q = t.reshape(q, &[1, n, c])?;
        let mut x = if batch == 1 { q } else { t.concat(&vec![q; batch], 0)? };
        for layer in &self.decoder {
            x = self.residual(t, x, &layer.norm1, |m, t, h| m.attention(t, &layer.self_attn, h, h))?;
            x = self.residual(t, x, &layer.norm2, |m, t, h| m.mlp(t, &layer.mlp1, h))?;
            x = self.residual(t, x, &layer.norm3, |m, t, h| m.attention(t, &layer.cross_attn, h, memory))?;
            x = self.residual(t, x, &layer.norm4, |m, t, h| m.mlp(t, &layer.mlp2, h))?;
        }
        self.norm(t, &self.dec_norm, x)
    }

    fn heads(&self, t: &mut Tape<T>, x: Var) -> Result<Var, NetError> {
        let mut h = x;
        for (i, layer) in self.point_head.iter().enumerate() {
            h = self.linear(t, layer, h)?;
            if i < 2 {
                h = t.relu(h);
            }
        }
        let geometry = t.sigmoid(h);
        let logit = self.linear(t, &self.cls_head, x)?;
        let cls = t.sigmoid(logit);
        Ok(t.concat(&[geometry, cls], 2)?)
    }

    /// Network output `[B, N, 5]` for an input `[B, 1, S, S, S]`.
    pub fn forward(&self, t: &mut Tape<T>, input: Var) -> Result<Var, NetError> {
        let s = t.shape(input).to_vec();
        let size = self.cfg.block_size;
        if s.len() != 5 || s[1] != 1 || s[2..] != [size, size, size] {
            return Err(NetError::BlockSize {
                expected: size,
                found: s.get(2).copied().unwrap_or(0),
            });
        }
        let features = self.backbone(t, input)?;
        let tokens = self.tokenize(t, features)?;
        let memory = self.encode_tokens(t, tokens)?;
        let x = self.decode(t, memory)?;
        self.heads(t, x)
    }

    /// Batched input tensor `[B, 1, S, S, S]` from blocks.
    pub fn input_tensor(&self, blocks: &[&Block]) -> Result<Tensor<T>, NetError> {
        let size = self.cfg.block_size;
        let mut data = Vec::with_capacity(blocks.len() * size.pow(3));
        for b in blocks {
            if b.size != size || b.data.len() != size.pow(3) {
                return Err(NetError::BlockSize {
                    expected: size,
                    found: b.size,
                });
            }
            data.extend(b.data.iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Ok(Tensor::new(&[blocks.len(), 1, size, size, size], data)?)
    }

    /// Predicted point sets, one per block.
    pub fn predict(&self, blocks: &[&Block]) -> Result<Vec<PointSet>, NetError> {
        let mut tape = Tape::new();
        let input = tape.constant(self.input_tensor(blocks)?);
        let out = self.forward(&mut tape, input)?;
        Ok(output_point_sets(tape.value(out)))
    }
}

/// Splits a `[B, N, 5]` output into point sets.
pub fn output_point_sets<T: Element>(out: &Tensor<T>) -> Vec<PointSet> {
    let s = out.shape();
    let v = out.to_f64_vec();
    (0..s[0])
        .map(|b| {
            let points = (0..s[1])
                .map(|n| {
                    let o = (b * s[1] + n) * 5;
                    PredPoint::from_array([v[o], v[o + 1], v[o + 2], v[o + 3], v[o + 4]])
                })
                .collect();
            PointSet::prediction(points)
        })
        .collect()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".config.json");
    s.into()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the parameters (tagged with the config hash) to `path` and the
/// config to `{path}.config.json`.
pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<(), NetError> {
    let file = File::create(path).map_err(io_err(path))?;
    model.store.write_to(BufWriter::new(file), &model.cfg.hash())?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&model.cfg).expect("config serializes");
    std::fs::write(&side, json).map_err(io_err(&side))?;
    Ok(())
}

/// Loads parameters saved for exactly `cfg`.
pub fn load_checkpoint<T: Element>(path: &Path, cfg: &ModelConfig) -> Result<Model<T>, NetError> {
    let mut model = build_model(cfg, 0)?;
    let file = File::open(path).map_err(io_err(path))?;
    let (tag, records) = read_records(BufReader::new(file))?;
    if tag != cfg.hash() {
        return Err(NetError::ConfigMismatch);
    }
    model.store.load_records(&records)?;
    Ok(model)
}

/// Reads the config sidecar written next to a checkpoint.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig, NetError> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| NetError::Sidecar {
        path: side,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            block_size: 16,
            channels: 12,
            downsample: 8,
            backbone: Preset::Small,
            base_width: Some(4),
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            mlp_hidden: 16,
            queries: 5,
            head_hidden: 8,
        }
    }

    #[test]
    fn default_grid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), 8);
        assert_eq!(cfg.tokens(), 512);
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = ModelConfig {
            channels: 180,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        cfg.channels = 100;
        match cfg.validate() {
            Err(NetError::Config { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("{other:?}"),
        }
        let cfg = ModelConfig {
            block_size: 72,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(NetError::Config { field: "block_size", .. })));
    }

    #[test]
    fn encoding_at_origin() {
        let pe = positional_encoding(&ModelConfig::default());
        let row = &pe.data()[..192];
        for (i, v) in row.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn encodings_are_distinct() {
        let cfg = ModelConfig::default();
        let pe = positional_encoding(&cfg);
        let c = cfg.channels;
        let rows: Vec<&[f64]> = pe.data().chunks(c).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].iter().zip(rows[j]).any(|(a, b)| a != b), "{i} {j}");
            }
        }
    }

    #[test]
    fn forward_shape_and_range() {
        let cfg = tiny();
        let model: Model<f32> = build_model(&cfg, 3).unwrap();
        let block = Block {
            origin: [0; 3],
            size: 16,
            data: (0..16 * 16 * 16).map(|i| (i % 7) as f32 / 7.0).collect(),
        };
        let sets = model.predict(&[&block, &block]).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].len(), 5);
        assert_eq!(sets[0], sets[1]);
        assert!(sets[0].iter().all(|p| p.to_array().iter().all(|v| *v > 0.0 && *v < 1.0)));
        let again = model.predict(&[&block]).unwrap();
        assert_eq!(again[0], sets[0]);
    }

    #[test]
    fn wrong_block_size() {
        let model: Model<f32> = build_model(&tiny(), 0).unwrap();
        let block = Block {
            origin: [0; 3],
            size: 8,
            data: vec![0.0; 512],
        };
        assert!(matches!(model.predict(&[&block]), Err(NetError::BlockSize { .. })));
    }

    #[test]
    fn every_fusion_stride_builds() {
        for downsample in [4, 8, 16] {
            let cfg = ModelConfig { downsample, ..tiny() };
            let model: Model<f32> = build_model(&cfg, 1).unwrap();
            let block = Block {
                origin: [0; 3],
                size: 16,
                data: vec![0.5; 4096],
            };
            assert_eq!(model.predict(&[&block]).unwrap()[0].len(), 5);
        }
    }

    #[test]
    fn presets_build() {
        for backbone in [Preset::ResNet18, Preset::ResNet34, Preset::ResNet50] {
            let cfg = ModelConfig {
                backbone,
                base_width: Some(2),
                ..tiny()
            };
            let model: Model<f32> = build_model(&cfg, 1).unwrap();
            assert!(model.param_count() > 0);
        }
    }
}
