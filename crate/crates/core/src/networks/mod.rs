//! Encoder, feature decoupler, image and segmentation decoders (the fast
//! network) and the denoising shape-correction autoencoder (the slow network).
//!
//! Every network is a plain encoder/decoder without skip connections, so the
//! latent code is the only path from input to output.

mod checkpoint;
mod config;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoupler,
    ImageDecoder,
    SegDecoder,
    Stn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Decoupler,
        ParamGroup::ImageDecoder,
        ParamGroup::SegDecoder,
        ParamGroup::Stn,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoupler => "decoupler",
            ParamGroup::ImageDecoder => "image_decoder",
            ParamGroup::SegDecoder => "seg_decoder",
            ParamGroup::Stn => "stn",
        }
    }

    #[cfg(test)]
    fn of_name(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResRef {
    first: ConvRef,
    second: ConvRef,
}

#[derive(Clone, Debug)]
struct EncoderLayout {
    stem: ConvRef,
    stages: Vec<(ConvRef, ResRef)>,
    out: ConvRef,
}

#[derive(Clone, Debug)]
struct DecoderLayout {
    input: ConvRef,
    stages: Vec<(ResRef, ConvRef)>,
    full: ConvRef,
    head: ConvRef,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: EncoderLayout,
    decoupler: [ConvRef; 2],
    image_decoder: DecoderLayout,
    seg_decoder: DecoderLayout,
    stn_encoder: EncoderLayout,
    stn_decoder: DecoderLayout,
}

/// How a fresh convolution is initialised.
#[derive(Clone, Copy)]
enum Init {
    /// He-uniform, for convolutions feeding a ReLU.
    Relu,
    /// Unit-gain uniform, for linear outputs.
    Linear,
    /// Residual branch output, scaled down so blocks start near identity.
    Residual,
}

/// Collects parameter shapes while the layout is being built.
struct Builder<'a> {
    params: Vec<(String, ParamGroup, Vec<usize>, Init)>,
    group: ParamGroup,
    _cfg: &'a ArchConfig,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, init: Init) -> ConvRef {
        let p = self.group.prefix();
        let weight = self.params.len();
        self.params
            .push((format!("{p}.{name}.weight"), self.group, vec![c_out, c_in, 3, 3], init));
        self.params.push((format!("{p}.{name}.bias"), self.group, vec![c_out], init));
        ConvRef {
            weight,
            bias: weight + 1,
        }
    }

    fn res(&mut self, name: &str, ch: usize) -> ResRef {
        ResRef {
            first: self.conv(&format!("{name}.conv1"), ch, ch, Init::Relu),
            second: self.conv(&format!("{name}.conv2"), ch, ch, Init::Residual),
        }
    }

    fn encoder(&mut self, tag: &str, in_ch: usize, widths: &[usize], latent: usize) -> EncoderLayout {
        let stem = self.conv(&format!("{tag}stem"), in_ch, widths[0], Init::Relu);
        let mut stages = Vec::new();
        for l in 1..widths.len() {
            let down = self.conv(&format!("{tag}down{l}"), widths[l - 1], widths[l], Init::Relu);
            let res = self.res(&format!("{tag}res{l}"), widths[l]);
            stages.push((down, res));
        }
        let out = self.conv(&format!("{tag}latent"), *widths.last().unwrap(), latent, Init::Linear);
        EncoderLayout { stem, stages, out }
    }

    fn decoder(&mut self, tag: &str, widths: &[usize], latent: usize, out_ch: usize) -> DecoderLayout {
        let d = widths.len();
        let input = self.conv(&format!("{tag}input"), latent, widths[d - 1], Init::Relu);
        let mut stages = Vec::new();
        for l in (1..d).rev() {
            let res = self.res(&format!("{tag}res{l}"), widths[l]);
            let up = self.conv(&format!("{tag}up{l}"), widths[l], widths[l - 1], Init::Relu);
            stages.push((res, up));
        }
        let full = self.conv(&format!("{tag}full"), widths[0], widths[0], Init::Relu);
        let head = self.conv(&format!("{tag}head"), widths[0], out_ch, Init::Linear);
        DecoderLayout {
            input,
            stages,
            full,
            head,
        }
    }
}

fn build_layout(cfg: &ArchConfig) -> (Layout, Vec<(String, ParamGroup, Vec<usize>, Init)>) {
    let mut b = Builder {
        params: Vec::new(),
        group: ParamGroup::Encoder,
        _cfg: cfg,
    };
    let (w, c, k) = (&cfg.widths, cfg.latent_channels, cfg.classes);
    let encoder = b.encoder("", 1, w, c);
    b.group = ParamGroup::Decoupler;
    let decoupler = [
        b.conv("conv1", c, c, Init::Linear),
        b.conv("conv2", c, c, Init::Relu),
    ];
    b.group = ParamGroup::ImageDecoder;
    let image_decoder = b.decoder("", w, c, 1);
    b.group = ParamGroup::SegDecoder;
    let seg_decoder = b.decoder("", w, c, k);
    b.group = ParamGroup::Stn;
    let stn_encoder = b.encoder("encoder.", k, w, c);
    let stn_decoder = b.decoder("decoder.", w, c, k);
    (
        Layout {
            encoder,
            decoupler,
            image_decoder,
            seg_decoder,
            stn_encoder,
            stn_decoder,
        },
        b.params,
    )
}

/// Every learnable parameter of both networks plus the architecture they fit.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ArchConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl ModelBundle {
    /// Freshly initialised model; deterministic in `seed`.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, group, shape, init)| {
                let is_bias = shape.len() == 1;
                let tensor = if is_bias {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let gain = match init {
                        Init::Relu => 2.0,
                        Init::Linear => 1.0,
                        Init::Residual => 0.1,
                    };
                    let bound = (3.0 * gain / fan_in).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                };
                Param {
                    name,
                    group,
                    tensor: Arc::new(tensor),
                }
            })
            .collect();
        Ok(ModelBundle {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a bundle from named tensors; every parameter must be present
    /// with the shape the config implies.
    pub fn from_named(config: ArchConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if named.len() != specs.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (name, group, shape, _) in specs {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            let (_, t) = named.swap_remove(pos);
            t.expect_shape("ModelBundle::from_named", &shape)?;
            params.push(Param {
                name,
                group,
                tensor: Arc::new(t),
            });
        }
        Ok(ModelBundle {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Mutable access to one parameter's values.
    pub fn param_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[index].tensor)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        value.expect_shape("set_param", self.params[i].tensor.shape())?;
        self.params[i].tensor = Arc::new(value);
        Ok(())
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundModel<'_> {
        let ids = self
            .params
            .iter()
            .map(|p| graph.leaf_shared(Arc::clone(&p.tensor), trainable))
            .collect();
        BoundModel { bundle: self, ids }
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        x.expect_shape("image", &[1, self.config.height, self.config.width])?;
        x.check_finite("image")
    }

    fn check_prob(&self, p: &Tensor) -> Result<()> {
        p.expect_shape(
            "segmentation",
            &[self.config.classes, self.config.height, self.config.width],
        )
    }

    /// Latent image code `z_i` of one image.
    pub fn encode(&self, x: &Tensor) -> Result<LatentCode> {
        self.check_image(x)?;
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let xi = g.leaf(x.clone(), false);
        let z = m.encode(&mut g, xi)?;
        Ok(LatentCode {
            role: LatentRole::Image,
            tensor: g.value(z).clone(),
        })
    }

    pub fn decouple(&self, z_i: &LatentCode) -> Result<LatentCode> {
        self.eval_latent(z_i, |m, g, z| m.decouple(g, z))
            .map(|tensor| LatentCode {
                role: LatentRole::Shape,
                tensor,
            })
    }

    pub fn decode_image(&self, z_i: &LatentCode) -> Result<Tensor> {
        self.eval_latent(z_i, |m, g, z| m.decode_image(g, z))
    }

    pub fn decode_seg(&self, z_s: &LatentCode) -> Result<SegProb> {
        self.eval_latent(z_s, |m, g, z| m.decode_seg(g, z)).map(SegProb)
    }

    fn eval_latent(
        &self,
        z: &LatentCode,
        f: impl FnOnce(&BoundModel<'_>, &mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<Tensor> {
        let (c, h, w) = self.config.latent_dims();
        z.tensor.expect_shape("latent", &[c, h, w])?;
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let zi = g.leaf(z.tensor.clone(), false);
        let out = f(&m, &mut g, zi)?;
        Ok(g.value(out).clone())
    }

    /// Refines a segmentation probability map with the shape-correction network.
    pub fn shape_correct(&self, p: &SegProb) -> Result<SegProb> {
        self.check_prob(&p.0)?;
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let pi = g.leaf(p.0.clone(), false);
        let out = m.shape_correct(&mut g, pi)?;
        Ok(SegProb(g.value(out).clone()))
    }

    /// Fast segmentation: decoder(decoupler(encoder(x))).
    pub fn ftn_predict(&self, x: &Tensor) -> Result<SegProb> {
        self.check_image(x)?;
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let xi = g.leaf(x.clone(), false);
        let p = m.ftn(&mut g, xi)?;
        Ok(SegProb(g.value(p).clone()))
    }

    /// Fast segmentation followed by shape correction.
    pub fn full_predict(&self, x: &Tensor) -> Result<SegProb> {
        let p = self.ftn_predict(x)?;
        self.shape_correct(&p)
    }
}

/// A bundle whose parameters live on a particular graph.
pub struct BoundModel<'a> {
    bundle: &'a ModelBundle,
    ids: Vec<NodeId>,
}

impl BoundModel<'_> {
    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    /// Graph node of parameter `index`.
    pub fn param_node(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn nodes_of(&self, group: ParamGroup) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.bundle
            .params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| (i, self.ids[i]))
    }

    fn conv(&self, g: &mut Graph, x: NodeId, c: ConvRef) -> Result<NodeId> {
        g.conv2d(x, self.ids[c.weight], Some(self.ids[c.bias]), 1, 1)
    }

    fn conv_relu(&self, g: &mut Graph, x: NodeId, c: ConvRef) -> Result<NodeId> {
        let y = self.conv(g, x, c)?;
        Ok(g.relu(y))
    }

    /// Pre-activation residual block: `x + conv2(relu(conv1(relu(x))))`.
    fn res(&self, g: &mut Graph, x: NodeId, r: ResRef) -> Result<NodeId> {
        let a = g.relu(x);
        let a = self.conv_relu(g, a, r.first)?;
        let a = self.conv(g, a, r.second)?;
        g.add(x, a)
    }

    fn run_encoder(&self, g: &mut Graph, x: NodeId, e: &EncoderLayout) -> Result<NodeId> {
        let mut h = self.conv_relu(g, x, e.stem)?;
        for &(down, res) in &e.stages {
            h = g.maxpool2(h)?;
            h = self.conv_relu(g, h, down)?;
            h = self.res(g, h, res)?;
        }
        h = g.maxpool2(h)?;
        self.conv(g, h, e.out)
    }

    /// Returns pre-activation outputs of the head.
    fn run_decoder(&self, g: &mut Graph, z: NodeId, d: &DecoderLayout) -> Result<NodeId> {
        let mut h = self.conv_relu(g, z, d.input)?;
        h = g.upsample2(h)?;
        for &(res, up) in &d.stages {
            h = self.res(g, h, res)?;
            h = self.conv_relu(g, h, up)?;
            h = g.upsample2(h)?;
        }
        h = self.conv_relu(g, h, d.full)?;
        self.conv(g, h, d.head)
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let cfg = &self.bundle.config;
        g.value(x).expect_shape("encode", &[1, cfg.height, cfg.width])?;
        self.run_encoder(g, x, &self.bundle.layout.encoder)
    }

    /// Two convolutions followed by a ReLU; output is elementwise non-negative.
    pub fn decouple(&self, g: &mut Graph, z_i: NodeId) -> Result<NodeId> {
        let [c1, c2] = self.bundle.layout.decoupler;
        let h = self.conv(g, z_i, c1)?;
        self.conv_relu(g, h, c2)
    }

    /// Reconstructed image in `[0, 1]`.
    pub fn decode_image(&self, g: &mut Graph, z_i: NodeId) -> Result<NodeId> {
        let logits = self.run_decoder(g, z_i, &self.bundle.layout.image_decoder)?;
        Ok(g.sigmoid(logits))
    }

    /// Per-pixel class probabilities.
    pub fn decode_seg(&self, g: &mut Graph, z_s: NodeId) -> Result<NodeId> {
        let logits = self.run_decoder(g, z_s, &self.bundle.layout.seg_decoder)?;
        g.softmax(logits)
    }

    pub fn shape_correct(&self, g: &mut Graph, p: NodeId) -> Result<NodeId> {
        let cfg = &self.bundle.config;
        g.value(p)
            .expect_shape("shape_correct", &[cfg.classes, cfg.height, cfg.width])?;
        let z = self.run_encoder(g, p, &self.bundle.layout.stn_encoder)?;
        let logits = self.run_decoder(g, z, &self.bundle.layout.stn_decoder)?;
        g.softmax(logits)
    }

    pub fn ftn(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z_i = self.encode(g, x)?;
        let z_s = self.decouple(g, z_i)?;
        self.decode_seg(g, z_s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRole {
    /// `z_i`, feeding the image decoder.
    Image,
    /// `z_s`, feeding the segmentation decoder.
    Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub role: LatentRole,
    pub tensor: Tensor,
}

/// `[C,H,W]` class probabilities; each pixel sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SegProb(pub Tensor);

impl SegProb {
    /// One-hot map of a label image, cast to probabilities.
    pub fn one_hot(labels: &[u8], classes: usize, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim("one_hot", "pixels", height * width, labels.len()));
        }
        let hw = height * width;
        let mut t = Tensor::zeros(&[classes, height, width]);
        for (px, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::contract(format!("label {l} at pixel {px} >= {classes} classes")));
            }
            t.data_mut()[l as usize * hw + px] = 1.0;
        }
        Ok(SegProb(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn labels(&self) -> Vec<u8> {
        self.0.argmax_channels().expect("SegProb is rank 3")
    }

    /// Checks non-negativity and per-pixel normalisation within `tol`.
    pub fn validate(&self, tol: f32) -> Result<()> {
        let (c, h, w) = self.0.chw("SegProb")?;
        let hw = h * w;
        let d = self.0.data();
        for px in 0..hw {
            let mut s = 0.0f32;
            for k in 0..c {
                let v = d[k * hw + px];
                if !(v >= 0.0) {
                    return Err(Error::contract(format!("negative probability {v} at pixel {px}")));
                }
                s += v;
            }
            if (s - 1.0).abs() > tol {
                return Err(Error::contract(format!("pixel {px} sums to {s}")));
            }
        }
        Ok(())
    }
}
