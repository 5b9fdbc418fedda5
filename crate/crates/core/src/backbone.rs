//! Small convolutional embedding network with optional CAIM insertions.
//!
//! Block `i` is `conv3×3 (stride 2, padding 1) → ReLU`. After the last block
//! the map is pooled, projected to the embedding width and L2-normalized.
//! An inserted CAIM block sits directly after backbone block `i`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::block::{self, BlockMode, CaimParams, CaimVars, Gate};
use crate::data::hash64;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{load_tensors, save_tensors, Tensor};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of each block; its length is the block count `N`.
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub input_size: [usize; 2],
    pub embedding_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: vec![16, 32, 64, 64, 64], input_channels: 3, input_size: [32, 32], embedding_dim: 64 }
    }
}

impl BackboneConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks() < 2 {
            return Err(Error::Config(format!("need at least 2 blocks, got {}", self.num_blocks())));
        }
        if self.embedding_dim < 8 {
            return Err(Error::Config(format!("embedding dim must be >= 8, got {}", self.embedding_dim)));
        }
        if self.channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let [mut h, mut w] = self.input_size;
        for i in 0..self.num_blocks() {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "spatial size collapses to {h}x{w} before block {} of {}",
                    i + 1,
                    self.num_blocks()
                )));
            }
            h = ops::conv_out_size(h, 2, 1)?;
            w = ops::conv_out_size(w, 2, 1)?;
        }
        Ok(())
    }
}

/// Frozen-able backbone tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    /// `(weight [C_i, C_{i-1}, 3, 3], bias [C_i])` per block.
    pub blocks: Vec<(Tensor, Tensor)>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl BackboneWeights {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|(w, b)| [w, b]).collect();
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|(w, b)| [w, b]).collect();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Order-sensitive checksum over the raw bits of every weight.
    pub fn checksum(&self) -> u64 {
        let bits: Vec<u64> = self.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        hash64(&bits)
    }
}

/// One inserted block.
#[derive(Clone, Debug, PartialEq)]
pub struct CaimSlot {
    /// 1-based: the block sits after backbone block `position`.
    pub position: usize,
    pub params: CaimParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelAssembly {
    pub config: BackboneConfig,
    pub backbone: BackboneWeights,
    pub caim: Vec<CaimSlot>,
    pub mode: BlockMode,
    pub frozen: bool,
    pub eps: f64,
}

/// Every model tensor recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub blocks: Vec<(Var, Var)>,
    pub head: (Var, Var),
    pub caim: Vec<(usize, CaimVars)>,
}

impl BoundModel {
    pub fn backbone_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.blocks.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.head.0, self.head.1]);
        v
    }

    pub fn caim_vars(&self) -> Vec<Var> {
        self.caim.iter().flat_map(|(_, c)| c.vars()).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Seeded He-uniform backbone without CAIM blocks.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ModelAssembly> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[seed, 0xbb]));
    let mut cin = cfg.input_channels;
    let mut blocks = Vec::with_capacity(cfg.num_blocks());
    for &cout in &cfg.channels {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        blocks.push((uniform(&mut rng, &[cout, cin, 3, 3], bound), Tensor::zeros(&[cout])));
        cin = cout;
    }
    let bound = 1.0 / (cin as f64).sqrt();
    let head_w = uniform(&mut rng, &[cfg.embedding_dim, cin], bound);
    let head_b = Tensor::zeros(&[cfg.embedding_dim]);
    Ok(ModelAssembly {
        config: cfg.clone(),
        backbone: BackboneWeights { blocks, head_w, head_b },
        caim: Vec::new(),
        mode: BlockMode::Conditional,
        frozen: false,
        eps: block::DEFAULT_EPS,
    })
}

/// Copies a single-channel batch into three identical channels. Three-channel
/// input passes through and the returned flag is `true`.
pub fn replicate_channels(img: &Tensor) -> Result<(Tensor, bool)> {
    let (b, c, h, w) = img.dims4("replicate_channels")?;
    match c {
        3 => Ok((img.clone(), true)),
        1 => {
            let n = h * w;
            let mut data = Vec::with_capacity(b * 3 * n);
            for plane in img.data().chunks_exact(n) {
                for _ in 0..3 {
                    data.extend_from_slice(plane);
                }
            }
            Ok((Tensor::new(vec![b, 3, h, w], data)?, false))
        }
        _ => Err(Error::shape("replicate_channels", format!("expected 1 or 3 channels, got {c}"))),
    }
}

impl ModelAssembly {
    pub fn caim_positions(&self) -> Vec<usize> {
        self.caim.iter().map(|s| s.position).collect()
    }

    /// Tensors an optimizer may update: the CAIM blocks once frozen, the
    /// backbone before.
    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        if self.frozen {
            self.caim.iter().flat_map(|s| s.params.tensors()).collect()
        } else {
            self.backbone.tensors()
        }
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        if self.frozen {
            self.caim.iter_mut().flat_map(|s| s.params.tensors_mut()).collect()
        } else {
            self.backbone.tensors_mut()
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Records the model on `tape`. With `grads`, whichever group is
    /// trainable is recorded as parameters; the rest as constants.
    pub fn bind(&self, tape: &mut Tape, grads: bool) -> Result<BoundModel> {
        let backbone_grad = grads && !self.frozen;
        let caim_grad = grads && self.frozen;
        let mut blocks = Vec::with_capacity(self.backbone.blocks.len());
        for (w, b) in &self.backbone.blocks {
            blocks.push((tape.leaf(w.clone(), backbone_grad)?, tape.leaf(b.clone(), backbone_grad)?));
        }
        let head = (
            tape.leaf(self.backbone.head_w.clone(), backbone_grad)?,
            tape.leaf(self.backbone.head_b.clone(), backbone_grad)?,
        );
        let caim = self
            .caim
            .iter()
            .map(|s| Ok((s.position, s.params.bind(tape, caim_grad)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { blocks, head, caim })
    }

    /// Embeds a `[B, 3, H, W]` batch already on the tape.
    pub fn embed_on_tape(&self, tape: &mut Tape, bound: &BoundModel, x: Var, gate: Gate) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4("forward_embed")?;
        if c != self.config.input_channels || [h, w] != self.config.input_size {
            return Err(Error::shape(
                "forward_embed",
                format!(
                    "input {:?} does not match configured {}x{}x{}",
                    tape.value(x).shape(),
                    self.config.input_channels,
                    self.config.input_size[0],
                    self.config.input_size[1]
                ),
            ));
        }
        let mut hcur = x;
        for (i, &(wv, bv)) in bound.blocks.iter().enumerate() {
            hcur = tape.conv2d_3x3(hcur, wv, bv, 2, 1)?;
            hcur = tape.relu(hcur)?;
            for (pos, vars) in &bound.caim {
                if *pos == i + 1 {
                    hcur = block::block_forward(tape, hcur, gate, self.mode, vars, self.eps)?;
                }
            }
        }
        let pooled = tape.global_avg_pool(hcur)?;
        let e = tape.linear(pooled, bound.head.0, bound.head.1)?;
        tape.l2_normalize(e, NORM_EPS)
    }

    /// Unit-norm embeddings `[B, D]` of a 1- or 3-channel image batch.
    pub fn forward_embed(&self, img: &Tensor, gate: Gate) -> Result<Tensor> {
        let (img, _) = replicate_channels(img)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(&img)?;
        let e = self.embed_on_tape(&mut tape, &bound, x, gate)?;
        Ok(tape.value(e).clone())
    }

    /// Embeds `[C, H, W]` images in fixed-size chunks.
    pub fn embed_images(&self, images: &[&Tensor], gate: Gate) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let parts = images
            .chunks(CHUNK)
            .map(|chunk| self.forward_embed(&stack_images(chunk)?, gate))
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.embedding_dim]));
        }
        Tensor::stack_outer(&parts)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(&dir.join("backbone.bin"), &self.backbone.tensors())?;
        for slot in &self.caim {
            slot.params.save(&dir.join(format!("caim_{}.bin", slot.position)))?;
        }
        let meta = AssemblyFile {
            num_blocks: self.config.num_blocks(),
            caim_positions: self.caim_positions(),
            embedding_dim: self.config.embedding_dim,
            channels: self.config.channels.clone(),
            input_channels: self.config.input_channels,
            input_size: self.config.input_size,
            block_mode: self.mode,
            frozen: self.frozen,
            eps: self.eps,
        };
        let path = dir.join("assembly.json");
        let json = serde_json::to_string_pretty(&meta).expect("assembly serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("assembly.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: AssemblyFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if meta.channels.len() != meta.num_blocks {
            return Err(Error::format(&path, "num_blocks disagrees with channels"));
        }
        let config = BackboneConfig {
            channels: meta.channels,
            input_channels: meta.input_channels,
            input_size: meta.input_size,
            embedding_dim: meta.embedding_dim,
        };
        config.validate()?;
        let fresh = build_backbone(&config, 0)?;
        let bpath = dir.join("backbone.bin");
        let tensors = load_tensors(&bpath)?;
        let expected = fresh.backbone.tensors();
        if tensors.len() != expected.len()
            || tensors.iter().zip(&expected).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::format(&bpath, "backbone tensors do not match assembly.json"));
        }
        let n = config.num_blocks();
        let mut it = tensors.into_iter();
        let blocks = (0..n).map(|_| (it.next().unwrap(), it.next().unwrap())).collect();
        let backbone = BackboneWeights { blocks, head_w: it.next().unwrap(), head_b: it.next().unwrap() };
        let mut caim = Vec::new();
        for pos in meta.caim_positions {
            if pos == 0 || pos > n {
                return Err(Error::format(&path, format!("CAIM position {pos} outside 1..={n}")));
            }
            let params = CaimParams::load(&dir.join(format!("caim_{pos}.bin")))?;
            if params.channels() != config.channels[pos - 1] {
                return Err(Error::format(&path, format!("CAIM block {pos} has wrong channel count")));
            }
            caim.push(CaimSlot { position: pos, params });
        }
        Ok(ModelAssembly { config, backbone, caim, mode: meta.block_mode, frozen: meta.frozen, eps: meta.eps })
    }
}

#[derive(Serialize, Deserialize)]
struct AssemblyFile {
    num_blocks: usize,
    caim_positions: Vec<usize>,
    embedding_dim: usize,
    channels: Vec<usize>,
    input_channels: usize,
    input_size: [usize; 2],
    block_mode: BlockMode,
    frozen: bool,
    eps: f64,
}

/// Stacks `[C, H, W]` images into a `[B, C, H, W]` batch, replicating
/// single-channel images so mixed inputs share one layout.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let parts = images
        .iter()
        .map(|im| {
            let shape = im.shape();
            if shape.len() != 3 {
                return Err(Error::shape("stack_images", format!("expected [C,H,W], got {shape:?}")));
            }
            let batch = (*im).clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
            Ok(replicate_channels(&batch)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&parts)
}

/// Inserts blocks after backbone blocks `1..=k` and freezes the backbone.
pub fn insert_caim(model: &ModelAssembly, k: usize, seed: u64) -> Result<ModelAssembly> {
    insert_caim_with_mode(model, k, seed, BlockMode::Conditional)
}

pub fn insert_caim_with_mode(model: &ModelAssembly, k: usize, seed: u64, mode: BlockMode) -> Result<ModelAssembly> {
    let n = model.config.num_blocks();
    if k == 0 || k > n {
        return Err(Error::Config(format!("CAIM count must be in 1..={n}, got {k}")));
    }
    let mut out = model.clone();
    out.caim = (1..=k)
        .map(|pos| {
            let c = model.config.channels[pos - 1];
            CaimSlot { position: pos, params: block::init_caim(hash64(&[seed, 0xca1, pos as u64]), c, c) }
        })
        .collect();
    out.mode = mode;
    out.freeze();
    Ok(out)
}
