//! Conditional adaptive instance modulation.
//!
//! A block normalizes a feature map per sample and channel, predicts a new
//! per-channel scale and shift from the *un-normalized* map through a small
//! convolutional stylizer, and adds the modulated map back onto its input
//! when the gate is open:
//!
//! ```text
//! ξ        = GAP(ReLU(conv2(ReLU(conv1(F)))))
//! σ_f, μ_f = FC_σ(ξ), FC_μ(ξ)
//! AIM(F)   = σ_f · (F − μ(F)) / σ(F) + μ_f
//! CAIM(F)  = g · AIM(F) + F
//! ```
//!
//! The FC heads start at zero, so a freshly initialized block is the identity
//! for either gate value.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{load_tensors, save_tensors, Tensor};

/// `eps` added to the spatial variance inside the block.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Modality switch for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gate {
    /// `g = 0`: visible/reference images; blocks are pass-through.
    Source,
    /// `g = 1`: the other modality; blocks modulate.
    Target,
}

impl Gate {
    pub fn bit(self) -> u8 {
        match self {
            Gate::Source => 0,
            Gate::Target => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Result<Gate> {
        match bit {
            0 => Ok(Gate::Source),
            1 => Ok(Gate::Target),
            b => Err(Error::Config(format!("gate must be 0 or 1, got {b}"))),
        }
    }
}

/// How an inserted block responds to the gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// `g · AIM(F) + F`.
    #[default]
    Conditional,
    /// `AIM(F) + F` for both modalities.
    UnconditionalAim,
    /// `IN(F) + F` for both modalities (σ_f = 1, μ_f = 0).
    UnconditionalIn,
}

/// Learnable tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct CaimParams {
    /// `[S, C, 3, 3]`
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    /// `[S, S, 3, 3]`
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// `[C, S]`
    pub fc_sigma_w: Tensor,
    pub fc_sigma_b: Tensor,
    /// `[C, S]`
    pub fc_mu_w: Tensor,
    pub fc_mu_b: Tensor,
}

impl CaimParams {
    /// Channel count of the host feature map.
    pub fn channels(&self) -> usize {
        self.conv1_w.shape()[1]
    }

    /// Stylizer width `S`.
    pub fn width(&self) -> usize {
        self.conv1_w.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_sigma_w,
            &self.fc_sigma_b,
            &self.fc_mu_w,
            &self.fc_mu_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_sigma_w,
            &mut self.fc_sigma_b,
            &mut self.fc_mu_w,
            &mut self.fc_mu_b,
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let [conv1_w, conv1_b, conv2_w, conv2_b, fc_sigma_w, fc_sigma_b, fc_mu_w, fc_mu_b]: [Tensor; 8] =
            tensors
                .try_into()
                .map_err(|v: Vec<Tensor>| Error::Data(format!("CAIM block needs 8 tensors, got {}", v.len())))?;
        let p = CaimParams { conv1_w, conv1_b, conv2_w, conv2_b, fc_sigma_w, fc_sigma_b, fc_mu_w, fc_mu_b };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.conv1_w.ndim() != 4 {
            return Err(Error::Data(format!("conv1 weight shape {:?}", self.conv1_w.shape())));
        }
        let (s, c) = (self.width(), self.channels());
        let expected: [&[usize]; 8] = [&[s, c, 3, 3], &[s], &[s, s, 3, 3], &[s], &[c, s], &[c], &[c, s], &[c]];
        for (t, e) in self.tensors().iter().zip(expected) {
            if t.shape() != e {
                return Err(Error::Data(format!("CAIM tensor shape {:?}, expected {e:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("CaimParams"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(load_tensors(path)?)
    }

    /// Records the tensors on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<CaimVars> {
        let [a, b, c, d, e, f, g, h] = self.tensors();
        let mut put = |t: &Tensor| tape.leaf(t.clone(), trainable);
        Ok(CaimVars {
            conv1_w: put(a)?,
            conv1_b: put(b)?,
            conv2_w: put(c)?,
            conv2_b: put(d)?,
            fc_sigma_w: put(e)?,
            fc_sigma_b: put(f)?,
            fc_mu_w: put(g)?,
            fc_mu_b: put(h)?,
        })
    }

    /// Inference without gradients.
    pub fn apply(&self, f: &Tensor, gate: Gate, mode: BlockMode, eps: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(f)?;
        let y = block_forward(&mut tape, x, gate, mode, &vars, eps)?;
        Ok(tape.value(y).clone())
    }
}

/// [`CaimParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CaimVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub fc_sigma_w: Var,
    pub fc_sigma_b: Var,
    pub fc_mu_w: Var,
    pub fc_mu_b: Var,
}

impl CaimVars {
    pub fn vars(&self) -> [Var; 8] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc_sigma_w,
            self.fc_sigma_b,
            self.fc_mu_w,
            self.fc_mu_b,
        ]
    }

    /// Inverse of [`vars`](Self::vars).
    pub fn from_vars(v: [Var; 8]) -> Self {
        CaimVars {
            conv1_w: v[0],
            conv1_b: v[1],
            conv2_w: v[2],
            conv2_b: v[3],
            fc_sigma_w: v[4],
            fc_sigma_b: v[5],
            fc_mu_w: v[6],
            fc_mu_b: v[7],
        }
    }
}

/// Shared representation `ξ_f`, `[B, S]`.
#[derive(Clone, Copy, Debug)]
pub struct StyleCode {
    pub xi: Var,
}

/// Predicted modulation, each `[B, C]`. The scale is not sign-constrained.
#[derive(Clone, Copy, Debug)]
pub struct AffinePair {
    pub sigma_f: Var,
    pub mu_f: Var,
}

/// Instance normalization settings. `None` affine terms mean `γ = 1`, `β = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormConfig {
    pub eps: f64,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

impl InstanceNormConfig {
    pub fn plain(eps: f64) -> Self {
        InstanceNormConfig { eps, gamma: None, beta: None }
    }
}

/// `γ · (F − μ(F)) / σ(F) + β` with per-sample, per-channel statistics.
pub fn instance_norm(f: &Tensor, cfg: &InstanceNormConfig) -> Result<Tensor> {
    let (b, c, _, _) = f.dims4("instance_norm")?;
    let per_channel = |v: &Option<Vec<f64>>, default: f64| -> Result<Tensor> {
        match v {
            None => Ok(Tensor::full(&[b, c], default)),
            Some(v) if v.len() == c => Ok(Tensor::from_fn(&[b, c], |i| v[i % c])),
            Some(v) => Err(Error::shape("instance_norm", format!("{} affine values for {c} channels", v.len()))),
        }
    };
    let stats = ops::instance_stats(f, cfg.eps)?;
    ops::normalize_scale_shift(f, &stats, &per_channel(&cfg.gamma, 1.0)?, &per_channel(&cfg.beta, 0.0)?)
}

/// Adaptive instance normalization: re-standardize `content` to the
/// per-channel mean and standard deviation of `style`.
pub fn adain(content: &Tensor, style: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, _, _) = content.dims4("adain")?;
    let (sb, sc, _, _) = style.dims4("adain")?;
    if (b, c) != (sb, sc) {
        return Err(Error::shape("adain", format!("content {:?} vs style {:?}", content.shape(), style.shape())));
    }
    let target = ops::instance_stats(style, eps)?;
    let own = ops::instance_stats(content, eps)?;
    ops::normalize_scale_shift(content, &own, &target.std, &target.mean)
}

/// `conv1 → ReLU → conv2 → ReLU → GAP` on the un-normalized map.
pub fn stylizer_forward(tape: &mut Tape, f: Var, p: &CaimVars) -> Result<StyleCode> {
    let h = tape.conv2d_3x3(f, p.conv1_w, p.conv1_b, 1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d_3x3(h, p.conv2_w, p.conv2_b, 1, 1)?;
    let h = tape.relu(h)?;
    Ok(StyleCode { xi: tape.global_avg_pool(h)? })
}

pub fn estimate_affine(tape: &mut Tape, style: StyleCode, p: &CaimVars) -> Result<AffinePair> {
    Ok(AffinePair {
        sigma_f: tape.linear(style.xi, p.fc_sigma_w, p.fc_sigma_b)?,
        mu_f: tape.linear(style.xi, p.fc_mu_w, p.fc_mu_b)?,
    })
}

/// `σ_f · IN(F) + μ_f` with the affine pair predicted from `F` itself.
pub fn aim(tape: &mut Tape, f: Var, p: &CaimVars, eps: f64) -> Result<Var> {
    let style = stylizer_forward(tape, f, p)?;
    let AffinePair { sigma_f, mu_f } = estimate_affine(tape, style, p)?;
    tape.normalize_scale_shift(f, sigma_f, mu_f, eps)
}

/// `g · AIM(F) + F`. With the gate closed this returns `f` itself, untouched.
pub fn caim_forward(tape: &mut Tape, f: Var, gate: Gate, p: &CaimVars, eps: f64) -> Result<Var> {
    match gate {
        Gate::Source => Ok(f),
        Gate::Target => {
            let m = aim(tape, f, p, eps)?;
            tape.add(m, f)
        }
    }
}

/// Dispatches on the block mode; the unconditional modes ignore `gate`.
pub fn block_forward(
    tape: &mut Tape,
    f: Var,
    gate: Gate,
    mode: BlockMode,
    p: &CaimVars,
    eps: f64,
) -> Result<Var> {
    match mode {
        BlockMode::Conditional => caim_forward(tape, f, gate, p, eps),
        BlockMode::UnconditionalAim => caim_forward(tape, f, Gate::Target, p, eps),
        BlockMode::UnconditionalIn => {
            let (b, c, _, _) = tape.value(f).dims4("instance_norm")?;
            let one = tape.constant(&Tensor::full(&[b, c], 1.0))?;
            let zero = tape.constant(&Tensor::zeros(&[b, c]))?;
            let n = tape.normalize_scale_shift(f, one, zero, eps)?;
            tape.add(n, f)
        }
    }
}

/// He-uniform stylizer convolutions, zero biases, zero FC heads.
pub fn init_caim(seed: u64, channels: usize, width: usize) -> CaimParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: &[usize]| {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    };
    CaimParams {
        conv1_w: he(&[width, channels, 3, 3]),
        conv1_b: Tensor::zeros(&[width]),
        conv2_w: he(&[width, width, 3, 3]),
        conv2_b: Tensor::zeros(&[width]),
        fc_sigma_w: Tensor::zeros(&[channels, width]),
        fc_sigma_b: Tensor::zeros(&[channels]),
        fc_mu_w: Tensor::zeros(&[channels, width]),
        fc_mu_b: Tensor::zeros(&[channels]),
    }
}
