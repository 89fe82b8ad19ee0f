//! Phase-aware beat encoder.
//!
//! Each of the four phases has its own extractor with two branches: a
//! variation branch whose first layer is a learnable Gabor convolution and a
//! morphology branch with a plain convolution. The two branch embeddings are
//! fused by an attention block and attention pooling. Phases are then fused
//! in two groups (P with TU, QRS with ST) and the two group vectors are fused
//! once more into the beat embedding.

pub mod layers;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::cps::{Phase, PhaseSegments, PhaseWindows};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use layers::{branch_forward, downsampled_len, fusion_stage, Binder, StageOutput, MSFB_KERNELS};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub gabor_channels: usize,
    /// Odd length of the first-layer kernels.
    pub kernel_len: usize,
    pub msfb_width: usize,
    pub fuse_channels: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    /// Segment lengths of P, QRS, ST and TU; they fix the head input sizes.
    pub phase_lengths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            gabor_channels: 16,
            kernel_len: 31,
            msfb_width: 8,
            fuse_channels: 16,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
            phase_lengths: PhaseWindows::default().lengths(),
        }
    }
}

impl ModelConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            gabor_channels: 2,
            kernel_len: 31,
            msfb_width: 2,
            fuse_channels: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model.kernel_len must be odd, got {}",
                self.kernel_len
            )));
        }
        for (name, v) in [
            ("model.embed_dim", self.embed_dim),
            ("model.gabor_channels", self.gabor_channels),
            ("model.msfb_width", self.msfb_width),
            ("model.fuse_channels", self.fuse_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.ln_eps > 0.0) || !self.leaky_slope.is_finite() {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        if self.phase_lengths.contains(&0) {
            return Err(Error::Config("phase lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn scorer_hidden(&self) -> usize {
        (self.embed_dim / 2).max(2)
    }

    fn to_meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.gabor_channels", self.gabor_channels.to_string()),
            ("model.kernel_len", self.kernel_len.to_string()),
            ("model.msfb_width", self.msfb_width.to_string()),
            ("model.fuse_channels", self.fuse_channels.to_string()),
            ("model.leaky_slope", self.leaky_slope.to_string()),
            ("model.ln_eps", self.ln_eps.to_string()),
            (
                "model.phase_lengths",
                self.phase_lengths.map(|l| l.to_string()).join(","),
            ),
        ]
    }
}

/// Gabor layer parameters; sigma is stored as its logarithm.
#[derive(Clone, Debug)]
pub struct GaborParams {
    pub log_sigma: ParamId,
    pub freq: ParamId,
    pub psi: ParamId,
    pub channels: usize,
    pub kernel_len: usize,
}

#[derive(Clone, Debug)]
pub enum FirstConv {
    Gabor(GaborParams),
    Plain(ParamId),
}

/// `(weight, bias)` pair.
pub type Affine = (ParamId, ParamId);

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub first: FirstConv,
    pub msfb: Vec<Affine>,
    pub fuse: Affine,
    pub stages: Vec<Affine>,
    pub head: Affine,
}

#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub hidden: Affine,
    pub out: Affine,
}

/// One attention block plus its pooling head.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln1: Affine,
    pub ffn1: Affine,
    pub ffn2: Affine,
    pub ln2: Affine,
    pub scorers: [ScorerParams; 2],
    pub pool_ln: Affine,
}

#[derive(Clone, Debug)]
pub struct PhaseExtractor {
    /// Template subtracted from the segment before both branches, `[L]`.
    pub offset: ParamId,
    pub variation: BranchParams,
    pub morphology: BranchParams,
    pub fusion: FusionParams,
}

/// All encoder parameters with typed handles into one store.
#[derive(Clone, Debug)]
pub struct HpafParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub phases: [PhaseExtractor; 4],
    pub slow: FusionParams,
    pub fast: FusionParams,
    pub global: FusionParams,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(name, shape, -bound, bound)
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> Result<Affine> {
        let fan = c_in * k;
        Ok((
            self.fan_in(format!("{prefix}.w"), &[c_out, c_in, k], fan)?,
            self.store
                .insert(format!("{prefix}.b"), Tensor::zeros(&[c_out]))?,
        ))
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> Result<Affine> {
        Ok((
            self.fan_in(format!("{prefix}.w"), &[n_in, n_out], n_in)?,
            self.store
                .insert(format!("{prefix}.b"), Tensor::zeros(&[n_out]))?,
        ))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Affine> {
        Ok((
            self.store
                .insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            self.store
                .insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        ))
    }

    fn branch(
        &mut self,
        prefix: &str,
        cfg: &ModelConfig,
        len: usize,
        gabor: bool,
    ) -> Result<BranchParams> {
        let c = cfg.gabor_channels;
        let t = cfg.kernel_len;
        let first = if gabor {
            let log_sigma = self.uniform(
                format!("{prefix}.gabor.log_sigma"),
                &[c],
                2f64.ln(),
                8f64.ln(),
            )?;
            let freq = self.uniform(format!("{prefix}.gabor.freq"), &[c], 0.01, 0.4)?;
            let psi = self.uniform(format!("{prefix}.gabor.psi"), &[c], 0.0, 2.0 * PI)?;
            FirstConv::Gabor(GaborParams {
                log_sigma,
                freq,
                psi,
                channels: c,
                kernel_len: t,
            })
        } else {
            FirstConv::Plain(self.fan_in(format!("{prefix}.conv.w"), &[c, 1, t], t)?)
        };
        let w = cfg.msfb_width;
        let mut msfb = Vec::with_capacity(MSFB_KERNELS.len());
        for k in MSFB_KERNELS {
            msfb.push(self.conv(&format!("{prefix}.msfb.k{k}"), w, c, k)?);
        }
        let f = cfg.fuse_channels;
        let fuse = self.conv(&format!("{prefix}.msfb.fuse"), f, w * MSFB_KERNELS.len(), 1)?;
        let mut stages = Vec::with_capacity(2);
        for s in 0..2 {
            stages.push(self.conv(&format!("{prefix}.stage{s}"), f, f, 3)?);
        }
        let flat = f * downsampled_len(len, 1 + stages.len());
        let head = self.linear(&format!("{prefix}.head"), flat, cfg.embed_dim)?;
        Ok(BranchParams {
            first,
            msfb,
            fuse,
            stages,
            head,
        })
    }

    fn fusion(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<FusionParams> {
        let d = cfg.embed_dim;
        let wq = self.fan_in(format!("{prefix}.wq"), &[d, d], d)?;
        let wk = self.fan_in(format!("{prefix}.wk"), &[d, d], d)?;
        let wv = self.fan_in(format!("{prefix}.wv"), &[d, d], d)?;
        let ln1 = self.norm(&format!("{prefix}.ln1"), d)?;
        let ffn1 = self.linear(&format!("{prefix}.ffn1"), d, 2 * d)?;
        let ffn2 = self.linear(&format!("{prefix}.ffn2"), 2 * d, d)?;
        let ln2 = self.norm(&format!("{prefix}.ln2"), d)?;
        let hidden = cfg.scorer_hidden();
        let mut scorer = |role: usize| -> Result<ScorerParams> {
            Ok(ScorerParams {
                hidden: self.linear(&format!("{prefix}.score{role}.hidden"), d, hidden)?,
                out: self.linear(&format!("{prefix}.score{role}.out"), hidden, 1)?,
            })
        };
        let scorers = [scorer(0)?, scorer(1)?];
        let pool_ln = self.norm(&format!("{prefix}.pool_ln"), d)?;
        Ok(FusionParams {
            wq,
            wk,
            wv,
            ln1,
            ffn1,
            ffn2,
            ln2,
            scorers,
            pool_ln,
        })
    }
}

/// Every value produced while encoding one beat.
#[derive(Clone, Debug)]
pub struct BeatTrace {
    pub embedding: Var,
    pub z_v: [Var; 4],
    pub z_m: [Var; 4],
    pub phase: [StageOutput; 4],
    pub slow: StageOutput,
    pub fast: StageOutput,
    pub global: StageOutput,
}

/// Beat-level identity feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Segment `[1, L]` minus the phase input offset.
fn phase_input(
    tape: &mut Tape,
    binder: &mut Binder,
    ext: &PhaseExtractor,
    segment: &[f64],
) -> Result<Var> {
    let x = tape.constant(Tensor::new(vec![1, segment.len()], segment.to_vec())?);
    let offset = binder.get(tape, ext.offset);
    tape.sub(x, offset)
}

impl HpafParams {
    /// Seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng_for(seed, "model/init"),
        };
        let mut phases = Vec::with_capacity(4);
        for phase in Phase::ALL {
            let pre = phase.name();
            let len = config.phase_lengths[phase as usize];
            phases.push(PhaseExtractor {
                offset: init
                    .store
                    .insert(format!("{pre}.input_offset"), Tensor::zeros(&[len]))?,
                variation: init.branch(&format!("{pre}.vfeb"), config, len, true)?,
                morphology: init.branch(&format!("{pre}.mfeb"), config, len, false)?,
                fusion: init.fusion(&format!("{pre}.fuse"), config)?,
            });
        }
        let slow = init.fusion("slow", config)?;
        let fast = init.fusion("fast", config)?;
        let global = init.fusion("global", config)?;
        let phases: [PhaseExtractor; 4] = phases.try_into().expect("four phases");
        Ok(HpafParams {
            config: config.clone(),
            store,
            phases,
            slow,
            fast,
            global,
        })
    }

    pub fn extractor(&self, phase: Phase) -> &PhaseExtractor {
        &self.phases[phase as usize]
    }

    /// Record the full forward pass of `beat` on `tape`.
    pub fn trace(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        beat: &PhaseSegments,
    ) -> Result<BeatTrace> {
        let cfg = &self.config;
        let mut z_v = Vec::with_capacity(4);
        let mut z_m = Vec::with_capacity(4);
        let mut fused = Vec::with_capacity(4);
        for phase in Phase::ALL {
            let seg = beat.get(phase);
            let expected = cfg.phase_lengths[phase as usize];
            if seg.len() != expected {
                return Err(Error::Shape {
                    op: "encode_beat",
                    lhs: vec![seg.len()],
                    rhs: vec![expected],
                });
            }
            let ext = self.extractor(phase);
            let x = phase_input(tape, binder, ext, seg)?;
            let zv = branch_forward(tape, binder, &ext.variation, x, cfg)?;
            let zm = branch_forward(tape, binder, &ext.morphology, x, cfg)?;
            fused.push(fusion_stage(
                tape,
                binder,
                &ext.fusion,
                &[zv, zm],
                &[0, 1],
                cfg,
            )?);
            z_v.push(zv);
            z_m.push(zm);
        }
        let h = |p: Phase| fused[p as usize].fused;
        let slow = fusion_stage(
            tape,
            binder,
            &self.slow,
            &[h(Phase::P), h(Phase::Tu)],
            &[0, 1],
            cfg,
        )?;
        let fast = fusion_stage(
            tape,
            binder,
            &self.fast,
            &[h(Phase::Qrs), h(Phase::St)],
            &[0, 1],
            cfg,
        )?;
        let global = fusion_stage(
            tape,
            binder,
            &self.global,
            &[slow.fused, fast.fused],
            &[0, 1],
            cfg,
        )?;
        let d = cfg.embed_dim;
        let embedding = tape.reshape(global.fused, &[d])?;
        Ok(BeatTrace {
            embedding,
            z_v: z_v.try_into().expect("four phases"),
            z_m: z_m.try_into().expect("four phases"),
            phase: fused.try_into().expect("four phases"),
            slow,
            fast,
            global,
        })
    }

    pub fn encode(&self, beat: &PhaseSegments) -> Result<Embedding> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let trace = self.trace(&mut tape, &mut binder, beat)?;
        Ok(Embedding(tape.value(trace.embedding).data().to_vec()))
    }

    pub fn encode_all(&self, beats: &[PhaseSegments]) -> Result<Vec<Embedding>> {
        beats.iter().map(|b| self.encode(b)).collect()
    }

    /// Data-dependent initialization from a sample of training beats.
    ///
    /// Each phase's input offset becomes the sample mean segment, and each
    /// branch head bias is shifted so that the branch outputs average to
    /// zero. Z-scored beats of different people share most of their shape;
    /// left in place, that shared part dominates every feature and the
    /// first updates move all embeddings onto one common direction.
    pub fn calibrate(&mut self, beats: &[PhaseSegments]) -> Result<()> {
        if beats.is_empty() {
            return Ok(());
        }
        let n = beats.len() as f64;
        for phase in Phase::ALL {
            let ext = self.extractor(phase).clone();
            let offset = self.store.get_mut(ext.offset).data_mut();
            offset.iter_mut().for_each(|v| *v = 0.0);
            for beat in beats {
                for (o, v) in offset.iter_mut().zip(beat.get(phase)) {
                    *o += v / n;
                }
            }
        }
        let d = self.config.embed_dim;
        for phase in Phase::ALL {
            let ext = self.extractor(phase).clone();
            for branch in [&ext.variation, &ext.morphology] {
                let mut mean = vec![0.0; d];
                for beat in beats {
                    let mut tape = Tape::new();
                    let mut binder = Binder::new(&self.store);
                    let x = phase_input(&mut tape, &mut binder, &ext, beat.get(phase))?;
                    let z = branch_forward(&mut tape, &mut binder, branch, x, &self.config)?;
                    for (m, v) in mean.iter_mut().zip(tape.value(z).data()) {
                        *m += v / n;
                    }
                }
                let bias = self.store.get_mut(branch.head.1).data_mut();
                for (b, m) in bias.iter_mut().zip(&mean) {
                    *b -= m;
                }
            }
        }
        Ok(())
    }

    /// Generated Gabor kernels of one phase, `[C, T]`.
    pub fn gabor_kernels(&self, phase: Phase) -> Result<Tensor> {
        let FirstConv::Gabor(g) = &self.extractor(phase).variation.first else {
            return Err(Error::Contract(
                "variation branch lacks a Gabor layer".into(),
            ));
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let k = layers::gabor_kernels(&mut tape, &mut binder, g)?;
        tape.value(k)
            .clone()
            .reshaped(vec![g.channels, g.kernel_len])
    }

    /// Largest `|sum_t g_k(t)|` over every Gabor kernel of the model.
    pub fn max_gabor_kernel_sum(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for phase in Phase::ALL {
            let k = self.gabor_kernels(phase)?;
            let t = k.shape()[1];
            for row in k.data().chunks(t) {
                worst = worst.max(row.iter().sum::<f64>().abs());
            }
        }
        Ok(worst)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint {
            params: self.store.clone(),
            ..Checkpoint::default()
        };
        for (k, v) in self.config.to_meta() {
            ckpt.meta.insert(k.to_string(), v);
        }
        ckpt
    }

    /// Rebuild a model from a checkpoint written by [`HpafParams::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        fn field<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
            let raw = ckpt
                .meta
                .get(key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks meta {key}")))?;
            raw.parse()
                .map_err(|_| Error::Data(format!("checkpoint meta {key} has bad value {raw}")))
        }
        let lengths: String = field(ckpt, "model.phase_lengths")?;
        let lengths: Vec<usize> = lengths
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Data(format!("bad phase length {v} in checkpoint")))
            })
            .collect::<Result<_>>()?;
        let phase_lengths: [usize; 4] = lengths
            .try_into()
            .map_err(|_| Error::Data("checkpoint must list four phase lengths".into()))?;
        let config = ModelConfig {
            phase_lengths,
            embed_dim: field(ckpt, "model.embed_dim")?,
            gabor_channels: field(ckpt, "model.gabor_channels")?,
            kernel_len: field(ckpt, "model.kernel_len")?,
            msfb_width: field(ckpt, "model.msfb_width")?,
            fuse_channels: field(ckpt, "model.fuse_channels")?,
            leaky_slope: field(ckpt, "model.leaky_slope")?,
            ln_eps: field(ckpt, "model.ln_eps")?,
        };
        let mut model = HpafParams::init(&config, 0)?;
        model.store.load_from(&ckpt.params)?;
        Ok(model)
    }
}
