use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{interaction_plan, ModelConfig, INPUT_CHANNELS};
use crate::nn::blocks::{Block, BlockSpec, Conv, ConvBn, Cost};
use crate::nn::container::{checkpoint_from_store, restore_store, Container};
use crate::nn::ops::Pair;
use crate::nn::params::{BnParams, BnUpdate, ForwardCtx, Mode, ParamBuilder, ParamStore};
use crate::nn::{Tensor, Var};

/// Head outputs of one forward pass. Eval mode fills `logits` only.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// `n × N × h × w`.
    pub logits: Var,
    /// `n × 1 × h × w`, sigmoid probabilities.
    pub edge_prob: Option<Var>,
    /// `n × N × h/4 × w/8` for the reference MFM.
    pub aux_top: Option<Var>,
    pub aux_mid: Option<Var>,
    pub aux_bottom: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MimFeatures {
    pub top: Var,
    pub middle: Var,
    pub bottom: Var,
}

#[derive(Clone, Debug)]
struct Plans {
    mid_from_top: Vec<Option<usize>>,
    bottom_from_top: Vec<Option<usize>>,
    bottom_from_mid: Vec<Option<usize>>,
}

/// One row of a cost breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    pub module: String,
    pub cost: Cost,
    /// Booster heads are trained but not evaluated at inference.
    pub training_only: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub h: usize,
    pub w: usize,
    pub modules: Vec<ModuleCost>,
}

impl CostReport {
    /// All trainable parameters, booster heads included.
    pub fn params(&self) -> u64 {
        self.modules.iter().map(|m| m.cost.params).sum()
    }

    /// FLOPs of one inference pass (booster heads excluded).
    pub fn inference_flops(&self) -> u64 {
        self.modules
            .iter()
            .filter(|m| !m.training_only)
            .map(|m| m.cost.flops())
            .sum()
    }

    pub fn training_flops(&self) -> u64 {
        self.modules.iter().map(|m| m.cost.flops()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Minet {
    cfg: ModelConfig,
    store: ParamStore,
    stem: Vec<ConvBn>,
    mfm: Vec<Block>,
    top: Vec<Block>,
    middle: Vec<Block>,
    bottom: Vec<Block>,
    plans: Plans,
    fuse: ConvBn,
    stages: Vec<(Pair, Block)>,
    tap: Vec<Block>,
    head: Conv,
    edge_head: Option<Conv>,
    aux_top: Option<Conv>,
    aux_mid: Option<Conv>,
    aux_bottom: Option<Conv>,
}

fn widths(blocks: &[BlockSpec]) -> Vec<usize> {
    blocks.iter().map(|b| b.c).collect()
}

fn build_seq(
    b: &mut ParamBuilder<'_>,
    prefix: &str,
    specs: &[BlockSpec],
    mut cin: usize,
    expansion: usize,
) -> (Vec<Block>, usize) {
    let blocks = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let blk = Block::build(b, &format!("{prefix}.{i}"), s, cin, expansion);
            cin = s.c;
            blk
        })
        .collect();
    (blocks, cin)
}

fn seq_cost(blocks: &[Block], mut hw: Pair) -> (Cost, Pair) {
    let mut total = Cost::default();
    for b in blocks {
        let (c, out) = b.cost(hw.0, hw.1);
        total += c;
        hw = out;
    }
    (total, hw)
}

fn run_seq(ctx: &ForwardCtx<'_>, blocks: &[Block], x: &Var) -> Result<Var> {
    blocks.iter().try_fold(x.clone(), |y, b| b.forward(ctx, &y))
}

impl Minet {
    /// Deterministic in `(cfg, seed)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
        let e = cfg.expansion;
        let stem_spec = cfg.mfm.stem;
        let stem = (0..INPUT_CHANNELS)
            .map(|i| {
                ConvBn::build(
                    &mut b,
                    &format!("mfm.stem{i}"),
                    1,
                    stem_spec.c,
                    stem_spec.k,
                    (1, 1),
                    true,
                    false,
                )
            })
            .collect();
        let mfm_specs: Vec<BlockSpec> = cfg.mfm.blocks.iter().flat_map(BlockSpec::expand).collect();
        let tap_channels = mfm_specs[cfg.mfm.tap_after].c;
        let (mfm, fused_c) = build_seq(&mut b, "mfm.block", &mfm_specs, INPUT_CHANNELS * stem_spec.c, e);
        let expand = |p: &[BlockSpec]| -> Vec<BlockSpec> { p.iter().flat_map(BlockSpec::expand).collect() };
        let (top_s, mid_s, bot_s) = (expand(&cfg.mim.top), expand(&cfg.mim.middle), expand(&cfg.mim.bottom));
        let (top, top_c) = build_seq(&mut b, "mim.top", &top_s, fused_c, e);
        let (middle, mid_c) = build_seq(&mut b, "mim.middle", &mid_s, fused_c, e);
        let (bottom, bot_c) = build_seq(&mut b, "mim.bottom", &bot_s, fused_c, e);
        let plans = Plans {
            mid_from_top: interaction_plan(&widths(&top_s), &widths(&mid_s)),
            bottom_from_top: interaction_plan(&widths(&top_s), &widths(&bot_s)),
            bottom_from_mid: interaction_plan(&widths(&mid_s), &widths(&bot_s)),
        };
        let f = cfg.ufm.fuse;
        let fuse = ConvBn::build(&mut b, "ufm.fuse", top_c + mid_c + bot_c, f.c, f.k, (1, 1), true, false);
        let mut cin = f.c;
        let stages = cfg
            .ufm
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let blk = Block::build(&mut b, &format!("ufm.stage{i}"), &st.block, cin, e);
                cin = st.block.c;
                (st.upsample, blk)
            })
            .collect();
        let tap = if cfg.mfm_tap {
            let specs = expand(&cfg.ufm.tap_blocks);
            build_seq(&mut b, "ufm.tap", &specs, tap_channels, e).0
        } else {
            Vec::new()
        };
        let feat = cfg.feature_channels();
        let n = cfg.num_classes;
        let head = Conv::build(&mut b, "head.logits", feat, n, 1);
        let edge_head = cfg.heads.edge.then(|| Conv::build(&mut b, "head.edge", feat, 1, 1));
        let aux_top = cfg.heads.top.then(|| Conv::build(&mut b, "head.top", top_c, n, 1));
        let aux_mid = cfg.heads.middle.then(|| Conv::build(&mut b, "head.middle", mid_c, n, 1));
        let aux_bottom = cfg.heads.bottom.then(|| Conv::build(&mut b, "head.bottom", bot_c, n, 1));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            mfm,
            top,
            middle,
            bottom,
            plans,
            fuse,
            stages,
            tap,
            head,
            edge_head,
            aux_top,
            aux_mid,
            aux_bottom,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.num_trainable()
    }

    fn check_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        let (mh, mw) = self.cfg.input_multiple();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || !s[2].is_multiple_of(mh) || !s[3].is_multiple_of(mw) || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(format!(
                "input {s:?} must be n×{INPUT_CHANNELS}×h×w with h a multiple of {mh} and w of {mw}"
            )));
        }
        Ok(())
    }

    /// Per-channel stems, concatenation and the MFM blocks; returns the fused
    /// map and the high-resolution tap.
    pub fn mfm_forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<(Var, Var)> {
        if x.shape().len() != 4 || x.shape()[1] != INPUT_CHANNELS {
            return Err(Error::shape(format!(
                "MFM expects {INPUT_CHANNELS} input channels, got {:?}",
                x.shape()
            )));
        }
        let branches = self
            .stem
            .iter()
            .enumerate()
            .map(|(i, s)| s.forward(ctx, &x.slice_channels(i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let mut y = Var::concat(&branches)?;
        let mut tap = None;
        for (i, b) in self.mfm.iter().enumerate() {
            y = b.forward(ctx, &y)?;
            if i == self.cfg.mfm.tap_after {
                tap = Some(y.clone());
            }
        }
        Ok((y, tap.expect("tap index validated")))
    }

    pub fn mim_forward(&self, ctx: &ForwardCtx<'_>, fused: &Var) -> Result<MimFeatures> {
        let inter = self.cfg.interactions;
        let mut top_outs = Vec::with_capacity(self.top.len());
        let mut y = fused.clone();
        for b in &self.top {
            y = b.forward(ctx, &y)?;
            top_outs.push(y.clone());
        }
        let mut mid_outs = Vec::with_capacity(self.middle.len());
        let mut y = fused.avg_pool((2, 2))?;
        for (j, b) in self.middle.iter().enumerate() {
            y = b.forward(ctx, &y)?;
            if let (true, Some(s)) = (inter, self.plans.mid_from_top[j]) {
                y = y.add(&top_outs[s].avg_pool((2, 2))?)?;
            }
            mid_outs.push(y.clone());
        }
        let mut z = fused.avg_pool((4, 4))?;
        for (j, b) in self.bottom.iter().enumerate() {
            z = b.forward(ctx, &z)?;
            if inter {
                if let Some(s) = self.plans.bottom_from_top[j] {
                    z = z.add(&top_outs[s].avg_pool((4, 4))?)?;
                }
                if let Some(s) = self.plans.bottom_from_mid[j] {
                    z = z.add(&mid_outs[s].avg_pool((2, 2))?)?;
                }
            }
        }
        Ok(MimFeatures {
            top: top_outs.pop().expect("non-empty path"),
            middle: mid_outs.pop().expect("non-empty path"),
            bottom: z,
        })
    }

    /// Lower branch (concatenate, fuse, upsample) plus the tap branch.
    pub fn ufm_forward(&self, ctx: &ForwardCtx<'_>, f: &MimFeatures, tap: &Var) -> Result<Var> {
        let scale = |a: &Var| -> Pair {
            (
                f.top.shape()[2] / a.shape()[2].max(1),
                f.top.shape()[3] / a.shape()[3].max(1),
            )
        };
        let mid = f.middle.upsample(scale(&f.middle))?;
        let bot = f.bottom.upsample(scale(&f.bottom))?;
        let mut y = self.fuse.forward(ctx, &Var::concat(&[f.top.clone(), mid, bot])?)?;
        for (up, b) in &self.stages {
            y = b.forward(ctx, &y.upsample(*up)?)?;
        }
        if self.tap.is_empty() {
            return Ok(y);
        }
        y.add(&run_seq(ctx, &self.tap, tap)?)
    }

    /// Full network on an `n × 5 × h × w` input. Heads beyond the logits run
    /// in train mode only.
    pub fn forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<ModelOutputs> {
        self.run(ctx, x, ctx.mode() == Mode::Train)
    }

    /// Eval-mode pass that also evaluates every booster head.
    pub fn eval_outputs(&self, x: &Tensor) -> Result<ModelOutputs> {
        let ctx = ForwardCtx::new(&self.store, Mode::Eval);
        self.run(&ctx, &Var::constant(x.clone()), true)
    }

    fn run(&self, ctx: &ForwardCtx<'_>, x: &Var, heads: bool) -> Result<ModelOutputs> {
        self.check_input(x)?;
        let (fused, tap) = self.mfm_forward(ctx, x)?;
        let feats = self.mim_forward(ctx, &fused)?;
        let full = self.ufm_forward(ctx, &feats, &tap)?;
        let logits = self.head.forward(ctx, &full)?;
        if !heads {
            return Ok(ModelOutputs {
                logits,
                edge_prob: None,
                aux_top: None,
                aux_mid: None,
                aux_bottom: None,
            });
        }
        let opt = |h: &Option<Conv>, x: &Var| h.as_ref().map(|h| h.forward(ctx, x)).transpose();
        Ok(ModelOutputs {
            logits,
            edge_prob: opt(&self.edge_head, &full)?.map(|e| e.sigmoid()),
            aux_top: opt(&self.aux_top, &feats.top)?,
            aux_mid: opt(&self.aux_mid, &feats.middle)?,
            aux_bottom: opt(&self.aux_bottom, &feats.bottom)?,
        })
    }

    /// Train-mode forward with gradient tracking; the returned statistics fold
    /// into the running estimates via [`ParamStore::apply_bn_updates`].
    pub fn forward_train(&self, x: &Tensor) -> Result<(ModelOutputs, Vec<BnUpdate>)> {
        let ctx = ForwardCtx::new(&self.store, Mode::Train);
        let out = self.forward(&ctx, &Var::constant(x.clone()))?;
        Ok((out, ctx.into_bn_updates()))
    }

    /// Eval-mode logits, `n × N × h × w`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let ctx = ForwardCtx::new(&self.store, Mode::Eval);
        Ok(self.forward(&ctx, &Var::constant(x.clone()))?.logits.value().clone())
    }

    /// Replaces every running mean/variance with the average batch statistic
    /// over `batches`, computed with the current weights.
    pub fn recalibrate_bn(&mut self, batches: &[Tensor]) -> Result<()> {
        if batches.is_empty() {
            return Ok(());
        }
        let mut sums: BTreeMap<usize, (BnParams, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for x in batches {
            let ctx = ForwardCtx::with_tracking(&self.store, Mode::Train, false);
            self.forward(&ctx, &Var::constant(x.clone()))?;
            for u in ctx.into_bn_updates() {
                let unbias = if u.stats.count > 1 {
                    u.stats.count as f64 / (u.stats.count - 1) as f64
                } else {
                    1.0
                };
                let entry = sums.entry(u.bn.mean.index()).or_insert_with(|| {
                    (u.bn, vec![0.0; u.stats.mean.len()], vec![0.0; u.stats.var.len()])
                });
                for (s, m) in entry.1.iter_mut().zip(&u.stats.mean) {
                    *s += m;
                }
                for (s, v) in entry.2.iter_mut().zip(&u.stats.var) {
                    *s += v * unbias;
                }
            }
        }
        let n = batches.len() as f64;
        for (bn, m, v) in sums.into_values() {
            for (dst, s) in self.store.value_mut(bn.mean).data_mut().iter_mut().zip(m) {
                *dst = s / n;
            }
            for (dst, s) in self.store.value_mut(bn.var).data_mut().iter_mut().zip(v) {
                *dst = s / n;
            }
        }
        Ok(())
    }

    /// Per-module parameter and multiply-accumulate counts at input `h × w`.
    pub fn cost_report(&self, h: usize, w: usize) -> CostReport {
        let mut modules = Vec::new();
        let mut push = |name: &str, cost: Cost, training_only: bool| {
            modules.push(ModuleCost {
                module: name.to_string(),
                cost,
                training_only,
            })
        };
        let mut mfm = Cost::default();
        for s in &self.stem {
            mfm += s.cost(h, w);
        }
        let (c, fused_hw) = seq_cost(&self.mfm, (h, w));
        mfm += c;
        push("MFM", mfm, false);
        let (top, top_hw) = seq_cost(&self.top, fused_hw);
        push("MIM top", top, false);
        let (mid, mid_hw) = seq_cost(&self.middle, (fused_hw.0 / 2, fused_hw.1 / 2));
        push("MIM middle", mid, false);
        let (bot, bot_hw) = seq_cost(&self.bottom, (fused_hw.0 / 4, fused_hw.1 / 4));
        push("MIM bottom", bot, false);
        let mut ufm = self.fuse.cost(top_hw.0, top_hw.1);
        let mut hw = top_hw;
        for (up, b) in &self.stages {
            let (c, out) = b.cost(hw.0 * up.0, hw.1 * up.1);
            ufm += c;
            hw = out;
        }
        ufm += seq_cost(&self.tap, (h, w)).0;
        push("UFM", ufm, false);
        push("head", self.head.cost(h, w), false);
        let mut boost = Cost::default();
        if let Some(e) = &self.edge_head {
            boost += e.cost(h, w);
        }
        for (head, hw) in [(&self.aux_top, top_hw), (&self.aux_mid, mid_hw), (&self.aux_bottom, bot_hw)] {
            if let Some(hd) = head {
                boost += hd.cost(hw.0, hw.1);
            }
        }
        push("booster heads", boost, true);
        CostReport { h, w, modules }
    }

    /// Inference FLOPs at `h × w` (2 per multiply-accumulate, convolutions
    /// only).
    pub fn count_flops(&self, h: usize, w: usize) -> u64 {
        self.cost_report(h, w).inference_flops()
    }

    pub fn checkpoint(&self) -> Container {
        checkpoint_from_store(&self.store, self.cfg.hash())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Builds the architecture of `cfg` and restores weights from `path`;
    /// fails when the checkpoint was written for a different configuration.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let ckpt = Container::load(path)?;
        Self::from_checkpoint(cfg, &ckpt)
    }

    pub fn from_checkpoint(cfg: &ModelConfig, ckpt: &Container) -> Result<Self> {
        let mut m = Self::build(cfg, 0)?;
        restore_store(&mut m.store, ckpt, cfg.hash())?;
        Ok(m)
    }
}
