//! Convolution blocks: conv + BN (+ ReLU), the inverted-residual
//! MobileBlock and the two-convolution residual BasicBlock.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::autograd::Var;
use crate::nn::ops::Pair;
use crate::nn::params::{BnParams, ForwardCtx, ParamBuilder, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conv,
    Mobile,
    Basic,
}

impl BlockKind {
    pub fn short(self) -> &'static str {
        match self {
            BlockKind::Conv => "Conv",
            BlockKind::Mobile => "MB",
            BlockKind::Basic => "BB",
        }
    }
}

/// One row of an architecture table: kernel `k`, output channels `c`,
/// per-axis stride and repeat count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub k: usize,
    pub c: usize,
    /// `(vertical, horizontal)` stride, each in {1, 2, 4}.
    pub stride: Pair,
    pub repeat: usize,
}

impl BlockSpec {
    pub fn conv(k: usize, c: usize) -> Self {
        Self {
            kind: BlockKind::Conv,
            k,
            c,
            stride: (1, 1),
            repeat: 1,
        }
    }

    pub fn mobile(k: usize, c: usize) -> Self {
        Self {
            kind: BlockKind::Mobile,
            ..Self::conv(k, c)
        }
    }

    pub fn basic(k: usize, c: usize) -> Self {
        Self {
            kind: BlockKind::Basic,
            ..Self::conv(k, c)
        }
    }

    pub fn stride(mut self, vertical: usize, horizontal: usize) -> Self {
        self.stride = (vertical, horizontal);
        self
    }

    pub fn times(mut self, t: usize) -> Self {
        self.repeat = t;
        self
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::config(
                format!("{path}.k"),
                format!("kernel size must be odd and positive, got {}", self.k),
            ));
        }
        if self.c == 0 {
            return Err(Error::config(format!("{path}.c"), "channel count must be ≥ 1"));
        }
        if self.repeat == 0 {
            return Err(Error::config(format!("{path}.t"), "repeat count must be ≥ 1"));
        }
        for s in [self.stride.0, self.stride.1] {
            if ![1, 2, 4].contains(&s) {
                return Err(Error::config(
                    format!("{path}.s"),
                    format!("stride {s} unsupported; use 1, 2 or 4 per axis"),
                ));
            }
        }
        Ok(())
    }

    /// The `repeat` copies this row stands for: only the first one strides.
    pub fn expand(&self) -> Vec<BlockSpec> {
        (0..self.repeat)
            .map(|i| BlockSpec {
                stride: if i == 0 { self.stride } else { (1, 1) },
                repeat: 1,
                ..*self
            })
            .collect()
    }
}

/// Parameter and multiply-accumulate totals of a layer or module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    /// Two floating point operations per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

fn split_stride(stride: Pair) -> (Pair, Pair) {
    let conv = (stride.0.min(2), stride.1.min(2));
    (conv, (stride.0 / conv.0, stride.1 / conv.1))
}

/// Convolution (dense or depthwise) without bias, batch norm, optional ReLU.
///
/// Strides of 4 run as a stride-2 convolution followed by 2× average pooling
/// along that axis.
#[derive(Clone, Debug)]
pub struct ConvBn {
    weight: ParamId,
    bn: BnParams,
    cin: usize,
    cout: usize,
    k: usize,
    conv_stride: Pair,
    pool: Pair,
    relu: bool,
    depthwise: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: Pair,
        relu: bool,
        depthwise: bool,
    ) -> Self {
        assert!(!depthwise || cin == cout, "depthwise conv keeps channel count");
        let shape = if depthwise {
            [cout, 1, k, k]
        } else {
            [cout, cin, k, k]
        };
        let (conv_stride, pool) = split_stride(stride);
        Self {
            weight: b.kernel(&format!("{name}.conv"), shape),
            bn: b.batch_norm(&format!("{name}.bn"), cout),
            cin,
            cout,
            k,
            conv_stride,
            pool,
            relu,
            depthwise,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let pad = ((self.k - 1) / 2, (self.k - 1) / 2);
        let y = if self.depthwise {
            x.depthwise_conv2d(&w, self.conv_stride, pad)?
        } else {
            x.conv2d(&w, self.conv_stride, pad)?
        };
        let y = y.avg_pool(self.pool)?;
        let y = ctx.batch_norm(&y, &self.bn)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn output_size(&self, h: usize, w: usize) -> Pair {
        let s = (
            self.conv_stride.0 * self.pool.0,
            self.conv_stride.1 * self.pool.1,
        );
        (h.div_ceil(s.0), w.div_ceil(s.1))
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let (ho, wo) = (h.div_ceil(self.conv_stride.0), w.div_ceil(self.conv_stride.1));
        let taps = (self.k * self.k) as u64;
        let weights = if self.depthwise {
            taps * self.cout as u64
        } else {
            taps * (self.cin * self.cout) as u64
        };
        Cost {
            params: weights + 2 * self.cout as u64,
            macs: weights * (ho * wo) as u64,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bn(&self) -> &BnParams {
        &self.bn
    }
}

/// Convolution with bias and no normalization; used for prediction heads.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Conv {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: b.kernel(name, [cout, cin, k, k]),
            bias: b.bias(name, cout),
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let pad = ((self.k - 1) / 2, (self.k - 1) / 2);
        x.conv2d(&ctx.param(self.weight), (1, 1), pad)?
            .add_bias(&ctx.param(self.bias))
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let weights = (self.k * self.k * self.cin * self.cout) as u64;
        Cost {
            params: weights + self.cout as u64,
            macs: weights * (h * w) as u64,
        }
    }
}

/// Inverted residual: 1×1 expansion → k×k depthwise (strided) → 1×1
/// projection, each followed by batch norm; ReLU after the first two. The
/// input is added back when stride is 1 and the channel count is unchanged.
#[derive(Clone, Debug)]
pub struct MobileBlock {
    expand: ConvBn,
    depthwise: ConvBn,
    project: ConvBn,
    residual: bool,
}

impl MobileBlock {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        spec: &BlockSpec,
        cin: usize,
        expansion: usize,
    ) -> Self {
        let hidden = cin * expansion;
        Self {
            expand: ConvBn::build(b, &format!("{name}.expand"), cin, hidden, 1, (1, 1), true, false),
            depthwise: ConvBn::build(
                b,
                &format!("{name}.depthwise"),
                hidden,
                hidden,
                spec.k,
                spec.stride,
                true,
                true,
            ),
            project: ConvBn::build(
                b,
                &format!("{name}.project"),
                hidden,
                spec.c,
                1,
                (1, 1),
                false,
                false,
            ),
            residual: spec.stride == (1, 1) && cin == spec.c,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let y = self.expand.forward(ctx, x)?;
        let y = self.depthwise.forward(ctx, &y)?;
        let y = self.project.forward(ctx, &y)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub fn has_residual(&self) -> bool {
        self.residual
    }

    pub fn layers(&self) -> [&ConvBn; 3] {
        [&self.expand, &self.depthwise, &self.project]
    }

    pub fn cost(&self, h: usize, w: usize) -> (Cost, Pair) {
        let mut c = self.expand.cost(h, w);
        c += self.depthwise.cost(h, w);
        let (ho, wo) = self.depthwise.output_size(h, w);
        c += self.project.cost(ho, wo);
        (c, (ho, wo))
    }
}

/// Residual block: k×k conv → BN → ReLU → k×k conv → BN, plus the identity
/// (or a 1×1 conv + BN projection when the shape changes), then ReLU.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, spec: &BlockSpec, cin: usize) -> Self {
        let conv1 = ConvBn::build(
            b,
            &format!("{name}.conv1"),
            cin,
            spec.c,
            spec.k,
            spec.stride,
            true,
            false,
        );
        let conv2 = ConvBn::build(
            b,
            &format!("{name}.conv2"),
            spec.c,
            spec.c,
            spec.k,
            (1, 1),
            false,
            false,
        );
        let shortcut = (cin != spec.c || spec.stride != (1, 1)).then(|| {
            ConvBn::build(
                b,
                &format!("{name}.shortcut"),
                cin,
                spec.c,
                1,
                spec.stride,
                false,
                false,
            )
        });
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, &y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu())
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn cost(&self, h: usize, w: usize) -> (Cost, Pair) {
        let mut c = self.conv1.cost(h, w);
        let (ho, wo) = self.conv1.output_size(h, w);
        c += self.conv2.cost(ho, wo);
        if let Some(s) = &self.shortcut {
            c += s.cost(h, w);
        }
        (c, (ho, wo))
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvBn),
    Mobile(MobileBlock),
    Basic(BasicBlock),
}

impl Block {
    /// Builds a single (already expanded, `repeat == 1`) block.
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        spec: &BlockSpec,
        cin: usize,
        expansion: usize,
    ) -> Self {
        match spec.kind {
            BlockKind::Conv => Block::Conv(ConvBn::build(
                b,
                name,
                cin,
                spec.c,
                spec.k,
                spec.stride,
                true,
                false,
            )),
            BlockKind::Mobile => Block::Mobile(MobileBlock::build(b, name, spec, cin, expansion)),
            BlockKind::Basic => Block::Basic(BasicBlock::build(b, name, spec, cin)),
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx<'_>, x: &Var) -> Result<Var> {
        match self {
            Block::Conv(c) => c.forward(ctx, x),
            Block::Mobile(m) => m.forward(ctx, x),
            Block::Basic(bb) => bb.forward(ctx, x),
        }
    }

    pub fn cost(&self, h: usize, w: usize) -> (Cost, Pair) {
        match self {
            Block::Conv(c) => (c.cost(h, w), c.output_size(h, w)),
            Block::Mobile(m) => m.cost(h, w),
            Block::Basic(bb) => bb.cost(h, w),
        }
    }
}
