//! Differentiable building blocks: convolution, global context gating,
//! modulated deformable convolution, half-instance-norm residual blocks and
//! the supervised attention bridge.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamBank, ParamId};
use crate::tensor::Tensor;

/// Negative slope used by every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Instance-norm variance guard.
pub const IN_EPS: f64 = 1e-5;
/// Layer-norm variance guard.
pub const LN_EPS: f64 = 1e-5;
/// Global-context bottleneck reduction ratio.
pub const GC_REDUCTION: usize = 4;

/// Plain convolution with bias; kernel 1x1 or 3x3, zero "same" padding.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        assert!(k == 1 || k == 3, "kernel must be 1x1 or 3x3");
        let fan_in = in_c * k * k;
        let w = bank.uniform(format!("{name}.w"), &[out_c, in_c, k, k], fan_in, rng);
        let b = bank.uniform(format!("{name}.b"), &[out_c], fan_in, rng);
        Self { w, b, in_c, out_c, k, stride }
    }

    /// Zero-initialized variant (deformable offset branch).
    pub fn new_zero(bank: &mut ParamBank, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        let w = bank.add(format!("{name}.w"), Tensor::zeros(&[out_c, in_c, k, k]));
        let b = bank.add(format!("{name}.b"), Tensor::zeros(&[out_c]));
        Self { w, b, in_c, out_c, k, stride: 1 }
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, x: &C::T) -> Result<C::T> {
        let shape = ctx.shape(x);
        if shape.len() != 3 || shape[0] != self.in_c {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {:?}",
                self.in_c, shape
            )));
        }
        Ok(ctx.conv2d(x, self.w, Some(self.b), self.stride))
    }
}

/// Global context block: spatial-softmax pooled context, bottleneck
/// transform, sigmoid gate broadcast as per-channel weights in `(0,1)`.
pub struct GcBlock {
    logit_conv: Conv2d,
    down: Conv2d,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    up: Conv2d,
}

impl GcBlock {
    pub fn new(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let cr = (channels / GC_REDUCTION).max(1);
        let logit_conv = Conv2d::new(bank, rng, &format!("{name}.logit"), channels, 1, 1, 1);
        let down = Conv2d::new(bank, rng, &format!("{name}.down"), channels, cr, 1, 1);
        let ln_gamma = bank.add(format!("{name}.ln.gamma"), Tensor::filled(&[cr], 1.0));
        let ln_beta = bank.add(format!("{name}.ln.beta"), Tensor::zeros(&[cr]));
        let up = Conv2d::new(bank, rng, &format!("{name}.up"), cr, channels, 1, 1);
        Self { logit_conv, down, ln_gamma, ln_beta, up }
    }

    /// Returns the `[C,1,1]` channel gate.
    pub fn forward<C: Ctx>(&self, ctx: &mut C, x: &C::T) -> Result<C::T> {
        let logits = self.logit_conv.forward(ctx, x)?;
        let context = ctx.attn_pool(x, &logits);
        let t = self.down.forward(ctx, &context)?;
        let t = ctx.layer_norm(&t, self.ln_gamma, self.ln_beta, LN_EPS);
        let t = ctx.relu(&t);
        let t = self.up.forward(ctx, &t)?;
        Ok(ctx.sigmoid(&t))
    }
}

/// Modulated deformable 3x3 convolution whose offsets and modulation logits
/// come from a zero-initialized conv on the input itself.
pub struct DeformConv2d {
    offset_conv: Conv2d,
    pub w: ParamId,
    pub b: ParamId,
    in_c: usize,
}

impl DeformConv2d {
    pub fn new(
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        let offset_conv = Conv2d::new_zero(bank, &format!("{name}.offset"), in_c, 27, 3);
        let fan_in = in_c * 9;
        let w = bank.uniform(format!("{name}.w"), &[out_c, in_c, 3, 3], fan_in, rng);
        let b = bank.uniform(format!("{name}.b"), &[out_c], fan_in, rng);
        Self { offset_conv, w, b, in_c }
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, x: &C::T) -> Result<C::T> {
        let shape = ctx.shape(x);
        if shape.len() != 3 || shape[0] != self.in_c {
            return Err(Error::Shape(format!(
                "deform_conv2d expects {} input channels, got {:?}",
                self.in_c, shape
            )));
        }
        let offset_mask = self.offset_conv.forward(ctx, x)?;
        Ok(ctx.deform_conv2d(x, &offset_mask, self.w, Some(self.b)))
    }
}

/// Residual block normalizing half of its channels with instance norm.
pub struct HinBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    res: Conv2d,
    in_gamma: ParamId,
    in_beta: ParamId,
    out_c: usize,
    slope: f64,
}

impl HinBlock {
    pub fn new(
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        slope: f64,
    ) -> Result<Self> {
        if out_c % 2 != 0 {
            return Err(Error::Shape(format!(
                "hin_block width must be even, got {out_c}"
            )));
        }
        let conv_a = Conv2d::new(bank, rng, &format!("{name}.conv_a"), in_c, out_c, 3, 1);
        let conv_b = Conv2d::new(bank, rng, &format!("{name}.conv_b"), out_c, out_c, 3, 1);
        let res = Conv2d::new(bank, rng, &format!("{name}.res"), in_c, out_c, 1, 1);
        let in_gamma = bank.add(format!("{name}.in.gamma"), Tensor::filled(&[out_c / 2], 1.0));
        let in_beta = bank.add(format!("{name}.in.beta"), Tensor::zeros(&[out_c / 2]));
        Ok(Self { conv_a, conv_b, res, in_gamma, in_beta, out_c, slope })
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, x: &C::T) -> Result<C::T> {
        let mid = self.conv_a.forward(ctx, x)?;
        let half = self.out_c / 2;
        let h1 = ctx.slice_c(&mid, 0, half);
        let h2 = ctx.slice_c(&mid, half, self.out_c);
        let n = ctx.instance_norm(&h1, self.in_gamma, self.in_beta, IN_EPS);
        let cat = ctx.concat_c(&[&n, &h2]);
        let act = ctx.leaky_relu(&cat, self.slope);
        let main = self.conv_b.forward(ctx, &act)?;
        let skip = self.res.forward(ctx, x)?;
        Ok(ctx.add(&main, &skip))
    }
}

/// Supervised attention bridge between fusion stages: emits an intermediate
/// prediction as a residual over the linearized reference and reweights the
/// stage features with a mask derived from that prediction.
pub struct Sam {
    pred_conv: Conv2d,
    mask_conv: Conv2d,
}

impl Sam {
    pub fn new(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let pred_conv = Conv2d::new(bank, rng, &format!("{name}.pred"), channels, 3, 3, 1);
        let mask_conv = Conv2d::new(bank, rng, &format!("{name}.mask"), 3, channels, 3, 1);
        Self { pred_conv, mask_conv }
    }

    /// Returns `(prediction in [0,1], reweighted features)`.
    pub fn forward<C: Ctx>(&self, ctx: &mut C, f: &C::T, ref_img: &C::T) -> Result<(C::T, C::T)> {
        let resid = self.pred_conv.forward(ctx, f)?;
        let sum = ctx.add(&resid, ref_img);
        let pred = ctx.clamp01(&sum);
        let mask = self.mask_conv.forward(ctx, &pred)?;
        let mask = ctx.sigmoid(&mask);
        let gated = ctx.mul(f, &mask);
        let f_out = ctx.add(&gated, f);
        Ok((pred, f_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::InferCtx;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(dims);
        for v in t.data_mut() {
            *v = r.random_range(-0.9..0.9);
        }
        t
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let conv = Conv2d::new(&mut bank, &mut r, "c", 4, 8, 3, 1);
        let mut ctx = InferCtx::new(&bank);
        let x = rand_tensor(&[3, 8, 8], 1);
        assert!(matches!(conv.forward(&mut ctx, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_shape_contract() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let conv = Conv2d::new(&mut bank, &mut r, "c", 4, 32, 3, 1);
        let mut ctx = InferCtx::new(&bank);
        let y = conv.forward(&mut ctx, &rand_tensor(&[4, 8, 8], 2)).unwrap();
        assert_eq!(y.dims(), &[32, 8, 8]);
    }

    #[test]
    fn gc_gate_lies_in_open_unit_interval() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let gcb = GcBlock::new(&mut bank, &mut r, "gc", 8);
        let mut ctx = InferCtx::new(&bank);
        let gate = gcb.forward(&mut ctx, &rand_tensor(&[8, 6, 6], 3)).unwrap();
        assert_eq!(gate.dims(), &[8, 1, 1]);
        assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gc_context_on_single_pixel_input_is_that_pixel() {
        // with H=W=1 the softmax has one element, so the pooled context is x
        let mut bank = ParamBank::new();
        let mut r = rng();
        let gcb = GcBlock::new(&mut bank, &mut r, "gc", 4);
        let mut ctx = InferCtx::new(&bank);
        let x = rand_tensor(&[4, 1, 1], 4);
        let logits = gcb.logit_conv.forward(&mut ctx, &x).unwrap();
        let pooled = ctx.attn_pool(&x, &logits);
        assert!(pooled.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn gc_bottleneck_never_collapses_to_zero() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let gcb = GcBlock::new(&mut bank, &mut r, "gc", 2); // 2 < reduction
        let mut ctx = InferCtx::new(&bank);
        let gate = gcb.forward(&mut ctx, &rand_tensor(&[2, 4, 4], 5)).unwrap();
        assert_eq!(gate.dims(), &[2, 1, 1]);
    }

    #[test]
    fn hin_requires_even_width() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        assert!(HinBlock::new(&mut bank, &mut r, "h", 4, 5, LEAKY_SLOPE).is_err());
    }

    #[test]
    fn hin_shape_contract_and_finite_on_constant_input() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let hin = HinBlock::new(&mut bank, &mut r, "h", 8, 8, LEAKY_SLOPE).unwrap();
        let mut ctx = InferCtx::new(&bank);
        let y = hin.forward(&mut ctx, &Tensor::filled(&[8, 16, 16], 0.3)).unwrap();
        assert_eq!(y.dims(), &[8, 16, 16]);
        assert!(y.all_finite());
    }

    #[test]
    fn hin_residual_identity_when_main_path_is_zeroed() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let hin = HinBlock::new(&mut bank, &mut r, "h", 4, 4, LEAKY_SLOPE).unwrap();
        // zero the main path, make the 1x1 residual an identity
        for name in ["h.conv_a.w", "h.conv_a.b", "h.conv_b.w", "h.conv_b.b", "h.res.b"] {
            let id = bank.id_by_name(name).unwrap();
            let t = bank.get_mut(id);
            *t = Tensor::zeros(t.dims());
        }
        let res_w = bank.id_by_name("h.res.w").unwrap();
        let mut ident = Tensor::zeros(&[4, 4, 1, 1]);
        for c in 0..4 {
            ident.data_mut()[c * 4 + c] = 1.0;
        }
        *bank.get_mut(res_w) = ident;

        let mut ctx = InferCtx::new(&bank);
        let x = rand_tensor(&[4, 6, 6], 6);
        let y = hin.forward(&mut ctx, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn sam_zero_weights_pass_reference_and_scale_features() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let sam = Sam::new(&mut bank, &mut r, "s", 8);
        for id in bank.ids() {
            let t = bank.get_mut(id);
            *t = Tensor::zeros(t.dims());
        }
        let mut ctx = InferCtx::new(&bank);
        let f = rand_tensor(&[8, 6, 6], 7);
        let reference = rand_tensor(&[3, 6, 6], 8).map(|v| 0.5 + 0.4 * v);
        let (pred, f_out) = sam.forward(&mut ctx, &f, &reference).unwrap();
        assert!(pred.max_abs_diff(&reference) < 1e-15);
        let scaled = f.map(|v| 1.5 * v);
        assert!(f_out.max_abs_diff(&scaled) < 1e-12);
    }

    #[test]
    fn sam_prediction_stays_in_unit_range() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let sam = Sam::new(&mut bank, &mut r, "s", 8);
        let mut ctx = InferCtx::new(&bank);
        let f = rand_tensor(&[8, 6, 6], 9).map(|v| v * 10.0);
        let reference = rand_tensor(&[3, 6, 6], 10).map(|v| 0.5 + 0.5 * v);
        let (pred, f_out) = sam.forward(&mut ctx, &f, &reference).unwrap();
        assert_eq!(pred.dims(), &[3, 6, 6]);
        assert_eq!(f_out.dims(), &[8, 6, 6]);
        assert!(pred.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blocks_are_bit_deterministic() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let hin = HinBlock::new(&mut bank, &mut r, "h", 6, 6, LEAKY_SLOPE).unwrap();
        let x = rand_tensor(&[6, 8, 8], 11);
        let mut ctx = InferCtx::new(&bank);
        let y1 = hin.forward(&mut ctx, &x).unwrap();
        let y2 = hin.forward(&mut ctx, &x).unwrap();
        assert!(y1.bit_eq(&y2));
    }
}
