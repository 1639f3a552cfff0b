//! The full network: encoder (processing blocks grouped into encoder
//! bottleneck elements), retention bottleneck, and decoder with skip
//! connections, plus parameter initialization and checkpointing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::retention::{
    self, head_gamma, retention_block, theta_frequencies, FeedForwardVars, RetentionBlockVars,
    RetentionHeadVars,
};
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};

/// Epsilon used by every layer normalization in the network.
pub const LN_EPS: f64 = 1e-5;
/// Base for the geometric phase-frequency spacing.
pub const THETA_BASE: f64 = 10_000.0;
/// Group count of the grouped convolution inside each encoder bottleneck
/// element; must divide every stage channel count.
pub const GROUP_CONV_GROUPS: usize = 4;

/// Network hyperparameters. Everything the checkpoint needs to rebuild the
/// parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct RetSegConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub stages: usize,
    pub stage_channels: Vec<usize>,
    /// Bottleneck patch size P.
    pub patch_size: usize,
    pub d_model: usize,
    pub retention_blocks: usize,
    pub heads: usize,
    pub dropout_rate: f64,
    /// Feedforward width multiplier inside retention blocks; 0 disables the
    /// feedforward sublayer.
    pub feedforward_expansion: usize,
    pub embed_bias: bool,
}

impl Default for RetSegConfig {
    fn default() -> Self {
        RetSegConfig {
            input_channels: 3,
            image_size: 224,
            stages: 4,
            stage_channels: vec![32, 64, 128, 256],
            patch_size: 1,
            d_model: 256,
            retention_blocks: 2,
            heads: 4,
            dropout_rate: 0.1,
            feedforward_expansion: 4,
            embed_bias: true,
        }
    }
}

impl RetSegConfig {
    /// A small configuration for desk-scale experiments and tests.
    pub fn tiny(image_size: usize) -> Self {
        RetSegConfig {
            input_channels: 3,
            image_size,
            stages: 2,
            stage_channels: vec![8, 16],
            patch_size: 1,
            d_model: 16,
            retention_blocks: 1,
            heads: 2,
            dropout_rate: 0.0,
            feedforward_expansion: 4,
            embed_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.stages == 0 {
            return fail("stages must be >= 1".into());
        }
        if self.stage_channels.len() != self.stages {
            return fail(format!(
                "stage_channels has {} entries for {} stages",
                self.stage_channels.len(),
                self.stages
            ));
        }
        let down = 1usize << self.stages;
        if self.image_size == 0 || self.image_size % down != 0 {
            return fail(format!(
                "image_size {} must be divisible by 2^stages = {down}",
                self.image_size
            ));
        }
        let bottleneck = self.image_size / down;
        if self.patch_size == 0 || bottleneck % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} must divide the bottleneck size {bottleneck}",
                self.patch_size
            ));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % GROUP_CONV_GROUPS != 0 {
                return fail(format!(
                    "stage_channels[{i}] = {c} must be a positive multiple of {GROUP_CONV_GROUPS}"
                ));
            }
        }
        let c_last = *self.stage_channels.last().expect("stages >= 1");
        if c_last % down != 0 {
            return fail(format!(
                "last stage channels {c_last} must be divisible by 2^stages = {down} \
                 so the decoder can halve them per stage"
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if (self.d_model / self.heads) % 4 != 0 {
            return fail(format!(
                "head dim {} must be divisible by 4 (x/y rotation pairs)",
                self.d_model / self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            ));
        }
        if self.input_channels == 0 {
            return fail("input_channels must be >= 1".into());
        }
        if self.retention_blocks == 0 {
            return fail("retention_blocks must be >= 1".into());
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.stages
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.stage_channels.last().expect("stages >= 1")
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Flattened patch vector length at the bottleneck.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.bottleneck_channels()
    }

    fn decoder_in_channels(&self, stage: usize) -> usize {
        self.bottleneck_channels() >> stage
    }

    fn decoder_skip_channels(&self, stage: usize) -> Option<usize> {
        if stage + 2 <= self.stages {
            Some(self.stage_channels[self.stages - 2 - stage])
        } else {
            None
        }
    }

    /// Analytic parameter count; must match what [`init_params`] builds.
    ///
    /// Per layer: a PB from Ci to Co holds a depthwise 3x3 (9*Ci), a norm
    /// (2*Ci), a pointwise 1x1 with bias (Ci*Co + Co) and a residual 1x1 with
    /// bias (Ci*Co + Co). An EBE adds its grouped 3x3 (Co*Co/4*9) and norm
    /// (2*Co). The bottleneck holds the patch embedding, per-block norms,
    /// Q/K/V per head, the output projection, the feedforward pair and the
    /// token unembedding. Decoder stage i maps Di (+skip) channels to Di/2
    /// with two 3x3 convs and a norm; the head is a 1x1 conv to one channel.
    pub fn parameter_count(&self) -> usize {
        let pb = |ci: usize, co: usize| 9 * ci + 2 * ci + (ci * co + co) * 2;
        let mut total = 0usize;
        let mut c_in = self.input_channels;
        for &c_out in &self.stage_channels {
            total += pb(c_in, c_out); // pb1
            total += c_out * (c_out / GROUP_CONV_GROUPS) * 9 + 2 * c_out; // grouped conv + norm
            total += pb(c_out, c_out); // pb2
            c_in = c_out;
        }
        let (d, pd) = (self.d_model, self.patch_dim());
        total += pd * d + if self.embed_bias { d } else { 0 }; // embed
        let d_head = self.d_head();
        for _ in 0..self.retention_blocks {
            total += 2 * d; // ln1
            total += self.heads * 3 * d * d_head; // W_Q/W_K/W_V
            total += d * d; // W_out
            total += 2 * d; // norm on the retention output
            if self.feedforward_expansion > 0 {
                let e = d * self.feedforward_expansion;
                total += 2 * d; // ln2
                total += d * e + e + e * d + d; // feedforward
            }
        }
        total += d * pd + pd; // unembed
        for stage in 0..self.stages {
            let din = self.decoder_in_channels(stage);
            let dout = din / 2;
            let conv_in = din + self.decoder_skip_channels(stage).unwrap_or(0);
            total += conv_in * dout * 9; // conv1 (no bias; norm follows)
            total += 2 * dout; // norm
            total += dout * dout * 9 + dout; // conv2 + bias
        }
        let final_c = self.decoder_in_channels(self.stages);
        total += final_c + 1; // head 1x1 + bias
        total
    }
}

/// The complete named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct RetSegParams {
    map: BTreeMap<String, Tensor>,
}

impl RetSegParams {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        RetSegParams { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter '{name}'")))
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.map.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Loads every parameter onto a tape and returns the name -> handle map used
/// by the forward functions.
pub fn bind_params(tape: &mut Tape, params: &RetSegParams) -> BTreeMap<String, Var> {
    params
        .map
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
        .collect()
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("missing parameter '{name}'")))
}

/// Processing block: depthwise 3x3 -> layer norm -> relu -> pointwise 1x1 ->
/// relu, plus a 1x1 residual projection (the feature aggregation path)
/// summed into the output.
pub fn pb_forward(
    tape: &mut Tape,
    x: Var,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    stride: usize,
) -> Result<Var> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::param(
            "pb_forward",
            format!("stride must be 1 or 2, got {stride}"),
        ));
    }
    let c_in = tape.value(x).shape()[1];
    let dw = var(vars, &format!("{prefix}.dw.w"))?;
    let dw_out = tape.conv2d(x, dw, None, Conv2dSpec::new(stride, 1, c_in))?;
    let ln_g = var(vars, &format!("{prefix}.ln.g"))?;
    let ln_b = var(vars, &format!("{prefix}.ln.b"))?;
    let normed = tape.layer_norm(dw_out, ln_g, ln_b, LN_EPS)?;
    let activated = tape.relu(normed);
    let pw_w = var(vars, &format!("{prefix}.pw.w"))?;
    let pw_b = var(vars, &format!("{prefix}.pw.b"))?;
    let pw = tape.conv2d(activated, pw_w, Some(pw_b), Conv2dSpec::plain(1, 0))?;
    let main = tape.relu(pw);
    let res_w = var(vars, &format!("{prefix}.res.w"))?;
    let res_b = var(vars, &format!("{prefix}.res.b"))?;
    let residual = tape.conv2d(x, res_w, Some(res_b), Conv2dSpec::plain(stride, 0))?;
    tape.add(main, residual)
}

/// Encoder bottleneck element: PB (stride 2, channel change) -> grouped 3x3
/// -> layer norm -> relu -> PB (stride 1), fusing the outputs of the two PBs.
pub fn ebe_forward(
    tape: &mut Tape,
    x: Var,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
) -> Result<Var> {
    let p1 = pb_forward(tape, x, vars, &format!("{prefix}.pb1"), 2)?;
    let gw = var(vars, &format!("{prefix}.gconv.w"))?;
    let grouped = tape.conv2d(p1, gw, None, Conv2dSpec::new(1, 1, GROUP_CONV_GROUPS))?;
    let g_g = var(vars, &format!("{prefix}.gln.g"))?;
    let g_b = var(vars, &format!("{prefix}.gln.b"))?;
    let normed = tape.layer_norm(grouped, g_g, g_b, LN_EPS)?;
    let activated = tape.relu(normed);
    let p2 = pb_forward(tape, activated, vars, &format!("{prefix}.pb2"), 1)?;
    tape.add(p2, p1)
}

/// Runs the EBE stack with inter-element dropout (training mode only).
/// Returns the bottleneck input and each stage's pre-dropout output,
/// shallowest first.
pub fn encoder_forward<R: Rng>(
    tape: &mut Tape,
    image: Var,
    vars: &BTreeMap<String, Var>,
    config: &RetSegConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 4 || shape[1] != config.input_channels {
        return Err(Error::shape(
            "encoder_forward",
            format!("expected [B,{},S,S], got {shape:?}", config.input_channels),
        ));
    }
    if shape[2] != config.image_size || shape[3] != config.image_size {
        return Err(Error::shape(
            "encoder_forward",
            format!(
                "input is {}x{}, config.image_size is {}",
                shape[2], shape[3], config.image_size
            ),
        ));
    }
    let mut x = image;
    let mut skips = Vec::with_capacity(config.stages);
    for stage in 0..config.stages {
        x = ebe_forward(tape, x, vars, &format!("enc{stage}"))?;
        skips.push(x);
        if stage + 1 < config.stages {
            x = tape.dropout(x, config.dropout_rate, training, rng)?;
        }
    }
    Ok((x, skips))
}

fn block_vars(
    vars: &BTreeMap<String, Var>,
    config: &RetSegConfig,
    block: usize,
) -> Result<RetentionBlockVars> {
    let p = |suffix: &str| var(vars, &format!("ret{block}.{suffix}"));
    let heads = (0..config.heads)
        .map(|h| {
            Ok(RetentionHeadVars {
                w_q: p(&format!("h{h}.wq"))?,
                w_k: p(&format!("h{h}.wk"))?,
                w_v: p(&format!("h{h}.wv"))?,
                gamma: head_gamma(h),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ffn = if config.feedforward_expansion > 0 {
        Some((
            p("ln2.g")?,
            p("ln2.b")?,
            FeedForwardVars {
                w1: p("ffn.w1")?,
                b1: p("ffn.b1")?,
                w2: p("ffn.w2")?,
                b2: p("ffn.b2")?,
            },
        ))
    } else {
        None
    };
    Ok(RetentionBlockVars {
        ln1: (p("ln1.g")?, p("ln1.b")?),
        heads,
        w_out: p("wout")?,
        out_ln: (p("oln.g")?, p("oln.b")?),
        ffn,
    })
}

/// Retention bottleneck: patchify -> embed -> retention blocks -> project
/// back to patch vectors -> reassemble. Output shape equals input shape.
pub fn bottleneck_forward(
    tape: &mut Tape,
    feat: Var,
    vars: &BTreeMap<String, Var>,
    config: &RetSegConfig,
) -> Result<Var> {
    let channels = tape.value(feat).shape()[1];
    let (patches, grid) = retention::patchify(tape, feat, config.patch_size)?;
    let e_w = var(vars, "embed.w")?;
    let e_b = if config.embed_bias {
        Some(var(vars, "embed.b")?)
    } else {
        None
    };
    let mut tokens = retention::embed(tape, patches, e_w, e_b)?;
    let theta = theta_frequencies(config.d_head(), THETA_BASE)?;
    for block in 0..config.retention_blocks {
        let bv = block_vars(vars, config, block)?;
        tokens = retention_block(tape, tokens, &bv, &grid, &theta, LN_EPS)?;
    }
    let u_w = var(vars, "unembed.w")?;
    let u_b = var(vars, "unembed.b")?;
    let projected = tape.matmul(tokens, u_w)?;
    let projected = tape.add_bias(projected, u_b)?;
    retention::unpatchify(tape, projected, &grid, channels, config.patch_size)
}

/// Decoder bottleneck: x2 bilinear upsample, concatenate the skip tensor
/// (when the stage has one), then conv -> norm -> relu -> conv -> relu,
/// halving the channel count.
pub fn decoder_bottleneck_forward(
    tape: &mut Tape,
    x: Var,
    skip: Option<Var>,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
) -> Result<Var> {
    let up = tape.bilinear_upsample_x2(x)?;
    let merged = match skip {
        Some(s) => {
            let us = tape.value(up).shape();
            let ss = tape.value(s).shape();
            if us[2] != ss[2] || us[3] != ss[3] {
                return Err(Error::shape(
                    "decoder_bottleneck",
                    format!(
                        "upsampled input {}x{} does not match skip {}x{}",
                        us[2], us[3], ss[2], ss[3]
                    ),
                ));
            }
            tape.concat(&[up, s], 1)?
        }
        None => up,
    };
    let w1 = var(vars, &format!("{prefix}.conv1.w"))?;
    let c1 = tape.conv2d(merged, w1, None, Conv2dSpec::plain(1, 1))?;
    let g = var(vars, &format!("{prefix}.ln.g"))?;
    let b = var(vars, &format!("{prefix}.ln.b"))?;
    let n1 = tape.layer_norm(c1, g, b, LN_EPS)?;
    let a1 = tape.relu(n1);
    let w2 = var(vars, &format!("{prefix}.conv2.w"))?;
    let b2 = var(vars, &format!("{prefix}.conv2.b"))?;
    let c2 = tape.conv2d(a1, w2, Some(b2), Conv2dSpec::plain(1, 1))?;
    Ok(tape.relu(c2))
}

/// Full forward pass: encoder -> retention bottleneck -> decoder with skips
/// (deepest consumed first) -> 1x1 conv -> sigmoid. Output `[B,1,S,S]`,
/// strictly inside (0,1).
pub fn retseg_forward<R: Rng>(
    tape: &mut Tape,
    image: Var,
    vars: &BTreeMap<String, Var>,
    config: &RetSegConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let (bottleneck_in, skips) = encoder_forward(tape, image, vars, config, training, rng)?;
    let mut x = bottleneck_forward(tape, bottleneck_in, vars, config)?;
    for stage in 0..config.stages {
        let skip = if config.decoder_skip_channels(stage).is_some() {
            Some(skips[config.stages - 2 - stage])
        } else {
            None
        };
        x = decoder_bottleneck_forward(tape, x, skip, vars, &format!("dec{stage}"))?;
    }
    let head_w = var(vars, "head.w")?;
    let head_b = var(vars, "head.b")?;
    let logits = tape.conv2d(x, head_w, Some(head_b), Conv2dSpec::plain(1, 0))?;
    Ok(tape.sigmoid(logits))
}

/// Convenience wrapper: runs an eval-mode forward on a no-grad tape and
/// returns the probability map.
pub fn predict(params: &RetSegParams, config: &RetSegConfig, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let vars = bind_params(&mut tape, params);
    let image = tape.leaf(image.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = retseg_forward(&mut tape, image, &vars, config, false, &mut rng)?;
    Ok(tape.value(out).clone())
}

struct ParamBuilder {
    map: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    /// Kaiming-uniform scaled by fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.map.insert(name.to_string(), t);
    }

    fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) {
        self.kaiming(
            &format!("{name}.w"),
            &[cout, cin_per_group, k, k],
            cin_per_group * k * k,
        );
    }

    fn conv_biased(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) {
        self.conv(name, cout, cin_per_group, k);
        self.map.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.kaiming(name, &[d_in, d_out], d_in);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.map.insert(format!("{prefix}.g"), Tensor::ones(&[c]));
        self.map.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.map.insert(name.to_string(), Tensor::zeros(shape));
    }

    fn pb(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.conv(&format!("{prefix}.dw"), c_in, 1, 3);
        self.norm(&format!("{prefix}.ln"), c_in);
        self.conv_biased(&format!("{prefix}.pw"), c_out, c_in, 1);
        self.conv_biased(&format!("{prefix}.res"), c_out, c_in, 1);
    }
}

/// Builds a fresh parameter set: Kaiming-uniform conv/linear weights, zero
/// biases, unit norms, and zero-initialized retention output projections so
/// every retention block starts as the identity. Deterministic per seed.
pub fn init_params(config: &RetSegConfig, seed: u64) -> Result<RetSegParams> {
    config.validate()?;
    let mut b = ParamBuilder {
        map: BTreeMap::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let mut c_in = config.input_channels;
    for (stage, &c_out) in config.stage_channels.iter().enumerate() {
        b.pb(&format!("enc{stage}.pb1"), c_in, c_out);
        b.conv(
            &format!("enc{stage}.gconv"),
            c_out,
            c_out / GROUP_CONV_GROUPS,
            3,
        );
        b.norm(&format!("enc{stage}.gln"), c_out);
        b.pb(&format!("enc{stage}.pb2"), c_out, c_out);
        c_in = c_out;
    }

    let (d, pd) = (config.d_model, config.patch_dim());
    b.linear("embed.w", pd, d);
    if config.embed_bias {
        b.zeros("embed.b", &[d]);
    }
    let d_head = config.d_head();
    for block in 0..config.retention_blocks {
        let p = |s: &str| format!("ret{block}.{s}");
        b.norm(&p("ln1"), d);
        for h in 0..config.heads {
            b.linear(&p(&format!("h{h}.wq")), d, d_head);
            b.linear(&p(&format!("h{h}.wk")), d, d_head);
            b.linear(&p(&format!("h{h}.wv")), d, d_head);
        }
        b.zeros(&p("wout"), &[d, d]);
        b.norm(&p("oln"), d);
        if config.feedforward_expansion > 0 {
            let e = d * config.feedforward_expansion;
            b.norm(&p("ln2"), d);
            b.linear(&p("ffn.w1"), d, e);
            b.zeros(&p("ffn.b1"), &[e]);
            b.zeros(&p("ffn.w2"), &[e, d]);
            b.zeros(&p("ffn.b2"), &[d]);
        }
    }
    b.linear("unembed.w", d, pd);
    b.zeros("unembed.b", &[pd]);

    for stage in 0..config.stages {
        let din = config.decoder_in_channels(stage);
        let dout = din / 2;
        let conv_in = din + config.decoder_skip_channels(stage).unwrap_or(0);
        b.conv(&format!("dec{stage}.conv1"), dout, conv_in, 3);
        b.norm(&format!("dec{stage}.ln"), dout);
        b.conv_biased(&format!("dec{stage}.conv2"), dout, dout, 3);
    }
    let final_c = config.decoder_in_channels(config.stages);
    b.conv_biased("head", 1, final_c, 1);

    Ok(RetSegParams { map: b.map })
}
