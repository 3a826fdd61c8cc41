//! Parameter containers for the base detector and the memory branch, with
//! named-tensor traversal (for checkpoints and checksums), seeded
//! initialization, and tape binding.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::config::{ContextConfig, DetectorConfig, MemoryConfig, TrainConfig};
use crate::digest;
use crate::error::{Error, Result};
use crate::rng;
use smn_tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct FcParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// The three-conv region proposal head: a 3x3 mapping layer and two 1x1
/// siblings for objectness and box deltas.
#[derive(Clone, Debug)]
pub struct RpnHead {
    pub map: ConvParams,
    pub obj: ConvParams,
    pub reg: ConvParams,
}

#[derive(Clone, Debug)]
pub struct BaseWeights {
    pub backbone: Vec<ConvParams>,
    pub rpn: RpnHead,
    pub fc1: FcParams,
    pub fc2: FcParams,
    pub cls: FcParams,
    pub reg: FcParams,
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub xz: ConvParams,
    pub hz: Tensor,
    pub xr: ConvParams,
    pub hr: Tensor,
    pub xh: ConvParams,
    pub hh: Tensor,
}

/// Context reasoning stack plus the memory-side output and reconstruction
/// heads. Shared between the memory network and the MLP ablation (which
/// feeds base features instead of memory).
#[derive(Clone, Debug)]
pub struct ContextBranch {
    pub context: Vec<ConvParams>,
    pub rpn: RpnHead,
    pub m_fc1: FcParams,
    pub m_fc2: FcParams,
    pub fuse_fc1: FcParams,
    pub fuse_fc2: FcParams,
    pub cls: FcParams,
    pub reg: FcParams,
    pub recon_rpn: RpnHead,
    pub recon_fc1: FcParams,
    pub recon_fc2: FcParams,
    pub recon_cls: FcParams,
}

#[derive(Clone, Debug)]
pub struct SmnWeights {
    /// Learned photographic prior, stored at a fixed spatial size.
    pub prior: Tensor,
    pub feat_fuse1: ConvParams,
    pub feat_fuse2: ConvParams,
    pub gru: GruParams,
    pub branch: ContextBranch,
}

#[derive(Clone, Debug)]
pub struct MlpWeights {
    pub branch: ContextBranch,
}

// -------------------------------------------------------------- init

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    hidden_mult: f64,
    head_mult: f64,
}

impl Init<'_> {
    fn tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| std * rng::normal(self.rng)).collect()).unwrap()
    }

    fn conv(&mut self, kh: usize, kw: usize, cin: usize, cout: usize) -> ConvParams {
        let fan_in = (kh * kw * cin) as f64;
        let std = self.hidden_mult * (2.0 / fan_in).sqrt();
        ConvParams { w: self.tensor(&[kh, kw, cin, cout], std), b: Tensor::zeros(&[cout]) }
    }

    /// Output layer: fan-in scaled and shrunk so logits start near zero.
    fn conv_head(&mut self, kh: usize, kw: usize, cin: usize, cout: usize) -> ConvParams {
        let fan_in = (kh * kw * cin) as f64;
        let std = self.head_mult * (1.0 / fan_in).sqrt();
        ConvParams { w: self.tensor(&[kh, kw, cin, cout], std), b: Tensor::zeros(&[cout]) }
    }

    fn fc(&mut self, din: usize, dout: usize) -> FcParams {
        let std = self.hidden_mult * (2.0 / din as f64).sqrt();
        FcParams { w: self.tensor(&[din, dout], std), b: Tensor::zeros(&[dout]) }
    }

    fn fc_head(&mut self, din: usize, dout: usize) -> FcParams {
        let std = self.head_mult * (1.0 / din as f64).sqrt();
        FcParams { w: self.tensor(&[din, dout], std), b: Tensor::zeros(&[dout]) }
    }

    fn rpn_head(&mut self, cin: usize, anchors: usize) -> RpnHead {
        RpnHead {
            map: self.conv(3, 3, cin, cin),
            obj: self.conv_head(1, 1, cin, anchors),
            reg: self.conv_head(1, 1, cin, 4 * anchors),
        }
    }
}

impl BaseWeights {
    pub fn init(det: &DetectorConfig, classes: usize, train: &TrainConfig, rng: &mut ChaCha8Rng) -> BaseWeights {
        let mut init = Init { rng, hidden_mult: train.init_hidden_mult, head_mult: train.init_head_mult };
        let ch = &det.backbone_channels;
        let backbone = vec![
            init.conv(3, 3, 3, ch[0]),
            init.conv(3, 3, ch[0], ch[1]),
            init.conv(3, 3, ch[1], ch[2]),
            init.conv(3, 3, ch[2], ch[3]),
        ];
        let feat = ch[3];
        let pool_in = det.pool_size * det.pool_size * feat;
        BaseWeights {
            backbone,
            rpn: init.rpn_head(feat, det.anchors_per_cell()),
            fc1: init.fc(pool_in, det.fc_dim),
            fc2: init.fc(det.fc_dim, det.fc_dim),
            cls: init.fc_head(det.fc_dim, classes + 1),
            reg: init.fc_head(det.fc_dim, 4 * classes),
        }
    }
}

impl ContextBranch {
    fn init(
        init: &mut Init,
        input_channels: usize,
        ctx: &ContextConfig,
        det: &DetectorConfig,
        classes: usize,
    ) -> ContextBranch {
        let kc = ctx.kernel;
        let mut context = vec![init.conv(kc, kc, input_channels, ctx.channels)];
        for _ in 1..ctx.depth {
            context.push(init.conv(kc, kc, ctx.channels, ctx.channels));
        }
        let pool_in = det.pool_size * det.pool_size * ctx.channels;
        ContextBranch {
            context,
            rpn: init.rpn_head(ctx.channels, det.anchors_per_cell()),
            m_fc1: init.fc(pool_in, ctx.fc_dim),
            m_fc2: init.fc(ctx.fc_dim, ctx.fc_dim),
            fuse_fc1: init.fc(det.fc_dim + ctx.fc_dim, ctx.fc_dim),
            fuse_fc2: init.fc(ctx.fc_dim, ctx.fc_dim),
            cls: init.fc_head(ctx.fc_dim, classes + 1),
            reg: init.fc_head(ctx.fc_dim, 4 * classes),
            recon_rpn: init.rpn_head(ctx.channels, det.anchors_per_cell()),
            recon_fc1: init.fc(pool_in, ctx.fc_dim),
            recon_fc2: init.fc(ctx.fc_dim, ctx.fc_dim),
            recon_cls: init.fc_head(ctx.fc_dim, classes + 1),
        }
    }
}

impl SmnWeights {
    pub fn init(
        det: &DetectorConfig,
        mem: &MemoryConfig,
        ctx: &ContextConfig,
        classes: usize,
        train: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> SmnWeights {
        let mut init = Init { rng, hidden_mult: train.init_hidden_mult, head_mult: train.init_head_mult };
        let d = mem.channels;
        let score_ch = classes + 1;
        let gru_std = init.hidden_mult * (2.0 / (9.0 * d as f64)).sqrt();
        let gru = GruParams {
            xz: init.conv(3, 3, d, d),
            hz: init.tensor(&[3, 3, d, d], gru_std),
            xr: init.conv(3, 3, d, d),
            hr: init.tensor(&[3, 3, d, d], gru_std),
            xh: init.conv(3, 3, d, d),
            hh: init.tensor(&[3, 3, d, d], gru_std),
        };
        SmnWeights {
            // Zero prior: inside the tanh range and free of spatial bias.
            prior: Tensor::zeros(&[mem.grid_h, mem.grid_w, d]),
            feat_fuse1: init.conv(1, 1, det.backbone_channels[3] + score_ch, d),
            feat_fuse2: init.conv(1, 1, d, d),
            gru,
            branch: ContextBranch::init(&mut init, d, ctx, det, classes),
        }
    }
}

impl MlpWeights {
    pub fn init(
        det: &DetectorConfig,
        ctx: &ContextConfig,
        classes: usize,
        train: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> MlpWeights {
        let mut init = Init { rng, hidden_mult: train.init_hidden_mult, head_mult: train.init_head_mult };
        MlpWeights {
            branch: ContextBranch::init(&mut init, det.backbone_channels[3], ctx, det, classes),
        }
    }
}

// ---------------------------------------------------- named traversal

pub type NamedVisitor<'a> = dyn FnMut(String, &mut Tensor) + 'a;

fn visit_conv(p: &mut ConvParams, prefix: &str, f: &mut NamedVisitor) {
    f(format!("{prefix}.w"), &mut p.w);
    f(format!("{prefix}.b"), &mut p.b);
}

fn visit_fc(p: &mut FcParams, prefix: &str, f: &mut NamedVisitor) {
    f(format!("{prefix}.w"), &mut p.w);
    f(format!("{prefix}.b"), &mut p.b);
}

fn visit_rpn(p: &mut RpnHead, prefix: &str, f: &mut NamedVisitor) {
    visit_conv(&mut p.map, &format!("{prefix}.map"), f);
    visit_conv(&mut p.obj, &format!("{prefix}.obj"), f);
    visit_conv(&mut p.reg, &format!("{prefix}.reg"), f);
}

fn visit_branch(p: &mut ContextBranch, prefix: &str, f: &mut NamedVisitor) {
    for (i, layer) in p.context.iter_mut().enumerate() {
        visit_conv(layer, &format!("{prefix}.ctx{i}"), f);
    }
    visit_rpn(&mut p.rpn, &format!("{prefix}.rpn"), f);
    visit_fc(&mut p.m_fc1, &format!("{prefix}.m_fc1"), f);
    visit_fc(&mut p.m_fc2, &format!("{prefix}.m_fc2"), f);
    visit_fc(&mut p.fuse_fc1, &format!("{prefix}.fuse_fc1"), f);
    visit_fc(&mut p.fuse_fc2, &format!("{prefix}.fuse_fc2"), f);
    visit_fc(&mut p.cls, &format!("{prefix}.cls"), f);
    visit_fc(&mut p.reg, &format!("{prefix}.reg"), f);
    visit_rpn(&mut p.recon_rpn, &format!("{prefix}.recon_rpn"), f);
    visit_fc(&mut p.recon_fc1, &format!("{prefix}.recon_fc1"), f);
    visit_fc(&mut p.recon_fc2, &format!("{prefix}.recon_fc2"), f);
    visit_fc(&mut p.recon_cls, &format!("{prefix}.recon_cls"), f);
}

/// Anything that can enumerate its parameters as (name, tensor) pairs.
pub trait NamedParams {
    fn visit_params(&mut self, f: &mut NamedVisitor);

    fn named(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Replace every parameter from the map; shapes must match and no
    /// parameter may be missing.
    fn load_named(&mut self, map: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut missing = Vec::new();
        let mut count = 0usize;
        self.visit_params(&mut |name, t| {
            match map.get(&name) {
                Some(new) if new.shape() == t.shape() => {
                    *t = new.clone();
                    count += 1;
                }
                Some(new) => missing.push(format!("{name}: shape {:?} vs {:?}", new.shape(), t.shape())),
                None => missing.push(format!("{name}: missing")),
            }
        });
        if missing.is_empty() {
            Ok(count)
        } else {
            Err(Error::Checkpoint(format!("incompatible parameters: {}", missing.join(", "))))
        }
    }

    /// SHA-256 over every parameter's bytes, in traversal order.
    fn checksum(&mut self) -> String {
        let mut bytes = Vec::new();
        self.visit_params(&mut |name, t| {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        });
        digest::hex(&digest::sha256(&bytes))
    }
}

impl NamedParams for BaseWeights {
    fn visit_params(&mut self, f: &mut NamedVisitor) {
        for (i, layer) in self.backbone.iter_mut().enumerate() {
            visit_conv(layer, &format!("backbone{i}"), f);
        }
        visit_rpn(&mut self.rpn, "rpn", f);
        visit_fc(&mut self.fc1, "fc1", f);
        visit_fc(&mut self.fc2, "fc2", f);
        visit_fc(&mut self.cls, "cls", f);
        visit_fc(&mut self.reg, "reg", f);
    }
}

impl NamedParams for SmnWeights {
    fn visit_params(&mut self, f: &mut NamedVisitor) {
        f("prior".into(), &mut self.prior);
        visit_conv(&mut self.feat_fuse1, "feat_fuse1", f);
        visit_conv(&mut self.feat_fuse2, "feat_fuse2", f);
        visit_conv(&mut self.gru.xz, "gru.xz", f);
        f("gru.hz.w".into(), &mut self.gru.hz);
        visit_conv(&mut self.gru.xr, "gru.xr", f);
        f("gru.hr.w".into(), &mut self.gru.hr);
        visit_conv(&mut self.gru.xh, "gru.xh", f);
        f("gru.hh.w".into(), &mut self.gru.hh);
        visit_branch(&mut self.branch, "branch", f);
    }
}

impl NamedParams for MlpWeights {
    fn visit_params(&mut self, f: &mut NamedVisitor) {
        visit_branch(&mut self.branch, "branch", f);
    }
}

// --------------------------------------------------------- tape binding

#[derive(Clone)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone)]
pub struct BoundFc {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone)]
pub struct BoundRpn {
    pub map: BoundConv,
    pub obj: BoundConv,
    pub reg: BoundConv,
}

#[derive(Clone)]
pub struct BoundBranch {
    pub context: Vec<BoundConv>,
    pub rpn: BoundRpn,
    pub m_fc1: BoundFc,
    pub m_fc2: BoundFc,
    pub fuse_fc1: BoundFc,
    pub fuse_fc2: BoundFc,
    pub cls: BoundFc,
    pub reg: BoundFc,
    pub recon_rpn: BoundRpn,
    pub recon_fc1: BoundFc,
    pub recon_fc2: BoundFc,
    pub recon_cls: BoundFc,
}

#[derive(Clone)]
pub struct BoundBase {
    pub backbone: Vec<BoundConv>,
    pub rpn: BoundRpn,
    pub fc1: BoundFc,
    pub fc2: BoundFc,
    pub cls: BoundFc,
    pub reg: BoundFc,
}

#[derive(Clone)]
pub struct BoundGru {
    pub xz: BoundConv,
    pub hz: BoundConv,
    pub xr: BoundConv,
    pub hr: BoundConv,
    pub xh: BoundConv,
    pub hh: BoundConv,
}

#[derive(Clone)]
pub struct BoundSmn {
    pub prior: Var,
    pub feat_fuse1: BoundConv,
    pub feat_fuse2: BoundConv,
    pub gru: BoundGru,
    pub branch: BoundBranch,
}

/// Vars registered during binding, in traversal order, for gradient
/// extraction and optimizer updates.
pub struct VarRegistry {
    pub entries: Vec<(String, Var)>,
}

impl VarRegistry {
    pub fn new() -> VarRegistry {
        VarRegistry { entries: Vec::new() }
    }
}

impl Default for VarRegistry {
    fn default() -> Self {
        Self::new()
    }
}

fn bind_tensor(tape: &Tape, t: &Tensor, trainable: bool, name: &str, reg: &mut VarRegistry) -> Var {
    let v = if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) };
    if trainable {
        reg.entries.push((name.to_string(), v.clone()));
    }
    v
}

fn bind_conv(tape: &Tape, p: &ConvParams, trainable: bool, name: &str, reg: &mut VarRegistry) -> BoundConv {
    BoundConv {
        w: bind_tensor(tape, &p.w, trainable, &format!("{name}.w"), reg),
        b: bind_tensor(tape, &p.b, trainable, &format!("{name}.b"), reg),
    }
}

fn bind_fc(tape: &Tape, p: &FcParams, trainable: bool, name: &str, reg: &mut VarRegistry) -> BoundFc {
    BoundFc {
        w: bind_tensor(tape, &p.w, trainable, &format!("{name}.w"), reg),
        b: bind_tensor(tape, &p.b, trainable, &format!("{name}.b"), reg),
    }
}

fn bind_rpn(tape: &Tape, p: &RpnHead, trainable: bool, name: &str, reg: &mut VarRegistry) -> BoundRpn {
    BoundRpn {
        map: bind_conv(tape, &p.map, trainable, &format!("{name}.map"), reg),
        obj: bind_conv(tape, &p.obj, trainable, &format!("{name}.obj"), reg),
        reg: bind_conv(tape, &p.reg, trainable, &format!("{name}.reg"), reg),
    }
}

fn bind_branch(tape: &Tape, p: &ContextBranch, trainable: bool, prefix: &str, reg: &mut VarRegistry) -> BoundBranch {
    BoundBranch {
        context: p
            .context
            .iter()
            .enumerate()
            .map(|(i, l)| bind_conv(tape, l, trainable, &format!("{prefix}.ctx{i}"), reg))
            .collect(),
        rpn: bind_rpn(tape, &p.rpn, trainable, &format!("{prefix}.rpn"), reg),
        m_fc1: bind_fc(tape, &p.m_fc1, trainable, &format!("{prefix}.m_fc1"), reg),
        m_fc2: bind_fc(tape, &p.m_fc2, trainable, &format!("{prefix}.m_fc2"), reg),
        fuse_fc1: bind_fc(tape, &p.fuse_fc1, trainable, &format!("{prefix}.fuse_fc1"), reg),
        fuse_fc2: bind_fc(tape, &p.fuse_fc2, trainable, &format!("{prefix}.fuse_fc2"), reg),
        cls: bind_fc(tape, &p.cls, trainable, &format!("{prefix}.cls"), reg),
        reg: bind_fc(tape, &p.reg, trainable, &format!("{prefix}.reg"), reg),
        recon_rpn: bind_rpn(tape, &p.recon_rpn, trainable, &format!("{prefix}.recon_rpn"), reg),
        recon_fc1: bind_fc(tape, &p.recon_fc1, trainable, &format!("{prefix}.recon_fc1"), reg),
        recon_fc2: bind_fc(tape, &p.recon_fc2, trainable, &format!("{prefix}.recon_fc2"), reg),
        recon_cls: bind_fc(tape, &p.recon_cls, trainable, &format!("{prefix}.recon_cls"), reg),
    }
}

impl BaseWeights {
    pub fn bind(&self, tape: &Tape, trainable: bool, reg: &mut VarRegistry) -> BoundBase {
        BoundBase {
            backbone: self
                .backbone
                .iter()
                .enumerate()
                .map(|(i, l)| bind_conv(tape, l, trainable, &format!("backbone{i}"), reg))
                .collect(),
            rpn: bind_rpn(tape, &self.rpn, trainable, "rpn", reg),
            fc1: bind_fc(tape, &self.fc1, trainable, "fc1", reg),
            fc2: bind_fc(tape, &self.fc2, trainable, "fc2", reg),
            cls: bind_fc(tape, &self.cls, trainable, "cls", reg),
            reg: bind_fc(tape, &self.reg, trainable, "reg", reg),
        }
    }
}

impl SmnWeights {
    pub fn bind(&self, tape: &Tape, trainable: bool, reg: &mut VarRegistry) -> BoundSmn {
        let zero_bias = |tape: &Tape, cout: usize| tape.constant(Tensor::zeros(&[cout]));
        let d = self.gru.hz.shape()[3];
        let bind_u = |tape: &Tape, t: &Tensor, name: &str, reg: &mut VarRegistry| BoundConv {
            w: bind_tensor(tape, t, trainable, &format!("{name}.w"), reg),
            b: zero_bias(tape, d),
        };
        BoundSmn {
            prior: bind_tensor(tape, &self.prior, trainable, "prior", reg),
            feat_fuse1: bind_conv(tape, &self.feat_fuse1, trainable, "feat_fuse1", reg),
            feat_fuse2: bind_conv(tape, &self.feat_fuse2, trainable, "feat_fuse2", reg),
            gru: BoundGru {
                xz: bind_conv(tape, &self.gru.xz, trainable, "gru.xz", reg),
                hz: bind_u(tape, &self.gru.hz, "gru.hz", reg),
                xr: bind_conv(tape, &self.gru.xr, trainable, "gru.xr", reg),
                hr: bind_u(tape, &self.gru.hr, "gru.hr", reg),
                xh: bind_conv(tape, &self.gru.xh, trainable, "gru.xh", reg),
                hh: bind_u(tape, &self.gru.hh, "gru.hh", reg),
            },
            branch: bind_branch(tape, &self.branch, trainable, "branch", reg),
        }
    }
}

impl MlpWeights {
    pub fn bind(&self, tape: &Tape, trainable: bool, reg: &mut VarRegistry) -> BoundBranch {
        bind_branch(tape, &self.branch, trainable, "branch", reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn named_round_trip_and_checksum() {
        let cfg = RunConfig::toy();
        let mut rng = rng::stream(1);
        let mut w = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut rng);
        let sum1 = w.checksum();
        let named: BTreeMap<String, Tensor> = w.named().into_iter().collect();
        let mut rng2 = rng::stream(2);
        let mut w2 = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut rng2);
        assert_ne!(w2.checksum(), sum1);
        w2.load_named(&named).unwrap();
        assert_eq!(w2.checksum(), sum1);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let cfg = RunConfig::toy();
        let mut rng = rng::stream(1);
        let mut w = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut rng);
        let mut named: BTreeMap<String, Tensor> = w.named().into_iter().collect();
        named.insert("fc1.b".into(), Tensor::zeros(&[3]));
        assert!(w.load_named(&named).is_err());
    }
}
