//! Full model: parameters, the end-to-end forward pass over a snapshot
//! window, the convolutional decoders and checkpoint persistence.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use crate::encoders::{
    control_gate, gru_cell, res_gcn, reset_gate, rgcn_encode, GruVars, ResGcnVars, RgcnLayerVars,
};
use crate::error::{Error, Result};
use crate::graph::{Snapshot, SparseAdjacency};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_entities: usize,
    /// Relation-id space after inverse augmentation.
    pub num_relations: usize,
    pub dim: usize,
    /// Hops of the residual structural encoder.
    pub res_hops: usize,
    pub rgcn_layers: usize,
    pub rgcn_bases: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        ModelConfig {
            num_entities,
            num_relations,
            dim,
            res_hops: 2,
            rgcn_layers: 2,
            rgcn_bases: 100.min(num_relations),
            channels: 50,
            kernel_width: 3,
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RgcnLayerParams<S> {
    pub coeff: Tensor<S>,
    pub basis: Tensor<S>,
    pub w_loop: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ConvTransEParams<S> {
    pub kernels: Tensor<S>,
    pub bias: Tensor<S>,
    pub fc: Tensor<S>,
    pub fc_bias: Tensor<S>,
}

/// Every learnable parameter of the network.
#[derive(Clone, Debug)]
pub struct ModelState<S> {
    pub cfg: ModelConfig,
    pub h_init: Tensor<S>,
    pub rel_emb: Tensor<S>,
    pub res_w_loop: Tensor<S>,
    pub res_w_e: Tensor<S>,
    pub res_w_r: Tensor<S>,
    pub rgcn: Vec<RgcnLayerParams<S>>,
    pub gru_wz: Tensor<S>,
    pub gru_uz: Tensor<S>,
    pub gru_bz: Tensor<S>,
    pub gru_wr: Tensor<S>,
    pub gru_ur: Tensor<S>,
    pub gru_br: Tensor<S>,
    pub gru_wh: Tensor<S>,
    pub gru_uh: Tensor<S>,
    pub gru_bh: Tensor<S>,
    pub gate_w_v: Tensor<S>,
    pub gate_b_v: Tensor<S>,
    pub gate_w_u: Tensor<S>,
    pub gate_b_u: Tensor<S>,
    /// Entity head: stacked rows [H_tren(s); H_tln(s); R(r)] -> 2d features.
    pub dec_ent: ConvTransEParams<S>,
    /// Relation head: stacked rows [H_tp(s); H_tp(o)] -> d features.
    pub dec_rel: ConvTransEParams<S>,
}

impl<S: Scalar> ModelState<S> {
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mat = |r: usize, c: usize, rng: &mut R| Tensor::uniform(vec![r, c], xavier(c, r), rng);
        let vecz = |n: usize| Tensor::zeros(vec![n]);

        let rgcn = (0..cfg.rgcn_layers)
            .map(|_| RgcnLayerParams {
                coeff: mat(cfg.num_relations, cfg.rgcn_bases, rng),
                basis: Tensor::uniform(vec![cfg.rgcn_bases, d * d], xavier(d, d), rng),
                w_loop: mat(d, d, rng),
            })
            .collect();

        let (c, k) = (cfg.channels, cfg.kernel_width);
        let dec_ent = ConvTransEParams {
            kernels: Tensor::uniform(vec![c, 3, k], xavier(3 * k, c), rng),
            bias: vecz(c),
            fc: mat(c * d, 2 * d, rng),
            fc_bias: vecz(2 * d),
        };
        let dec_rel = ConvTransEParams {
            kernels: Tensor::uniform(vec![c, 2, k], xavier(2 * k, c), rng),
            bias: vecz(c),
            fc: mat(c * 2 * d, d, rng),
            fc_bias: vecz(d),
        };

        ModelState {
            h_init: mat(cfg.num_entities, d, rng),
            rel_emb: mat(cfg.num_relations, d, rng),
            res_w_loop: mat(d, d, rng),
            res_w_e: mat(d, d, rng),
            res_w_r: mat(d, d, rng),
            rgcn,
            gru_wz: mat(d, d, rng),
            gru_uz: mat(d, d, rng),
            gru_bz: vecz(d),
            gru_wr: mat(d, d, rng),
            gru_ur: mat(d, d, rng),
            gru_br: vecz(d),
            gru_wh: mat(d, d, rng),
            gru_uh: mat(d, d, rng),
            gru_bh: vecz(d),
            gate_w_v: mat(d, d, rng),
            gate_b_v: vecz(d),
            gate_w_u: mat(d, d, rng),
            gate_b_u: vecz(d),
            dec_ent,
            dec_rel,
            cfg,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("h_init".into(), &self.h_init),
            ("rel_emb".into(), &self.rel_emb),
            ("res.w_loop".into(), &self.res_w_loop),
            ("res.w_e".into(), &self.res_w_e),
            ("res.w_r".into(), &self.res_w_r),
            ("gru.wz".into(), &self.gru_wz),
            ("gru.uz".into(), &self.gru_uz),
            ("gru.bz".into(), &self.gru_bz),
            ("gru.wr".into(), &self.gru_wr),
            ("gru.ur".into(), &self.gru_ur),
            ("gru.br".into(), &self.gru_br),
            ("gru.wh".into(), &self.gru_wh),
            ("gru.uh".into(), &self.gru_uh),
            ("gru.bh".into(), &self.gru_bh),
            ("gate.w_v".into(), &self.gate_w_v),
            ("gate.b_v".into(), &self.gate_b_v),
            ("gate.w_u".into(), &self.gate_w_u),
            ("gate.b_u".into(), &self.gate_b_u),
            ("dec_ent.kernels".into(), &self.dec_ent.kernels),
            ("dec_ent.bias".into(), &self.dec_ent.bias),
            ("dec_ent.fc".into(), &self.dec_ent.fc),
            ("dec_ent.fc_bias".into(), &self.dec_ent.fc_bias),
            ("dec_rel.kernels".into(), &self.dec_rel.kernels),
            ("dec_rel.bias".into(), &self.dec_rel.bias),
            ("dec_rel.fc".into(), &self.dec_rel.fc),
            ("dec_rel.fc_bias".into(), &self.dec_rel.fc_bias),
        ];
        for (i, layer) in self.rgcn.iter().enumerate() {
            out.push((format!("rgcn.{i}.coeff"), &layer.coeff));
            out.push((format!("rgcn.{i}.basis"), &layer.basis));
            out.push((format!("rgcn.{i}.w_loop"), &layer.w_loop));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("h_init".into(), &mut self.h_init),
            ("rel_emb".into(), &mut self.rel_emb),
            ("res.w_loop".into(), &mut self.res_w_loop),
            ("res.w_e".into(), &mut self.res_w_e),
            ("res.w_r".into(), &mut self.res_w_r),
            ("gru.wz".into(), &mut self.gru_wz),
            ("gru.uz".into(), &mut self.gru_uz),
            ("gru.bz".into(), &mut self.gru_bz),
            ("gru.wr".into(), &mut self.gru_wr),
            ("gru.ur".into(), &mut self.gru_ur),
            ("gru.br".into(), &mut self.gru_br),
            ("gru.wh".into(), &mut self.gru_wh),
            ("gru.uh".into(), &mut self.gru_uh),
            ("gru.bh".into(), &mut self.gru_bh),
            ("gate.w_v".into(), &mut self.gate_w_v),
            ("gate.b_v".into(), &mut self.gate_b_v),
            ("gate.w_u".into(), &mut self.gate_w_u),
            ("gate.b_u".into(), &mut self.gate_b_u),
            ("dec_ent.kernels".into(), &mut self.dec_ent.kernels),
            ("dec_ent.bias".into(), &mut self.dec_ent.bias),
            ("dec_ent.fc".into(), &mut self.dec_ent.fc),
            ("dec_ent.fc_bias".into(), &mut self.dec_ent.fc_bias),
            ("dec_rel.kernels".into(), &mut self.dec_rel.kernels),
            ("dec_rel.bias".into(), &mut self.dec_rel.bias),
            ("dec_rel.fc".into(), &mut self.dec_rel.fc),
            ("dec_rel.fc_bias".into(), &mut self.dec_rel.fc_bias),
        ];
        for (i, layer) in self.rgcn.iter_mut().enumerate() {
            out.push((format!("rgcn.{i}.coeff"), &mut layer.coeff));
            out.push((format!("rgcn.{i}.basis"), &mut layer.basis));
            out.push((format!("rgcn.{i}.w_loop"), &mut layer.w_loop));
        }
        out
    }
}

/// Tape handles for every registered parameter of one forward pass.
pub struct ModelVars {
    pub h_init: Var,
    pub rel_emb: Var,
    pub res: ResGcnVars,
    pub rgcn: Vec<RgcnLayerVars>,
    pub gru: GruVars,
    pub gate_w_v: Var,
    pub gate_b_v: Var,
    pub gate_w_u: Var,
    pub gate_b_u: Var,
    pub dec_ent: DecoderVars,
    pub dec_rel: DecoderVars,
    pub by_name: Vec<(String, Var)>,
}

#[derive(Copy, Clone, Debug)]
pub struct DecoderVars {
    pub kernels: Var,
    pub bias: Var,
    pub fc: Var,
    pub fc_bias: Var,
}

impl ModelVars {
    /// Register every parameter as a grad-tracked leaf on the tape.
    pub fn register<S: Scalar>(tape: &mut Tape<S>, model: &ModelState<S>) -> ModelVars {
        let mut by_name = Vec::new();
        let mut reg = |tape: &mut Tape<S>, name: &str, t: &Tensor<S>| {
            let v = tape.leaf(t.clone().with_grad());
            by_name.push((name.to_string(), v));
            v
        };
        let h_init = reg(tape, "h_init", &model.h_init);
        let rel_emb = reg(tape, "rel_emb", &model.rel_emb);
        let res = ResGcnVars {
            w_loop: reg(tape, "res.w_loop", &model.res_w_loop),
            w_e: reg(tape, "res.w_e", &model.res_w_e),
            w_r: reg(tape, "res.w_r", &model.res_w_r),
            hops: model.cfg.res_hops,
        };
        let rgcn = model
            .rgcn
            .iter()
            .enumerate()
            .map(|(i, layer)| RgcnLayerVars {
                coeff: reg(tape, &format!("rgcn.{i}.coeff"), &layer.coeff),
                basis: reg(tape, &format!("rgcn.{i}.basis"), &layer.basis),
                w_loop: reg(tape, &format!("rgcn.{i}.w_loop"), &layer.w_loop),
            })
            .collect();
        let gru = GruVars {
            wz: reg(tape, "gru.wz", &model.gru_wz),
            uz: reg(tape, "gru.uz", &model.gru_uz),
            bz: reg(tape, "gru.bz", &model.gru_bz),
            wr: reg(tape, "gru.wr", &model.gru_wr),
            ur: reg(tape, "gru.ur", &model.gru_ur),
            br: reg(tape, "gru.br", &model.gru_br),
            wh: reg(tape, "gru.wh", &model.gru_wh),
            uh: reg(tape, "gru.uh", &model.gru_uh),
            bh: reg(tape, "gru.bh", &model.gru_bh),
        };
        let gate_w_v = reg(tape, "gate.w_v", &model.gate_w_v);
        let gate_b_v = reg(tape, "gate.b_v", &model.gate_b_v);
        let gate_w_u = reg(tape, "gate.w_u", &model.gate_w_u);
        let gate_b_u = reg(tape, "gate.b_u", &model.gate_b_u);
        let dec_ent = DecoderVars {
            kernels: reg(tape, "dec_ent.kernels", &model.dec_ent.kernels),
            bias: reg(tape, "dec_ent.bias", &model.dec_ent.bias),
            fc: reg(tape, "dec_ent.fc", &model.dec_ent.fc),
            fc_bias: reg(tape, "dec_ent.fc_bias", &model.dec_ent.fc_bias),
        };
        let dec_rel = DecoderVars {
            kernels: reg(tape, "dec_rel.kernels", &model.dec_rel.kernels),
            bias: reg(tape, "dec_rel.bias", &model.dec_rel.bias),
            fc: reg(tape, "dec_rel.fc", &model.dec_rel.fc),
            fc_bias: reg(tape, "dec_rel.fc_bias", &model.dec_rel.fc_bias),
        };
        ModelVars {
            h_init,
            rel_emb,
            res,
            rgcn,
            gru,
            gate_w_v,
            gate_b_v,
            gate_w_u,
            gate_b_u,
            dec_ent,
            dec_rel,
            by_name,
        }
    }

    /// Collect gradients after backward, keyed by parameter name.
    pub fn collect_grads<S: Scalar>(&self, tape: &Tape<S>) -> std::collections::BTreeMap<String, Tensor<S>> {
        self.by_name
            .iter()
            .map(|(name, v)| (name.clone(), tape.grad_or_zeros(*v)))
            .collect()
    }
}

/// How the evolutional path chains its structural encoder inputs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum TrenMode {
    /// Every step's structural encoder starts from the deep-memory state.
    #[default]
    Standard,
    /// Each step starts from the previous step's gated output.
    Recurrent,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_dm: bool,
    pub no_tren: bool,
    pub no_tln: bool,
    pub no_reset_gate: bool,
}

pub struct ForwardSpec<'a> {
    pub window: &'a [Snapshot],
    pub deep_adj: Rc<SparseAdjacency>,
    pub mode: TrenMode,
    pub hard_gate: bool,
    pub ablation: Ablation,
}

/// Tape handles for the evolutional and fused entity states of one pass.
pub struct HiddenVars {
    pub h_deep: Var,
    pub tren_steps: Vec<Var>,
    pub h_tren_final: Var,
    pub h_tln_struct: Option<Var>,
    pub h_fused: Var,
    pub u_soft: Option<Var>,
    /// Inputs each step's structural encoder consumed (for instrumentation).
    pub res_gcn_inputs: Vec<Var>,
    /// Feature-wise candidate matrix [H_tren | H_fused], (|E| x 2d).
    pub h_tp: Var,
}

/// Run deep memory, the evolutional path and the transient path end to end.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ModelVars,
    spec: &ForwardSpec<'_>,
) -> Result<HiddenVars> {
    let empty_adj = |num_entities: usize, num_relations: usize| {
        Rc::new(SparseAdjacency::empty(num_entities, num_relations))
    };
    let deep_adj = if spec.ablation.no_dm {
        empty_adj(spec.deep_adj.num_entities, spec.deep_adj.num_relations)
    } else {
        Rc::clone(&spec.deep_adj)
    };
    let h_deep = rgcn_encode(tape, vars.h_init, &vars.rgcn, &deep_adj)?;

    let mut tren_steps = Vec::new();
    let mut res_gcn_inputs = Vec::new();
    let mut h_tren_final = h_deep;
    if !spec.ablation.no_tren {
        let mut h = h_deep;
        let mut se_input = h_deep;
        for snap in spec.window {
            res_gcn_inputs.push(se_input);
            let e_w = res_gcn(tape, se_input, vars.rel_emb, &snap.adjacency, &vars.res)?;
            h = gru_cell(tape, e_w, h, &vars.gru)?;
            if !spec.ablation.no_reset_gate {
                h = reset_gate(tape, h, h_deep, vars.gate_w_v, vars.gate_b_v)?;
            }
            tren_steps.push(h);
            se_input = match spec.mode {
                TrenMode::Standard => h_deep,
                TrenMode::Recurrent => h,
            };
        }
        h_tren_final = h;
    }

    let (h_tln_struct, h_fused, u_soft) = if spec.ablation.no_tln || spec.window.is_empty() {
        (None, h_tren_final, None)
    } else {
        let last = spec.window.last().unwrap();
        let h_struct = res_gcn(tape, vars.h_init, vars.rel_emb, &last.adjacency, &vars.res)?;
        let gate = control_gate(
            tape,
            h_struct,
            h_tren_final,
            vars.gate_w_u,
            vars.gate_b_u,
            spec.hard_gate,
        )?;
        (Some(h_struct), gate.fused, Some(gate.u_soft))
    };

    let h_tp = tape.concat_cols(h_tren_final, h_fused)?;

    Ok(HiddenVars {
        h_deep,
        tren_steps,
        h_tren_final,
        h_tln_struct,
        h_fused,
        u_soft,
        res_gcn_inputs,
        h_tp,
    })
}

/// Per-timestamp evolutional entity representations, extracted as values.
pub struct HiddenStates<S> {
    pub h_deep: Tensor<S>,
    pub tren_steps: Vec<Tensor<S>>,
    pub h_tren_final: Tensor<S>,
    pub h_fused: Tensor<S>,
}

impl HiddenVars {
    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> HiddenStates<S> {
        HiddenStates {
            h_deep: tape.value(self.h_deep).clone(),
            tren_steps: self.tren_steps.iter().map(|&v| tape.value(v).clone()).collect(),
            h_tren_final: tape.value(self.h_tren_final).clone(),
            h_fused: tape.value(self.h_fused).clone(),
        }
    }
}

fn conv_fc_head<S: Scalar>(
    tape: &mut Tape<S>,
    dec: &DecoderVars,
    stacked: Var,
    dropout: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let mut x = stacked;
    let mut rng = rng;
    if let Some(ref mut r) = rng {
        x = tape.dropout(x, dropout, r)?;
    }
    let conv = tape.conv1d_rows(x, dec.kernels, dec.bias)?;
    let mut act = tape.leaky_relu(conv, crate::scalar::s(crate::encoders::LEAKY_SLOPE))?;
    if let Some(ref mut r) = rng {
        act = tape.dropout(act, dropout, r)?;
    }
    let shape = tape.value(act).shape().to_vec();
    let flat = tape.reshape(act, vec![shape[0], shape[1] * shape[2]])?;
    let fc = tape.matmul(flat, dec.fc)?;
    let mut feats = tape.add_bias(fc, dec.fc_bias)?;
    if let Some(ref mut r) = rng {
        feats = tape.dropout(feats, dropout, r)?;
    }
    Ok(feats)
}

/// Pre-sigmoid candidate scores for object queries (s, r): one row per
/// query, one column per entity.
pub fn decode_entities<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ModelVars,
    hidden: &HiddenVars,
    subjects: &[usize],
    relations: &[usize],
    dropout: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let num_entities = tape.value(vars.h_init).shape()[0];
    let num_relations = tape.value(vars.rel_emb).shape()[0];
    for &s in subjects {
        if s >= num_entities {
            return Err(Error::IdOutOfRange {
                what: "entity",
                id: s,
                max: num_entities,
            });
        }
    }
    for &r in relations {
        if r >= num_relations {
            return Err(Error::IdOutOfRange {
                what: "relation",
                id: r,
                max: num_relations,
            });
        }
    }
    let hs_tren = tape.gather_rows(hidden.h_tren_final, subjects)?;
    let hs_fused = tape.gather_rows(hidden.h_fused, subjects)?;
    let hr = tape.gather_rows(vars.rel_emb, relations)?;
    let stacked = tape.stack_rows(&[hs_tren, hs_fused, hr])?;
    let feats = conv_fc_head(tape, &vars.dec_ent, stacked, dropout, rng)?;
    tape.matmul_bt(feats, hidden.h_tp)
}

/// Pre-sigmoid relation scores for (s, o) pairs against the static relation
/// embeddings.
pub fn decode_relations<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ModelVars,
    hidden: &HiddenVars,
    subjects: &[usize],
    objects: &[usize],
    dropout: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let num_entities = tape.value(vars.h_init).shape()[0];
    for &id in subjects.iter().chain(objects) {
        if id >= num_entities {
            return Err(Error::IdOutOfRange {
                what: "entity",
                id,
                max: num_entities,
            });
        }
    }
    let hs = tape.gather_rows(hidden.h_tp, subjects)?;
    let ho = tape.gather_rows(hidden.h_tp, objects)?;
    let stacked = tape.stack_rows(&[hs, ho])?;
    let feats = conv_fc_head(tape, &vars.dec_rel, stacked, dropout, rng)?;
    tape.matmul_bt(feats, vars.rel_emb)
}

// ---- checkpoint ---------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"MTDMCKP1";
const CKPT_VERSION: u32 = 1;

/// Versioned container: magic, version, dims, then each named parameter as
/// (name, shape, little-endian f32 data). Round-trips bit-exactly for f32
/// models.
pub fn save_checkpoint<S: Scalar>(path: &Path, model: &ModelState<S>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        model.cfg.dim,
        model.cfg.num_entities,
        model.cfg.num_relations,
        model.cfg.res_hops,
        model.cfg.rgcn_layers,
        model.cfg.rgcn_bases,
        model.cfg.channels,
        model.cfg.kernel_width,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.cfg.dropout.to_le_bytes());
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for x in t.to_f32_vec() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };

    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = u32_at(&mut pos)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {CKPT_VERSION})"
        )));
    }
    let dim = u32_at(&mut pos)? as usize;
    let num_entities = u32_at(&mut pos)? as usize;
    let num_relations = u32_at(&mut pos)? as usize;
    let res_hops = u32_at(&mut pos)? as usize;
    let rgcn_layers = u32_at(&mut pos)? as usize;
    let rgcn_bases = u32_at(&mut pos)? as usize;
    let channels = u32_at(&mut pos)? as usize;
    let kernel_width = u32_at(&mut pos)? as usize;
    let dropout = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let cfg = ModelConfig {
        num_entities,
        num_relations,
        dim,
        res_hops,
        rgcn_layers,
        rgcn_bases,
        channels,
        kernel_width,
        dropout,
    };

    let count = u32_at(&mut pos)? as usize;
    let mut by_name: HashMap<String, Tensor<S>> = HashMap::new();
    for _ in 0..count {
        let name_len = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?;
        let rank = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_f32_slice(shape, &data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        by_name.insert(name, t);
    }

    // build a skeleton with the right shapes, then overwrite from the file
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut model: ModelState<S> = ModelState::init(cfg, &mut rng);
    for (name, t) in model.named_params_mut() {
        let loaded = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    if !by_name.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected extra parameters: {:?}",
            by_name.keys().collect::<Vec<_>>()
        )));
    }
    Ok(model)
}
