//! Query encoder, visual mapping network and fused entity encoder.
//!
//! The query encoder is a two-layer rectified MLP followed by L2
//! normalization. The entity encoder maps a visual feature to `l` prefix
//! vectors through a second rectified MLP and a description feature to `m`
//! token vectors through one affine layer; the fused embedding is the mean
//! over all `L = l + m` token vectors, normalized. Because the mean is linear,
//! the unnormalized fused vector splits exactly into a visual part `e_v` and a
//! textual part `e_d`.
//!
//! Every forward pass keeps the intermediates needed for the matching
//! backward pass, so the trainer can compute exact gradients.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{sha256, ByteReader, ByteWriter, HASH_LEN};
use crate::error::{CmrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub embed_dim: usize,
    pub prefix_len: usize,
    pub desc_tokens: usize,
    pub temperature: f64,
    pub hidden: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            prefix_len: 4,
            desc_tokens: 4,
            temperature: 0.05,
            hidden: 128,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(CmrError::Config("embed_dim must be >= 2".into()));
        }
        if self.prefix_len < 1 || self.desc_tokens < 1 || self.hidden < 1 {
            return Err(CmrError::Config(
                "prefix_len, desc_tokens and hidden must be >= 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(CmrError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }

    /// Total token count `L = l + m` averaged by the entity encoder.
    pub fn total_tokens(&self) -> usize {
        self.prefix_len + self.desc_tokens
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `exp(q·e / τ)`.
pub fn similarity(q: &[f64], e: &[f64], temperature: f64) -> f64 {
    (dot(q, e) / temperature).exp()
}

pub fn log_similarity(q: &[f64], e: &[f64], temperature: f64) -> f64 {
    dot(q, e) / temperature
}

/// Unit vector along `v`; a zero or non-finite norm falls back to the first
/// basis vector. Returns the norm used (0 on fallback).
pub fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        (v.iter().map(|x| x / n).collect(), n)
    } else {
        log::warn!("zero-norm embedding; falling back to first basis vector");
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        (e, 0.0)
    }
}

/// Unit vector along `v`, or the zero vector when `v` is zero. Returns the
/// norm alongside.
pub fn unit_or_zero(v: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        (v.iter().map(|x| x / n).collect(), n)
    } else {
        (vec![0.0; v.len()], 0.0)
    }
}

/// Gradient through `u = z / ‖z‖` given `∂L/∂u`.
pub(crate) fn normalize_backward(unit: &[f64], norm: f64, g_unit: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; unit.len()];
    }
    let proj = dot(unit, g_unit);
    unit.iter()
        .zip(g_unit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

fn check_finite(context: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CmrError::numeric(context, "non-finite value"))
    }
}

/// Affine map `y = W x + b` with `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut Linear, need_input: bool) -> Vec<f64> {
        let mut g_in = if need_input {
            vec![0.0; self.inputs]
        } else {
            Vec::new()
        };
        for (o, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.inputs;
            for (gw, xi) in grad.weight[row..row + self.inputs].iter_mut().zip(x) {
                *gw += g * xi;
            }
            if need_input {
                for (gi, w) in g_in.iter_mut().zip(&self.weight[row..row + self.inputs]) {
                    *gi += g * w;
                }
            }
        }
        g_in
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], g: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(g)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoderParams {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmnParams {
    pub hidden: Linear,
    pub output: Linear,
    pub prefix_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescBranchParams {
    pub proj: Linear,
    pub tokens: usize,
}

/// All trainable parameters. The same shape doubles as the gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed_dim: usize,
    pub query: QueryEncoderParams,
    pub vmn: VmnParams,
    pub desc: DescBranchParams,
}

#[derive(Debug, Clone)]
pub struct QueryForward {
    x: Vec<f64>,
    pre: Vec<f64>,
    hid: Vec<f64>,
    norm: f64,
    pub q: Vec<f64>,
}

/// Fused entity embedding and its decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEncoding {
    pub e_f: Vec<f64>,
    pub e_v: Vec<f64>,
    pub e_d: Vec<f64>,
    pub v_bar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EntityForward {
    v: Vec<f64>,
    t: Vec<f64>,
    vis_pre: Vec<f64>,
    vis_hid: Vec<f64>,
    norm: f64,
    pub prefixes: Vec<Vec<f64>>,
    pub desc_tokens: Vec<Vec<f64>>,
    pub encoding: EntityEncoding,
}

impl EncoderParams {
    pub fn init(hp: &HyperParams, text_dim: usize, visual_dim: usize, seed: u64) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hp.embed_dim;
        Ok(Self {
            embed_dim: d,
            query: QueryEncoderParams {
                hidden: Linear::glorot(text_dim, hp.hidden, &mut rng),
                output: Linear::glorot(hp.hidden, d, &mut rng),
            },
            vmn: VmnParams {
                hidden: Linear::glorot(visual_dim, hp.hidden, &mut rng),
                output: Linear::glorot(hp.hidden, hp.prefix_len * d, &mut rng),
                prefix_len: hp.prefix_len,
            },
            desc: DescBranchParams {
                proj: Linear::glorot(text_dim, hp.desc_tokens * d, &mut rng),
                tokens: hp.desc_tokens,
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn text_dim(&self) -> usize {
        self.query.hidden.inputs
    }

    pub fn visual_dim(&self) -> usize {
        self.vmn.hidden.inputs
    }

    pub fn total_tokens(&self) -> usize {
        self.vmn.prefix_len + self.desc.tokens
    }

    fn layers(&self) -> [(&'static str, &Linear); 5] {
        [
            ("query.hidden", &self.query.hidden),
            ("query.output", &self.query.output),
            ("vmn.hidden", &self.vmn.hidden),
            ("vmn.output", &self.vmn.output),
            ("desc.proj", &self.desc.proj),
        ]
    }

    /// Named tensors as `(name, dims, values)` in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(10);
        for (name, l) in self.layers() {
            out.push((format!("{name}.weight"), vec![l.outputs, l.inputs], &l.weight[..]));
            out.push((format!("{name}.bias"), vec![l.outputs], &l.bias[..]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut Vec<f64>)> {
        let mut out = Vec::with_capacity(10);
        for (name, l) in [
            ("query.hidden", &mut self.query.hidden),
            ("query.output", &mut self.query.output),
            ("vmn.hidden", &mut self.vmn.hidden),
            ("vmn.output", &mut self.vmn.output),
            ("desc.proj", &mut self.desc.proj),
        ] {
            let dims_w = vec![l.outputs, l.inputs];
            let dims_b = vec![l.outputs];
            out.push((format!("{name}.weight"), dims_w, &mut l.weight));
            out.push((format!("{name}.bias"), dims_b, &mut l.bias));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, _, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(CmrError::numeric(name, "non-finite parameter"));
            }
        }
        Ok(())
    }

    /// Round every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn query_forward(&self, x: &[f32]) -> Result<QueryForward> {
        if x.len() != self.text_dim() {
            return Err(CmrError::DimensionMismatch {
                expected: self.text_dim(),
                actual: x.len(),
            });
        }
        let x = to_f64(x);
        check_finite("query input", &x)?;
        let pre = self.query.hidden.forward(&x);
        let hid = relu(&pre);
        let z = self.query.output.forward(&hid);
        check_finite("query encoder", &z)?;
        let (q, norm) = normalize(&z);
        Ok(QueryForward {
            x,
            pre,
            hid,
            norm,
            q,
        })
    }

    pub fn encode_query(&self, x: &[f32]) -> Result<Vec<f64>> {
        Ok(self.query_forward(x)?.q)
    }

    /// Visual prefixes `p_1..p_l` for one visual feature.
    pub fn vmn_project(&self, v: &[f32]) -> Result<Vec<Vec<f64>>> {
        let (_, _, prefixes) = self.vmn_forward(&to_f64(v))?;
        Ok(prefixes)
    }

    fn vmn_forward(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        if v.len() != self.visual_dim() {
            return Err(CmrError::DimensionMismatch {
                expected: self.visual_dim(),
                actual: v.len(),
            });
        }
        check_finite("visual input", v)?;
        let pre = self.vmn.hidden.forward(v);
        let hid = relu(&pre);
        let flat = self.vmn.output.forward(&hid);
        check_finite("visual mapping network", &flat)?;
        let prefixes = flat.chunks_exact(self.embed_dim).map(<[f64]>::to_vec).collect();
        Ok((pre, hid, prefixes))
    }

    pub fn entity_forward(&self, visual: &[f32], text: &[f32]) -> Result<EntityForward> {
        if text.len() != self.text_dim() {
            return Err(CmrError::DimensionMismatch {
                expected: self.text_dim(),
                actual: text.len(),
            });
        }
        let v = to_f64(visual);
        let t = to_f64(text);
        check_finite("description input", &t)?;
        let (vis_pre, vis_hid, prefixes) = self.vmn_forward(&v)?;
        let desc_flat = self.desc.proj.forward(&t);
        check_finite("description branch", &desc_flat)?;
        let desc_tokens: Vec<Vec<f64>> = desc_flat
            .chunks_exact(self.embed_dim)
            .map(<[f64]>::to_vec)
            .collect();

        let d = self.embed_dim;
        let total = self.total_tokens() as f64;
        let l = self.vmn.prefix_len as f64;
        let mut e_v = vec![0.0; d];
        let mut v_bar = vec![0.0; d];
        for p in &prefixes {
            for k in 0..d {
                e_v[k] += p[k];
            }
        }
        for k in 0..d {
            v_bar[k] = e_v[k] / l;
            e_v[k] /= total;
        }
        let mut e_d = vec![0.0; d];
        for tok in &desc_tokens {
            for k in 0..d {
                e_d[k] += tok[k];
            }
        }
        e_d.iter_mut().for_each(|x| *x /= total);
        let raw: Vec<f64> = e_v.iter().zip(&e_d).map(|(a, b)| a + b).collect();
        let (e_f, norm) = normalize(&raw);
        Ok(EntityForward {
            v,
            t,
            vis_pre,
            vis_hid,
            norm,
            prefixes,
            desc_tokens,
            encoding: EntityEncoding { e_f, e_v, e_d, v_bar },
        })
    }

    pub fn encode_entity(&self, visual: &[f32], text: &[f32]) -> Result<EntityEncoding> {
        Ok(self.entity_forward(visual, text)?.encoding)
    }

    /// Backpropagate `∂L/∂q` into `grads`.
    pub fn query_backward(&self, fwd: &QueryForward, g_q: &[f64], grads: &mut EncoderParams) {
        let g_z = normalize_backward(&fwd.q, fwd.norm, g_q);
        let g_hid = self.query.output.backward(&fwd.hid, &g_z, &mut grads.query.output, true);
        let g_pre = relu_backward(&fwd.pre, &g_hid);
        self.query.hidden.backward(&fwd.x, &g_pre, &mut grads.query.hidden, false);
    }

    /// Backpropagate `∂L/∂e_f` and `∂L/∂v̄` into `grads`.
    pub fn entity_backward(
        &self,
        fwd: &EntityForward,
        g_ef: &[f64],
        g_vbar: &[f64],
        grads: &mut EncoderParams,
    ) {
        let d = self.embed_dim;
        let total = self.total_tokens() as f64;
        let l = self.vmn.prefix_len as f64;
        let g_raw = normalize_backward(&fwd.encoding.e_f, fwd.norm, g_ef);

        let g_prefix: Vec<f64> = (0..d).map(|k| g_raw[k] / total + g_vbar[k] / l).collect();
        let mut g_vis_flat = Vec::with_capacity(self.vmn.output.outputs);
        for _ in 0..self.vmn.prefix_len {
            g_vis_flat.extend_from_slice(&g_prefix);
        }
        let g_hid = self
            .vmn
            .output
            .backward(&fwd.vis_hid, &g_vis_flat, &mut grads.vmn.output, true);
        let g_pre = relu_backward(&fwd.vis_pre, &g_hid);
        self.vmn.hidden.backward(&fwd.v, &g_pre, &mut grads.vmn.hidden, false);

        let g_tok: Vec<f64> = g_raw.iter().map(|g| g / total).collect();
        let mut g_desc_flat = Vec::with_capacity(self.desc.proj.outputs);
        for _ in 0..self.desc.tokens {
            g_desc_flat.extend_from_slice(&g_tok);
        }
        self.desc.proj.backward(&fwd.t, &g_desc_flat, &mut grads.desc.proj, false);
    }

    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        let others: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, _, t)| t.to_vec()).collect();
        for ((_, _, t), o) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in t.iter_mut().zip(o) {
                *a += scale * b;
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMRP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize as named `f32` tensors followed by a SHA-256 trailer.
pub fn checkpoint_bytes(params: &EncoderParams) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let tensors = params.tensors();
    w.u32(tensors.len() as u32);
    for (name, dims, data) in tensors {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(dims.len() as u32);
        for d in dims {
            w.u32(d as u32);
        }
        for &v in data {
            w.f32(v as f32);
        }
    }
    w.finish_with_hash()
}

/// Returns the content hash written as the trailer.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<[u8; HASH_LEN]> {
    let bytes = checkpoint_bytes(params);
    fs::write(path, &bytes).map_err(|e| CmrError::io(path, e))?;
    Ok(sha256(&bytes))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    let mut r = ByteReader::with_hash_trailer(bytes, "checkpoint")?;
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CmrError::Format(format!("checkpoint version {version} unsupported")));
    }
    let count = r.u32()? as usize;
    let mut named: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CmrError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = r.u32_vec(rank)?.into_iter().map(|d| d as usize).collect();
        let n: usize = dims.iter().product();
        let data = r.f32_vec(n)?.into_iter().map(f64::from).collect();
        named.insert(name, (dims, data));
    }
    r.expect_end()?;

    let mut take = |name: &str| -> Result<Linear> {
        let (wd, w) = named
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| CmrError::Format(format!("checkpoint lacks {name}.weight")))?;
        let (bd, b) = named
            .remove(&format!("{name}.bias"))
            .ok_or_else(|| CmrError::Format(format!("checkpoint lacks {name}.bias")))?;
        if wd.len() != 2 || bd.len() != 1 || bd[0] != wd[0] {
            return Err(CmrError::Format(format!("bad shape for {name}")));
        }
        Ok(Linear {
            inputs: wd[1],
            outputs: wd[0],
            weight: w,
            bias: b,
        })
    };
    let q_hidden = take("query.hidden")?;
    let q_output = take("query.output")?;
    let v_hidden = take("vmn.hidden")?;
    let v_output = take("vmn.output")?;
    let desc = take("desc.proj")?;
    let d = q_output.outputs;
    let consistent = q_hidden.outputs == q_output.inputs
        && v_hidden.outputs == v_output.inputs
        && d > 0
        && v_output.outputs % d == 0
        && desc.outputs % d == 0
        && desc.inputs == q_hidden.inputs;
    if !consistent {
        return Err(CmrError::Format("inconsistent tensor shapes".into()));
    }
    Ok(EncoderParams {
        embed_dim: d,
        query: QueryEncoderParams {
            hidden: q_hidden,
            output: q_output,
        },
        vmn: VmnParams {
            prefix_len: v_output.outputs / d,
            hidden: v_hidden,
            output: v_output,
        },
        desc: DescBranchParams {
            tokens: desc.outputs / d,
            proj: desc,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| CmrError::io(path, e))?;
    parse_checkpoint(&bytes)
}
