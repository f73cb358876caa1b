//! LongVQ blocks, stacking, embeddings and task heads.

mod config;
mod norm;
mod params;

use std::path::Path;
use std::sync::Arc;

use crate::attention::{attention_kernels, longvq_attention, project_inputs, FrozenKeys, GateSet, LayerContext, LayerOutput};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};
use crate::ssm::{SsmStructure, SsmVars, LOG_DT_MAX, LOG_DT_MIN};
use crate::vq::{Codebook, DEFAULT_SMOOTHING};

pub use config::{HeadKind, InputKind, ModelConfig};
pub use norm::{norm_kinds, BatchNorm, LayerNorm, Norm, ScaleNorm, Slot, BATCH_NORM_MOMENTUM, NORM_EPS};
pub use params::{load_tensors, save_tensors, Manifest, ManifestEntry, ParamStore};

/// Model inputs for `batch_size` sequences of `seq_len` positions, stacked
/// row-wise.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    Tokens(Vec<usize>),
    /// `rows x channels` real values.
    Channels { values: Vec<f64>, channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class per sequence.
    Classes(Vec<usize>),
    /// One optional next-token target per position.
    Tokens(Vec<Option<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.batch_size * self.seq_len
    }

    /// Target per logits row, as the loss expects.
    pub fn target_rows(&self) -> Vec<Option<usize>> {
        match &self.targets {
            Targets::Classes(c) => c.iter().map(|&t| Some(t)).collect(),
            Targets::Tokens(t) => t.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct NormSlot {
    params: Vec<usize>,
    buffers: Vec<usize>,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    log_dt: usize,
    c_out: usize,
    d_skip: usize,
    gates: [usize; 13],
    norm1: NormSlot,
    norm2: NormSlot,
    ffn: [usize; 4],
}

/// Options for one forward pass.
pub struct ForwardOptions<'a, T: Real> {
    /// Batch statistics in batch norm and active dropout.
    pub train: bool,
    /// Record parameters as differentiable leaves.
    pub grads: bool,
    /// Attention kernel override (`dense` or `vq`).
    pub kernel: Option<&'a str>,
    /// Per-layer frozen keys replacing straight-through quantization.
    pub frozen_keys: Option<&'a [FrozenKeys<T>]>,
    pub rng: Option<&'a mut Rng>,
}

impl<T: Real> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        Self {
            train: false,
            grads: false,
            kernel: None,
            frozen_keys: None,
            rng: None,
        }
    }
}

pub struct ForwardOutput<T: Real> {
    pub graph: Graph<T>,
    /// `batch x classes` or `rows x vocab`.
    pub logits: Var,
    pub layers: Vec<LayerOutput>,
    /// One node per parameter, in store order.
    pub param_vars: Vec<Var>,
    /// New running-statistic values, by buffer index.
    pub buffer_updates: Vec<(usize, Tensor<T>)>,
}

enum Run<T: Real> {
    Done(ForwardOutput<T>),
    Keys(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Non-trainable running statistics.
    pub buffers: ParamStore<T>,
    pub codebooks: Vec<Codebook<T>>,
    ssm: SsmStructure,
    layers: Vec<LayerSlots>,
    embed: Vec<usize>,
    final_norm: Option<NormSlot>,
    head: [usize; 2],
}

fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::cast(rng.normal() * std))
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let norm = norm_kinds::<T>().get(&config.norm)?;
        let (d, f) = (config.d_model, config.d_ffn);
        let (z, v, n) = (config.attn.z_dim, config.attn.v_dim, config.ssm_state);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();

        let mut add_norm = |params: &mut ParamStore<T>, prefix: &str| -> Result<NormSlot> {
            let p = norm
                .params(d)
                .into_iter()
                .map(|s| params.add(format!("{prefix}.{}", s.name), Tensor::full(&s.shape, T::cast(s.init))))
                .collect::<Result<_>>()?;
            let b = norm
                .buffers(d)
                .into_iter()
                .map(|s| buffers.add(format!("{prefix}.{}", s.name), Tensor::full(&s.shape, T::cast(s.init))))
                .collect::<Result<_>>()?;
            Ok(NormSlot { params: p, buffers: b })
        };

        let embed = match config.input_kind()? {
            InputKind::Tokens => vec![params.add("embed.table", normal(&[config.vocab, d], 1.0, rng))?],
            InputKind::Channels => vec![
                params.add("embed.w", normal(&[config.channels, d], 1.0 / (config.channels as f64).sqrt(), rng))?,
                params.add("embed.b", Tensor::zeros(&[d]))?,
            ],
        };

        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("layers.{l}");
            let log_dt = params.add(
                format!("{p}.ssm.log_dt"),
                Tensor::from_fn(&[d], |_| T::cast(rng.uniform_range(LOG_DT_MIN, LOG_DT_MAX))),
            )?;
            let c_out = params.add(format!("{p}.ssm.c_out"), normal(&[d, n], 1.0, rng))?;
            let d_skip = params.add(format!("{p}.ssm.d_skip"), Tensor::full(&[d], T::one()))?;
            let mut lin = |name: &str, fan_in: usize, fan_out: usize| -> Result<[usize; 2]> {
                Ok([
                    params.add(format!("{p}.attn.w_{name}"), normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng))?,
                    params.add(format!("{p}.attn.b_{name}"), Tensor::zeros(&[fan_out]))?,
                ])
            };
            let ga = lin("ga", d, v)?;
            let q = lin("q", d, z)?;
            let k = lin("k", d, z)?;
            let vv = lin("v", d, v)?;
            let go = lin("go", d, d)?;
            let out = lin("out", v, d)?;
            let bias = params.add(format!("{p}.attn.local_bias"), Tensor::zeros(&[2 * config.attn.window + 1]))?;
            let norm1 = add_norm(&mut params, &format!("{p}.norm1"))?;
            let norm2 = add_norm(&mut params, &format!("{p}.norm2"))?;
            let ffn = [
                params.add(format!("{p}.ffn.w1"), normal(&[d, f], 1.0 / (d as f64).sqrt(), rng))?,
                params.add(format!("{p}.ffn.b1"), Tensor::zeros(&[f]))?,
                params.add(format!("{p}.ffn.w2"), normal(&[f, d], 1.0 / (f as f64).sqrt(), rng))?,
                params.add(format!("{p}.ffn.b2"), Tensor::zeros(&[d]))?,
            ];
            layers.push(LayerSlots {
                log_dt,
                c_out,
                d_skip,
                gates: [
                    ga[0], ga[1], q[0], q[1], k[0], k[1], vv[0], vv[1], go[0], go[1], out[0], out[1], bias,
                ],
                norm1,
                norm2,
                ffn,
            });
        }
        let final_norm = if config.pre_norm {
            Some(add_norm(&mut params, "final_norm")?)
        } else {
            None
        };
        let out = config.out_dim()?;
        let head = [
            params.add("head.w", normal(&[d, out], 1.0 / (d as f64).sqrt(), rng))?,
            params.add("head.b", Tensor::zeros(&[out]))?,
        ];
        let codebooks = (0..config.depth)
            .map(|_| Codebook::new(normal(&[config.codebook_size, z], 1.0, rng), config.ema_rate, DEFAULT_SMOOTHING))
            .collect::<Result<_>>()?;
        Ok(Self {
            ssm: SsmStructure::s4(n)?,
            config,
            params,
            buffers,
            codebooks,
            layers,
            embed,
            final_norm,
            head,
        })
    }

    /// Fixed SSM structure shared by every layer.
    pub fn ssm_structure(&self) -> &SsmStructure {
        &self.ssm
    }

    pub fn forward(&self, batch: &Batch, opts: ForwardOptions<'_, T>) -> Result<ForwardOutput<T>> {
        match self.run(batch, opts, None)? {
            Run::Done(out) => Ok(out),
            Run::Keys(_) => unreachable!("no stop requested"),
        }
    }

    /// Keys (before quantization) that layer `layer` produces for `batch`.
    pub fn layer_keys(&self, batch: &Batch, layer: usize) -> Result<Tensor<T>> {
        match self.run(batch, ForwardOptions::default(), Some(layer))? {
            Run::Keys(k) => Ok(k),
            Run::Done(_) => Err(Error::Invalid(format!("no layer {layer}"))),
        }
    }

    /// Seed every codebook, layer by layer, from the keys of `batch`.
    pub fn init_codebooks(&mut self, batch: &Batch, rng: &mut Rng) -> Result<()> {
        for l in 0..self.config.depth {
            let keys = self.layer_keys(batch, l)?;
            self.codebooks[l] = Codebook::seed_from_keys(
                &keys,
                self.config.codebook_size,
                self.config.ema_rate,
                DEFAULT_SMOOTHING,
                rng,
            )?;
        }
        Ok(())
    }

    fn apply_norm(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        slot: &NormSlot,
        x: Var,
        train: bool,
        updates: &mut Vec<(usize, Tensor<T>)>,
    ) -> Result<Var> {
        let norm = norm_kinds::<T>().get(&self.config.norm)?;
        let p: Vec<Var> = slot.params.iter().map(|&i| vars[i]).collect();
        let b: Vec<Tensor<T>> = slot.buffers.iter().map(|&i| self.buffers.tensor(i).clone()).collect();
        let (y, upd) = norm.apply(g, x, &p, &b, train)?;
        if let Some(upd) = upd {
            updates.extend(slot.buffers.iter().copied().zip(upd));
        }
        Ok(y)
    }

    fn ffn(&self, g: &mut Graph<T>, vars: &[Var], slots: &[usize; 4], x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let h = g.linear(x, vars[slots[0]], Some(vars[slots[1]]))?;
        let mut h = g.silu(h)?;
        if let (Some(rng), true) = (rng, self.config.dropout > 0.0) {
            let rate = self.config.dropout;
            let keep = T::cast(1.0 / (1.0 - rate));
            let mask = Tensor::from_fn(g.value(h).shape(), |_| if rng.uniform() < rate { T::zero() } else { keep });
            h = g.apply_mask(h, mask)?;
        }
        g.linear(h, vars[slots[2]], Some(vars[slots[3]]))
    }

    fn embed(&self, g: &mut Graph<T>, vars: &[Var], batch: &Batch) -> Result<Var> {
        let rows = batch.rows();
        match (&batch.inputs, self.config.input_kind()?) {
            (Inputs::Tokens(ids), InputKind::Tokens) => {
                if ids.len() != rows {
                    return Err(Error::shape("embed", format!("{} tokens for {rows} rows", ids.len())));
                }
                g.embedding(vars[self.embed[0]], ids)
            }
            (Inputs::Channels { values, channels }, InputKind::Channels) => {
                if *channels != self.config.channels {
                    return Err(Error::shape(
                        "embed",
                        format!("{channels} input channels, model expects {}", self.config.channels),
                    ));
                }
                let x = g.constant(Tensor::from_f64(&[rows, *channels], values)?);
                g.linear(x, vars[self.embed[0]], Some(vars[self.embed[1]]))
            }
            _ => Err(Error::Invalid(format!("batch inputs do not match model input `{}`", self.config.input))),
        }
    }

    fn run(&self, batch: &Batch, mut opts: ForwardOptions<'_, T>, stop: Option<usize>) -> Result<Run<T>> {
        let mut g = Graph::new();
        let param_vars: Vec<Var> = (0..self.params.len())
            .map(|i| {
                let t = self.params.tensor(i).clone();
                if opts.grads {
                    g.leaf(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        let vars = &param_vars;
        let kernel = attention_kernels::<T>().get(opts.kernel.unwrap_or(&self.config.attn.kernel))?;
        let spec = self.config.attn.kernel_spec()?;
        let b_in = g.constant(Tensor::from_f64(&[self.ssm.state_size()], &self.ssm.b_in)?);
        let seq_len = batch.seq_len;
        let mut updates = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());

        let mut x = self.embed(&mut g, vars, batch)?;
        for (l, slots) in self.layers.iter().enumerate() {
            let gs = &slots.gates;
            let gates = GateSet {
                ssm: SsmVars {
                    log_dt: vars[slots.log_dt],
                    c_out: vars[slots.c_out],
                    d_skip: vars[slots.d_skip],
                    b_in,
                },
                w_ga: vars[gs[0]],
                b_ga: vars[gs[1]],
                w_q: vars[gs[2]],
                b_q: vars[gs[3]],
                w_k: vars[gs[4]],
                b_k: vars[gs[5]],
                w_v: vars[gs[6]],
                b_v: vars[gs[7]],
                w_go: vars[gs[8]],
                b_go: vars[gs[9]],
                w_out: vars[gs[10]],
                b_out: vars[gs[11]],
                local_bias: vars[gs[12]],
            };
            let ssm_matrix = self.config.use_ssm.then_some(self.ssm.a.as_slice());
            let input = if self.config.pre_norm {
                self.apply_norm(&mut g, vars, &slots.norm1, x, opts.train, &mut updates)?
            } else {
                x
            };
            if stop == Some(l) {
                let p = project_inputs(&mut g, input, &gates, ssm_matrix, seq_len)?;
                return Ok(Run::Keys(g.value(p.k).clone()));
            }
            let ctx = LayerContext {
                kernel: Arc::clone(&kernel),
                spec: spec.clone(),
                codebook: &self.codebooks[l],
                seq_len,
                ssm_matrix,
                frozen_keys: opts.frozen_keys.map(|f| &f[l]),
                dropout: if opts.train { self.config.dropout } else { 0.0 },
            };
            let train_rng = if opts.train { opts.rng.as_deref_mut() } else { None };
            let out = longvq_attention(&mut g, input, x, &gates, &ctx, train_rng)?;
            let o = out.out;
            layers.push(out);
            x = if self.config.pre_norm {
                let on = self.apply_norm(&mut g, vars, &slots.norm2, o, opts.train, &mut updates)?;
                let train_rng = if opts.train { opts.rng.as_deref_mut() } else { None };
                let f = self.ffn(&mut g, vars, &slots.ffn, on, train_rng)?;
                g.add(o, f)?
            } else {
                let y = self.apply_norm(&mut g, vars, &slots.norm1, o, opts.train, &mut updates)?;
                let train_rng = if opts.train { opts.rng.as_deref_mut() } else { None };
                let f = self.ffn(&mut g, vars, &slots.ffn, y, train_rng)?;
                let s = g.add(y, f)?;
                self.apply_norm(&mut g, vars, &slots.norm2, s, opts.train, &mut updates)?
            };
        }
        if let Some(slot) = &self.final_norm {
            x = self.apply_norm(&mut g, vars, slot, x, opts.train, &mut updates)?;
        }
        let pooled = match self.config.head_kind()? {
            HeadKind::Classify => g.mean_pool(x, seq_len)?,
            HeadKind::Lm => x,
        };
        let logits = g.linear(pooled, vars[self.head[0]], Some(vars[self.head[1]]))?;
        Ok(Run::Done(ForwardOutput {
            graph: g,
            logits,
            layers,
            param_vars,
            buffer_updates: updates,
        }))
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        Ok(Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            codebooks: self
                .codebooks
                .iter()
                .map(|cb| {
                    Codebook::from_parts(
                        cb.codes().cast(),
                        cb.ema_count().to_vec(),
                        cb.ema_sum().to_vec(),
                        cb.eta,
                        cb.epsilon,
                    )
                })
                .collect::<Result<_>>()?,
            ssm: self.ssm.clone(),
            layers: self.layers.clone(),
            embed: self.embed.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head,
        })
    }

    /// Write parameters and buffers (`params.json`, `params.bin`), codebooks
    /// (`codebook_<layer>.lvqc`) and the configuration (`model.json`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_tensors(dir, "params", &[&self.params, &self.buffers])?;
        for (l, cb) in self.codebooks.iter().enumerate() {
            cb.save(&dir.join(format!("codebook_{l}.lvqc")))?;
        }
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let mut model = Self::new(config, &mut Rng::new(0))?;
        load_tensors(dir, "params", &mut [&mut model.params, &mut model.buffers])?;
        for l in 0..model.config.depth {
            model.codebooks[l] = Codebook::load(
                &dir.join(format!("codebook_{l}.lvqc")),
                model.config.ema_rate,
                DEFAULT_SMOOTHING,
            )?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
