//! Trainable weights, stored flat and addressed through a typed layout.
//!
//! Enumeration order (used by the optimizer and checkpoints):
//!
//! 1. `encoder.words`
//! 2. `encoder.title.{query,key,value,output}`, `encoder.title.pool.{proj,bias,query}`
//! 3. the same eight tensors under `encoder.abstract`
//! 4. `encoder.topic.{table,weight,bias}`, `encoder.subtopic.{table,weight,bias}`
//! 5. `encoder.fusion.{proj,bias,query}`
//! 6. `pin.detector.{query,key,value}` and, if enabled, `pin.detector.output`
//! 7. `pin.channel{i}.{reset,update,candidate}` for `i = 0..k`
//! 8. `pin.fusion.{proj,bias,query}`
//!
//! Linear maps act on row vectors: a map from `n` to `m` features is an
//! `n × m` matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::data::PAD_ID;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `a_l = qᵀ tanh(h_l·proj + bias)` scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Additive<I> {
    pub proj: I,
    pub bias: I,
    pub query: I,
}

/// Per-head query/key/value maps (heads occupy contiguous column blocks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttention<I> {
    pub query: I,
    pub key: I,
    pub value: I,
    pub output: Option<I>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder<I> {
    pub attention: SelfAttention<I>,
    pub pool: Additive<I>,
}

/// Embedding table followed by an affine map to the news dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Category<I> {
    pub table: I,
    pub weight: I,
    pub bias: I,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder<I> {
    pub words: I,
    pub title: TextEncoder<I>,
    pub abstract_: TextEncoder<I>,
    pub topic: Category<I>,
    pub subtopic: Category<I>,
    pub fusion: Additive<I>,
}

/// Gate weights of one channel, each `(D/k + D) × D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru<I> {
    pub reset: I,
    pub update: I,
    pub candidate: I,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pin<I> {
    pub detector: SelfAttention<I>,
    pub channels: Vec<Gru<I>>,
    pub fusion: Additive<I>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout<I> {
    pub encoder: Encoder<I>,
    pub pin: Pin<I>,
}

impl<I: Copy> Additive<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> Additive<U> {
        Additive {
            proj: f(self.proj),
            bias: f(self.bias),
            query: f(self.query),
        }
    }
}

impl<I: Copy> SelfAttention<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> SelfAttention<U> {
        SelfAttention {
            query: f(self.query),
            key: f(self.key),
            value: f(self.value),
            output: self.output.map(f),
        }
    }
}

impl<I: Copy> TextEncoder<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> TextEncoder<U> {
        TextEncoder {
            attention: self.attention.map(f),
            pool: self.pool.map(f),
        }
    }
}

impl<I: Copy> Category<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> Category<U> {
        Category {
            table: f(self.table),
            weight: f(self.weight),
            bias: f(self.bias),
        }
    }
}

impl<I: Copy> Encoder<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> Encoder<U> {
        Encoder {
            words: f(self.words),
            title: self.title.map(f),
            abstract_: self.abstract_.map(f),
            topic: self.topic.map(f),
            subtopic: self.subtopic.map(f),
            fusion: self.fusion.map(f),
        }
    }
}

impl<I: Copy> Gru<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> Gru<U> {
        Gru {
            reset: f(self.reset),
            update: f(self.update),
            candidate: f(self.candidate),
        }
    }
}

impl<I: Copy> Pin<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> Pin<U> {
        Pin {
            detector: self.detector.map(f),
            channels: self.channels.iter().map(|c| c.map(f)).collect(),
            fusion: self.fusion.map(f),
        }
    }
}

impl<I: Copy> Layout<I> {
    pub fn map<U>(&self, f: &impl Fn(I) -> U) -> Layout<U> {
        Layout {
            encoder: self.encoder.map(f),
            pin: self.pin.map(f),
        }
    }
}

/// Xavier/Glorot uniform bound.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

enum Init {
    Xavier,
    Zeros,
    Given(Tensor),
}

struct Builder {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Given(t) => t,
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [n] => (*n, 1),
                    [r, c] => (*r, *c),
                    _ => unreachable!("parameters are vectors or matrices"),
                };
                let r = xavier_bound(fan_in, fan_out);
                let mut t = Tensor::zeros(shape);
                for v in t.data_mut() {
                    *v = self.rng.gen_range(-r..r);
                }
                t
            }
        };
        self.tensors.push(t.with_grad());
        self.names.push(name);
        self.tensors.len() - 1
    }

    fn additive(&mut self, prefix: &str, dim: usize, hidden: usize) -> Additive<usize> {
        Additive {
            proj: self.add(format!("{prefix}.proj"), &[dim, hidden], Init::Xavier),
            bias: self.add(format!("{prefix}.bias"), &[hidden], Init::Zeros),
            query: self.add(format!("{prefix}.query"), &[hidden], Init::Xavier),
        }
    }

    fn attention(&mut self, prefix: &str, dim: usize, output: bool) -> SelfAttention<usize> {
        SelfAttention {
            query: self.add(format!("{prefix}.query"), &[dim, dim], Init::Xavier),
            key: self.add(format!("{prefix}.key"), &[dim, dim], Init::Xavier),
            value: self.add(format!("{prefix}.value"), &[dim, dim], Init::Xavier),
            output: output.then(|| self.add(format!("{prefix}.output"), &[dim, dim], Init::Xavier)),
        }
    }

    fn text(&mut self, prefix: &str, cfg: &ModelConfig) -> TextEncoder<usize> {
        TextEncoder {
            attention: self.attention(prefix, cfg.dim, true),
            pool: self.additive(&format!("{prefix}.pool"), cfg.dim, cfg.attention_dim),
        }
    }

    fn category(&mut self, prefix: &str, rows: usize, cfg: &ModelConfig) -> Category<usize> {
        let table = self.add(format!("{prefix}.table"), &[rows, cfg.topic_dim], Init::Xavier);
        self.tensors[table].row_mut(PAD_ID).fill(0.0);
        Category {
            table,
            weight: self.add(format!("{prefix}.weight"), &[cfg.topic_dim, cfg.dim], Init::Xavier),
            bias: self.add(format!("{prefix}.bias"), &[cfg.dim], Init::Zeros),
        }
    }
}

/// Every trainable tensor of the encoder and the interest network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    names: Vec<String>,
    layout: Layout<usize>,
}

impl ModelParams {
    /// Seeded initialization. `words` (if given) must be `vocab_size × dim`;
    /// otherwise the word table is uniform(−0.1, 0.1). The padding row is zeroed either way.
    pub fn init(config: &ModelConfig, words: Option<Tensor>, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = match words {
            Some(t) if t.shape() == [v, d] => t,
            Some(t) => {
                return Err(Error::Config(format!(
                    "word embeddings have shape {:?}, model expects [{v}, {d}]",
                    t.shape()
                )))
            }
            None => {
                let mut t = Tensor::zeros(&[v, d]);
                for x in t.data_mut() {
                    *x = rng.gen_range(-0.1..0.1);
                }
                t
            }
        };
        words.row_mut(PAD_ID).fill(0.0);

        let mut b = Builder {
            tensors: Vec::new(),
            names: Vec::new(),
            rng,
        };
        let encoder = Encoder {
            words: b.add("encoder.words".into(), &[v, d], Init::Given(words)),
            title: b.text("encoder.title", config),
            abstract_: b.text("encoder.abstract", config),
            topic: b.category("encoder.topic", config.topic_vocab_size, config),
            subtopic: b.category("encoder.subtopic", config.subtopic_vocab_size, config),
            fusion: b.additive("encoder.fusion", d, config.attention_dim),
        };
        let input = config.interest_dim() + d;
        let detector = b.attention("pin.detector", d, config.detector_projection);
        let channels = (0..config.channels)
            .map(|i| Gru {
                reset: b.add(format!("pin.channel{i}.reset"), &[input, d], Init::Xavier),
                update: b.add(format!("pin.channel{i}.update"), &[input, d], Init::Xavier),
                candidate: b.add(format!("pin.channel{i}.candidate"), &[input, d], Init::Xavier),
            })
            .collect();
        let fusion = b.additive("pin.fusion", d, config.attention_dim);
        Ok(Self {
            config: config.clone(),
            tensors: b.tensors,
            names: b.names,
            layout: Layout {
                encoder,
                pin: Pin {
                    detector,
                    channels,
                    fusion,
                },
            },
        })
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in any order. Every
    /// tensor of `config` must be present exactly once with its shape.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::skeleton(config)?;
        if named.len() != params.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} model tensors, configuration needs {}",
                named.len(),
                params.tensors.len()
            )));
        }
        let mut seen = vec![false; params.tensors.len()];
        for (name, t) in named {
            let i = params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("tensor {name} appears twice")));
            }
            params.replace(i, t).map_err(|_| Error::Config(format!("tensor {name} has the wrong shape")))?;
        }
        Ok(params)
    }

    /// Correct names and shapes, zero values.
    fn skeleton(config: &ModelConfig) -> Result<Self> {
        let words = Tensor::zeros(&[config.vocab_size, config.dim]);
        let mut params = Self::init(config, Some(words), 0)?;
        for t in &mut params.tensors {
            t.data_mut().fill(0.0);
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout<usize> {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Switches the fused news parts; the variant does not affect shapes.
    pub fn set_variant(&mut self, variant: super::config::InputVariant) {
        self.config.variant = variant;
    }

    pub fn set_embeddings_trainable(&mut self, on: bool) {
        let w = self.layout.encoder.words;
        self.tensors[w].set_requires_grad(on);
    }

    /// Registers every tensor on `tape`, in enumeration order, and returns the typed handles.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Layout<Var> {
        self.bind_all(tape).0
    }

    /// As [`ModelParams::bind`], also returning the flat handle list aligned with `tensors()`.
    pub fn bind_all<'a>(&'a self, tape: &mut Tape<'a>) -> (Layout<Var>, Vec<Var>) {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.param(t)).collect();
        (self.layout.map(&|i: usize| vars[i]), vars)
    }

    /// Largest relative error between tape gradients of `f` and central
    /// differences, over every tensor whose name starts with `prefix`.
    pub fn grad_check<F>(&self, prefix: &str, step: f64, f: F) -> Result<f64>
    where
        F: for<'t> Fn(&mut Tape<'t>, &Layout<Var>) -> Result<Var>,
    {
        if step <= 0.0 || !step.is_finite() {
            return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
        }
        let eval = |p: &ModelParams| -> Result<f64> {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let out = f(&mut tape, &vars)?;
            Ok(tape.scalar(out))
        };
        let analytic: Vec<Vec<f64>> = {
            let mut tape = Tape::new();
            let (vars, flat) = self.bind_all(&mut tape);
            let out = f(&mut tape, &vars)?;
            let g = tape.backward(out)?;
            self.tensors.iter().zip(&flat).map(|(t, &v)| g.get_or_zeros(v, t.numel())).collect()
        };
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for (ti, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            for j in 0..self.tensors[ti].numel() {
                let orig = self.tensors[ti].data()[j];
                probe.tensors[ti].data_mut()[j] = orig + step;
                let plus = eval(&probe)?;
                probe.tensors[ti].data_mut()[j] = orig - step;
                let minus = eval(&probe)?;
                probe.tensors[ti].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                worst = worst.max(crate::diffcore::relative_error(analytic[ti][j], numeric));
            }
        }
        Ok(worst)
    }

    /// Replaces tensor `i`, keeping its shape and trainability.
    pub(crate) fn replace(&mut self, i: usize, mut t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::dim("replace", self.tensors[i].shape(), t.shape()));
        }
        t.set_requires_grad(self.tensors[i].requires_grad());
        self.tensors[i] = t;
        Ok(())
    }
}
