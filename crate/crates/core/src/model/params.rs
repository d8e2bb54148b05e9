//! Named parameter tensors and their initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{ModelConfig, QueryMode, UpsampleMode, PYRAMID_STRIDE, UPSAMPLE_FACTOR};
use super::ModelError;
use crate::autodiff::{Graph, Real, Tensor, Var};

/// How a parameter is drawn at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, gain² · 2 / fan_in)` over the first three kernel axes.
    He { gain: f64 },
    /// `U(±sqrt(6 / (fan_in + fan_out)))` for `[in, out]` matrices.
    Xavier,
    Normal { std: f64 },
    /// Softmax logits whose weights approximate bilinear interpolation.
    UpsampleLogits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every parameter of the architecture described by `cfg`, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, k: usize, cin: usize, cout: usize, init: Init| {
        push(format!("{name}.w"), vec![k, k, cin, cout], init);
        push(format!("{name}.b"), vec![cout], Init::Zeros);
    };

    let l = &cfg.ladder;
    conv(&mut push, "backbone.stem", 3, 3, l[0], Init::He { gain: 1.0 });
    let mut cin = l[0];
    for (s, &c) in l.iter().enumerate() {
        for b in 0..2 {
            let base = format!("backbone.s{s}.b{b}");
            let bin = if b == 0 { cin } else { c };
            conv(&mut push, &format!("{base}.conv1"), 3, bin, c, Init::He { gain: 1.0 });
            conv(&mut push, &format!("{base}.conv2"), 3, c, c, Init::He { gain: 0.3 });
            if b == 0 {
                conv(&mut push, &format!("{base}.proj"), 1, bin, c, Init::He { gain: 1.0 });
            }
        }
        cin = c;
    }
    conv(&mut push, "backbone.out", 1, cin, cfg.c_b, Init::Xavier);

    let c = cfg.c_b;
    let attention = |push: &mut dyn FnMut(String, Vec<usize>, Init), base: &str| {
        for p in ["q", "k", "v", "o"] {
            push(format!("{base}.w{p}"), vec![c, c], Init::Xavier);
            push(format!("{base}.b{p}"), vec![c], Init::Zeros);
        }
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), base: &str| {
        push(format!("{base}.gain"), vec![c], Init::Ones);
        push(format!("{base}.bias"), vec![c], Init::Zeros);
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), base: &str| {
        push(format!("{base}.w1"), vec![c, cfg.ffn_width], Init::Xavier);
        push(format!("{base}.b1"), vec![cfg.ffn_width], Init::Zeros);
        push(format!("{base}.w2"), vec![cfg.ffn_width, c], Init::Xavier);
        push(format!("{base}.b2"), vec![c], Init::Zeros);
    };

    for blk in 0..cfg.encoder_blocks {
        for layer in 0..cfg.encoder_layers {
            let base = format!("enc.b{blk}.l{layer}");
            attention(&mut push, &format!("{base}.attn"));
            norm(&mut push, &format!("{base}.ln1"));
            ffn(&mut push, &format!("{base}.ffn"));
            norm(&mut push, &format!("{base}.ln2"));
        }
        if blk + 1 < cfg.encoder_blocks {
            conv(&mut push, &format!("enc.down{blk}"), 3, c, c, Init::Xavier);
        }
    }

    if cfg.query == QueryMode::Learned {
        let (h, w) = cfg.grid(PYRAMID_STRIDE);
        push("dec.queries".into(), vec![h * w, c], Init::Normal { std: 1.0 });
    }
    for blk in 0..cfg.decoder_blocks {
        for layer in 0..cfg.decoder_layers {
            let base = format!("dec.b{blk}.l{layer}");
            attention(&mut push, &format!("{base}.self"));
            norm(&mut push, &format!("{base}.ln1"));
            attention(&mut push, &format!("{base}.cross"));
            norm(&mut push, &format!("{base}.ln2"));
            ffn(&mut push, &format!("{base}.ffn"));
            norm(&mut push, &format!("{base}.ln3"));
        }
    }

    let hw = cfg.head_width;
    conv(&mut push, "head.flow1", 3, c, hw, Init::He { gain: 1.0 });
    conv(&mut push, "head.flow2", 3, hw, 2, Init::Zeros);
    if cfg.upsample == UpsampleMode::Learned {
        let f2 = UPSAMPLE_FACTOR * UPSAMPLE_FACTOR;
        conv(&mut push, "head.mask1", 3, c, hw, Init::He { gain: 1.0 });
        push("head.mask2.w".into(), vec![1, 1, hw, f2 * 9], Init::He { gain: 0.05 });
        push("head.mask2.b".into(), vec![f2 * 9], Init::UpsampleLogits);
    }
    out
}

/// Logits `ln(w + ε)` where `w` are the 3×3 bilinear weights of each fine
/// position within its coarse cell.
pub fn upsample_logits(factor: usize) -> Vec<f64> {
    let one_d = |d: f64| [(-d).max(0.0), 1.0 - d.abs(), d.max(0.0)];
    let mut out = Vec::with_capacity(factor * factor * 9);
    for a in 0..factor {
        let wy = one_d((a as f64 + 0.5) / factor as f64 - 0.5);
        for b in 0..factor {
            let wx = one_d((b as f64 + 0.5) / factor as f64 - 0.5);
            for k in 0..9 {
                out.push((wy[k / 3] * wx[k % 3] + 1e-2).ln());
            }
        }
    }
    out
}

fn draw(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = spec.shape.iter().product();
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::He { gain } => {
            let fan_in: usize = spec.shape[..spec.shape.len() - 1].iter().product();
            let d = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Xavier => {
            let fan_out = *spec.shape.last().expect("shape");
            let fan_in = n / fan_out;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let d = Uniform::new_inclusive(-a, a);
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Normal { std } => {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::UpsampleLogits => upsample_logits(UPSAMPLE_FACTOR),
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Fresh parameters for `cfg`; deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for spec in param_specs(cfg) {
            let data = draw(&spec, &mut rng);
            pairs.push((spec.name, Tensor::from_f64(&spec.shape, &data)?));
        }
        Self::from_named(pairs)
    }

    pub fn from_named(pairs: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(pairs.len());
        let mut tensors = Vec::with_capacity(pairs.len());
        for (i, (name, t)) in pairs.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(ModelError::Config(format!("parameter {name} appears twice")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, index, tensors })
    }

    /// Checks names and shapes against the architecture of `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        if specs.len() != self.names.len() {
            return Err(ModelError::Config(format!(
                "architecture has {} parameters, store has {}",
                specs.len(),
                self.names.len()
            )));
        }
        for spec in &specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            index: &self.index,
            vars,
        }
    }

    /// Addresses handles already placed on a graph, one per tensor in store
    /// order (e.g. perturbed copies in a finite-difference check).
    pub fn bind_existing(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.tensors.len(), "one handle per parameter tensor");
        Bound {
            index: &self.index,
            vars,
        }
    }
}

/// Graph handles of a bound [`ParamStore`], addressable by name.
#[derive(Debug)]
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Handle of a parameter; the names come from [`param_specs`], so a
    /// miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} is not part of this architecture"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
