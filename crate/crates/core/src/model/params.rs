use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Variant};
use crate::numerics::Tensor;

/// Named parameter arrays in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Overwrites all values from a flat vector produced by [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length");
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect()
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform on `±1/√fan_in`.
    Uniform(usize),
    Zeros,
    Ones,
    /// `N(0, 0.02)`.
    Normal,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    /// Key projection has no bias: a key offset shifts every score in a row
    /// equally and cancels in the softmax.
    pub k: usize,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Head {
    /// Per-step `d_model → 4`: raw k, λ, A and variance contribution.
    Weibull { out: Linear },
    /// Per-step `d_model → 2G`: free-form increment and variance contribution.
    AccumOnly { out: Linear },
    /// Learned grid queries cross-attending over the encoder states.
    Baseline {
        queries: usize,
        attn: Attention,
        mlp_in: Linear,
        mlp_out: Linear,
    },
}

/// Index of every parameter tensor, derived deterministically from a config.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub knob_proj: Linear,
    pub equipment: usize,
    pub location: usize,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
    pub head: Head,
    pub specs: Vec<(String, Vec<usize>, Init)>,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![fan_in, fan_out], Init::Uniform(fan_in)),
            b: self.add(format!("{name}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![dim], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![dim], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.query"), d, d),
            k: self.add(format!("{name}.key.weight"), vec![d, d], Init::Uniform(d)),
            v: self.linear(&format!("{name}.value"), d, d),
            o: self.linear(&format!("{name}.output"), d, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let knob_proj = b.linear("embed.knobs", 5, d);
        let equipment = b.add(
            "embed.equipment".into(),
            vec![cfg.equipment_vocab.len(), d],
            Init::Normal,
        );
        let location = b.add(
            "embed.wafer_location".into(),
            vec![cfg.location_vocab.len(), d],
            Init::Normal,
        );
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayer {
                    norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                    attn: b.attention(&format!("{p}.self_attn"), d),
                    norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                    ffn_in: b.linear(&format!("{p}.ffn_in"), d, cfg.d_ffn),
                    ffn_out: b.linear(&format!("{p}.ffn_out"), cfg.d_ffn, d),
                }
            })
            .collect();
        let final_norm = b.norm("encoder.final_norm", d);
        let head = match cfg.variant {
            Variant::Weibull => Head::Weibull {
                out: b.linear("head.weibull", d, 4),
            },
            Variant::AccumOnly => Head::AccumOnly {
                out: b.linear("head.increment", d, 2 * cfg.grid_size),
            },
            Variant::Baseline => Head::Baseline {
                queries: b.add("decoder.queries".into(), vec![cfg.grid_size, d], Init::Normal),
                attn: b.attention("decoder.cross_attn", d),
                mlp_in: b.linear("decoder.mlp_in", d, cfg.d_ffn),
                mlp_out: b.linear("decoder.mlp_out", cfg.d_ffn, 2),
            },
        };
        Layout {
            knob_proj,
            equipment,
            location,
            layers,
            final_norm,
            head,
            specs: b.specs,
        }
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::with_capacity(self.specs.len());
        let mut tensors = Vec::with_capacity(self.specs.len());
        for (name, shape, init) in &self.specs {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match *init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => (0..n).map(|_| normal.sample(rng)).collect(),
            };
            names.push(name.clone());
            tensors.push(Tensor::new(shape.clone(), values).expect("layout shape"));
        }
        ParamStore::from_parts(names, tensors)
    }

    /// Checks that a loaded store has exactly this layout's names and shapes.
    pub fn matches(&self, store: &ParamStore) -> std::result::Result<(), String> {
        if store.len() != self.specs.len() {
            return Err(format!(
                "expected {} parameter arrays, found {}",
                self.specs.len(),
                store.len()
            ));
        }
        for ((name, shape, _), (sn, st)) in self.specs.iter().zip(store.names().iter().zip(store.tensors())) {
            if name != sn || shape.as_slice() != st.shape() {
                return Err(format!(
                    "parameter `{sn}` {:?} does not match expected `{name}` {shape:?}",
                    st.shape()
                ));
            }
        }
        Ok(())
    }
}
