use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f64>,
    /// Weight decay applies (conv and linear weights, not biases or norm affine terms).
    pub decay: bool,
}

/// Ordered trainable parameters, kept in f64.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// `(name, shape, decay)` for every parameter of `config`, in store order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut cin = 1;
    for (s, &c) in config.encoder_channels.iter().enumerate() {
        for j in 0..2 {
            let i = if j == 0 { cin } else { c };
            out.push((format!("enc.s{s}.c{j}.w"), vec![c, i, 3, 3], true));
            out.push((format!("enc.s{s}.c{j}.gamma"), vec![c], false));
            out.push((format!("enc.s{s}.c{j}.beta"), vec![c], false));
        }
        cin = c;
    }
    let w = config.gcn_width;
    for b in 0..config.gcn_blocks {
        for l in 0..config.gcn_layers {
            let f = if l == 0 { config.feature_channels() + 2 } else { w };
            out.push((format!("gcn.b{b}.l{l}.w_self"), vec![f, w], true));
            out.push((format!("gcn.b{b}.l{l}.w_nbr"), vec![f, w], true));
            out.push((format!("gcn.b{b}.l{l}.bias"), vec![w], false));
        }
        out.push((format!("gcn.b{b}.head.w"), vec![w, 2], true));
        out.push((format!("gcn.b{b}.head.b"), vec![2], false));
    }
    out
}

impl ParamStore {
    /// He-normal weights, unit norm scales, zero biases and zero output heads.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape, decay) in layout(config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if !decay || name.contains(".head.") {
                vec![0.0; n]
            } else {
                let fan_in = if shape.len() == 4 { shape[1] * 9 } else { 2 * shape[0] };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(Param { name, value: Tensor::new(&shape, data).expect("layout shape"), decay });
        }
        Self::from_params(params).expect("layout names are unique")
    }

    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self { params, index })
    }

    /// Rejects stores whose names, shapes or total size differ from `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = layout(config);
        if self.scalar_count() != config.param_count() || expected.len() != self.params.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match config ({})",
                self.scalar_count(),
                config.param_count()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(&self.params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    /// Position of `name`; panics on unknown names, which are programming errors.
    pub fn index(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}
