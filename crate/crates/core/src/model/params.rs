use rand_distr::{Distribution, Normal};

use super::TransformerConfig;
use crate::rng::RngService;
use crate::{Element, Error, Result, Tensor};

/// Weights of one sandwich-normalized decoder block. Linear maps are stored
/// `in x out` so that activations multiply on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub attn_norm_pre: Tensor<T>,
    pub attn_norm_post: Tensor<T>,
    pub ffn_norm_pre: Tensor<T>,
    pub ffn_norm_post: Tensor<T>,
}

/// Linear gate probe of one first-half block: `weight` is `d x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All learnable weights. `gates` is empty for a dense model and holds one
/// probe per first-half layer otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub token_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
    pub gates: Vec<GateParams<T>>,
}

impl<T: Element> LayerParams<T> {
    fn fields(&self) -> [(&'static str, &Tensor<T>); 11] {
        [
            ("attention.wq", &self.wq),
            ("attention.wk", &self.wk),
            ("attention.wv", &self.wv),
            ("attention.wo", &self.wo),
            ("feed_forward.w_gate", &self.w_gate),
            ("feed_forward.w_up", &self.w_up),
            ("feed_forward.w_down", &self.w_down),
            ("attention_norm_pre", &self.attn_norm_pre),
            ("attention_norm_post", &self.attn_norm_post),
            ("ffn_norm_pre", &self.ffn_norm_pre),
            ("ffn_norm_post", &self.ffn_norm_post),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.attn_norm_pre,
            &mut self.attn_norm_post,
            &mut self.ffn_norm_pre,
            &mut self.ffn_norm_post,
        ]
    }
}

impl<T: Element> Parameters<T> {
    /// Random initialization: matrices from `Normal(0, initializer_range)`,
    /// norm weights one, gate weights from their own stream and gate biases
    /// zero. Dense and gated models built from the same seed share every
    /// non-gate weight.
    pub fn init(config: &TransformerConfig, gated: bool, rng: &RngService) -> Result<Self> {
        config.validate()?;
        let mut dense_rng = rng.stream("init.dense");
        let mut gate_rng = rng.stream("init.gates");
        let std = config.initializer_range;
        let mut params = Self::zeros(config, gated);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let fill = |t: &mut Tensor<T>, r: &mut dyn rand::RngCore| {
            for x in t.data_mut() {
                *x = T::from_f64_lossy(normal.sample(r));
            }
        };
        fill(&mut params.token_embedding, &mut dense_rng);
        for layer in &mut params.layers {
            for (i, t) in layer.fields_mut().into_iter().enumerate() {
                if i < 7 {
                    fill(t, &mut dense_rng);
                }
            }
        }
        fill(&mut params.head, &mut dense_rng);
        for gate in &mut params.gates {
            fill(&mut gate.weight, &mut gate_rng);
        }
        Ok(params)
    }

    /// Zero matrices, unit norm weights.
    pub fn zeros(config: &TransformerConfig, gated: bool) -> Self {
        let (d, v, h) = (config.dim, config.vocab_size, config.ffn_hidden_dim());
        let kv = config.kv_dim();
        let layer = LayerParams {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, kv]),
            wv: Tensor::zeros(&[d, kv]),
            wo: Tensor::zeros(&[d, d]),
            w_gate: Tensor::zeros(&[d, h]),
            w_up: Tensor::zeros(&[d, h]),
            w_down: Tensor::zeros(&[h, d]),
            attn_norm_pre: Tensor::ones(&[d]),
            attn_norm_post: Tensor::ones(&[d]),
            ffn_norm_pre: Tensor::ones(&[d]),
            ffn_norm_post: Tensor::ones(&[d]),
        };
        let gates = if gated {
            (0..config.gate_layers())
                .map(|_| GateParams {
                    weight: Tensor::zeros(&[d, 1]),
                    bias: Tensor::zeros(&[1]),
                })
                .collect()
        } else {
            Vec::new()
        };
        Parameters {
            token_embedding: Tensor::zeros(&[v, d]),
            layers: vec![layer; config.n_layers],
            final_norm: Tensor::ones(&[d]),
            head: Tensor::zeros(&[d, v]),
            gates,
        }
    }

    pub fn is_gated(&self) -> bool {
        !self.gates.is_empty()
    }

    /// Every tensor with its canonical name, in the fixed serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_embeddings".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.fields().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("norm".into(), &self.final_norm));
        out.push(("output".into(), &self.head));
        for (i, g) in self.gates.iter().enumerate() {
            out.push((format!("gates.{i}.weight"), &g.weight));
            out.push((format!("gates.{i}.bias"), &g.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        for g in &mut self.gates {
            out.push(&mut g.weight);
            out.push(&mut g.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn gate_param_count(&self) -> usize {
        self.gates.iter().map(|g| g.weight.numel() + g.bias.numel()).sum()
    }

    /// Sets every gate weight and bias to zero, the dense-recovery point.
    pub fn zero_gates(&mut self) {
        for g in &mut self.gates {
            g.weight.data_mut().fill(T::zero());
            g.bias.data_mut().fill(T::zero());
        }
    }

    /// The same weights without gate probes.
    pub fn without_gates(&self) -> Self {
        Parameters {
            gates: Vec::new(),
            ..self.clone()
        }
    }

    pub fn cast<U: Element>(&self) -> Parameters<U> {
        let layer = |l: &LayerParams<T>| LayerParams {
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            w_gate: l.w_gate.cast(),
            w_up: l.w_up.cast(),
            w_down: l.w_down.cast(),
            attn_norm_pre: l.attn_norm_pre.cast(),
            attn_norm_post: l.attn_norm_post.cast(),
            ffn_norm_pre: l.ffn_norm_pre.cast(),
            ffn_norm_post: l.ffn_norm_post.cast(),
        };
        Parameters {
            token_embedding: self.token_embedding.cast(),
            layers: self.layers.iter().map(layer).collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
            gates: self
                .gates
                .iter()
                .map(|g| GateParams {
                    weight: g.weight.cast(),
                    bias: g.bias.cast(),
                })
                .collect(),
        }
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &TransformerConfig) -> Result<()> {
        let expected = Self::zeros(config, self.is_gated());
        if self.gates.len() != expected.gates.len() || self.layers.len() != expected.layers.len() {
            return Err(Error::ConfigMismatch(format!(
                "parameters have {} layers / {} gates, config wants {} / {}",
                self.layers.len(),
                self.gates.len(),
                expected.layers.len(),
                expected.gates.len()
            )));
        }
        for ((name, a), (_, b)) in self.named().into_iter().zip(expected.named()) {
            if a.shape() != b.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: shape {:?}, config wants {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}
