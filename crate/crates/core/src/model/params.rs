//! Learned tensors of the network, laid out to mirror the forward pass.
//!
//! The containers are generic so the same layout can hold matrices (the
//! stored parameters), tape variables (during a forward pass) or gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{Mat, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// Projections of one attention sub-block. Cross-attention takes its queries
/// and keys straight from the previous stage's probabilities and has none.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: Option<Linear<T>>,
    pub key: Option<Linear<T>>,
    pub value: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub conv: Option<Linear<T>>,
    pub attention: [AttentionParams<T>; 2],
    /// Output projection of the first attention.
    pub mix: Linear<T>,
    /// Residual output layer.
    pub out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    /// Feature projection in stage 1, probability embedding afterwards.
    pub input: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub reduce: Option<Linear<T>>,
    pub head: Linear<T>,
}

/// Visits `(name, tensor)` in the canonical order shared by every layout.
pub trait Visit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));
}

impl<T> Visit<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Visit<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        if let Some(q) = &self.query {
            q.visit(&format!("{prefix}.query"), f);
        }
        if let Some(k) = &self.key {
            k.visit(&format!("{prefix}.key"), f);
        }
        self.value.visit(&format!("{prefix}.value"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        if let Some(q) = &mut self.query {
            q.visit_mut(&format!("{prefix}.query"), f);
        }
        if let Some(k) = &mut self.key {
            k.visit_mut(&format!("{prefix}.key"), f);
        }
        self.value.visit_mut(&format!("{prefix}.value"), f);
    }
}

impl<T> Visit<T> for BlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        if let Some(c) = &self.conv {
            c.visit(&format!("{prefix}.conv"), f);
        }
        for (i, a) in self.attention.iter().enumerate() {
            a.visit(&format!("{prefix}.attn{i}"), f);
        }
        self.mix.visit(&format!("{prefix}.mix"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        if let Some(c) = &mut self.conv {
            c.visit_mut(&format!("{prefix}.conv"), f);
        }
        for (i, a) in self.attention.iter_mut().enumerate() {
            a.visit_mut(&format!("{prefix}.attn{i}"), f);
        }
        self.mix.visit_mut(&format!("{prefix}.mix"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}

impl<T> Visit<T> for StageParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.input.visit(&format!("{prefix}.input"), f);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{l}"), f);
        }
        if let Some(r) = &self.reduce {
            r.visit(&format!("{prefix}.reduce"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.input.visit_mut(&format!("{prefix}.input"), f);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{l}"), f);
        }
        if let Some(r) = &mut self.reduce {
            r.visit_mut(&format!("{prefix}.reduce"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

impl<T> Visit<T> for Vec<StageParams<T>> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (s, stage) in self.iter().enumerate() {
            stage.visit(&format!("{prefix}stage{}", s + 1), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (s, stage) in self.iter_mut().enumerate() {
            stage.visit_mut(&format!("{prefix}stage{}", s + 1), f);
        }
    }
}

/// Builds a layout by calling `make(name, rows, cols, is_bias)` for every tensor
/// in canonical order.
pub fn build_layout<T>(
    cfg: &ModelConfig,
    mut make: impl FnMut(&str, usize, usize, bool) -> T,
) -> Vec<StageParams<T>> {
    let mut linear = |name: String, rows: usize, cols: usize| Linear {
        weight: make(&format!("{name}.weight"), rows, cols, false),
        bias: make(&format!("{name}.bias"), 1, cols, true),
    };
    let c = cfg.classes;
    (0..cfg.stages)
        .map(|s| {
            let p = format!("stage{}", s + 1);
            let d = cfg.stage_width(s);
            let input = if s == 0 {
                linear(format!("{p}.input"), cfg.d_in, d)
            } else {
                linear(format!("{p}.input"), c, d)
            };
            let cross = cfg.uses_cross_attention(s);
            let blocks = (0..cfg.layers)
                .map(|l| {
                    let b = format!("{p}.block{l}");
                    let conv = (cfg.conv != super::ConvMode::None)
                        .then(|| linear(format!("{b}.conv"), 3 * d, d));
                    let mut attn = |i: usize| {
                        let a = format!("{b}.attn{i}");
                        AttentionParams {
                            query: (!cross).then(|| linear(format!("{a}.query"), d, d)),
                            key: (!cross).then(|| linear(format!("{a}.key"), d, d)),
                            value: linear(format!("{a}.value"), d, d),
                        }
                    };
                    let attention = [attn(0), attn(1)];
                    BlockParams {
                        conv,
                        attention,
                        mix: linear(format!("{b}.mix"), d, d),
                        out: linear(format!("{b}.out"), d, d),
                    }
                })
                .collect();
            let reduce =
                (s == 0 && cfg.has_reduction()).then(|| linear(format!("{p}.reduce"), cfg.d1, cfg.d2));
            let head = linear(format!("{p}.head"), cfg.head_width(s), c);
            StageParams { input, blocks, reduce, head }
        })
        .collect()
}

/// All learned tensors of a network together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R> {
    pub config: ModelConfig,
    pub stages: Vec<StageParams<Mat<R>>>,
}

impl<R: Real> ModelParams<R> {
    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = build_layout(config, |_, rows, cols, is_bias| {
            if is_bias {
                Mat::zeros(rows, cols)
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                Mat::from_fn(rows, cols, |_, _| R::lit(rng.random_range(-bound..bound)))
            }
        });
        Ok(Self { config: config.clone(), stages })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Mat<R>)> {
        let mut out = Vec::new();
        self.stages.visit("", &mut |name, m| out.push((name, m)));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Mat<R>)) {
        self.stages.visit_mut("", &mut |name, m| f(&name, m));
    }

    /// Number of scalars actually allocated.
    pub fn scalar_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        let mut flat: Vec<Mat<S>> = self.named_tensors().into_iter().map(|(_, m)| m.cast()).collect();
        flat.reverse();
        let stages = build_layout(&self.config, |_, _, _, _| flat.pop().expect("same layout"));
        ModelParams { config: self.config.clone(), stages }
    }
}

/// Analytic number of learned scalars implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let c = cfg.classes;
    let mut total = 0;
    for s in 0..cfg.stages {
        let d = cfg.stage_width(s);
        total += if s == 0 { lin(cfg.d_in, d) } else { lin(c, d) };
        let conv = if cfg.conv == super::ConvMode::None { 0 } else { lin(3 * d, d) };
        let per_attention = if cfg.uses_cross_attention(s) { lin(d, d) } else { 3 * lin(d, d) };
        total += cfg.layers * (conv + 2 * per_attention + 2 * lin(d, d));
        if s == 0 && cfg.has_reduction() {
            total += lin(cfg.d1, cfg.d2);
        }
        total += lin(cfg.head_width(s), c);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, ConvMode};

    #[test]
    fn toy_count_matches_hand_enumeration() {
        let mut cfg = ModelConfig::new(4, 2);
        (cfg.d1, cfg.d2, cfg.layers, cfg.stages) = (2, 2, 1, 1);
        // input 4x2+2, conv 6x2+2, 2 attentions x (q,k,v) 3x(2x2+2), mix 2x2+2, out 2x2+2, head 2x2+2
        let hand = 10 + 14 + 2 * 3 * 6 + 6 + 6 + 6;
        assert_eq!(param_count(&cfg), hand);
        assert_eq!(ModelParams::<f32>::init(&cfg, 0).unwrap().scalar_count(), hand);
    }

    #[test]
    fn analytic_count_matches_allocation() {
        let mut cfg = ModelConfig::new(7, 5);
        (cfg.d1, cfg.d2, cfg.layers, cfg.stages) = (8, 4, 3, 3);
        for conv in [ConvMode::Dilated, ConvMode::None] {
            for cross in [true, false] {
                cfg.conv = conv;
                cfg.cross_attention = cross;
                let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
                assert_eq!(p.scalar_count(), param_count(&cfg));
            }
        }
    }

    #[test]
    fn attention_mode_does_not_change_count() {
        let mut cfg = ModelConfig::new(32, 6);
        let base = param_count(&cfg);
        for mode in [AttentionMode::WindowedOnly, AttentionMode::LongTermOnly] {
            cfg.mode = mode;
            assert_eq!(param_count(&cfg), base);
        }
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let mut cfg = ModelConfig::new(6, 3);
        (cfg.layers, cfg.stages) = (2, 2);
        let a = ModelParams::<f32>::init(&cfg, 5).unwrap();
        assert_eq!(a, ModelParams::<f32>::init(&cfg, 5).unwrap());
        assert_ne!(a, ModelParams::<f32>::init(&cfg, 6).unwrap());
        for (name, m) in a.named_tensors() {
            if name.ends_with(".bias") {
                assert!(m.as_slice().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = 1.0 / (m.rows() as f32).sqrt();
                assert!(m.as_slice().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn names_are_unique_and_cast_preserves_layout() {
        let mut cfg = ModelConfig::new(6, 3);
        (cfg.layers, cfg.stages) = (2, 3);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let names: std::collections::HashSet<String> =
            p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), p.named_tensors().len());
        assert!(names.contains("stage2.block1.attn0.value.weight"));
        assert!(!names.contains("stage2.block1.attn0.query.weight"));
        assert!(names.contains("stage1.reduce.weight"));
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
    }
}
