use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Baseline,
    /// Half as many heads, each twice as wide.
    BaselineHalf,
    Diff,
    /// Baseline blocks with the output adapter trained jointly from step 0.
    DexScratch,
}

impl Arch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Arch::Baseline),
            "baseline_half" => Some(Arch::BaselineHalf),
            "diff" => Some(Arch::Diff),
            "dex_scratch" => Some(Arch::DexScratch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::BaselineHalf => "baseline_half",
            Arch::Diff => "diff",
            Arch::DexScratch => "dex_scratch",
        }
    }
}

/// Serialized as a bare number or the string `"depth_aware"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaInit {
    Constant(f64),
    DepthAware,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaInitRepr {
    Constant(f64),
    Named(String),
}

impl Serialize for LambdaInit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            LambdaInit::Constant(c) => LambdaInitRepr::Constant(c),
            LambdaInit::DepthAware => LambdaInitRepr::Named("depth_aware".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LambdaInit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match LambdaInitRepr::deserialize(d)? {
            LambdaInitRepr::Constant(c) => Ok(LambdaInit::Constant(c)),
            LambdaInitRepr::Named(n) => LambdaInit::parse(&n).ok_or_else(|| {
                serde::de::Error::custom(format!("lambda_init must be a number or \"depth_aware\", got {n:?}"))
            }),
        }
    }
}

impl LambdaInit {
    /// Initial lambda for a 0-based layer index.
    pub fn value(self, layer: usize) -> f64 {
        match self {
            LambdaInit::Constant(c) => c,
            LambdaInit::DepthAware => 0.8 - 0.6 * (-0.3 * layer as f64).exp(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "depth_aware" => Some(LambdaInit::DepthAware),
            _ => s.parse().ok().map(LambdaInit::Constant),
        }
    }

    pub fn label(self) -> String {
        match self {
            LambdaInit::Constant(c) => format!("{c}"),
            LambdaInit::DepthAware => "depth_aware".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub arch: Arch,
    pub rope_theta: f64,
    pub headwise_norm: bool,
    pub lambda_init: LambdaInit,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 8,
            n_kv_heads: 8,
            d_head: 16,
            d_ff: 352,
            vocab_size: 256,
            max_seq: 256,
            arch: Arch::Baseline,
            rope_theta: 10000.0,
            headwise_norm: false,
            lambda_init: LambdaInit::DepthAware,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

/// How the attention width is cut into heads for a given architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    /// Query heads (diff: head pairs).
    pub heads: usize,
    pub kv_heads: usize,
    /// Width of one query/key sub-head, the softmax temperature basis.
    pub qk_dim: usize,
    /// Width of one value/output slice.
    pub v_dim: usize,
    /// Query/key sub-maps per head: 2 for diff, 1 otherwise.
    pub maps: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let nz = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in nz {
            if v == 0 {
                return Err(config_err(format!("model.{name} must be positive")));
            }
        }
        if self.n_kv_heads > self.n_heads || self.n_heads % self.n_kv_heads != 0 {
            return Err(config_err(format!(
                "n_heads {} must be a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(config_err("d_head must be even for rotary embeddings"));
        }
        if matches!(self.arch, Arch::Diff | Arch::BaselineHalf)
            && (self.n_heads % 2 != 0 || self.n_kv_heads % 2 != 0)
        {
            return Err(config_err(format!(
                "arch {} needs even n_heads and n_kv_heads",
                self.arch.name()
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(config_err("rope_theta, norm_eps and init_std must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> HeadLayout {
        let d = self.d_head;
        match self.arch {
            Arch::Baseline | Arch::DexScratch => HeadLayout {
                heads: self.n_heads,
                kv_heads: self.n_kv_heads,
                qk_dim: d,
                v_dim: d,
                maps: 1,
            },
            Arch::BaselineHalf => HeadLayout {
                heads: self.n_heads / 2,
                kv_heads: self.n_kv_heads / 2,
                qk_dim: 2 * d,
                v_dim: 2 * d,
                maps: 1,
            },
            Arch::Diff => HeadLayout {
                heads: self.n_heads / 2,
                kv_heads: self.n_kv_heads / 2,
                qk_dim: d,
                v_dim: 2 * d,
                maps: 2,
            },
        }
    }

    /// Total query (and output) projection width.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_aware_first_layer() {
        assert!((LambdaInit::DepthAware.value(0) - 0.2).abs() < 1e-15);
        let l2 = 0.8 - 0.6 * (-0.3f64).exp();
        assert_eq!(LambdaInit::DepthAware.value(1), l2);
    }

    #[test]
    fn layouts_preserve_width() {
        for arch in [Arch::Baseline, Arch::BaselineHalf, Arch::Diff, Arch::DexScratch] {
            let c = ModelConfig {
                arch,
                ..Default::default()
            };
            c.validate().unwrap();
            let l = c.layout();
            assert_eq!(l.heads * l.v_dim, c.attn_width());
            assert_eq!(l.heads * l.maps * l.qk_dim, c.attn_width());
        }
    }

    #[test]
    fn rejects_bad_gqa() {
        let c = ModelConfig {
            n_kv_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_roundtrip() {
        let c = ModelConfig {
            lambda_init: LambdaInit::Constant(0.5),
            ..Default::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"lambda_init\":0.5"));
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let d: ModelConfig = serde_json::from_str(r#"{"lambda_init":"depth_aware","n_layers":2}"#).unwrap();
        assert_eq!((d.lambda_init, d.n_layers, d.d_model), (LambdaInit::DepthAware, 2, 128));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"lambda_init":"deep"}"#).is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"n_layer":2}"#).is_err());
    }
}
