use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a ViT/DeiT classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: f32,
    pub num_classes: usize,
    pub has_class_token: bool,
    /// DeiT distillation token; protected exactly like the class token.
    #[serde(default)]
    pub distilled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("deit-s").expect("known preset")
    }
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 4] = ["vit-s", "vit-b", "vit-l", "deit-s"];

    /// Named shapes, all patch 16 at 224px with 1000 classes.
    pub fn preset(name: &str) -> Option<Self> {
        let (depth, embed_dim, heads) = match name {
            "vit-s" | "deit-s" => (12, 384, 6),
            "vit-b" => (12, 768, 12),
            "vit-l" => (24, 1024, 16),
            _ => return None,
        };
        Some(Self {
            depth,
            embed_dim,
            heads,
            patch_size: 16,
            image_size: 224,
            mlp_ratio: 4.0,
            num_classes: 1000,
            has_class_token: true,
            distilled: false,
        })
    }

    /// Small configuration used by tests and benchmarks.
    pub fn tiny(depth: usize, embed_dim: usize, heads: usize, grid: usize, patch_size: usize) -> Self {
        Self {
            depth,
            embed_dim,
            heads,
            patch_size,
            image_size: grid * patch_size,
            mlp_ratio: 4.0,
            num_classes: 10,
            has_class_token: true,
            distilled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("embed_dim and num_classes must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        if self.distilled && !self.has_class_token {
            return Err(Error::Config("a distillation token requires a class token".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Class and distillation tokens placed before the patches.
    pub fn num_prefix_tokens(&self) -> usize {
        usize::from(self.has_class_token) + usize::from(self.distilled)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.num_prefix_tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deit_s_token_count() {
        let c = ModelConfig::preset("deit-s").unwrap();
        assert_eq!(c.num_patches(), 196);
        assert_eq!(c.num_tokens(), 197);
        assert_eq!(c.mlp_hidden(), 1536);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut c = ModelConfig::tiny(2, 8, 3, 2, 4);
        assert!(c.validate().is_err());
        c.heads = 2;
        c.image_size = 9;
        assert!(c.validate().is_err());
        c.image_size = 8;
        assert!(c.validate().is_ok());
    }
}
