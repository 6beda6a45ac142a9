
use crate::error::{Error, Result};

/// Encoder layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchVariant {
    /// Sequential stack: attention, normalization, MLP; no residuals. The
    /// first attention module consumes the position-embedded patches directly.
    A,
    /// Pre-norm residual blocks as in the original ViT.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosMode {
    Learnable,
    FixedSinusoidal,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, { $($text:literal => $val:expr),+ $(,)? }) => {
        impl ::std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($val),)+
                    other => Err($crate::error::Error::InvalidConfig(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                #[allow(unreachable_patterns)]
                let s = match self { $(v if *v == $val => $text,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(ArchVariant, "architecture variant", { "a" => ArchVariant::A, "b" => ArchVariant::B });
text_enum!(PosMode, "position mode", {
    "learnable" => PosMode::Learnable,
    "fixed-sinusoidal" => PosMode::FixedSinusoidal,
    "none" => PosMode::None,
});
text_enum!(Nonlinearity, "nonlinearity", { "relu" => Nonlinearity::Relu, "gelu" => Nonlinearity::Gelu });

/// Architecture geometry. Embeddings are channels-first: `z` is
/// `channel_dim x tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub channel_dim: usize,
    pub head_count: usize,
    pub depth: usize,
    pub variant: ArchVariant,
    pub pos_mode: PosMode,
    pub cls_token: bool,
    pub class_count: usize,
    pub mlp_hidden_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub layernorm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Defaults for a given variant: learnable positions, hidden MLP width
    /// `4c`, relu for A and gelu for B, cls token off.
    pub fn new(
        variant: ArchVariant,
        image: (usize, usize, usize),
        patch: (usize, usize),
        channel_dim: usize,
        head_count: usize,
        depth: usize,
        class_count: usize,
    ) -> Self {
        Self {
            image_height: image.0,
            image_width: image.1,
            image_channels: image.2,
            patch_height: patch.0,
            patch_width: patch.1,
            channel_dim,
            head_count,
            depth,
            variant,
            pos_mode: PosMode::Learnable,
            cls_token: false,
            class_count,
            mlp_hidden_dim: 4 * channel_dim,
            nonlinearity: match variant {
                ArchVariant::A => Nonlinearity::Relu,
                ArchVariant::B => Nonlinearity::Gelu,
            },
            layernorm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Number of image patches `p`.
    pub fn patch_count(&self) -> usize {
        (self.image_height / self.patch_height) * (self.image_width / self.patch_width)
    }

    /// Tokens entering the encoder: patches plus the optional cls token.
    pub fn token_count(&self) -> usize {
        self.patch_count() + usize::from(self.cls_token)
    }

    /// Length of a patch column including the constant augmentation entry.
    pub fn patch_dim(&self) -> usize {
        self.patch_height * self.patch_width * self.image_channels + 1
    }

    pub fn head_dim(&self) -> usize {
        self.channel_dim / self.head_count
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_height == 0 || self.image_width == 0 || self.image_channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.patch_height == 0 || self.patch_width == 0 {
            return bad("patch dimensions must be positive".into());
        }
        if self.image_height % self.patch_height != 0 || self.image_width % self.patch_width != 0 {
            return bad(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.image_height, self.image_width, self.patch_height, self.patch_width
            ));
        }
        if self.channel_dim == 0 || self.depth == 0 || self.head_count == 0 {
            return bad("channel_dim, depth and head_count must be at least 1".into());
        }
        if self.channel_dim % self.head_count != 0 {
            return bad(format!(
                "channel_dim {} not divisible by head_count {}",
                self.channel_dim, self.head_count
            ));
        }
        if self.class_count < 2 {
            return bad("class_count must be at least 2".into());
        }
        if self.mlp_hidden_dim == 0 {
            return bad("mlp_hidden_dim must be positive".into());
        }
        if self.variant == ArchVariant::A && self.cls_token {
            return bad("variant A has no cls token".into());
        }
        if self.pos_mode == PosMode::FixedSinusoidal && self.channel_dim % 2 != 0 {
            return bad("sinusoidal position table needs an even channel_dim".into());
        }
        if !(self.layernorm_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("layernorm_eps must be positive and init_std nonnegative".into());
        }
        Ok(())
    }
}
