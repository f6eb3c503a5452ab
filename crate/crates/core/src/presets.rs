//! Named training configurations for the three benchmark datasets.

use serde::{Deserialize, Serialize};

use crate::correlation::PairLossConfig;
use crate::error::{Error, Result};
use crate::seg_head::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropType {
    FiveCrop,
    NoCrop,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    VitSmall,
    VitBase,
}

impl Backbone {
    pub fn feature_dim(self) -> usize {
        match self {
            Backbone::VitSmall => 384,
            Backbone::VitBase => 768,
        }
    }
}

/// Settings shared by every dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedSettings {
    pub loader_crop: CropType,
    pub extra_clusters: usize,
    pub optimizer: String,
    pub probe_lr: f64,
    pub head_lr: f64,
    pub dropout: f64,
    pub feature_samples: usize,
    pub negative_samples: usize,
}

pub fn shared_settings() -> SharedSettings {
    SharedSettings {
        loader_crop: CropType::Center,
        extra_clusters: 0,
        optimizer: "adam".into(),
        probe_lr: 0.005,
        head_lr: 0.0005,
        dropout: 0.1,
        feature_samples: 11,
        negative_samples: 5,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub n_classes: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub crop: CropType,
    pub backbone: Backbone,
    /// `None` where the published configuration leaves the flag unset.
    pub zero_clamp: Option<bool>,
    pub pointwise: bool,
    pub d_stego: usize,
    pub lambda_rand: f64,
    pub lambda_knn: f64,
    pub lambda_self: f64,
    pub b_rand: f64,
    pub b_knn: f64,
    pub b_self: f64,
}

pub const PRESET_NAMES: [&str; 3] = ["cocostuff", "cityscapes", "potsdam"];

pub fn cocostuff() -> Preset {
    Preset {
        name: "cocostuff".into(),
        n_classes: 27,
        train_steps: 7000,
        batch_size: 32,
        crop: CropType::FiveCrop,
        backbone: Backbone::VitBase,
        zero_clamp: None,
        pointwise: true,
        d_stego: 90,
        lambda_rand: 0.15,
        lambda_knn: 1.00,
        lambda_self: 0.10,
        b_rand: 1.00,
        b_knn: 0.20,
        b_self: 0.12,
    }
}

pub fn cityscapes() -> Preset {
    Preset {
        name: "cityscapes".into(),
        n_classes: 27,
        train_steps: 7000,
        batch_size: 32,
        crop: CropType::FiveCrop,
        backbone: Backbone::VitBase,
        zero_clamp: None,
        pointwise: false,
        d_stego: 100,
        lambda_rand: 0.91,
        lambda_knn: 0.58,
        lambda_self: 1.00,
        b_rand: 0.31,
        b_knn: 0.18,
        b_self: 0.46,
    }
}

pub fn potsdam() -> Preset {
    Preset {
        name: "potsdam".into(),
        n_classes: 3,
        train_steps: 5000,
        batch_size: 16,
        crop: CropType::NoCrop,
        backbone: Backbone::VitSmall,
        zero_clamp: Some(true),
        pointwise: true,
        d_stego: 70,
        lambda_rand: 0.63,
        lambda_knn: 0.25,
        lambda_self: 0.67,
        b_rand: 0.76,
        b_knn: 0.02,
        b_self: 0.08,
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    match name.to_ascii_lowercase().as_str() {
        "cocostuff" => Ok(cocostuff()),
        "cityscapes" => Ok(cityscapes()),
        "potsdam" => Ok(potsdam()),
        other => Err(Error::Contract(format!(
            "unknown preset {other:?}, expected one of {PRESET_NAMES:?}"
        ))),
    }
}

impl Preset {
    /// Loss settings; an unset zero-clamp flag means no clamping.
    pub fn pair_config(&self) -> PairLossConfig {
        let shared = shared_settings();
        PairLossConfig {
            b_self: self.b_self,
            b_knn: self.b_knn,
            b_rand: self.b_rand,
            lambda_self: self.lambda_self,
            lambda_knn: self.lambda_knn,
            lambda_rand: self.lambda_rand,
            zero_clamp: self.zero_clamp.unwrap_or(false),
            pointwise_center: self.pointwise,
            feature_samples: shared.feature_samples,
            negative_samples: shared.negative_samples,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let shared = shared_settings();
        TrainConfig {
            d_stego: self.d_stego,
            steps: self.train_steps,
            batch_size: self.batch_size,
            head_lr: shared.head_lr,
            dropout: shared.dropout,
            pair: self.pair_config(),
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_case_insensitive() {
        assert_eq!(preset("Potsdam").unwrap(), potsdam());
        assert!(preset("ade20k").is_err());
    }

    #[test]
    fn train_config_carries_preset_values() {
        let c = cityscapes().train_config(3);
        assert_eq!(c.d_stego, 100);
        assert!(!c.pair.pointwise_center);
        assert!(!c.pair.zero_clamp);
        assert_eq!(c.seed, 3);
        c.validate().unwrap();
        assert!(potsdam().train_config(0).pair.zero_clamp);
    }

    #[test]
    fn backbone_dims() {
        assert_eq!(Backbone::VitSmall.feature_dim(), 384);
        assert_eq!(Backbone::VitBase.feature_dim(), 768);
    }
}
