use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockConfig, BranchSpec, GliConfig, MsraConfig};

/// Stride of the stem; every downsampling stage adds a factor of two.
pub const STEM_STRIDE: usize = 4;

/// Stem branches: k=3 and k=5, both stride 4.
pub const STEM_BRANCHES: [BranchSpec; 2] = [BranchSpec::new(3, 4, 1), BranchSpec::new(5, 4, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub split_ratio: f64,
    /// Enter the stage through a stride-2 MSRA.
    pub downsample: bool,
    pub use_mdmsa: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    /// (height, width)
    pub input_resolution: (usize, usize),
    pub stem_channels: usize,
    pub mlp_ratio: f64,
    pub local_kernel: usize,
}

fn stage(depth: usize, channels: usize, heads: usize, downsample: bool, use_mdmsa: bool) -> StageSpec {
    StageSpec {
        depth,
        channels,
        heads,
        split_ratio: 0.5,
        downsample,
        use_mdmsa,
    }
}

impl ModelSpec {
    /// Desk-scale default: depths (1,1,2,1), channels (16,32,64,128),
    /// heads (1,2,4,8), p = 0.5, MD-MSA in stages 3-4, 32x32 input.
    pub fn desk(num_classes: usize) -> Self {
        ModelSpec {
            stages: vec![
                stage(1, 16, 1, false, false),
                stage(1, 32, 2, true, false),
                stage(2, 64, 4, true, true),
                stage(1, 128, 8, true, true),
            ],
            num_classes,
            input_resolution: (32, 32),
            stem_channels: 16,
            mlp_ratio: 4.0,
            local_kernel: 3,
        }
    }

    /// Gradient-check scale: 16x16 input, well under 50k parameters. Only one
    /// downsample after the stem, so no stage collapses to a single cell
    /// (where channel normalization is degenerate).
    pub fn micro(num_classes: usize) -> Self {
        ModelSpec {
            stages: vec![
                stage(1, 8, 2, false, true),
                stage(1, 8, 2, true, true),
                stage(1, 16, 2, false, false),
                stage(1, 16, 4, false, false),
            ],
            num_classes,
            input_resolution: (16, 16),
            stem_channels: 8,
            mlp_ratio: 2.0,
            local_kernel: 3,
        }
    }

    /// Same stage recipe as [`Self::desk`] at 224x224.
    pub fn desk_224(num_classes: usize) -> Self {
        ModelSpec {
            input_resolution: (224, 224),
            ..Self::desk(num_classes)
        }
    }

    pub fn downsample_factor(&self) -> usize {
        STEM_STRIDE << self.stages.iter().filter(|s| s.downsample).count()
    }

    /// Every violated constraint, empty when the spec is buildable.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.stages.len() != 4 {
            errs.push(format!("expected 4 stages, got {}", self.stages.len()));
        }
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.stem_channels == 0 {
            errs.push("stem_channels must be positive".to_string());
        }
        let f = self.downsample_factor();
        let (h, w) = self.input_resolution;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            errs.push(format!(
                "input resolution {h}x{w} is not divisible by the total downsample factor {f}"
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            errs.push(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                errs.push(format!("stage {}: depth must be >= 1", i + 1));
            }
            if s.channels == 0 {
                errs.push(format!("stage {}: channels must be positive", i + 1));
            }
        }
        if errs.is_empty() {
            for cfg in self.block_configs().iter().flatten().take_while(|_| true) {
                for e in cfg.violations() {
                    if !errs.contains(&e) {
                        errs.push(e);
                    }
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::InvalidConfig(v)),
        }
    }

    pub fn stem_config(&self) -> MsraConfig {
        MsraConfig {
            channels: 3,
            out_channels: self.stem_channels,
            branches: STEM_BRANCHES.to_vec(),
            fusion_kernel: 1,
            depthwise: false,
        }
    }

    /// Per-stage block configurations. The first block of a stage adapts the
    /// incoming channel count and carries the stride-2 downsample if any.
    pub fn block_configs(&self) -> Vec<Vec<BlockConfig>> {
        let mut prev = self.stem_channels;
        self.stages
            .iter()
            .map(|s| {
                let blocks = (0..s.depth)
                    .map(|j| {
                        let (cin, stride) = if j == 0 {
                            (prev, if s.downsample { 2 } else { 1 })
                        } else {
                            (s.channels, 1)
                        };
                        BlockConfig {
                            msra: MsraConfig {
                                channels: cin,
                                out_channels: s.channels,
                                branches: vec![BranchSpec::new(3, stride, 1), BranchSpec::new(3, stride, 2)],
                                fusion_kernel: 1,
                                depthwise: cin == s.channels && stride == 1,
                            },
                            gli: GliConfig {
                                channels: s.channels,
                                split_ratio: s.split_ratio,
                                local_kernel: self.local_kernel,
                                heads: s.heads,
                                use_mdmsa: s.use_mdmsa,
                            },
                            mlp_ratio: self.mlp_ratio,
                        }
                    })
                    .collect();
                prev = s.channels;
                blocks
            })
            .collect()
    }

    /// Spatial extent after the stem and after each stage.
    pub fn stage_resolutions(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.input_resolution;
        h /= STEM_STRIDE;
        w /= STEM_STRIDE;
        self.stages
            .iter()
            .map(|s| {
                if s.downsample {
                    h /= 2;
                    w /= 2;
                }
                (h, w)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelSpec::desk(3).validate().unwrap();
        ModelSpec::micro(3).validate().unwrap();
        ModelSpec::desk_224(43).validate().unwrap();
    }

    #[test]
    fn pyramid_schedule() {
        let spec = ModelSpec::desk(3);
        assert_eq!(spec.downsample_factor(), 32);
        assert_eq!(spec.stage_resolutions(), vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
        let big = ModelSpec::desk_224(3);
        let res: Vec<_> = big.stage_resolutions().iter().map(|r| r.0).collect();
        assert_eq!(res, vec![224 / 4, 224 / 8, 224 / 16, 224 / 32]);
    }

    #[test]
    fn all_violations_are_listed() {
        let mut spec = ModelSpec::desk(1);
        spec.input_resolution = (30, 30);
        spec.stages[0].depth = 0;
        let v = spec.violations();
        assert!(v.iter().any(|e| e.contains("num_classes")));
        assert!(v.iter().any(|e| e.contains("divisible")));
        assert!(v.iter().any(|e| e.contains("depth")));
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut spec = ModelSpec::desk(3);
        spec.stages[1].heads = 3;
        assert!(spec.violations().iter().any(|e| e.contains("heads")));
    }
}
