use super::config::{LayerDecl, ModelSpec, ModuleDecl, Task};
use super::{ModelError, Result};

/// Module with concrete channel and repeat counts.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaledModule {
    Conv {
        c_out: usize,
        k: usize,
        s: usize,
        g: usize,
    },
    C2f {
        c_out: usize,
        n: usize,
        shortcut: bool,
        e: f64,
    },
    C3k2 {
        c_out: usize,
        n: usize,
        c3k: bool,
        e: f64,
        shortcut: bool,
    },
    Sppf {
        c_out: usize,
        k: usize,
    },
    C2psa {
        c: usize,
        n: usize,
        e: f64,
    },
    Upsample,
    Concat,
    Detect {
        nc: usize,
        dw: bool,
    },
    Classify {
        hidden: usize,
        nc: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledLayer {
    pub decl: LayerDecl,
    pub module: ScaledModule,
    /// Channel count of each source, in `decl.sources` order.
    pub c_in: Vec<usize>,
    /// Channels of the output (per map, for detect heads).
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledSpec {
    pub variant: String,
    pub task: Task,
    pub num_classes: usize,
    pub layers: Vec<ScaledLayer>,
}

/// Input image channels.
pub const INPUT_CHANNELS: usize = 3;

/// `x` rounded half-up to a multiple of 8, never below 8.
pub fn round_channels(x: f64) -> usize {
    (((x / 8.0) + 0.5).floor() as usize * 8).max(8)
}

pub fn scale_channels(c: usize, width: f64, max_channels: usize) -> usize {
    round_channels(c.min(max_channels) as f64 * width)
}

pub fn scale_repeats(r: usize, depth: f64) -> usize {
    ((r as f64 * depth + 0.5).floor() as usize).max(1)
}

pub fn apply_scale(spec: &ModelSpec, variant: &str) -> Result<ScaledSpec> {
    let scale = spec.scales.get(variant).ok_or_else(|| ModelError::UnknownVariant {
        variant: variant.to_string(),
        line: None,
    })?;
    let force_c3k = spec.c3k_variants.iter().any(|v| v == variant);
    let ch = |c: usize| scale_channels(c, scale.width, scale.max_channels);
    let reps = |decl: &LayerDecl| scale_repeats(decl.repeats, scale.depth);

    let mut out_channels: Vec<usize> = Vec::with_capacity(spec.layers.len());
    let mut layers = Vec::with_capacity(spec.layers.len());
    for decl in &spec.layers {
        let c_in: Vec<usize> = if decl.index == 0 {
            vec![INPUT_CHANNELS]
        } else {
            decl.sources.iter().map(|&s| out_channels[s]).collect()
        };
        let c1 = c_in[0];
        let invalid = |message: String| ModelError::InvalidLayer {
            layer: decl.index,
            message,
        };
        let (module, c_out) = match decl.module {
            ModuleDecl::Conv { c, k, s, g } => {
                let c_out = ch(c);
                if !c1.is_multiple_of(g) || c_out % g != 0 {
                    return Err(invalid(format!("groups {g} do not divide {c1} -> {c_out}")));
                }
                (ScaledModule::Conv { c_out, k, s, g }, c_out)
            }
            ModuleDecl::C2f { c, shortcut, e } => {
                let c_out = ch(c);
                (
                    ScaledModule::C2f {
                        c_out,
                        n: reps(decl),
                        shortcut,
                        e,
                    },
                    c_out,
                )
            }
            ModuleDecl::C3k2 { c, c3k, e, shortcut } => {
                let c_out = ch(c);
                let module = ScaledModule::C3k2 {
                    c_out,
                    n: reps(decl),
                    c3k: c3k || force_c3k,
                    e,
                    shortcut,
                };
                (module, c_out)
            }
            ModuleDecl::Sppf { c, k } => {
                let c_out = ch(c);
                (ScaledModule::Sppf { c_out, k }, c_out)
            }
            ModuleDecl::C2psa { c, e } => {
                if let Some(c) = c {
                    if ch(c) != c1 {
                        return Err(invalid(format!("C2PSA width {} differs from its input {c1}", ch(c))));
                    }
                }
                (
                    ScaledModule::C2psa {
                        c: c1,
                        n: reps(decl),
                        e,
                    },
                    c1,
                )
            }
            ModuleDecl::Upsample => (ScaledModule::Upsample, c1),
            ModuleDecl::Concat => (ScaledModule::Concat, c_in.iter().sum()),
            ModuleDecl::Detect { dw } => (
                ScaledModule::Detect {
                    nc: spec.num_classes,
                    dw,
                },
                5 + spec.num_classes,
            ),
            ModuleDecl::Classify { hidden } => (
                ScaledModule::Classify {
                    hidden,
                    nc: spec.num_classes,
                },
                spec.num_classes,
            ),
        };
        out_channels.push(c_out);
        layers.push(ScaledLayer {
            decl: decl.clone(),
            module,
            c_in,
            c_out,
        });
    }
    Ok(ScaledSpec {
        variant: variant.to_string(),
        task: spec.task,
        num_classes: spec.num_classes,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stated_rules() {
        assert_eq!(scale_channels(64, 0.25, 1024), 16);
        assert_eq!(scale_channels(1024, 1.5, 512), 768);
        assert_eq!(scale_channels(8, 0.25, 1024), 8);
        assert_eq!(round_channels(20.0), 24);
        assert_eq!(round_channels(19.9), 16);
        assert_eq!(scale_repeats(3, 0.5), 2);
        assert_eq!(scale_repeats(1, 0.33), 1);
        assert_eq!(scale_repeats(6, 0.67), 4);
    }
}
