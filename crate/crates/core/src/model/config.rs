//! Text format for model graphs.
//!
//! ```text
//! [meta]
//! task = detect
//! nc = 80
//! [scales]
//! n = 0.50, 0.25, 1024
//! [layers]
//! from=-1 repeats=1 module=Conv args=c=64,k=3,s=2
//! ```

use std::collections::BTreeMap;
use std::fmt;

use super::{ModelError, Result};

pub const VARIANTS: [&str; 5] = ["n", "s", "m", "l", "x"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Detect,
    Classify,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detect => "detect",
            Task::Classify => "classify",
        })
    }
}

/// Per-variant multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scale {
    pub depth: f64,
    pub width: f64,
    pub max_channels: usize,
}

/// Module with its arguments, before scaling. Channel counts are nominal.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleDecl {
    Conv {
        c: usize,
        k: usize,
        s: usize,
        g: usize,
    },
    C2f {
        c: usize,
        shortcut: bool,
        e: f64,
    },
    C3k2 {
        c: usize,
        c3k: bool,
        e: f64,
        shortcut: bool,
    },
    Sppf {
        c: usize,
        k: usize,
    },
    /// `c` defaults to the input width and must equal it when given.
    C2psa {
        c: Option<usize>,
        e: f64,
    },
    Upsample,
    Concat,
    Detect {
        dw: bool,
    },
    Classify {
        hidden: usize,
    },
}

impl ModuleDecl {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleDecl::Conv { .. } => "Conv",
            ModuleDecl::C2f { .. } => "C2f",
            ModuleDecl::C3k2 { .. } => "C3k2",
            ModuleDecl::Sppf { .. } => "SPPF",
            ModuleDecl::C2psa { .. } => "C2PSA",
            ModuleDecl::Upsample => "Upsample",
            ModuleDecl::Concat => "Concat",
            ModuleDecl::Detect { .. } => "Detect",
            ModuleDecl::Classify { .. } => "Classify",
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ModuleDecl::Detect { .. } | ModuleDecl::Classify { .. })
    }

    fn repeatable(&self) -> bool {
        matches!(
            self,
            ModuleDecl::C2f { .. } | ModuleDecl::C3k2 { .. } | ModuleDecl::C2psa { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDecl {
    pub index: usize,
    /// 1-based line in the source text.
    pub line: usize,
    /// `from` as written, e.g. `-1,6`.
    pub from_text: String,
    /// Resolved absolute source indices.
    pub sources: Vec<usize>,
    pub repeats: usize,
    pub module: ModuleDecl,
    /// `args` as written.
    pub args_text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub task: Task,
    pub num_classes: usize,
    pub scales: BTreeMap<String, Scale>,
    /// Variants where every C3k2 uses C3k inner units regardless of its flag.
    pub c3k_variants: Vec<String>,
    pub layers: Vec<LayerDecl>,
}

impl ModelSpec {
    pub fn head(&self) -> &LayerDecl {
        self.layers.last().expect("validated spec has a head")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Meta,
    Scales,
    Layers,
}

fn syntax(line: usize, message: impl Into<String>) -> ModelError {
    ModelError::Syntax {
        line,
        message: message.into(),
    }
}

pub fn parse_config(text: &str) -> Result<ModelSpec> {
    let mut section = Section::None;
    let mut task = None;
    let mut num_classes = None;
    let mut c3k_variants = Vec::new();
    let mut scales = BTreeMap::new();
    let mut layers: Vec<LayerDecl> = Vec::new();
    let mut head_line: Option<usize> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| syntax(line, "unterminated section header"))?;
            section = match name.trim() {
                "meta" => Section::Meta,
                "scales" => Section::Scales,
                "layers" => Section::Layers,
                other => return Err(syntax(line, format!("unknown section [{other}]"))),
            };
            continue;
        }
        match section {
            Section::None => return Err(syntax(line, "content before the first section")),
            Section::Meta => {
                let (key, value) = key_value(content, line)?;
                match key {
                    "task" => {
                        task = Some(match value {
                            "detect" => Task::Detect,
                            "classify" => Task::Classify,
                            _ => return Err(syntax(line, format!("unknown task {value:?}"))),
                        })
                    }
                    "nc" => num_classes = Some(parse_positive(value, "nc", line)?),
                    "c3k_variants" => {
                        c3k_variants = value
                            .split(',')
                            .map(str::trim)
                            .filter(|v| !v.is_empty())
                            .map(|v| check_variant(v, line).map(str::to_string))
                            .collect::<Result<_>>()?
                    }
                    _ => return Err(syntax(line, format!("unknown meta key {key:?}"))),
                }
            }
            Section::Scales => {
                let (key, value) = key_value(content, line)?;
                check_variant(key, line)?;
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                let [depth, width, max] = parts[..] else {
                    return Err(syntax(line, "scale needs depth, width, max_channels"));
                };
                let depth = parse_multiplier(depth, line)?;
                let width = parse_multiplier(width, line)?;
                let max_channels = parse_positive(max, "max_channels", line)?;
                let scale = Scale {
                    depth,
                    width,
                    max_channels,
                };
                if scales.insert(key.to_string(), scale).is_some() {
                    return Err(syntax(line, format!("duplicate scale {key:?}")));
                }
            }
            Section::Layers => {
                let decl = parse_layer(content, line, layers.len())?;
                if decl.module.is_head() {
                    if let Some(first) = head_line {
                        return Err(ModelError::DuplicateHead { line, first });
                    }
                    head_line = Some(line);
                } else if let Some(head) = head_line {
                    return Err(syntax(line, format!("layer after the head at line {head}")));
                }
                layers.push(decl);
            }
        }
    }

    let task = task.ok_or(ModelError::MissingTask)?;
    let num_classes = num_classes.unwrap_or(match task {
        Task::Detect => 80,
        Task::Classify => 1000,
    });
    let head = layers
        .last()
        .filter(|l| l.module.is_head())
        .ok_or(ModelError::MissingHead)?;
    let head_task = match head.module {
        ModuleDecl::Detect { .. } => Task::Detect,
        _ => Task::Classify,
    };
    if head_task != task {
        return Err(syntax(
            head.line,
            format!("{} head in a {task} config", head.module.name()),
        ));
    }
    if scales.is_empty() {
        scales.insert(
            "n".to_string(),
            Scale {
                depth: 1.0,
                width: 1.0,
                max_channels: usize::MAX,
            },
        );
    }
    Ok(ModelSpec {
        task,
        num_classes,
        scales,
        c3k_variants,
        layers,
    })
}

fn check_variant(v: &str, line: usize) -> Result<&str> {
    if VARIANTS.contains(&v) {
        Ok(v)
    } else {
        Err(ModelError::UnknownVariant {
            variant: v.to_string(),
            line: Some(line),
        })
    }
}

fn key_value(content: &str, line: usize) -> Result<(&str, &str)> {
    let (k, v) = content
        .split_once('=')
        .ok_or_else(|| syntax(line, format!("expected key = value, got {content:?}")))?;
    Ok((k.trim(), v.trim()))
}

fn parse_positive(v: &str, what: &str, line: usize) -> Result<usize> {
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(syntax(line, format!("{what} must be a positive integer, got {v:?}"))),
    }
}

fn parse_multiplier(v: &str, line: usize) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() && x > 0.0 => Ok(x),
        _ => Err(syntax(line, format!("multiplier must be positive, got {v:?}"))),
    }
}

fn parse_layer(content: &str, line: usize, index: usize) -> Result<LayerDecl> {
    let mut from_text = None;
    let mut repeats = 1;
    let mut module = None;
    let mut args_text = String::new();
    for token in content.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| syntax(line, format!("expected key=value, got {token:?}")))?;
        match key {
            "from" => from_text = Some(value.to_string()),
            "repeats" => repeats = parse_positive(value, "repeats", line)?,
            "module" => module = Some(value.to_string()),
            "args" => args_text = value.to_string(),
            _ => return Err(syntax(line, format!("unknown layer field {key:?}"))),
        }
    }
    let from_text = from_text.ok_or_else(|| syntax(line, "missing from="))?;
    let module_name = module.ok_or_else(|| syntax(line, "missing module="))?;

    // The first layer reads the input image and has no layer sources.
    let mut sources = Vec::new();
    let parts: Vec<&str> = if index == 0 {
        if from_text.trim() != "-1" {
            return Err(ModelError::DanglingReference {
                line,
                from: from_text.trim().parse().unwrap_or(0),
            });
        }
        Vec::new()
    } else {
        from_text.split(',').collect()
    };
    for part in parts {
        let rel: i64 = part
            .trim()
            .parse()
            .map_err(|_| syntax(line, format!("bad source {part:?}")))?;
        let abs = if rel < 0 { index as i64 + rel } else { rel };
        if abs < 0 {
            return Err(ModelError::DanglingReference { line, from: rel });
        }
        if abs as usize >= index {
            return Err(ModelError::ForwardReference { line, from: rel });
        }
        sources.push(abs as usize);
    }

    let args = Args::parse(&args_text, line)?;
    let module = match module_name.as_str() {
        "Conv" => ModuleDecl::Conv {
            c: args.required_usize("c")?,
            k: args.usize_or("k", 1)?,
            s: args.usize_or("s", 1)?,
            g: args.usize_or("g", 1)?,
        },
        "C2f" => ModuleDecl::C2f {
            c: args.required_usize("c")?,
            shortcut: args.bool_or("shortcut", false)?,
            e: args.f64_or("e", 0.5)?,
        },
        "C3k2" => ModuleDecl::C3k2 {
            c: args.required_usize("c")?,
            c3k: args.bool_or("c3k", false)?,
            e: args.f64_or("e", 0.5)?,
            shortcut: args.bool_or("shortcut", true)?,
        },
        "SPPF" => ModuleDecl::Sppf {
            c: args.required_usize("c")?,
            k: args.usize_or("k", 5)?,
        },
        "C2PSA" => ModuleDecl::C2psa {
            c: args.optional_usize("c")?,
            e: args.f64_or("e", 0.5)?,
        },
        "Upsample" => {
            if args.usize_or("scale", 2)? != 2 {
                return Err(syntax(line, "only scale=2 upsampling is supported"));
            }
            ModuleDecl::Upsample
        }
        "Concat" => ModuleDecl::Concat,
        "Detect" => ModuleDecl::Detect {
            dw: args.bool_or("dw", false)?,
        },
        "Classify" => ModuleDecl::Classify {
            hidden: args.usize_or("hidden", 1280)?,
        },
        other => {
            return Err(ModelError::UnknownModule {
                line,
                name: other.to_string(),
            })
        }
    };
    args.finish()?;

    let arity_ok = index == 0 && !matches!(module, ModuleDecl::Concat) && !module.is_head()
        || match module {
            ModuleDecl::Concat => sources.len() >= 2,
            ModuleDecl::Detect { .. } => sources.len() == 3,
            _ => sources.len() == 1,
        };
    if !arity_ok {
        return Err(syntax(
            line,
            format!("{} cannot take {} sources", module.name(), sources.len()),
        ));
    }
    if repeats != 1 && !module.repeatable() {
        return Err(syntax(line, format!("{} does not repeat", module.name())));
    }
    Ok(LayerDecl {
        index,
        line,
        from_text,
        sources,
        repeats,
        module,
        args_text,
    })
}

/// `k=v` pairs of one layer; every key must be consumed.
struct Args {
    line: usize,
    values: BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
}

impl Args {
    fn parse(text: &str, line: usize) -> Result<Self> {
        let mut values = BTreeMap::new();
        for pair in text.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| syntax(line, format!("bad argument {pair:?}")))?;
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(syntax(line, format!("duplicate argument {k:?}")));
            }
        }
        Ok(Self {
            line,
            values,
            used: Default::default(),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().push(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    fn optional_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key).map(|v| parse_positive(v, key, self.line)).transpose()
    }

    fn required_usize(&self, key: &str) -> Result<usize> {
        self.optional_usize(key)?
            .ok_or_else(|| syntax(self.line, format!("missing argument {key:?}")))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.optional_usize(key)?.unwrap_or(default))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key)
            .map(|v| parse_multiplier(v, self.line))
            .transpose()
            .map(|v| v.unwrap_or(default))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "True") => Ok(true),
            Some("false" | "False") => Ok(false),
            Some(v) => Err(syntax(self.line, format!("{key} must be true or false, got {v:?}"))),
        }
    }

    fn finish(self) -> Result<()> {
        let used = self.used.into_inner();
        match self.values.keys().find(|k| !used.contains(k)) {
            Some(k) => Err(syntax(self.line, format!("unknown argument {k:?}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        "[meta]\ntask=classify\nnc=4\n[layers]\nfrom=-1 module=Conv args=c=16,k=3,s=2\nfrom=-1 module=Classify\n";

    #[test]
    fn minimal_config() {
        let spec = parse_config(MINIMAL).unwrap();
        assert_eq!(spec.layers.len(), 2);
        assert_eq!(spec.task, Task::Classify);
        assert_eq!(spec.num_classes, 4);
        assert_eq!(
            spec.layers[0].module,
            ModuleDecl::Conv {
                c: 16,
                k: 3,
                s: 2,
                g: 1
            }
        );
        assert_eq!(spec.layers[1].sources, vec![0]);
    }

    #[test]
    fn forward_reference_reports_line() {
        let text = "[meta]\ntask=classify\n[layers]\nfrom=-1 module=Conv args=c=8\nfrom=-1 module=Conv args=c=8\nfrom=-1 module=Conv args=c=8\nfrom=7 module=Conv args=c=8\nfrom=-1 module=Classify\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.to_string(), "forward reference at line 7 (from=7)");
    }

    #[test]
    fn dangling_reference() {
        let text = "[meta]\ntask=classify\n[layers]\nfrom=-1 module=Conv args=c=8\nfrom=-3 module=Classify\n";
        assert!(matches!(
            parse_config(text),
            Err(ModelError::DanglingReference { line: 5, from: -3 })
        ));
    }

    #[test]
    fn duplicate_head() {
        let text = format!("{MINIMAL}from=-1 module=Classify\n");
        assert!(matches!(
            parse_config(&text),
            Err(ModelError::DuplicateHead { line: 7, first: 6 })
        ));
    }

    #[test]
    fn unknown_names() {
        let bad_variant = MINIMAL.replace("[layers]", "[scales]\nq = 1, 1, 64\n[layers]");
        assert!(matches!(
            parse_config(&bad_variant),
            Err(ModelError::UnknownVariant { .. })
        ));
        let bad_module = MINIMAL.replace("module=Conv", "module=Conv3");
        assert!(matches!(
            parse_config(&bad_module),
            Err(ModelError::UnknownModule { line: 5, .. })
        ));
        let bad_arg = MINIMAL.replace("s=2", "stride=2");
        assert!(matches!(
            parse_config(&bad_arg),
            Err(ModelError::Syntax { line: 5, .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        for (text, line) in [
            ("[meta]\ntask=detect\n[bogus]\n", 3),
            ("[meta]\ntask detect\n", 2),
            ("[meta]\ntask=classify\n[scales]\nn = 0.5, 0.25\n", 4),
            (
                "[meta]\ntask=classify\n[layers]\nfrom=-1 repeats=0 module=Conv args=c=8\n",
                4,
            ),
            (
                "[meta]\ntask=classify\n[layers]\nfrom=-1 repeats=2 module=Conv args=c=8\n",
                4,
            ),
        ] {
            match parse_config(text) {
                Err(ModelError::Syntax { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn head_arity_and_task_checked() {
        let text = "[meta]\ntask=detect\n[layers]\nfrom=-1 module=Conv args=c=8\nfrom=0,0 module=Detect\n";
        assert!(parse_config(text).is_err());
        let text = "[meta]\ntask=detect\n[layers]\nfrom=-1 module=Conv args=c=8\nfrom=-1 module=Classify\n";
        assert!(parse_config(text).is_err());
        let text = "[meta]\ntask=detect\n[layers]\nfrom=-1 module=Conv args=c=8\n";
        assert!(matches!(parse_config(text), Err(ModelError::MissingHead)));
    }

    #[test]
    fn reordered_lines_are_rejected() {
        // Swapping two layers keeps the relative sources but breaks an absolute one.
        let text = "[meta]\ntask=classify\n[layers]\nfrom=-1 module=Conv args=c=8\nfrom=-1 module=Conv args=c=16\nfrom=1 module=Conv args=c=8\nfrom=-1 module=Classify\n";
        assert!(parse_config(text).is_ok());
        let swapped = "[meta]\ntask=classify\n[layers]\nfrom=-1 module=Conv args=c=8\nfrom=2 module=Conv args=c=8\nfrom=-1 module=Conv args=c=16\nfrom=-1 module=Classify\n";
        assert!(matches!(
            parse_config(swapped),
            Err(ModelError::ForwardReference { line: 5, .. })
        ));
    }

    #[test]
    fn comments_and_defaults() {
        let text = "# top\n[meta]\ntask = detect # inline\n[layers]\nfrom=-1 module=Conv args=c=8 # stem\nfrom=0 module=Conv args=c=8\nfrom=1 module=Conv args=c=8\nfrom=0,1,2 module=Detect\n";
        let spec = parse_config(text).unwrap();
        assert_eq!(spec.num_classes, 80);
        assert_eq!(spec.scales.len(), 1);
        assert_eq!(spec.head().sources, vec![0, 1, 2]);
    }
}
