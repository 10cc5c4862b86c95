use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use featroute::attribution::DEFAULT_DEPTH;
use featroute::format::model_paths;
use featroute::network::{lenet, Provenance};
use featroute::routeviz::{export_heatmap, export_route, RouteFormat};
use featroute::surgery::{plan_cross, recover_plan};
use featroute::train::history_csv;
use featroute::{
    assemble_cross, assemble_same, attribute_class, bridge, build_mask, disassemble, evaluate, evaluate_restricted,
    load_idx, load_model, save_model, stats, train, union_masks, AttributionMap, Dataset, Label, Model, RouteMask,
    SaliencyMode, SamplePolicy, SubModelPlan, Target, TrainConfig,
};

use crate::{RunConfig, UsageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Positive,
    Negative,
    Absolute,
}

impl From<Mode> for SaliencyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Positive => SaliencyMode::Positive,
            Mode::Negative => SaliencyMode::Negative,
            Mode::Absolute => SaliencyMode::Absolute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TargetArg {
    Probability,
    Logit,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Probability => Target::Probability,
            TargetArg::Logit => Target::Logit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Dot,
    Structured,
}

#[derive(Debug, Clone, Serialize, Deserialize, clap::Args)]
pub struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, Subcommand)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train a LeNet-style classifier from scratch.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Classes to train on (default: every label in the data).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<Label>>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        /// Cosine annealing period, in epochs.
        #[arg(long, default_value_t = 200)]
        t_max: usize,
        /// Output model path (NAME -> NAME.json + NAME.bin).
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class unit saliencies aggregated over confident images.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<Label>>,
        #[arg(long, default_value_t = 100)]
        max_images: usize,
        #[arg(long, default_value_t = 0.90)]
        min_conf: f64,
        #[arg(long, value_enum, default_value_t = Mode::Positive)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = TargetArg::Probability)]
        target: TargetArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold attributions into one route mask over the chosen classes.
    Mask {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        attr: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<Label>>,
        /// Keep units scoring at least this multiple of their layer mean.
        #[arg(long, default_value_t = 1.0)]
        multiplier: f64,
        /// Deepest thresholded layer counted from the output (default: all).
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a sub-model along a route mask.
    Disassemble {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Layers shallower than this (counted from the output, 0 = last) are kept whole.
        #[arg(long, default_value_t = DEFAULT_DEPTH)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine components; same-source components are merged, others stacked.
    Assemble {
        #[arg(long, num_args = 1.., required = true)]
        components: Vec<PathBuf>,
        /// Model the components were cut from (same-model assembly only).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training on the model's classes.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy on the images of the model's classes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Restrict data and arg-max to these classes.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<Label>>,
    },
    /// Parameter and MAC reduction of a derived model.
    Stats {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        derived: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route graph of one or more masks.
    RouteExport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        masks: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Dot)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-by-unit score matrix of one layer.
    Heatmap {
        #[arg(long)]
        attr: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<Label>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("no such file: {}", path.display())).into());
    }
    Ok(())
}

fn require_model(path: &Path) -> Result<()> {
    let (manifest, blob) = model_paths(path);
    require_file(&manifest)?;
    require_file(&blob)
}

fn model(path: &Path) -> Result<Model> {
    require_model(path)?;
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn dataset(d: &DataArgs) -> Result<Dataset> {
    require_file(&d.images)?;
    require_file(&d.labels)?;
    Ok(load_idx(&d.images, &d.labels)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `out` with its .json/.bin extension replaced by `suffix`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = match out.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => out.with_extension(""),
        _ => out.to_path_buf(),
    };
    let mut s = stem.into_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn save(m: &Model, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_model(m, out).with_context(|| format!("saving model {}", out.display()))
}

/// The data restricted to the model's classes that actually occur in it.
fn model_subset(m: &Model, data: &Dataset) -> Result<Dataset> {
    let present: Vec<Label> = m
        .class_map()
        .iter()
        .copied()
        .filter(|c| data.label_universe().contains(c))
        .collect();
    if present.is_empty() {
        bail!("the data holds no images of the model's classes {:?}", m.class_map());
    }
    Ok(data.subset(&present)?)
}

fn check_classes(requested: &[Label], available: &[Label], what: &str) -> Result<()> {
    if let Some(c) = requested.iter().find(|c| !available.contains(c)) {
        return Err(UsageError(format!("class {c} is not among the {what} {available:?}")).into());
    }
    Ok(())
}

pub fn execute(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed;
    match &cfg.command {
        Command::Train {
            data,
            classes,
            epochs,
            lr,
            momentum,
            batch_size,
            t_max,
            out,
        } => {
            let all = dataset(data)?;
            let classes = classes.clone().unwrap_or_else(|| all.label_universe().to_vec());
            check_classes(&classes, all.label_universe(), "data's labels")?;
            let data = all.subset(&classes)?;
            let shape = data.image_shape().context("empty dataset")?;
            let input = [shape[0], shape[1], shape[2]];
            let tc = TrainConfig {
                lr: *lr,
                momentum: *momentum,
                epochs: *epochs,
                batch_size: *batch_size,
                cosine_t_max: *t_max,
                seed,
            };
            let name = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
            let init = Model::build(lenet(input, classes.len()), input, classes, seed)?.with_name(name);
            let (trained, history) = train(&init, &data, &tc)?;
            save(&trained, out)?;
            write_text(&sidecar(out, "history.csv"), &history_csv(&history))?;
            for h in &history {
                eprintln!("epoch {} loss {:.4} accuracy {:.4}", h.epoch, h.loss, h.accuracy);
            }
            write_json(&sidecar(out, "run.json"), cfg)
        }
        Command::Attribute {
            model: mp,
            data,
            classes,
            max_images,
            min_conf,
            mode,
            target,
            out,
        } => {
            let m = model(mp)?;
            let data = dataset(data)?;
            let classes = classes.clone().unwrap_or_else(|| m.class_map().to_vec());
            check_classes(&classes, m.class_map(), "model's classes")?;
            let policy = SamplePolicy {
                max_images: *max_images,
                min_confidence: *min_conf,
                require_correct: true,
            };
            let maps = classes
                .iter()
                .map(|&c| attribute_class(&m, &data, c, &policy, (*mode).into(), (*target).into()))
                .collect::<featroute::Result<Vec<AttributionMap>>>()?;
            for a in &maps {
                if let Some(note) = &a.policy_deviation {
                    eprintln!("class {}: {note}", a.class);
                }
            }
            write_json(out, &maps)?;
            write_json(&sidecar(out, "run.json"), cfg)
        }
        Command::Mask {
            model: mp,
            attr,
            classes,
            multiplier,
            depth,
            out,
        } => {
            let m = model(mp)?;
            let maps: Vec<AttributionMap> = read_json(attr)?;
            let have: Vec<Label> = maps.iter().map(|a| a.class).collect();
            let classes = classes.clone().unwrap_or_else(|| have.clone());
            check_classes(&classes, &have, "attributed classes")?;
            let depth = depth.unwrap_or(m.param_layer_count() - 1);
            let masks = maps
                .iter()
                .filter(|a| classes.contains(&a.class))
                .map(|a| build_mask(a, *multiplier, &m, depth))
                .collect::<featroute::Result<Vec<RouteMask>>>()?;
            let mask = union_masks(&masks)?;
            if !mask.fallback_layers.is_empty() {
                eprintln!("layers {:?} kept only their best unit", mask.fallback_layers);
            }
            write_json(out, &mask)?;
            write_json(&sidecar(out, "run.json"), cfg)
        }
        Command::Disassemble {
            model: mp,
            mask,
            depth,
            out,
        } => {
            let m = model(mp)?;
            let mask: RouteMask = read_json(mask)?;
            let plan = bridge(&mask.relax_above(*depth), &m)?;
            let sub = disassemble(&m, &plan)?;
            save(&sub, out)?;
            write_json(&sidecar(out, "plan.json"), &plan)?;
            eprintln!(
                "kept {} of {} parameters for classes {:?}",
                sub.param_count(),
                m.param_count(),
                sub.class_map()
            );
            write_json(&sidecar(out, "run.json"), cfg)
        }
        Command::Assemble {
            components,
            source,
            out,
        } => {
            let parts = components.iter().map(|p| model(p)).collect::<Result<Vec<_>>>()?;
            let sources: Vec<Option<&String>> = parts
                .iter()
                .map(|p| match &p.meta.provenance {
                    Provenance::Disassembled { source, .. } => Some(source),
                    _ => None,
                })
                .collect();
            let same = sources.iter().all(|s| s.is_some() && *s == sources[0]);
            let assembled = if same {
                let Some(src) = source else {
                    return Err(UsageError("components share one source model; pass it with --source".into()).into());
                };
                let src = model(src)?;
                let plans = parts
                    .iter()
                    .map(|p| recover_plan(p, &src))
                    .collect::<featroute::Result<Vec<SubModelPlan>>>()?;
                assemble_same(&plans, &src)?
            } else {
                write_json(&sidecar(out, "assembly.json"), &plan_cross(&parts)?)?;
                assemble_cross(&parts)?
            };
            save(&assembled, out)?;
            eprintln!(
                "{} assembly with classes {:?}",
                if same { "same-model" } else { "cross-model" },
                assembled.class_map()
            );
            write_json(&sidecar(out, "run.json"), cfg)
        }
        Command::Finetune {
            model: mp,
            data,
            epochs,
            lr,
            out,
        } => {
            let m = model(mp)?;
            let data = model_subset(&m, &dataset(data)?)?;
            let tc = TrainConfig {
                lr: *lr,
                epochs: *epochs,
                seed,
                ..TrainConfig::default()
            };
            let (tuned, history) = train(&m, &data, &tc)?;
            save(&tuned, out)?;
            write_text(&sidecar(out, "history.csv"), &history_csv(&history))?;
            write_json(&sidecar(out, "run.json"), cfg)
        }
        Command::Eval {
            model: mp,
            data,
            classes,
        } => {
            let m = model(mp)?;
            let all = dataset(data)?;
            let acc = match classes {
                Some(cs) => {
                    check_classes(cs, m.class_map(), "model's classes")?;
                    evaluate_restricted(&m, &all.subset(cs)?, cs)?
                }
                None => evaluate(&m, &model_subset(&m, &all)?)?,
            };
            println!("accuracy={acc:.4}");
            Ok(())
        }
        Command::Stats {
            original,
            derived,
            out,
        } => {
            let (o, d) = (model(original)?, model(derived)?);
            let s = stats(&o, &d, o.input_shape())?;
            let mut text = serde_json::to_string_pretty(&s)?;
            text.push('\n');
            emit(out.as_deref(), &text)?;
            eprintln!(
                "param reduction {:.2}%, MAC reduction {:.2}%",
                s.param_ratio, s.flops_ratio
            );
            Ok(())
        }
        Command::RouteExport {
            model: mp,
            masks,
            format,
            out,
        } => {
            let m = model(mp)?;
            let masks = masks.iter().map(|p| read_json(p)).collect::<Result<Vec<RouteMask>>>()?;
            let format = match format {
                Format::Dot => RouteFormat::Dot,
                Format::Structured => RouteFormat::Structured,
            };
            emit(out.as_deref(), &export_route(&masks, &m, format)?)
        }
        Command::Heatmap {
            attr,
            layer,
            classes,
            out,
        } => {
            let maps: Vec<AttributionMap> = read_json(attr)?;
            let maps: Vec<AttributionMap> = match classes {
                Some(cs) => {
                    let have: Vec<Label> = maps.iter().map(|a| a.class).collect();
                    check_classes(cs, &have, "attributed classes")?;
                    cs.iter()
                        .map(|c| maps.iter().find(|a| a.class == *c).cloned().expect("checked"))
                        .collect()
                }
                None => maps,
            };
            emit(out.as_deref(), &export_heatmap(&maps, *layer)?)
        }
    }
}
