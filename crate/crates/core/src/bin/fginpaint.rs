use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fginpaint::config::{parse_override_args, RunConfig};
use fginpaint::masks::{
    foreground_from_labels, generate_mask_set, load_labels, AttributeMap, StrokeConfig, DEFAULT_FOREGROUND_LABELS,
};
use fginpaint::metrics::{backend_by_name, evaluate_pairs, write_reports};

#[derive(Parser)]
#[command(name = "fginpaint", version, about = "Foreground-guided facial inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/critic pair. Any config key may follow as `--key value`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Inpaint one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        hole: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the raw prediction instead of blending it into the known pixels.
        #[arg(long)]
        no_composite: bool,
    },
    /// Score predictions against ground truth, globally and on the foreground.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        fg: Option<PathBuf>,
        #[arg(long, default_value = "fixed-conv")]
        backend: String,
        /// Directory for the report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate seeded free-form hole masks.
    GenMasks {
        #[arg(long)]
        n: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn face-parsing attribute maps into foreground masks.
    MakeForeground {
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label names counted as foreground.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FOREGROUND_LABELS.map(String::from))]
        names: Vec<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, overrides } => {
            let kv = parse_override_args(&overrides)?;
            let cfg = RunConfig::resolve(config.as_deref(), &kv)?;
            let last = fginpaint::train::train(&cfg)?;
            println!("{}", last.display());
        }
        Command::Infer {
            ckpt,
            image,
            hole,
            out,
            no_composite,
        } => {
            fginpaint::train::infer(&ckpt, &image, &hole, &out, !no_composite)?;
            println!("{}", out.display());
        }
        Command::Evaluate {
            gt,
            pred,
            fg,
            backend,
            out,
        } => {
            let be = backend_by_name(&backend)?;
            let (global, foreground) = evaluate_pairs(&gt, &pred, fg.as_deref(), be.as_ref())?;
            write_reports(&out, &global, foreground.as_ref(), be.as_ref())?;
            for r in std::iter::once(&global).chain(&foreground) {
                let a = &r.aggregate;
                println!(
                    "{:<10} mse {:.6} mae {:.6} psnr {:.4} ssim {:.6} fid {}",
                    r.scope.as_str(),
                    a.mse,
                    a.mae,
                    a.psnr,
                    a.ssim,
                    a.fid.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Command::GenMasks { n, size, seed, out } => {
            let (h, w) = (size[0], size[1]);
            let masks = generate_mask_set(seed, n, (h, w), &StrokeConfig::for_size(h, w))?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, m) in masks.iter().enumerate() {
                m.save_png(&out.join(format!("mask_{i:05}.png")))?;
            }
            println!("wrote {n} masks to {}", out.display());
        }
        Command::MakeForeground {
            attrs,
            labels,
            out,
            names,
        } => {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let mapping = load_labels(&labels, &names)?;
            let written = make_foreground(&attrs, &mapping, &names, &out)?;
            println!("wrote {written} foreground masks to {}", out.display());
        }
    }
    Ok(())
}

fn make_foreground(
    attrs: &Path,
    mapping: &std::collections::BTreeMap<String, u32>,
    names: &[&str],
    out: &Path,
) -> Result<usize> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(attrs)
        .with_context(|| format!("reading {}", attrs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no attribute maps (*.png) in {}", attrs.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for p in &paths {
        let map = AttributeMap::load_png(p, mapping.clone())?;
        let fg = foreground_from_labels(&map, names)?;
        if fg.count_ones() == 0 {
            log::warn!("{}: foreground is empty", p.display());
        }
        fg.save_png(&out.join(p.file_name().unwrap()))?;
    }
    Ok(paths.len())
}
