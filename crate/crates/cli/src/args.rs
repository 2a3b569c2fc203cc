use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Parser)]
#[command(name = "mwq", version, about = "Multiscale wavelet quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose a PGM image and write one rescaled PGM per subband
    Dwt(DwtArgs),
    /// Count distinct values of a tensor after wavelet and spatial quantization
    AnalyzeStates(StatesArgs),
    /// Quantize every tensor of a checkpoint into a bit-packed package
    Compress(CompressArgs),
    /// Rebuild a checkpoint from a package
    Decompress(DecompressArgs),
    /// Train the toy network with quantized weights and activations
    Train(TrainArgs),
    /// Scale the high-frequency subbands of a PGM image
    Enhance(EnhanceArgs),
}

/// Fills flags that were not given on the command line from a JSON object with the same keys.
pub trait Merge: DeserializeOwned {
    fn merge(self, from_file: Self) -> Self;
    fn config_path(&self) -> Option<&Path>;
}

macro_rules! mergeable {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl Merge for $ty {
            fn merge(mut self, file: Self) -> Self {
                $(
                    if self.$field.is_none() {
                        self.$field = file.$field;
                    }
                )*
                self
            }

            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }
        }
    };
}

pub fn resolve<T: Merge>(args: T) -> Result<T, Failure> {
    let Some(path) = args.config_path() else {
        return Ok(args);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("reading {}: {e}", path.display())))?;
    let file: T = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    Ok(args.merge(file))
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DwtArgs {
    /// haar, db2, sym2 or coif2 [default: haar]
    #[arg(long)]
    pub basis: Option<String>,
    /// Decomposition depth [default: 1]
    #[arg(long)]
    pub levels: Option<usize>,
    /// JSON file whose keys mirror the flags; flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input image (binary PGM)
    #[serde(skip)]
    pub input: PathBuf,
    /// Output directory
    #[serde(skip)]
    pub outdir: PathBuf,
}
mergeable!(DwtArgs { basis, levels });

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct StatesArgs {
    /// Checkpoint holding the tensor; a seeded random tensor is used when absent
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Tensor name inside the checkpoint
    #[arg(long)]
    pub tensor: Option<String>,
    /// Seed of the random tensor [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rows of the random tensor [default: 8]
    #[arg(long)]
    pub rows: Option<usize>,
    /// Columns of the random tensor [default: 8]
    #[arg(long)]
    pub cols: Option<usize>,
    /// haar, db2, sym2 or coif2 [default: haar]
    #[arg(long)]
    pub basis: Option<String>,
    /// Decomposition depth [default: 1]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Subband bits ll,lh,hl,hh [default: 4,4,4,4]
    #[arg(long)]
    pub bits: Option<String>,
    /// Bit-width of the spatial uniform baseline [default: 4]
    #[arg(long)]
    pub spatial_bits: Option<u32>,
    /// Values closer than this count as one state [default: 1e-9]
    #[arg(long)]
    pub tol: Option<f32>,
    /// Histogram CSV (method,value,count)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file whose keys mirror the flags; flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
mergeable!(StatesArgs { ckpt, tensor, seed, rows, cols, basis, levels, bits, spatial_bits, tol, out });

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompressArgs {
    /// Input checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// haar, db2, sym2 or coif2 [default: haar]
    #[arg(long)]
    pub basis: Option<String>,
    /// Decomposition depth [default: 1]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Subband bits ll,lh,hl,hh [default: 4,4,4,4]
    #[arg(long)]
    pub bits: Option<String>,
    /// Output package
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file whose keys mirror the flags; flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
mergeable!(CompressArgs { model, basis, levels, bits, out });

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DecompressArgs {
    /// Input package
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file whose keys mirror the flags; flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
mergeable!(DecompressArgs { input, out });

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[value(name = "1")]
    #[serde(rename = "1")]
    One,
    #[value(name = "2")]
    #[serde(rename = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantizer {
    Uniform,
    Apot,
    Mwq,
    /// Full precision
    Fp,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// 1 = train with --quantizer, 2 = spatial fine-tuning, both = two-stage pipeline [default: 1]
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Weight bit-width k [default: 4]
    #[arg(long)]
    pub wbits: Option<u32>,
    /// Activation bit-width [default: --wbits]
    #[arg(long)]
    pub abits: Option<u32>,
    /// haar, db2, sym2 or coif2 [default: haar]
    #[arg(long)]
    pub basis: Option<String>,
    /// Decomposition depth [default: 1]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Wavelet subband bits ll,lh,hl,hh [default: k,k,k,k]
    #[arg(long)]
    pub bits: Option<String>,
    /// Weight quantizer; with --stage both it names the second-stage quantizer [default: mwq, or uniform for stages 2 and both]
    #[arg(long)]
    pub quantizer: Option<Quantizer>,
    /// Bit-width of the first and last layers, 0 to treat them like the rest [default: 8]
    #[arg(long)]
    pub edge_bits: Option<u32>,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory with MNIST-layout IDX files; the synthetic shapes task is used when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the synthetic dataset [default: 7]
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Synthetic training samples [default: 1500]
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Synthetic test samples [default: 600]
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Checkpoint to start from
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    /// Where to save the trained model
    #[arg(long)]
    pub ckpt_out: Option<PathBuf>,
    /// Metric log CSV [default: stdout]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.01, or 0.001 for stage 2]
    #[arg(long)]
    pub lr: Option<f32>,
    /// Comma-separated 0-based epochs where the lr decays [default: 60% and 80% of --epochs]
    #[arg(long)]
    pub decay_epochs: Option<String>,
    /// [default: 0.1]
    #[arg(long)]
    pub decay_factor: Option<f32>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f32>,
    /// [default: 1e-4]
    #[arg(long)]
    pub weight_decay: Option<f32>,
    /// Second-stage epochs for --stage both [default: 5]
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Second-stage learning rate for --stage both [default: 0.001]
    #[arg(long)]
    pub stage2_lr: Option<f32>,
    /// Insert an enhancement layer with this initial gain after the first activation
    #[arg(long)]
    pub enhance_alpha: Option<f32>,
    /// JSON file whose keys mirror the flags; flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
mergeable!(TrainArgs {
    stage, wbits, abits, basis, levels, bits, quantizer, edge_bits, seed, data, data_seed,
    train_size, test_size, ckpt_in, ckpt_out, log, epochs, lr, decay_epochs, decay_factor,
    batch_size, momentum, weight_decay, stage2_epochs, stage2_lr, enhance_alpha,
});

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EnhanceArgs {
    /// haar, db2, sym2 or coif2 [default: haar]
    #[arg(long)]
    pub basis: Option<String>,
    /// Decomposition depth [default: 1]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Gain on every high-frequency subband [default: 1.2]
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Difference-map PGM [default: <output stem>_diff.pgm]
    #[arg(long)]
    pub diff: Option<PathBuf>,
    /// JSON file whose keys mirror the flags; flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input image (binary PGM)
    #[serde(skip)]
    pub input: PathBuf,
    /// Enhanced image
    #[serde(skip)]
    pub output: PathBuf,
}
mergeable!(EnhanceArgs { basis, levels, alpha, diff });
