use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "molpatch", version, about = "Entropy-guided molecular patching and dynamic-query connectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Run configuration and seed, shared by most subcommands.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration (sections: nap, dqt, dqt_train, patch, objectives, seed)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Peak-detection overrides.
#[derive(Debug, Clone, Args)]
pub struct PatchFlags {
    /// NMS window: retained peaks are more than this many positions apart
    #[arg(long)]
    pub delta: Option<usize>,
    /// Minimum peak prominence in nats
    #[arg(long)]
    pub gamma: Option<f64>,
}

/// Exactly one SMILES source.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct Input {
    /// A single SMILES string
    #[arg(long)]
    pub smiles: Option<String>,
    /// A SMILES file, one molecule per line (blank and `#` lines skipped)
    #[arg(long, value_name = "FILE")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the next-atom predictor on a SMILES corpus
    NapTrain {
        /// SMILES corpus, one molecule per line
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Output checkpoint
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Override the number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the learning rate
        #[arg(long)]
        lr: Option<f64>,
        /// Override the batch size (packed chunks per step)
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-atom surprisal traces as CSV
    NapEntropy {
        /// Next-atom predictor checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[command(flatten)]
        input: Input,
        /// CSV file for --smiles; output directory (one CSV per line) for --file
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[command(flatten)]
        patch: PatchFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Segment molecules at surprisal peaks
    Segment {
        /// Next-atom predictor checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[command(flatten)]
        input: Input,
        /// Segment JSON (one object per line for --file)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write per-atom fragment labels as JSON lines
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Pool toy node embeddings into dynamic tokens
    Tokens {
        /// Next-atom predictor checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// SMILES string
        #[arg(long)]
        smiles: String,
        /// Output token container
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        patch: PatchFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Initialise a dynamic query transformer
    DqtInit {
        /// Output checkpoint
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the connector on one molecule
    DqtForward {
        /// Dynamic query transformer checkpoint
        #[arg(long, value_name = "FILE")]
        dqt: PathBuf,
        /// Next-atom predictor checkpoint
        #[arg(long, value_name = "FILE")]
        nap: PathBuf,
        /// SMILES string
        #[arg(long)]
        smiles: String,
        /// Conditioning sequence U as CSV
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Cross-attention weights as CSV
        #[arg(long, value_name = "FILE")]
        attn: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the connector with the contrastive, matching and reconstruction losses
    DqtPretrain {
        /// SMILES corpus, one molecule per line
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Optimiser steps
        #[arg(long)]
        steps: usize,
        /// Output checkpoint
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Segment with this next-atom predictor (uniform width-3 patches otherwise)
        #[arg(long, value_name = "FILE")]
        nap: Option<PathBuf>,
        /// Start from this connector checkpoint instead of a fresh one
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        /// Override the batch size
        #[arg(long)]
        batch_size: Option<usize>,
        /// Write per-step losses as JSON lines
        #[arg(long, value_name = "FILE")]
        losses: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Fixed-width fragment labels
    FragUniform {
        /// SMILES file
        #[arg(long, value_name = "FILE")]
        file: PathBuf,
        /// Atoms per patch
        #[arg(long, default_value_t = 3)]
        width: usize,
        /// Output JSON lines
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Random contiguous fragment labels
    FragRandom {
        /// SMILES file
        #[arg(long, value_name = "FILE")]
        file: PathBuf,
        /// Segments per molecule (default ⌈T/3⌉, clamped to T)
        #[arg(long)]
        segments: Option<usize>,
        /// Seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON lines
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Per-molecule NMI between two labelings
    Nmi {
        /// First label file (JSON lines)
        #[arg(long, value_name = "FILE")]
        a: PathBuf,
        /// Second label file (JSON lines)
        #[arg(long, value_name = "FILE")]
        b: PathBuf,
    },
    /// Summarise segmentations
    Stats {
        /// Segment JSON file, or a directory of them
        #[arg(long, value_name = "PATH")]
        seg: PathBuf,
        /// Output JSON
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}
