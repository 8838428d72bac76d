use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use molpatch_core::dqt::{write_attention_csv, write_output_csv, DqtModel};
use molpatch_core::eval::{export_trace_csv, nmi, segment_stats, summarize};
use molpatch_core::nap::{surprisal_trace, train_nap, EntropyTrace, NapModel};
use molpatch_core::objectives::{prepare_sample, pretrain_dqt};
use molpatch_core::patching::{
    cap_peaks, detect_peaks, pool_tokens, random_patches, read_label_records, read_segment_records,
    segment, uniform_patches, write_label_records, write_segment_records, LabelRecord, PatchParams,
    SegmentRecord, Segmentation,
};
use molpatch_core::persistence::{load_dqt, load_nap, save_dqt, save_nap, Checkpoint, ModelKind};
use molpatch_core::smiles::{parse_graph, read_corpus, tokenize_atoms, tokenize_corpus, TokenizedSmiles};
use serde_json::json;

use crate::args::{Command, Input};
use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::NapTrain {
            corpus,
            out,
            epochs,
            lr,
            batch_size,
            common,
        } => {
            let mut cfg = RunConfig::resolve(&common)?;
            if let Some(e) = epochs {
                cfg.nap.epochs = e;
            }
            if let Some(l) = lr {
                cfg.nap.lr = l;
            }
            if let Some(b) = batch_size {
                cfg.nap.batch_size = b;
            }
            cfg.nap.validate()?;
            let mols = load_corpus(&corpus)?;
            let (model, report) = train_nap(&mols, &cfg.nap, cfg.seed)?;
            if let Some(last) = report.step_losses.last() {
                log::info!("trained {} steps, final batch loss {last:.4}", report.steps);
            }
            save_nap(&model, &out).map_err(CliError::checkpoint(&out))
        }
        Command::NapEntropy {
            model,
            input,
            out,
            patch,
            common,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            let params = cfg.patch_params(&patch)?;
            let nap = load_nap(&model).map_err(CliError::checkpoint(&model))?;
            let max = cfg.dqt.max_dynamic;
            match (&input.smiles, &input.file) {
                (Some(s), _) => {
                    let tok = tokenize_atoms(s)?;
                    write_trace(&out, &nap, &tok, &params, max)
                }
                (None, Some(file)) => {
                    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
                    for (line, tok) in load_numbered(file)? {
                        write_trace(&out.join(format!("line_{line:06}.csv")), &nap, &tok, &params, max)?;
                    }
                    Ok(())
                }
                (None, None) => unreachable!("clap requires one input"),
            }
        }
        Command::Segment {
            model,
            input,
            out,
            labels,
            patch,
            common,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            let params = cfg.patch_params(&patch)?;
            let nap = load_nap(&model).map_err(CliError::checkpoint(&model))?;
            let mut segs = Vec::new();
            let mut label_recs = Vec::new();
            for tok in load_input(&input)? {
                let (_, _, seg) = entropy_segment(&nap, &tok, &params, cfg.dqt.max_dynamic)?;
                segs.push(SegmentRecord::new(tok.source(), &seg, Some(&params)));
                label_recs.push(LabelRecord::from_segmentation(tok.source(), &seg));
            }
            write_with(&out, |w| write_segment_records(w, &segs).map_err(CliError::from))?;
            if let Some(path) = labels {
                write_with(&path, |w| write_label_records(w, &label_recs).map_err(CliError::from))?;
            }
            Ok(())
        }
        Command::Tokens {
            model,
            smiles,
            out,
            patch,
            common,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            let params = cfg.patch_params(&patch)?;
            let nap = load_nap(&model).map_err(CliError::checkpoint(&model))?;
            let tok = tokenize_atoms(&smiles)?;
            let (_, _, seg) = entropy_segment(&nap, &tok, &params, cfg.dqt.max_dynamic)?;
            let (graph, map) = parse_graph(&tok)?;
            let sample = prepare_sample(&tok, &seg, cfg.dqt.d_node, cfg.seed)?;
            let pooled = pool_tokens(&seg, &map, &sample.x[0])?;
            let ckpt = Checkpoint {
                kind: ModelKind::DynamicTokens,
                config: json!({
                    "smiles": tok.source(),
                    "method": seg.method(),
                    "delta": params.delta,
                    "gamma": params.gamma,
                    "cuts": seg.cuts(),
                    "node_sets": pooled.node_sets,
                    "nodes": graph.node_count(),
                    "d_node": cfg.dqt.d_node,
                    "seed": cfg.seed,
                }),
                tensors: vec![
                    ("tokens".to_owned(), pooled.tokens),
                    ("node_embeddings".to_owned(), sample.x[0].clone()),
                ],
            };
            ckpt.write(&out).map_err(CliError::checkpoint(&out))
        }
        Command::DqtInit { out, common } => {
            let cfg = RunConfig::resolve(&common)?;
            let model = DqtModel::<f32>::init(cfg.dqt.clone(), cfg.seed)?;
            log::info!("initialised connector with {} parameters", model.num_params());
            save_dqt(&model, &out).map_err(CliError::checkpoint(&out))
        }
        Command::DqtForward {
            dqt,
            nap,
            smiles,
            out,
            attn,
            patch,
            common,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            let params = cfg.patch_params(&patch)?;
            let dqt_model = load_dqt(&dqt).map_err(CliError::checkpoint(&dqt))?;
            let nap_model = load_nap(&nap).map_err(CliError::checkpoint(&nap))?;
            let tok = tokenize_atoms(&smiles)?;
            let max = dqt_model.config().max_dynamic;
            let (_, _, seg) = entropy_segment(&nap_model, &tok, &params, max)?;
            let sample = prepare_sample(&tok, &seg, dqt_model.config().d_node, cfg.seed)?;
            let pad = vec![false; sample.z[0].rows()];
            let cond = dqt_model.forward(&sample.z[0], &sample.x[0], &pad)?;
            log::info!("{} dynamic tokens, U is {}x{}", cond.dynamic_rows(), cond.u.rows(), cond.u.cols());
            write_with(&out, |w| write_output_csv(w, &cond).map_err(CliError::io(&out)))?;
            if let Some(path) = attn {
                write_with(&path, |w| write_attention_csv(w, &cond).map_err(CliError::io(&path)))?;
            }
            Ok(())
        }
        Command::DqtPretrain {
            corpus,
            steps,
            out,
            nap,
            init,
            batch_size,
            losses,
            patch,
            common,
        } => {
            let mut cfg = RunConfig::resolve(&common)?;
            cfg.dqt_train.steps = steps;
            if let Some(b) = batch_size {
                cfg.dqt_train.batch_size = b;
            }
            let params = cfg.patch_params(&patch)?;
            let mut model = match &init {
                Some(p) => load_dqt(p).map_err(CliError::checkpoint(p))?,
                None => DqtModel::<f32>::init(cfg.dqt.clone(), cfg.seed)?,
            };
            let dcfg = model.config().clone();
            let nap_model = match &nap {
                Some(p) => Some(load_nap(p).map_err(CliError::checkpoint(p))?),
                None => None,
            };
            let mols = load_corpus(&corpus)?;
            let mut samples = Vec::with_capacity(mols.len());
            for (i, tok) in mols.iter().enumerate() {
                let seg = match &nap_model {
                    Some(m) => entropy_segment(m, tok, &params, dcfg.max_dynamic)?.2,
                    None => uniform_patches(tok.len(), uniform_width(tok.len(), dcfg.max_dynamic))?,
                };
                samples.push(prepare_sample(tok, &seg, dcfg.d_node, cfg.seed.wrapping_add(i as u64))?);
            }
            let report = pretrain_dqt(&mut model, &samples, &cfg.dqt_train, &cfg.objectives, cfg.seed)?;
            if let Some(path) = losses {
                write_with(&path, |w| {
                    for s in &report.steps {
                        serde_json::to_writer(&mut *w, s).map_err(|e| CliError::Input(e.to_string()))?;
                        writeln!(w).map_err(CliError::io(&path))?;
                    }
                    Ok(())
                })?;
            }
            save_dqt(&model, &out).map_err(CliError::checkpoint(&out))
        }
        Command::FragUniform { file, width, out } => {
            let mut recs = Vec::new();
            for tok in load_corpus(&file)? {
                let seg = uniform_patches(tok.len(), width)?;
                recs.push(LabelRecord::from_segmentation(tok.source(), &seg));
            }
            write_with(&out, |w| write_label_records(w, &recs).map_err(CliError::from))
        }
        Command::FragRandom {
            file,
            segments,
            seed,
            out,
        } => {
            let mut recs = Vec::new();
            for (i, tok) in load_corpus(&file)?.iter().enumerate() {
                let t = tok.len();
                let n = segments.unwrap_or_else(|| t.div_ceil(3)).min(t);
                let seg = random_patches(t, n, seed.wrapping_add(i as u64))?;
                recs.push(LabelRecord::from_segmentation(tok.source(), &seg));
            }
            write_with(&out, |w| write_label_records(w, &recs).map_err(CliError::from))
        }
        Command::Nmi { a, b } => {
            let ra = read_labels(&a)?;
            let rb = read_labels(&b)?;
            if ra.len() != rb.len() {
                return Err(CliError::Input(format!(
                    "{} has {} molecules, {} has {}",
                    a.display(),
                    ra.len(),
                    b.display(),
                    rb.len()
                )));
            }
            let mut values = Vec::with_capacity(ra.len());
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            let stdout_err = |e| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            };
            for (i, (x, y)) in ra.iter().zip(&rb).enumerate() {
                if x.smiles != y.smiles {
                    return Err(CliError::Input(format!(
                        "molecule {}: `{}` vs `{}`",
                        i + 1,
                        x.smiles,
                        y.smiles
                    )));
                }
                let v = nmi(&x.labels, &y.labels)?;
                writeln!(w, "{}\t{v:.6}\t{}", i + 1, x.smiles).map_err(stdout_err)?;
                values.push(v);
            }
            let s = summarize(&values)?;
            writeln!(w, "mean\t{:.6}", s.mean).map_err(stdout_err)?;
            writeln!(w, "median\t{:.6}", s.median).map_err(stdout_err)?;
            w.flush().map_err(stdout_err)
        }
        Command::Stats { seg, out } => {
            let mut segs = Vec::new();
            for path in segment_files(&seg)? {
                let file = File::open(&path).map_err(CliError::io(&path))?;
                for rec in read_segment_records(BufReader::new(file))? {
                    segs.push(rec.segmentation()?);
                }
            }
            let stats = segment_stats(&segs)?;
            write_with(&out, |w| {
                serde_json::to_writer_pretty(&mut *w, &stats).map_err(|e| CliError::Input(e.to_string()))?;
                writeln!(w).map_err(CliError::io(&out))
            })
        }
    }
}

/// Smallest width not below 3 that keeps the patch count within `max`.
fn uniform_width(len: usize, max: usize) -> usize {
    len.div_ceil(max.max(1)).max(3)
}

fn load_corpus(path: &Path) -> Result<Vec<TokenizedSmiles>> {
    let lines = read_corpus(path).map_err(CliError::io(path))?;
    Ok(tokenize_corpus(&lines)?)
}

fn load_numbered(path: &Path) -> Result<Vec<(usize, TokenizedSmiles)>> {
    let lines = read_corpus(path).map_err(CliError::io(path))?;
    let toks = tokenize_corpus(&lines)?;
    Ok(lines.iter().map(|l| l.line).zip(toks).collect())
}

fn load_input(input: &Input) -> Result<Vec<TokenizedSmiles>> {
    match (&input.smiles, &input.file) {
        (Some(s), _) => Ok(vec![tokenize_atoms(s)?]),
        (None, Some(f)) => load_corpus(f),
        (None, None) => unreachable!("clap requires one input"),
    }
}

fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    Ok(read_label_records(BufReader::new(file))?)
}

fn segment_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(CliError::io(path))? {
        let p = entry.map_err(CliError::io(path))?.path();
        if matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn entropy_segment(
    nap: &NapModel<f32>,
    tok: &TokenizedSmiles,
    params: &PatchParams,
    max: usize,
) -> Result<(EntropyTrace, Vec<usize>, Segmentation)> {
    let trace = surprisal_trace(nap, tok)?;
    let peaks = cap_peaks(&trace, &detect_peaks(&trace, params), max);
    let seg = segment(tok.len(), &peaks)?;
    Ok((trace, peaks, seg))
}

fn write_trace(out: &Path, nap: &NapModel<f32>, tok: &TokenizedSmiles, params: &PatchParams, max: usize) -> Result<()> {
    let (trace, peaks, seg) = entropy_segment(nap, tok, params, max)?;
    write_with(out, |w| Ok(export_trace_csv(w, tok, &trace, &peaks, &seg)?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(CliError::io(path))
}
