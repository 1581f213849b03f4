//! The pipeline stages behind each subcommand.
//!
//! Every stage reads its inputs from checkpoints and writes its outputs into
//! `out_dir`; an existing output is only replaced when `overwrite` is set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use siamex::autoencoder::{
    self, finetune_decoder, train_autoencoder, AeModel, AeTrainConfig, AeTrainReport,
    FinetuneConfig, FinetuneReport,
};
use siamex::data::{
    load_autoencoder, load_json, load_snn, read_pgm, save_autoencoder, save_json, save_snn,
    write_atomic, write_mask_images, Dataset,
};
use siamex::explain::{compute_prototypes, explain, PrototypeSet};
use siamex::nn::Tensor;
use siamex::siamese::{
    build_pair_set, intra_inter_distances, train_snn as fit_snn, SnnModel, SnnTrainConfig,
};

use crate::config::RunConfig;

/// File layout inside `out_dir`.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn snn(&self) -> PathBuf {
        self.dir.join("snn.ckpt")
    }
    pub fn snn_report(&self) -> PathBuf {
        self.dir.join("snn-train.json")
    }
    pub fn ae(&self) -> PathBuf {
        self.dir.join("autoencoder.ckpt")
    }
    pub fn ae_report(&self) -> PathBuf {
        self.dir.join("autoencoder-train.json")
    }
    pub fn ae_finetuned(&self) -> PathBuf {
        self.dir.join("autoencoder-ft.ckpt")
    }
    pub fn finetune_report(&self) -> PathBuf {
        self.dir.join("finetune.json")
    }
    pub fn prototypes(&self) -> PathBuf {
        self.dir.join("prototypes.json")
    }
    pub fn explain_dir(&self) -> PathBuf {
        self.dir.join("explain")
    }
    pub fn report(&self) -> PathBuf {
        self.explain_dir().join("report.jsonl")
    }
}

fn guard(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        );
    }
    Ok(())
}

fn snn_snapshot(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "data": serde_json::to_value(&cfg.data)?,
        "optimizer": serde_json::to_value(cfg.optimizer_for(cfg.snn.learning_rate))?,
        "snn": serde_json::to_value(&cfg.snn)?,
    }))
}

fn ae_snapshot(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "data": serde_json::to_value(&cfg.data)?,
        "optimizer": serde_json::to_value(cfg.optimizer_for(cfg.autoencoder.learning_rate))?,
        "autoencoder": serde_json::to_value(&cfg.autoencoder)?,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnnSummary {
    pub epoch_losses: Vec<f64>,
    pub converged: bool,
    pub pairs: usize,
    pub train_intra_distance: f64,
    pub train_inter_distance: f64,
}

pub fn train_snn(cfg: &RunConfig, overwrite: bool) -> Result<SnnSummary> {
    let out = Artifacts::new(&cfg.out_dir);
    guard(&out.snn(), overwrite)?;
    let data = cfg.load_dataset()?;
    let (train, _) = cfg.split(&data)?;
    let pairs = build_pair_set(&train.labels, cfg.snn.pairs_per_anchor, cfg.seed)?;
    let tc = SnnTrainConfig {
        contrastive: cfg.contrastive(),
        optimizer: cfg.optimizer_for(cfg.snn.learning_rate),
        epochs: cfg.snn.epochs,
        batch_size: cfg.snn.batch_size,
    };
    log::info!(
        "training SNN on {} examples, {} pairs, {} epochs",
        train.len(),
        pairs.len(),
        tc.epochs
    );
    let (model, report) = fit_snn(&train.inputs, &pairs, cfg.snn_spec(data.input_len()), &tc)?;
    let emb = model.embed_batch(&train.inputs)?;
    let (intra, inter) = intra_inter_distances(&emb, &train.labels);
    save_snn(&model, snn_snapshot(cfg)?, cfg.seed, &out.snn())?;
    let summary = SnnSummary {
        epoch_losses: report.epoch_losses,
        converged: report.converged,
        pairs: pairs.len(),
        train_intra_distance: intra,
        train_inter_distance: inter,
    };
    save_json(&summary, &out.snn_report())?;
    Ok(summary)
}

fn snn_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| Artifacts::new(&cfg.out_dir).snn(), Path::to_path_buf)
}

fn load_snn_model(path: &Path) -> Result<SnnModel> {
    Ok(load_snn(path)
        .with_context(|| format!("loading SNN checkpoint {}", path.display()))?
        .0)
}

fn load_ae_model(path: &Path) -> Result<AeModel> {
    Ok(load_autoencoder(path)
        .with_context(|| format!("loading autoencoder checkpoint {}", path.display()))?
        .0)
}

pub fn train_ae(cfg: &RunConfig, snn: Option<&Path>, overwrite: bool) -> Result<AeTrainReport> {
    let out = Artifacts::new(&cfg.out_dir);
    guard(&out.ae(), overwrite)?;
    let snn = load_snn_model(&snn_path(cfg, snn))?;
    let d = snn.embedding_dim();
    let data = cfg.load_dataset()?;
    let m = data.input_len();
    let enc = cfg.encoder_spec(m);
    let dec = cfg.decoder_spec(d);
    let code = enc.output_len().context("autoencoder.encoder")?;
    ensure!(
        code == d,
        "autoencoder code length {code} does not match the SNN embedding length {d}"
    );
    let rec = dec.output_len().context("autoencoder.decoder")?;
    ensure!(
        rec == m,
        "decoder output length {rec} does not match the input length {m}"
    );

    let (train, _) = cfg.split(&data)?;
    let h = snn.embed_batch(&train.inputs)?;
    let tc = AeTrainConfig {
        weights: cfg.ae_weights(),
        optimizer: cfg.optimizer_for(cfg.autoencoder.learning_rate),
        epochs: cfg.autoencoder.epochs,
        batch_size: cfg.autoencoder.batch_size,
    };
    log::info!(
        "training autoencoder on {} examples, {} epochs",
        train.len(),
        tc.epochs
    );
    let (ae, report) = train_autoencoder(&train.inputs, &h, enc, dec, &tc)?;
    save_autoencoder(&ae, ae_snapshot(cfg)?, cfg.seed, &out.ae())?;
    save_json(&report, &out.ae_report())?;
    Ok(report)
}

pub fn finetune(
    cfg: &RunConfig,
    snn: Option<&Path>,
    ae: Option<&Path>,
    overwrite: bool,
) -> Result<FinetuneReport> {
    let out = Artifacts::new(&cfg.out_dir);
    guard(&out.ae_finetuned(), overwrite)?;
    let snn = load_snn_model(&snn_path(cfg, snn))?;
    let ae_path = ae.map_or_else(|| out.ae(), Path::to_path_buf);
    let model = load_ae_model(&ae_path)?;
    ensure!(
        model.code_dim() == snn.embedding_dim(),
        "autoencoder code length {} does not match the SNN embedding length {}",
        model.code_dim(),
        snn.embedding_dim()
    );
    let data = cfg.load_dataset()?;
    let (train, _) = cfg.split(&data)?;
    let h = snn.embed_batch(&train.inputs)?;
    let fc = FinetuneConfig {
        optimizer: cfg.optimizer_for(cfg.autoencoder.learning_rate),
        epochs: cfg.autoencoder.finetune_epochs,
        batch_size: cfg.autoencoder.batch_size,
    };
    let (tuned, report) = finetune_decoder(&model, &h, &train.inputs, &fc)?;
    save_autoencoder(&tuned, ae_snapshot(cfg)?, cfg.seed, &out.ae_finetuned())?;
    save_json(&report, &out.finetune_report())?;
    Ok(report)
}

pub fn prototypes(cfg: &RunConfig, snn: Option<&Path>, overwrite: bool) -> Result<PrototypeSet> {
    let out = Artifacts::new(&cfg.out_dir);
    guard(&out.prototypes(), overwrite)?;
    let snn = load_snn_model(&snn_path(cfg, snn))?;
    let data = cfg.load_dataset()?;
    let (train, _) = cfg.split(&data)?;
    let protos = compute_prototypes(&snn.embed_batch(&train.inputs)?, &train.labels)?;
    save_json(&protos, &out.prototypes())?;
    Ok(protos)
}

/// Where `explain` takes its models and inputs from.
#[derive(Clone, Debug, Default)]
pub struct ExplainArgs {
    pub snn: Option<PathBuf>,
    /// Defaults to the fine-tuned autoencoder in `out_dir`.
    pub ae: Option<PathBuf>,
    pub protos: Option<PathBuf>,
    /// Indices into the full dataset.
    pub indices: Vec<usize>,
    /// A PGM image explained in addition to the indexed examples.
    pub input: Option<PathBuf>,
}

/// One line of `explain/report.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub index: Option<usize>,
    pub input: Option<String>,
    pub label: Option<usize>,
    pub target_class: usize,
    pub important: Vec<usize>,
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub s: usize,
    pub q: usize,
    /// Mean absolute change of each input feature; the mask is its top `q`.
    pub mean_change: Vec<f64>,
    pub mask_indices: Vec<usize>,
    /// Per-pixel MSE between the input and the decoded embedding.
    pub reconstruction_mse: f64,
    /// File names of the original, reconstruction, overlay and mask images.
    pub images: Vec<String>,
}

struct Item {
    x: Tensor,
    index: Option<usize>,
    input: Option<String>,
    label: Option<usize>,
    spatial: Option<(usize, usize)>,
    stem: String,
}

fn collect_items(cfg: &RunConfig, args: &ExplainArgs, data: &Dataset) -> Result<Vec<Item>> {
    let mut indices = args.indices.clone();
    if indices.is_empty() && args.input.is_none() {
        indices = cfg.explain.indices.clone();
    }
    if indices.is_empty() && args.input.is_none() {
        let (train, _) = cfg.split(data)?;
        ensure!(
            train.len() < data.len(),
            "no held-out example to explain; pass --index or --input"
        );
        indices.push(train.len());
    }
    let mut items = Vec::new();
    for i in indices {
        ensure!(
            i < data.len(),
            "index {i} out of range for {} examples",
            data.len()
        );
        items.push(Item {
            x: data.inputs[i].clone(),
            index: Some(i),
            input: None,
            label: Some(data.labels[i]),
            spatial: data.spatial,
            stem: format!("example-{i}"),
        });
    }
    if let Some(path) = &args.input {
        let (w, h, pixels) = read_pgm(path)?;
        ensure!(
            w * h == data.input_len(),
            "{} has {} pixels, the model expects {}",
            path.display(),
            w * h,
            data.input_len()
        );
        let stem = path
            .file_stem()
            .map_or("input".into(), |s| s.to_string_lossy().into_owned());
        items.push(Item {
            x: Tensor::from_vec(pixels.iter().map(|&b| f64::from(b) / 255.0).collect()),
            index: None,
            input: Some(path.display().to_string()),
            label: None,
            spatial: Some((h, w)),
            stem: format!("input-{stem}"),
        });
    }
    Ok(items)
}

pub fn run_explain(
    cfg: &RunConfig,
    args: &ExplainArgs,
    overwrite: bool,
) -> Result<Vec<ReportRecord>> {
    let out = Artifacts::new(&cfg.out_dir);
    guard(&out.report(), overwrite)?;
    let snn = load_snn_model(&snn_path(cfg, args.snn.as_deref()))?;
    let ae = load_ae_model(&args.ae.clone().unwrap_or_else(|| out.ae_finetuned()))?;
    let protos_path = args.protos.clone().unwrap_or_else(|| out.prototypes());
    let protos: PrototypeSet = load_json(&protos_path)
        .with_context(|| format!("loading prototypes {}", protos_path.display()))?;
    let data = cfg.load_dataset()?;
    let pc = cfg.perturbation(snn.embedding_dim(), data.input_len())?;

    let mut records = Vec::new();
    for item in collect_items(cfg, args, &data)? {
        let r = explain(&item.x, &snn, &ae, &protos, &pc)?;
        let decoded = ae.decode(&snn.embed(&item.x)?)?;
        let mse =
            decoded.squared_distance(&item.x.reshaped(decoded.shape())?)? / item.x.len() as f64;
        let mut images = Vec::new();
        if let Some(shape) = item.spatial {
            let p = write_mask_images(
                &item.x,
                &decoded,
                &r.mask,
                shape,
                &out.explain_dir(),
                &item.stem,
            )?;
            for path in [p.original, p.reconstruction, p.overlay, p.mask] {
                images.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        log::info!(
            "{}: class {} mask {:?}",
            item.stem,
            r.target_class,
            r.mask_indices
        );
        records.push(ReportRecord {
            index: item.index,
            input: item.input,
            label: item.label,
            target_class: r.target_class,
            important: r.important,
            sigma: r.sigma,
            n_samples: r.n_samples,
            seed: r.seed,
            s: pc.s,
            q: pc.q,
            mean_change: r.mean_change.into_data(),
            mask_indices: r.mask_indices,
            reconstruction_mse: mse,
            images,
        });
    }
    let mut text = Vec::new();
    for rec in &records {
        serde_json::to_writer(&mut text, rec)?;
        text.write_all(b"\n")?;
    }
    write_atomic(&out.report(), &text)?;
    Ok(records)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

/// Per-pixel reconstruction MSE of `x -> decoder(encoder(x))` and of
/// `x -> decoder(snn(x))` over `data`.
pub fn reconstruction_mse(snn: &SnnModel, ae: &AeModel, data: &Dataset) -> Result<(f64, f64)> {
    let n = (data.len() * data.input_len()) as f64;
    let full = autoencoder::reconstruction_error(ae, &data.inputs)? / n;
    let h = snn.embed_batch(&data.inputs)?;
    let via_h = autoencoder::decoder_error(ae, &data.inputs, &h)? / n;
    Ok((full, via_h))
}
