//! Command-line pipeline: dataset build, training, evaluation, index
//! build, latent-space searches, and scatter plots.
//!
//! Results go to stdout, logs to stderr. Exit codes: 0 success, 1 contract
//! or configuration error, 2 i/o error.

mod svg;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lscfg::checkpoint;
use lscfg::config::RunConfig;
use lscfg::error::{Error, Result};
use lscfg::index::{
    build_index, load_index, save_index, search_by_image, search_by_text, search_cross,
    EncodingIndex, Jitter, RankedHit, TextQuery,
};
use lscfg::model::HeadKind;
use lscfg::tensor::Tensor;
use lscfg::textures::{
    build_dataset, parse_manifest, regenerate, regenerate_sample, Dataset, SplitMode,
    TextureSample,
};
use lscfg::train::{evaluate, train};

#[derive(Parser)]
#[command(
    name = "lscfg",
    version,
    about = "Supervised autoencoder with a geometry-configured latent space: \
             train, evaluate, index, search, plot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Plain,
    Vae,
    Polar,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum JitterArg {
    Center,
    Random,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config; the desk-scale defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the geometric loss weight.
    #[arg(long)]
    kg: Option<f64>,
    /// Override the latent head.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Override the train/test split mode.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::desk_default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(kg) = self.kg {
            config.weights.k_g = kg;
        }
        if let Some(head) = self.head {
            config.sae.head = match head {
                HeadArg::Plain => HeadKind::Plain,
                HeadArg::Vae => HeadKind::Vae,
                HeadArg::Polar => HeadKind::Polar,
            };
        }
        if let Some(split) = self.split {
            config.data.split.mode = match split {
                SplitArg::Pre => SplitMode::Pre,
                SplitArg::Post => SplitMode::Post,
            };
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the procedural texture dataset and write its manifest.
    Dataset {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also cache every image as a raw little-endian f64 blob.
        #[arg(long)]
        write_blobs: bool,
    },
    /// Train on an existing dataset manifest; writes a checkpoint and a
    /// JSON-lines metrics log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest (default: <out>/manifest.jsonl).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Report classifier accuracy, latent-space accuracy, and a confusion
    /// matrix on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetArg,
    },
    /// Encode a manifest split once and save the encoding index.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetArg,
        /// Collection tag stored with every entry.
        #[arg(long, default_value = "default")]
        collection: String,
        /// Index file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank an index against a query image drawn from a manifest.
    SearchImage {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sample id of the query image.
        #[arg(long)]
        query_id: String,
        #[arg(long, short, default_value_t = 10)]
        k: usize,
    },
    /// Rank index B against a stored encoding from index A.
    SearchCross {
        #[arg(long)]
        index_a: PathBuf,
        #[arg(long)]
        index_b: PathBuf,
        #[arg(long)]
        query_id: String,
        #[arg(long, short, default_value_t = 10)]
        k: usize,
    },
    /// Rank an index against a text query over the class vocabulary.
    SearchText {
        #[arg(long)]
        index: PathBuf,
        /// Comma-separated terms, each "name" or "name:weight".
        #[arg(long)]
        terms: String,
        #[arg(long, value_enum, default_value = "center")]
        jitter: JitterArg,
        #[arg(long, default_value_t = 0)]
        jitter_seed: u64,
        #[arg(long, short, default_value_t = 10)]
        k: usize,
    },
    /// Emit an SVG scatter plot of latent encodings with cluster circles.
    Plot {
        /// Plot a saved index.
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
        index: Option<PathBuf>,
        /// Encode a manifest split with this checkpoint instead.
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        subset: SubsetArg,
        /// Extra index drawn as large generalization points.
        #[arg(long)]
        gen_index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "latent space")]
        title: String,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset { config, write_blobs } => cmd_dataset(&config.load()?, write_blobs),
        Command::Train { config, manifest } => cmd_train(&config.load()?, manifest.as_deref()),
        Command::Eval { checkpoint, manifest, subset } => cmd_eval(&checkpoint, &manifest, subset),
        Command::Index { checkpoint, manifest, subset, collection, out } => {
            cmd_index(&checkpoint, &manifest, subset, &collection, &out)
        }
        Command::SearchImage { index, checkpoint, manifest, query_id, k } => {
            cmd_search_image(&index, &checkpoint, &manifest, &query_id, k)
        }
        Command::SearchCross { index_a, index_b, query_id, k } => {
            cmd_search_cross(&index_a, &index_b, &query_id, k)
        }
        Command::SearchText { index, terms, jitter, jitter_seed, k } => {
            cmd_search_text(&index, &terms, jitter, jitter_seed, k)
        }
        Command::Plot { index, checkpoint, manifest, subset, gen_index, out, title } => cmd_plot(
            index.as_deref(),
            checkpoint.as_deref(),
            manifest.as_deref(),
            subset,
            gen_index.as_deref(),
            &out,
            &title,
        ),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let (header, records) = parse_manifest(&text)?;
    regenerate(&header, &records)
}

fn subset_of(dataset: &Dataset, subset: SubsetArg) -> &[TextureSample] {
    match subset {
        SubsetArg::Train => &dataset.train,
        SubsetArg::Test => &dataset.test,
    }
}

fn cmd_dataset(config: &RunConfig, write_blobs: bool) -> Result<()> {
    let dataset = build_dataset(&config.data, config.sae.input_hw, config.seed)?;
    fs::create_dir_all(&config.output_dir)?;
    let manifest_path = config.output_dir.join("manifest.jsonl");
    fs::write(&manifest_path, dataset.manifest_lines()?)?;
    eprintln!(
        "dataset: {} train / {} test samples, manifest at {}",
        dataset.train.len(),
        dataset.test.len(),
        manifest_path.display()
    );
    if write_blobs {
        let blob_dir = config.output_dir.join("blobs");
        fs::create_dir_all(&blob_dir)?;
        for sample in dataset.train.iter().chain(&dataset.test) {
            let mut bytes = Vec::with_capacity(sample.image.len() * 8);
            for v in &sample.image {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(blob_dir.join(format!("{}.f64", sample.id)), bytes)?;
        }
        eprintln!("blob cache written to {}", blob_dir.display());
    }
    println!(
        "{}",
        serde_json::json!({
            "manifest": manifest_path,
            "train": dataset.train.len(),
            "test": dataset.test.len(),
        })
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, manifest: Option<&Path>) -> Result<()> {
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join("manifest.jsonl"));
    if !manifest_path.exists() {
        return Err(Error::contract(format!(
            "dataset manifest {} does not exist; run `lscfg dataset` first",
            manifest_path.display()
        )));
    }
    let dataset = load_dataset(&manifest_path)?;
    if dataset.header.hw != config.sae.input_hw {
        return Err(Error::config(format!(
            "manifest images are {0}x{0} but the model expects {1}x{1}",
            dataset.header.hw, config.sae.input_hw
        )));
    }
    fs::create_dir_all(&config.output_dir)?;
    let metrics_path = config.output_dir.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)?;
    eprintln!(
        "training on {} samples, {} epochs, batch {}",
        dataset.train.len(),
        config.optimizer.epochs,
        config.optimizer.batch_size
    );
    let outcome = train(config, &dataset.train, |m| {
        eprintln!(
            "epoch {:>3}: l_ce {:.4}  l_g {:.4}  acc {:.4}  in_cluster {:.4}",
            m.epoch, m.l_ce, m.l_g, m.acc, m.in_cluster_fraction
        );
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics_file, "{line}").expect("metrics log writable");
    })?;
    let mut model = outcome.model;
    let checkpoint_path = config.output_dir.join("model.lsf1");
    checkpoint::save_model(&mut model, Some(&outcome.clusters), &checkpoint_path)?;
    let last = outcome.metrics.last().cloned();
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": checkpoint_path,
            "metrics": metrics_path,
            "epochs": outcome.metrics.len(),
            "final": last,
        })
    );
    Ok(())
}

fn load_model_with_clusters(
    path: &Path,
) -> Result<(lscfg::model::SaeModel, lscfg::geometry::ClusterConfig, String)> {
    let bytes = fs::read(path)?;
    let fingerprint = checkpoint::fingerprint(&bytes);
    let (model, clusters) = checkpoint::deserialize_model(&bytes, &path.display().to_string())?;
    let clusters = clusters.ok_or_else(|| {
        Error::contract(format!("checkpoint {} carries no cluster configuration", path.display()))
    })?;
    Ok((model, clusters, fingerprint))
}

fn cmd_eval(checkpoint_path: &Path, manifest: &Path, subset: SubsetArg) -> Result<()> {
    let (model, clusters, _) = load_model_with_clusters(checkpoint_path)?;
    let dataset = load_dataset(manifest)?;
    let samples = subset_of(&dataset, subset);
    let report = evaluate(&model, &clusters, samples)?;
    println!("n\t{}", report.n);
    println!("accuracy\t{:.6}", report.accuracy);
    println!("ls_accuracy\t{:.6}", report.ls_accuracy);
    let names: Vec<&str> = lscfg::textures::TextureClass::ALL
        .iter()
        .take(model.config.n_classes)
        .map(|c| c.name())
        .collect();
    println!("confusion\t{}", names.join("\t"));
    for (class, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let name = names.get(class).copied().unwrap_or("?");
        println!("{name}\t{}", cells.join("\t"));
    }
    Ok(())
}

fn cmd_index(
    checkpoint_path: &Path,
    manifest: &Path,
    subset: SubsetArg,
    collection: &str,
    out: &Path,
) -> Result<()> {
    let (model, clusters, fingerprint) = load_model_with_clusters(checkpoint_path)?;
    let dataset = load_dataset(manifest)?;
    let samples = subset_of(&dataset, subset);
    let index = build_index(&model, samples, &clusters, collection, fingerprint)?;
    save_index(&index, out)?;
    eprintln!("indexed {} encodings into {}", index.len(), out.display());
    println!(
        "{}",
        serde_json::json!({ "index": out, "entries": index.len(), "collection": collection })
    );
    Ok(())
}

fn print_hits(hits: &[RankedHit], k: usize) {
    for hit in hits.iter().take(k) {
        let label = hit.label.map(|l| l.name()).unwrap_or("-");
        println!("{}\t{:.6}\t{}", hit.id, hit.score, label);
    }
}

fn cmd_search_image(
    index_path: &Path,
    checkpoint_path: &Path,
    manifest: &Path,
    query_id: &str,
    k: usize,
) -> Result<()> {
    let index = load_index(index_path)?;
    let (model, _, fingerprint) = load_model_with_clusters(checkpoint_path)?;
    if fingerprint != index.model_fingerprint {
        return Err(Error::IncompatibleIndex(
            "index was built by a different checkpoint".to_string(),
        ));
    }
    let text = fs::read_to_string(manifest)?;
    let (header, records) = parse_manifest(&text)?;
    let record = records
        .iter()
        .find(|r| r.id == query_id)
        .ok_or_else(|| Error::contract(format!("query id {query_id:?} is not in the manifest")))?;
    let sample = regenerate_sample(&header, record)?;
    let query = Tensor::new(&[1, 1, sample.hw, sample.hw], sample.image.clone())?;
    let hits = search_by_image(&index, &model, &query)?;
    print_hits(&hits, k);
    Ok(())
}

fn cmd_search_cross(index_a: &Path, index_b: &Path, query_id: &str, k: usize) -> Result<()> {
    let a = load_index(index_a)?;
    let b = load_index(index_b)?;
    let hits = search_cross(&a, &b, query_id)?;
    print_hits(&hits, k);
    Ok(())
}

fn parse_terms(spec: &str) -> Result<Vec<(String, f64)>> {
    let mut terms = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        match part.rsplit_once(':') {
            Some((name, weight)) => {
                let weight: f64 = weight.trim().parse().map_err(|_| {
                    Error::contract(format!("bad term weight in {part:?}; use name or name:weight"))
                })?;
                terms.push((name.trim().to_string(), weight));
            }
            None => terms.push((part.to_string(), 1.0)),
        }
    }
    if terms.is_empty() {
        return Err(Error::contract("no terms given; use --terms \"name[:weight],...\""));
    }
    Ok(terms)
}

fn cmd_search_text(
    index_path: &Path,
    terms: &str,
    jitter: JitterArg,
    jitter_seed: u64,
    k: usize,
) -> Result<()> {
    let index = load_index(index_path)?;
    let query = TextQuery {
        terms: parse_terms(terms)?,
        jitter: match jitter {
            JitterArg::Center => Jitter::Center,
            JitterArg::Random => Jitter::Random { seed: jitter_seed },
        },
    };
    let hits = search_by_text(&index, &query)?;
    print_hits(&hits, k);
    Ok(())
}

fn index_points(index: &EncodingIndex, large: bool) -> Result<Vec<svg::PlotPoint>> {
    if index.cfg.latent_dims() != 2 {
        return Err(Error::config(format!(
            "plotting supports a 2-D latent space, this index has {} dims",
            index.cfg.latent_dims()
        )));
    }
    Ok(index
        .entries
        .iter()
        .map(|e| svg::PlotPoint { x: e.z[0], y: e.z[1], class: e.label.map(|l| l.code()), large })
        .collect())
}

fn cmd_plot(
    index: Option<&Path>,
    checkpoint_path: Option<&Path>,
    manifest: Option<&Path>,
    subset: SubsetArg,
    gen_index: Option<&Path>,
    out: &Path,
    title: &str,
) -> Result<()> {
    let (clusters, mut points) = match (index, checkpoint_path, manifest) {
        (Some(index_path), None, None) => {
            let index = load_index(index_path)?;
            let points = index_points(&index, false)?;
            (index.cfg, points)
        }
        (None, Some(ckpt), Some(manifest)) => {
            let (model, clusters, fingerprint) = load_model_with_clusters(ckpt)?;
            if model.config.latent_dims != 2 {
                return Err(Error::config(format!(
                    "plotting supports a 2-D latent space, this model has {} dims",
                    model.config.latent_dims
                )));
            }
            let dataset = load_dataset(manifest)?;
            let samples = subset_of(&dataset, subset);
            let built = build_index(&model, samples, &clusters, "plot", fingerprint)?;
            let points = index_points(&built, false)?;
            (clusters, points)
        }
        _ => {
            return Err(Error::contract(
                "plot needs either --index or both --checkpoint and --manifest",
            ))
        }
    };
    if let Some(gen_path) = gen_index {
        let gen = load_index(gen_path)?;
        points.extend(index_points(&gen, true)?);
    }
    let rendered = svg::render_scatter(&points, &clusters, title);
    fs::write(out, rendered)?;
    eprintln!("plot written to {}", out.display());
    println!("{}", serde_json::json!({ "plot": out, "points": points.len() }));
    Ok(())
}
