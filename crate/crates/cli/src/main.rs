use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calibra::explain::{active_scales, fuse_scale_maps};
use calibra::fusion::combine;
use calibra::io::{write_atomic, Graymap};
use calibra::metrics::evaluate;
use calibra::pipeline::clean_pass;
use calibra::synthdata::dataset_io::{read_dataset, write_dataset};
use calibra::synthdata::{Class, Dataset, Partition};
use calibra::trainer::{final_checkpoint_path, train, RunState, TrainConfig};
use calibra::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calibra", version, about = "Semi-supervised lesion classification, segmentation and explanation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        labelled_fraction: f64,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
    },
    /// Train a model and evaluate it on the test partition.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value configuration; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// cam-loss, saliency, sharpen or multiscale; repeatable.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        weak_labels: bool,
        #[arg(long)]
        supervised_only: bool,
        /// Start from the small desk profile instead of the full one.
        #[arg(long)]
        desk: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export the explanation maps and pseudo-label of one image.
    Explain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        steps: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::Degenerate(_) | Error::Shape { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = init_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {err}");
        return ExitCode::from(exit_code(&err));
    }
    ExitCode::SUCCESS
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("CALIBRA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Usage(format!("CALIBRA_THREADS must be a thread count, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            out,
            seed,
            per_class,
            size,
            labelled_fraction,
            test_fraction,
        } => {
            let data = Dataset::generate(seed, per_class, size, labelled_fraction, test_fraction)?;
            write_dataset(&data, &out)?;
            summarize(&data);
            Ok(())
        }
        Command::Train {
            data,
            out,
            config,
            ablate,
            weak_labels,
            supervised_only,
            desk,
            resume,
        } => {
            let mut cfg = if desk { TrainConfig::desk() } else { TrainConfig::full() };
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                if desk {
                    cfg.apply_text(&text)?;
                } else {
                    cfg = TrainConfig::from_text(&text)?;
                }
            }
            for name in &ablate {
                cfg.ablate.apply(name)?;
            }
            cfg.weak_labels |= weak_labels;
            cfg.supervised_only |= supervised_only;
            cfg.validate()?;

            let data = read_dataset(&data)?;
            create_dir(&out)?;
            write_config(&out, &cfg)?;
            let state = resume.map(|p| RunState::load(&p)).transpose()?;
            let state = train(&data, &cfg, state, Some(&out))?;
            let report = evaluate(&state.net, &data, cfg.seg_threshold, cfg.multiscale(), &cfg.fingerprint())?;
            report.write_json(&out.join("metrics.json"))?;
            report.write_confusion_csv(&out.join("confusion.csv"))?;
            log::info!(
                "accuracy {:.4} dice {:.4} miou {:.4}",
                report.accuracy,
                report.dice,
                report.miou
            );
            Ok(())
        }
        Command::Eval { run, data, report } => {
            let (cfg, state) = load_run(&run)?;
            let data = read_dataset(&data)?;
            let r = evaluate(&state.net, &data, cfg.seg_threshold, cfg.multiscale(), &cfg.fingerprint())?;
            let dir = report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            create_dir(dir)?;
            r.write_json(&report)?;
            write_config(dir, &cfg)?;
            println!("{}", r.to_json().trim_end());
            Ok(())
        }
        Command::Explain { run, input, out, steps } => {
            let (cfg, state) = load_run(&run)?;
            let image = Graymap::read(&input)?;
            explain(&cfg, &state, &image, &input, &out, steps)
        }
    }
}

fn summarize(data: &Dataset) {
    for part in [Partition::Labelled, Partition::Unlabelled, Partition::Test] {
        let mut counts = [0usize; 3];
        for s in &data.samples {
            if data.manifest.partition_of(&s.id) == Some(part) {
                counts[s.class.index()] += 1;
            }
        }
        let cells: Vec<String> = Class::ALL.iter().map(|c| format!("{} {}", c.name(), counts[c.index()])).collect();
        println!("{part:?}: {}", cells.join(", "));
    }
}

fn load_run(run: &Path) -> Result<(TrainConfig, RunState)> {
    let cfg = TrainConfig::read(&run.join("config.txt"))?;
    let state = RunState::load(&final_checkpoint_path(run))?;
    Ok((cfg, state))
}

/// Round-trip a `[0,1]` map through 8 bits, as it will be stored.
fn quantize(values: &[f64], size: usize) -> Vec<f64> {
    Graymap::from_unit_u8(values, size, size).to_unit()
}

fn explain(cfg: &TrainConfig, state: &RunState, image: &Graymap, input: &Path, out: &Path, steps: usize) -> Result<()> {
    if image.width != image.height {
        return Err(Error::format(input, format!("expected a square image, got {}x{}", image.width, image.height)));
    }
    let size = image.width;
    let multiscale = cfg.multiscale();
    let pass = clean_pass::<f64>(&state.net, &image.to_unit(), size, None, Some(steps), multiscale)?;
    create_dir(out)?;
    write_config(out, cfg)?;
    let write = |name: &str, values: &[f64]| Graymap::from_unit_u8(values, size, size).write(&out.join(name));

    for (class, per_scale) in pass.cams.iter().enumerate() {
        let chosen: Vec<_> = active_scales(multiscale).iter().map(|&s| &per_scale[s]).collect();
        let name = Class::from_index(class).expect("class index").name();
        write(&format!("cam_{name}.pgm"), &fuse_scale_maps(&chosen, size, size)?)?;
    }
    for (s, caam) in pass.caams.iter().enumerate() {
        write(&format!("caam_conv{}.pgm", s + 3), &fuse_scale_maps(&[caam], size, size)?)?;
    }
    let c = quantize(&pass.caaml, size);
    let s = quantize(&pass.saliency_map, size);
    let p = quantize(&pass.decoder, size);
    write("caaml.pgm", &c)?;
    write("saliency.pgm", &s)?;
    write("decoder.pgm", &p)?;
    let pseudo = combine(&c, &s, &p, size, size, &cfg.fusion())?;
    write("pseudo.pgm", &pseudo.foreground())?;
    let class = Class::from_index(pass.class_index).expect("class index");
    println!(
        "predicted {} (np {:.4}, cap {:.4}, covid {:.4})",
        class.name(),
        pass.probs[0],
        pass.probs[1],
        pass.probs[2]
    );
    Ok(())
}
