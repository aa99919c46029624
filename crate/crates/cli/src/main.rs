//! Command-line front end: train codecs, compress and decompress images,
//! benchmark decoders, and drive the random-mask laboratory.

mod config;
mod image;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ckbd::bench::{bench_decode, emit_report, speedup, ReportFormat};
use ckbd::bench::{REFERENCE_PARALLEL_MS, REFERENCE_SERIAL_MS};
use ckbd::codec::{
    decode_image, encode_image, BitstreamContainer, CodecError, ContextKind, ModelConfig,
    ModelWeights,
};
use ckbd::data::{synthetic_corpus, Corpus};
use ckbd::masklab;
use ckbd::rng::SplitMix64;
use ckbd::tensor::Tensor;
use ckbd::trainer::{psnr, run_training, TrainerError};

use config::parse_config;
use image::{read_pnm, write_pnm, ImageBuffer};

const EXIT_USAGE: u8 = 2;
const EXIT_INTEGRITY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

const USAGE: &str = "\
ckbd - learned image codec with a parallel checkerboard context model

usage:
  ckbd train <config> <out.ckwt> [--log <out.csv>]
  ckbd encode <in.pgm|ppm> <model.ckwt> <out.ckbd>
  ckbd decode <in.ckbd> <model.ckwt> <out.pgm|ppm>
  ckbd bench [--image <pgm>] [--width N] [--height N] [--seed N]
             [--n-channels N] [--latent-channels M] [--repeats N]
             [--warmup N] [--threads N] [--out <csv>] [--format csv|markdown]
  ckbd masklab train <config> <out.ckwt>
  ckbd masklab table1 <model.ckwt> [--eval-seed N] [--eval-count N] [--eval-dir <dir>] [--out <csv>]
  ckbd masklab sweep  <model.ckwt> [--eval-seed N] [--eval-count N] [--eval-dir <dir>] [--out <csv>]
  ckbd selftest

Every subcommand accepts --help. Config files are key = value lines; see
the repository README for the key list.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn run(args: &[String]) -> CmdResult {
    let Some(cmd) = args.first() else {
        println!("{USAGE}");
        return Err((EXIT_USAGE, "missing subcommand".into()));
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let rest = &args[1..];
    match cmd.as_str() {
        "train" => cmd_train(rest),
        "encode" => cmd_encode(rest),
        "decode" => cmd_decode(rest),
        "bench" => cmd_bench(rest),
        "masklab" => cmd_masklab(rest),
        "selftest" => cmd_selftest(rest),
        other => {
            println!("{USAGE}");
            Err((EXIT_USAGE, format!("unknown subcommand {other}")))
        }
    }
}

fn wants_help(args: &[String]) -> bool {
    args.iter().any(|a| a == "--help" || a == "-h")
}

fn usage_err(msg: impl Into<String>) -> (u8, String) {
    (EXIT_USAGE, msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> (u8, String) {
    (EXIT_USAGE, format!("{}: {e}", path.display()))
}

fn codec_exit(e: &CodecError) -> u8 {
    match e {
        CodecError::DigestMismatch { .. } | CodecError::Container { .. } | CodecError::Coder(_) => {
            EXIT_INTEGRITY
        }
        _ => EXIT_USAGE,
    }
}

fn load_weights(path: &Path) -> Result<ModelWeights, (u8, String)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    ModelWeights::from_bytes(&bytes)
        .map_err(|e| (EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<ImageBuffer, (u8, String)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    read_pnm(&bytes).map_err(|e| (EXIT_USAGE, format!("{}: {e}", path.display())))
}

/// Take `--flag value` pairs out of an argument list.
struct Flags {
    positional: Vec<String>,
    flags: Vec<(String, String)>,
}

fn parse_flags(args: &[String], known: &[&str]) -> Result<Flags, (u8, String)> {
    let mut positional = Vec::new();
    let mut flags = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if let Some(name) = a.strip_prefix("--") {
            if !known.contains(&name) {
                return Err(usage_err(format!("unknown flag --{name}")));
            }
            let value = it
                .next()
                .ok_or(usage_err(format!("--{name} needs a value")))?;
            flags.push((name.to_string(), value.clone()));
        } else {
            positional.push(a.clone());
        }
    }
    Ok(Flags { positional, flags })
}

impl Flags {
    fn get(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, (u8, String)> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage_err(format!("bad value for --{name}: {v}"))),
        }
    }
}

// ------------------------------------------------------------------- train

fn cmd_train(args: &[String]) -> CmdResult {
    if wants_help(args) {
        println!("usage: ckbd train <config> <out.ckwt> [--log <out.csv>]");
        return Ok(());
    }
    let f = parse_flags(args, &["log"])?;
    let [cfg_path, out_path] = f.positional.as_slice() else {
        return Err(usage_err("train needs <config> and <out.ckwt>"));
    };
    let text =
        std::fs::read_to_string(cfg_path).map_err(|e| io_err(Path::new(cfg_path), e))?;
    let run_cfg = parse_config(&text).map_err(|e| usage_err(format!("{cfg_path}: {e}")))?;
    let corpus = synthetic_corpus(run_cfg.corpus_seed, run_cfg.corpus_count, run_cfg.corpus_size);

    let mut log = String::from("step,loss,bpp,mse\n");
    let every = (run_cfg.train.steps / 100).max(1);
    let t0 = Instant::now();
    let weights = run_training(
        &run_cfg.train,
        &corpus,
        |_| None,
        |step, m| {
            if step % every == 0 || step + 1 == run_cfg.train.steps {
                log.push_str(&format!("{step},{:.6},{:.6},{:.8}\n", m.loss, m.bpp, m.mse));
                eprintln!(
                    "step {step}/{}: loss {:.4} bpp {:.4} mse {:.6}",
                    run_cfg.train.steps, m.loss, m.bpp, m.mse
                );
            }
        },
    )
    .map_err(train_err)?;
    std::fs::write(out_path, weights.to_bytes()).map_err(|e| io_err(Path::new(out_path), e))?;
    if let Some(log_path) = f.get("log") {
        std::fs::write(log_path, &log).map_err(|e| io_err(Path::new(log_path), e))?;
    }
    println!(
        "trained {} steps in {:.1}s -> {out_path} (digest {:016x})",
        run_cfg.train.steps,
        t0.elapsed().as_secs_f64(),
        weights.digest()
    );
    Ok(())
}

fn train_err(e: TrainerError) -> (u8, String) {
    match e {
        TrainerError::Diverged { .. } => (EXIT_DIVERGED, e.to_string()),
        TrainerError::Codec(c) => (codec_exit(&c), c.to_string()),
        other => (EXIT_USAGE, other.to_string()),
    }
}

// ------------------------------------------------------------ encode/decode

fn cmd_encode(args: &[String]) -> CmdResult {
    if wants_help(args) {
        println!("usage: ckbd encode <in.pgm|ppm> <model.ckwt> <out.ckbd>");
        return Ok(());
    }
    let f = parse_flags(args, &[])?;
    let [input, model, output] = f.positional.as_slice() else {
        return Err(usage_err("encode needs <input> <model> <output>"));
    };
    let img = load_image(Path::new(input))?;
    let weights = load_weights(Path::new(model))?;
    if img.channels != weights.config.image_channels {
        return Err(usage_err(format!(
            "model expects {} image channels, {input} has {}",
            weights.config.image_channels, img.channels
        )));
    }
    let x = img.to_tensor();
    let t0 = Instant::now();
    let enc = encode_image(&x, &weights).map_err(|e| (codec_exit(&e), e.to_string()))?;
    let dt = t0.elapsed().as_secs_f64();
    let bytes = enc.container.to_bytes();
    std::fs::write(output, &bytes).map_err(|e| io_err(Path::new(output), e))?;
    if enc.stats.saturated > 0 {
        eprintln!("warning: {} latents saturated to the symbol range", enc.stats.saturated);
    }
    let pixels = (img.width * img.height) as f64;
    println!(
        "encoded {input} ({}x{}) in {:.3}s",
        img.width, img.height, dt
    );
    println!(
        "bpp {:.4} (payload {:.4}, estimated entropy {:.4}), psnr {:.2} dB",
        bytes.len() as f64 * 8.0 / pixels,
        enc.container.payload_bits() as f64 / pixels,
        (enc.stats.bits_y_estimate + enc.stats.bits_z_estimate) / pixels,
        psnr(&x, &enc.x_hat)
    );
    Ok(())
}

fn cmd_decode(args: &[String]) -> CmdResult {
    if wants_help(args) {
        println!("usage: ckbd decode <in.ckbd> <model.ckwt> <out.pgm|ppm>");
        return Ok(());
    }
    let f = parse_flags(args, &[])?;
    let [input, model, output] = f.positional.as_slice() else {
        return Err(usage_err("decode needs <input> <model> <output>"));
    };
    let bytes = std::fs::read(input).map_err(|e| io_err(Path::new(input), e))?;
    let container = BitstreamContainer::from_bytes(&bytes)
        .map_err(|e| (EXIT_INTEGRITY, format!("{input}: {e}")))?;
    let weights = load_weights(Path::new(model))?;
    let out = decode_image(&container, &weights).map_err(|e| (codec_exit(&e), e.to_string()))?;
    let img = ImageBuffer::from_tensor(&out.x_hat).map_err(|e| (EXIT_USAGE, e))?;
    std::fs::write(output, write_pnm(&img)).map_err(|e| io_err(Path::new(output), e))?;
    let s = &out.stats;
    println!(
        "decoded {input} -> {output} ({}x{}) in {:.1} ms",
        img.width, img.height, s.total_ms
    );
    println!(
        "phases: hyper {:.1} ms, params {:.1} ms ({} passes), entropy {:.1} ms, synthesis {:.1} ms",
        s.hyper_synthesis_ms, s.parameter_calculation_ms, s.gep_passes, s.entropy_decode_ms,
        s.latent_synthesis_ms
    );
    Ok(())
}

// ------------------------------------------------------------------- bench

fn cmd_bench(args: &[String]) -> CmdResult {
    if wants_help(args) {
        println!(
            "usage: ckbd bench [--image <pgm>] [--width N] [--height N] [--seed N]\n\
             [--n-channels N] [--latent-channels M] [--repeats N] [--warmup N]\n\
             [--threads N] [--out <csv>] [--format csv|markdown]\n\
             Times serial vs checkerboard decoding of freshly initialized models\n\
             on one image (synthetic unless --image is given)."
        );
        return Ok(());
    }
    let f = parse_flags(
        args,
        &[
            "image", "width", "height", "seed", "n-channels", "latent-channels", "repeats",
            "warmup", "threads", "out", "format",
        ],
    )?;
    if !f.positional.is_empty() {
        return Err(usage_err(format!("unexpected argument {}", f.positional[0])));
    }
    let width: usize = f.parsed("width", 768)?;
    let height: usize = f.parsed("height", 512)?;
    let seed: u64 = f.parsed("seed", 7)?;
    let n_channels: usize = f.parsed("n-channels", 16)?;
    let latent_channels: usize = f.parsed("latent-channels", 96)?;
    let repeats: usize = f.parsed("repeats", 5)?;
    let warmup: usize = f.parsed("warmup", 2)?;
    let default_threads = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1);
    let threads: usize = f.parsed("threads", default_threads)?;

    let x = match f.get("image") {
        Some(path) => {
            let img = load_image(Path::new(path))?;
            if img.channels != 1 {
                return Err(usage_err("bench expects a grayscale image"));
            }
            img.to_tensor()
        }
        None => {
            let mut rng = SplitMix64::new(seed);
            Tensor::from_vec(
                [1, 1, height, width],
                ckbd::data::synth_plane(&mut rng, height, width),
            )
            .expect("shape matches")
        }
    };

    let mut rows = Vec::new();
    let mut timing_of = |kind: ContextKind, label: &str| -> CmdResult {
        let cfg = ModelConfig {
            n_channels,
            latent_channels,
            context_kind: kind,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&cfg, seed).map_err(|e| (codec_exit(&e), e.to_string()))?;
        let t = bench_decode(&w, &x, repeats, warmup, threads)
            .map_err(|e| (codec_exit(&e), e.to_string()))?;
        println!(
            "{label:>13}: total {:.1} ms | hyper {:.1} | params {:.1} ({:.0}%, {} passes) | entropy {:.1} | synthesis {:.1} | {:.3} Mpps",
            t.total_ms,
            t.hyper_synthesis_ms,
            t.parameter_calculation_ms,
            t.percent_param * 100.0,
            t.gep_passes,
            t.entropy_decode_ms,
            t.latent_synthesis_ms,
            t.mpps()
        );
        rows.push((label.to_string(), t));
        Ok(())
    };
    timing_of(ContextKind::None, "no context")?;
    timing_of(ContextKind::Serial, "serial")?;
    timing_of(ContextKind::Checkerboard, "checkerboard")?;

    let ratio = speedup(&rows[1].1, &rows[2].1);
    println!(
        "serial -> checkerboard speedup: {:.2}x (reference full-scale GPU, Kodak: {:.2} ms -> {:.2} ms, {:.1}x)",
        ratio,
        REFERENCE_SERIAL_MS,
        REFERENCE_PARALLEL_MS,
        REFERENCE_SERIAL_MS / REFERENCE_PARALLEL_MS
    );

    let format = match f.get("format").unwrap_or("csv") {
        "csv" => ReportFormat::Csv,
        "markdown" => ReportFormat::Markdown,
        other => return Err(usage_err(format!("unknown format {other}"))),
    };
    let report = emit_report(&rows, format);
    match f.get("out") {
        Some(path) => std::fs::write(path, report).map_err(|e| io_err(Path::new(path), e))?,
        None => print!("{report}"),
    }
    Ok(())
}

// ----------------------------------------------------------------- masklab

fn cmd_masklab(args: &[String]) -> CmdResult {
    if wants_help(args) || args.is_empty() {
        println!(
            "usage: ckbd masklab train <config> <out.ckwt>\n\
             ckbd masklab table1 <model.ckwt> [--eval-seed N] [--eval-count N] [--eval-dir <dir>] [--out <csv>]\n\
             ckbd masklab sweep  <model.ckwt> [--eval-seed N] [--eval-count N] [--eval-dir <dir>] [--out <csv>]"
        );
        return if args.is_empty() {
            Err(usage_err("masklab needs a subcommand"))
        } else {
            Ok(())
        };
    }
    let sub = args[0].as_str();
    let rest = &args[1..];
    match sub {
        "train" => {
            let f = parse_flags(rest, &[])?;
            let [cfg_path, out_path] = f.positional.as_slice() else {
                return Err(usage_err("masklab train needs <config> and <out.ckwt>"));
            };
            let text = std::fs::read_to_string(cfg_path)
                .map_err(|e| io_err(Path::new(cfg_path), e))?;
            let run_cfg =
                parse_config(&text).map_err(|e| usage_err(format!("{cfg_path}: {e}")))?;
            let corpus =
                synthetic_corpus(run_cfg.corpus_seed, run_cfg.corpus_count, run_cfg.corpus_size);
            let every = (run_cfg.train.steps / 100).max(1);
            let weights = masklab::train_random_mask_model(&run_cfg.train, &corpus, |step, m| {
                if step % every == 0 {
                    eprintln!(
                        "step {step}/{}: loss {:.4} bpp {:.4}",
                        run_cfg.train.steps, m.loss, m.bpp
                    );
                }
            })
            .map_err(train_err)?;
            std::fs::write(out_path, weights.to_bytes())
                .map_err(|e| io_err(Path::new(out_path), e))?;
            println!("random-mask supernet -> {out_path}");
            Ok(())
        }
        "table1" | "sweep" => {
            let f = parse_flags(rest, &["eval-seed", "eval-count", "eval-dir", "out"])?;
            let [model] = f.positional.as_slice() else {
                return Err(usage_err(format!("masklab {sub} needs <model.ckwt>")));
            };
            let weights = load_weights(Path::new(model))?;
            let (corpus, dataset_id) = eval_corpus(&f)?;
            let reports = if sub == "table1" {
                masklab::table1_protocol(&weights, &corpus, &dataset_id)
            } else {
                masklab::single_reference_sweep(&weights, &corpus, &dataset_id)
            }
            .map_err(train_err)?;
            let csv = masklab::reports_to_csv(&reports);
            match f.get("out") {
                Some(path) => {
                    std::fs::write(path, &csv).map_err(|e| io_err(Path::new(path), e))?
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        other => Err(usage_err(format!("unknown masklab subcommand {other}"))),
    }
}

fn eval_corpus(f: &Flags) -> Result<(Corpus, String), (u8, String)> {
    if let Some(dir) = f.get("eval-dir") {
        let mut images = Vec::new();
        let mut size = None;
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| io_err(Path::new(dir), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()),
                    Some("pgm") | Some("ppm")
                )
            })
            .collect();
        entries.sort();
        for path in entries {
            let img = load_image(&path)?;
            if img.channels != 1 || img.width != img.height {
                return Err(usage_err(format!(
                    "{}: evaluation images must be square grayscale",
                    path.display()
                )));
            }
            match size {
                None => size = Some(img.width),
                Some(s) if s != img.width => {
                    return Err(usage_err("evaluation images must share one size"))
                }
                _ => {}
            }
            images.push(img.to_tensor());
        }
        let Some(size) = size else {
            return Err(usage_err(format!("{dir}: no .pgm/.ppm files found")));
        };
        Ok((Corpus { images, size }, dir.to_string()))
    } else {
        let seed: u64 = f.parsed("eval-seed", 99)?;
        let count: usize = f.parsed("eval-count", 12)?;
        Ok((synthetic_corpus(seed, count, 64), format!("synthetic(seed={seed})")))
    }
}

// ---------------------------------------------------------------- selftest

fn cmd_selftest(args: &[String]) -> CmdResult {
    if wants_help(args) {
        println!("usage: ckbd selftest\nRuns a quick internal consistency battery.");
        return Ok(());
    }
    let mut rng = SplitMix64::new(1);
    let image = Tensor::from_vec([1, 1, 64, 64], ckbd::data::synth_plane(&mut rng, 64, 64))
        .expect("shape matches");
    for kind in [ContextKind::Checkerboard, ContextKind::Serial, ContextKind::None] {
        let cfg = ModelConfig {
            n_channels: 8,
            latent_channels: 6,
            context_kind: kind,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&cfg, 3).map_err(|e| (codec_exit(&e), e.to_string()))?;
        let enc = encode_image(&image, &w).map_err(|e| (codec_exit(&e), e.to_string()))?;
        let dec = decode_image(&enc.container, &w).map_err(|e| (codec_exit(&e), e.to_string()))?;
        if dec.y_hat.data() != enc.y_hat.data() || dec.x_hat.data() != enc.x_hat.data() {
            return Err((
                EXIT_INTEGRITY,
                format!("selftest: {kind:?} round trip mismatch"),
            ));
        }
        println!("selftest {kind:?}: round trip ok ({} passes)", dec.stats.gep_passes);
    }
    println!("selftest: all checks passed");
    Ok(())
}
