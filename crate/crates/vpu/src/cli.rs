//! The `vpu` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use vpu_core::interact::{ProtocolConfig, ProtocolMode};
use vpu_core::model::ModelConfig;
use vpu_core::pue::{encode_prompt, EncoderConfig, Prompt};
use vpu_core::train::{evaluate, fit, gradient_check, ModelSegmenter, TrainState};

use crate::config::RunConfig;
use crate::data::{read_dataset, write_dataset, Split};
use crate::error::{AppError, Result};
use crate::service::{AppState, ServedModel, ServiceConfig};
use crate::{checkpoint, pngio, report};

#[derive(Debug, Parser)]
#[command(name = "vpu", version, about = "Unified-prompt interactive segmentation: data, training, evaluation, serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Click,
    Mixed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Trains a model and writes a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV of per-step losses.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Runs simulated interactive sessions and reports NoC / NoF / IoU@k.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Click)]
        protocol: ProtocolArg,
        #[arg(long, value_delimiter = ',', default_value = "0.85,0.90")]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        max_interactions: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Directory for one JSON log per session.
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Encodes one prompt and writes the vector as CSV.
    Encode {
        #[arg(long)]
        image: PathBuf,
        /// `click:+:x,y`, `box:-:cx,cy,w,h` or `scribble:+:x1,y1;x2,y2;...`
        #[arg(long, allow_hyphen_values = true)]
        prompt: String,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss and parameter group.
    Gradcheck {
        /// Uses its `model` and `loss` blocks; defaults to the 16-pixel miniature model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Serves the `/v1` session API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        max_sessions: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_pairs(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| AppError::Invalid(format!("bad coordinate {v:?}"))))
        .collect()
}

/// Parses `kind:sign:coords`.
pub fn parse_prompt(spec: &str) -> Result<Prompt> {
    let mut parts = spec.splitn(3, ':');
    let (kind, sign, coords) = match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(s), Some(c)) => (k, s, c),
        _ => return Err(AppError::Invalid(format!("prompt {spec:?} is not kind:sign:coords"))),
    };
    let positive = match sign {
        "+" => true,
        "-" => false,
        _ => return Err(AppError::Invalid(format!("prompt sign must be + or -, got {sign:?}"))),
    };
    match kind {
        "click" => match parse_pairs(coords)?.as_slice() {
            &[x, y] => Ok(Prompt::click(x, y, positive)),
            _ => Err(AppError::Invalid("click needs x,y".into())),
        },
        "box" => match parse_pairs(coords)?.as_slice() {
            &[cx, cy, w, h] => Ok(Prompt::bbox(cx, cy, w, h, positive)),
            _ => Err(AppError::Invalid("box needs cx,cy,w,h".into())),
        },
        "scribble" => {
            let points = coords
                .split(';')
                .filter(|p| !p.trim().is_empty())
                .map(|p| match parse_pairs(p)?.as_slice() {
                    &[x, y] => Ok((x, y)),
                    _ => Err(AppError::Invalid(format!("scribble point {p:?} needs x,y"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prompt::scribble(points, positive))
        }
        _ => Err(AppError::Invalid(format!("unknown prompt kind {kind:?}"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, seed, size, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let t = Instant::now();
            let m = write_dataset(&out, count, seed, split, size)?;
            eprintln!("wrote {} instances to {} in {:.2}s", m.entries.len(), out.display(), t.elapsed().as_secs_f64());
        }
        Command::Train { data, out, config, epochs, lr, lambda, sigma, seed, log } => {
            let mut cfg = load_config(config.as_deref())?.train;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = lambda {
                cfg.loss.lambda = v;
            }
            if let Some(v) = sigma {
                cfg.encoder.sigma = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            let (_, samples) = read_dataset(&data)?;
            let mut state = TrainState::init(&cfg)?;
            let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
            let t = Instant::now();
            let mut csv = String::from("step,epoch,lr,nfl,dice,p2cl,total\n");
            fit(&mut state, &samples, &cfg, |i| {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    i.step, i.epoch, i.lr, i.loss.nfl, i.loss.dice, i.loss.p2cl, i.loss.total
                ));
                if i.step as usize % steps_per_epoch == 0 {
                    eprintln!("epoch {} step {} loss {:.4} ({:.0}s)", i.epoch, i.step, i.loss.total, t.elapsed().as_secs_f64());
                }
                true
            })?;
            checkpoint::save(&out, &state.params, &cfg.model)?;
            if let Some(p) = log {
                write_file(&p, csv)?;
            }
            eprintln!("trained {} steps in {:.1}s; checkpoint {}", state.step, t.elapsed().as_secs_f64(), out.display());
        }
        Command::Eval { checkpoint: ckpt, data, protocol, targets, max_interactions, out, curve, sessions, seed, config } => {
            let run = load_config(config.as_deref())?;
            let (params, model) = checkpoint::load(&ckpt)?;
            let proto = ProtocolConfig {
                targets,
                max_interactions,
                rng_seed: seed,
                mode: match protocol {
                    ProtocolArg::Click => ProtocolMode::ClickOnly,
                    ProtocolArg::Mixed => ProtocolMode::Mixed,
                },
                ..run.protocol
            };
            proto.validate()?;
            let (_, samples) = read_dataset(&data)?;
            let seg = ModelSegmenter { params: &params, model: &model, encoder: &run.train.encoder };
            let (metrics, records) = evaluate(&seg, &samples, &proto)?;
            report::write_metrics(&out, &metrics)?;
            if let Some(p) = curve {
                report::write_curve(&p, &metrics)?;
            }
            if let Some(dir) = sessions {
                report::write_sessions(&dir, &records)?;
            }
            for t in &proto.targets {
                eprintln!("NoC@{t:.2} = {:.3}  NoF@{t:.2} = {}", metrics.noc_at(*t).unwrap_or(f64::NAN), metrics.nof_at(*t).unwrap_or(0));
            }
        }
        Command::Encode { image, prompt, sigma, seed, out } => {
            let bytes = fs::read(&image).map_err(|e| AppError::io(&image, e))?;
            let img = pngio::decode_image(&bytes)?;
            let p = parse_prompt(&prompt)?;
            p.validate(img.width(), img.height())?;
            let cfg = EncoderConfig { sigma, ..EncoderConfig::default() };
            let v = encode_prompt(&img, &p, &cfg, seed)?;
            let mut csv = String::from("component,index,value\n");
            for (name, values) in [("q_h", &v.q_h[..]), ("q_v", &v.q_v[..]), ("q_b", &v.q_b[..])] {
                for (i, x) in values.iter().enumerate() {
                    csv.push_str(&format!("{name},{i},{x}\n"));
                }
            }
            write_file(&out, csv)?;
        }
        Command::Gradcheck { config, seed } => {
            let (model, loss) = match config {
                Some(p) => {
                    let c = RunConfig::load(&p)?;
                    (c.train.model, c.train.loss)
                }
                None => (ModelConfig::miniature(), Default::default()),
            };
            let t = Instant::now();
            let r = gradient_check(&model, &loss, seed, 1e-4)?;
            for (name, e) in &r.groups {
                println!("{name:<28} {e:.3e}");
            }
            let worst = r.max_error();
            println!("max relative error {worst:.3e} over {} groups ({:.1}s)", r.groups.len(), t.elapsed().as_secs_f64());
            if worst > 1e-3 {
                return Err(vpu_core::Error::Numeric(format!("gradient check failed: max relative error {worst:.3e}")).into());
            }
        }
        Command::Serve { checkpoint: ckpt, port, host, static_dir, max_sessions, config } => {
            let run = load_config(config.as_deref())?;
            let (params, model) = checkpoint::load(&ckpt)?;
            let state = AppState::new(
                ServedModel { params, model, encoder: run.train.encoder, protocol: run.protocol },
                ServiceConfig { max_sessions, static_dir },
            );
            let addr: std::net::SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| AppError::Invalid(format!("address: {e}")))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::io("tokio runtime", e))?;
            rt.block_on(crate::service::serve(state, addr)).map_err(|e| AppError::io(addr.to_string(), e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vpu_core::pue::Geometry;

    #[test]
    fn prompt_specs() {
        assert_eq!(parse_prompt("click:+:12,30").unwrap(), Prompt::click(12, 30, true));
        assert_eq!(parse_prompt("box:-:5,6,7,8").unwrap(), Prompt::bbox(5, 6, 7, 8, false));
        let s = parse_prompt("scribble:+:1,2;3,4;").unwrap();
        assert_eq!(s.geometry, Geometry::Scribble { points: vec![(1, 2), (3, 4)] });
        for bad in ["click:+:1", "tap:+:1,2", "click:*:1,2", "click", "box:+:1,2,3", "click:+:a,b"] {
            assert!(matches!(parse_prompt(bad), Err(AppError::Invalid(_))), "{bad}");
        }
    }
}
