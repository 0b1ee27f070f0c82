mod config;

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmseq::convpad::{plan_conv_padding, verify_isolation_with_kernel};
use mmseq::example::{parse_manifest, MultimodalExample};
use mmseq::geometry::{resize_to_patch_grid, resolution_cap_at, vision_token_count, ResolutionCap};
use mmseq::grounding::{self, BoundingBox, PointSet};
use mmseq::mask::{ascii_preview, compile_block_mask, sample_masking_decisions, to_pgm};
use mmseq::packer::{pack, packing_report, PackedSequence};
use mmseq::toy::{Sequence, ToyModel};
use mmseq::verify::{self, render_examples, VerifyOptions};
use mmseq::{ImageSpec, Vocab};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "mmseq", version, about = "Packing, masking and padding tools for multimodal training sequences")]
struct Cli {
    #[command(flatten)]
    flags: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack manifest examples and print the utilization report.
    Pack,
    /// Print the compiled block mask of one packed sequence.
    Mask {
        /// Packed sequence index.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Write the dense mask as a binary PGM.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Also print a `#`/`.` preview to stderr.
        #[arg(long)]
        ascii: bool,
    },
    /// Print the convolution padding plan of every packed sequence.
    Convpad,
    /// Resize an image onto the token grid.
    Geometry {
        #[arg(long)]
        height: u32,
        #[arg(long)]
        width: u32,
        /// Use the cap of the ramp schedule at this training progress in [0, 1].
        #[arg(long)]
        progress: Option<f64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Forward the toy model over packed manifest sequences and print checksums.
    ToyForward {
        /// Run in single precision.
        #[arg(long)]
        f32: bool,
    },
    /// Parse, render or convert grounding annotations, one per stdin line.
    Grounding {
        #[arg(value_enum)]
        action: GroundingAction,
        #[arg(long, value_enum)]
        format: GroundingFormat,
    },
    /// Run the full verification suite; exit 1 on any failed check.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroundingAction {
    Parse,
    Render,
    Convert,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroundingFormat {
    Xml,
    Point,
    Box,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_manifest(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<MultimodalExample>> {
    let path = cfg.manifest.as_ref().ok_or_else(|| anyhow!("--manifest is required"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let examples = parse_manifest(&text, vocab, cfg.seed)?;
    if examples.is_empty() {
        bail!("manifest {} holds no examples", path.display());
    }
    Ok(examples)
}

fn packed(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<PackedSequence>> {
    let examples = load_manifest(cfg, vocab)?;
    let layouts = render_examples(&examples, vocab, ResolutionCap::mp(cfg.cap_mp))?;
    Ok(pack(&layouts, cfg.capacity)?)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let data_vocab = Vocab::default();
    match cli.command {
        Command::Pack => {
            out.write_all(packing_report(&packed(&cfg, &data_vocab)?).as_bytes())?;
        }
        Command::Mask { sequence, render, ascii } => {
            let bins = packed(&cfg, &data_vocab)?;
            let seq = bins.get(sequence).ok_or_else(|| anyhow!("sequence {sequence} out of range ({} packed)", bins.len()))?;
            let layout = seq.flatten();
            let dec = sample_masking_decisions(&layout, cfg.seed, cfg.probs());
            let spec = compile_block_mask(&layout, &dec);
            out.write_all(spec.blocks_jsonl().as_bytes())?;
            if render.is_some() || ascii {
                let dense = spec.to_dense();
                if let Some(path) = render {
                    std::fs::write(&path, to_pgm(&dense, layout.len())).with_context(|| format!("writing {}", path.display()))?;
                }
                if ascii {
                    eprint!("{}", ascii_preview(&dense, layout.len()));
                }
            }
        }
        Command::Convpad => {
            for (i, seq) in packed(&cfg, &data_vocab)?.iter().enumerate() {
                let layout = seq.flatten();
                let dec = sample_masking_decisions(&layout, cfg.seed, cfg.probs());
                let plan = plan_conv_padding(&layout, &dec, cfg.kernel);
                let violations = verify_isolation_with_kernel(&plan, &layout, &dec, cfg.kernel);
                let line = json!({
                    "sequence": i,
                    "kernel": cfg.kernel,
                    "tokens": layout.len(),
                    "slots": plan.slots.len(),
                    "overhead": plan.overhead(layout.len()),
                    "violations": violations.len(),
                    "plan": plan.to_compact_string(),
                });
                writeln!(out, "{line}")?;
            }
        }
        Command::Geometry { height, width, progress } => {
            let cap = match progress {
                Some(p) if (0.0..=1.0).contains(&p) => resolution_cap_at(p),
                Some(p) => bail!("progress must lie in [0, 1], got {p}"),
                None => ResolutionCap::mp(cfg.cap_mp),
            };
            let grid = resize_to_patch_grid(&ImageSpec::new(height, width, 0), cap)?;
            let line = json!({
                "input": [height, width],
                "cap_mp": cap.megapixels,
                "resized": [grid.height_px(), grid.width_px()],
                "grid": [grid.rows, grid.cols],
                "vision_tokens": vision_token_count(&grid),
            });
            writeln!(out, "{line}")?;
        }
        Command::Gradcheck { eps } => {
            let toy = match cfg.toy_config {
                Some(_) => mmseq::toy::ToyConfig { seed: cfg.seed, ..cfg.toy.clone() },
                None => verify::gradcheck_config(cfg.seed),
            };
            let (_, outcome) = verify::run_gradcheck(&toy, cfg.seed, eps, cfg.exec())?;
            for (name, g) in &outcome.groups {
                writeln!(out, "{}", json!({ "group": name, "params": g.params, "max_rel_error": g.max_rel_error, "max_abs_error": g.max_abs_error }))?;
            }
            writeln!(out, "{}", json!({ "summary": { "eps": eps, "loss": outcome.loss, "max_rel_error": outcome.max_rel_error() } }))?;
        }
        Command::ToyForward { f32 } => {
            let vocab = cfg.toy.vocab();
            let examples = load_manifest(&cfg, &vocab)?;
            let layouts = render_examples(&examples, &vocab, ResolutionCap::mp(cfg.cap_mp))?;
            let model = ToyModel::<f64>::new(mmseq::toy::ToyConfig { seed: cfg.seed, ..cfg.toy.clone() })?;
            for (i, bin) in pack(&layouts, cfg.capacity)?.iter().enumerate() {
                let layout = bin.flatten();
                let dec = sample_masking_decisions(&layout, cfg.seed, cfg.probs());
                let seq = Sequence::prepare(layout, &dec, cfg.kernel);
                let logits: Vec<f64> = if f32 {
                    let m = ToyModel { cfg: model.cfg.clone(), params: model.params.cast::<f32>() };
                    m.forward(&seq)?.logits.data.iter().map(|&v| f64::from(v)).collect()
                } else {
                    model.forward(&seq)?.logits.data
                };
                writeln!(out, "{}", json!({ "sequence": i, "tokens": seq.layout.len(), "logit_sum": logits.iter().sum::<f64>(), "checksum": checksum(&logits) }))?;
            }
        }
        Command::Grounding { action, format } => {
            for line in std::io::stdin().lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                writeln!(out, "{}", grounding_line(action, format, &line)?)?;
            }
        }
        Command::Verify => return verify_cmd(&cfg, &mut out),
    }
    Ok(true)
}

/// FNV-1a over the IEEE bit patterns, for regression pinning.
fn checksum(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn grounding_line(action: GroundingAction, format: GroundingFormat, line: &str) -> Result<String> {
    use GroundingAction::*;
    use GroundingFormat::*;
    Ok(match (action, format) {
        (Parse, Xml) => serde_json::to_string(&grounding::parse_xml_points(line)?)?,
        (Parse, Point) => serde_json::to_string(&grounding::parse_point_tokens(line)?)?,
        (Parse, Box) => serde_json::to_string(&grounding::parse_box(line)?)?,
        (Render, Xml) => grounding::render_xml_points(&serde_json::from_str::<PointSet>(line)?)?,
        (Render, Point) => grounding::render_point_tokens(&serde_json::from_str::<PointSet>(line)?)?,
        (Render, Box) => grounding::render_box(&serde_json::from_str::<BoundingBox>(line)?)?,
        (Convert, Xml) => grounding::render_point_tokens(&grounding::convert_scale(&grounding::parse_xml_points(line)?))?,
        (Convert, Point) => {
            let mut ps = grounding::convert_scale(&grounding::parse_point_tokens(line)?);
            ps.label.get_or_insert_with(String::new);
            grounding::render_xml_points(&ps)?
        }
        (Convert, Box) => bail!("boxes exist only on the 0-1000 scale; nothing to convert"),
    })
}

fn verify_cmd(cfg: &RunConfig, out: &mut impl Write) -> Result<bool> {
    let examples = load_manifest(cfg, &cfg.toy.vocab())?;
    let opts = VerifyOptions {
        seed: cfg.seed,
        kernel: cfg.kernel,
        toy: cfg.toy.clone(),
        probs: cfg.probs(),
        capacity: cfg.capacity,
        exec: cfg.exec(),
    };
    let outcomes = verify::run_suite(&examples, &opts)?;
    let mut all = true;
    for o in &outcomes {
        all &= o.passed;
        writeln!(out, "{}", o.to_json_line())?;
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    writeln!(out, "{}", json!({ "summary": { "checks": outcomes.len(), "passed": passed, "ok": all } }))?;
    Ok(all)
}
