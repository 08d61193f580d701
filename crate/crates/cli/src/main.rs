//! `nnrw`: reversible watermarking and integrity sealing of conv weights.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nnrw::bits::{bits_to_bytes, bytes_to_bits};
use nnrw::protocol::{capacity, default_channels, detect_marked_layers, plan_layer, resolve_layer};
use nnrw::scorer::{calibration_inputs, channel_scores, rank_channels, ChannelRank};
use nnrw::{
    embed_watermark, extract_watermark, seal, verify, EmbedConfig, LayerConfig, ModelContainer,
    PairPosition, ProtocolError, Verdict,
};

#[derive(Parser)]
#[command(name = "nnrw", version, about = "Reversible watermarking of CNN conv weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List tensors, conv layers, digest and marked layers.
    Inspect(Input),
    /// Channel entropies from calibration inputs, as CSV.
    Score(Score),
    /// Capacity at every pair position for one layer, as CSV.
    Plan(Embedding),
    /// Embed a message.
    Embed(Embedding),
    /// Recover the message and the original model.
    Extract(Extract),
    /// Embed the model's own SHA-256 into each configured layer.
    Seal(Embedding),
    /// Check a sealed model.
    Verify(Verify),
}

#[derive(Args)]
struct Input {
    #[arg(short, long)]
    input: PathBuf,
}

#[derive(Args)]
struct Score {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, allow_hyphen_values = true, default_value_t = -1)]
    layer: i64,
    #[arg(long)]
    calib: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Embedding {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Manifest index, negative from the end. Repeatable; default -1.
    #[arg(long, allow_hyphen_values = true)]
    layer: Vec<i64>,
    /// Channels used, paired with --layer in order. Default: half of d.
    #[arg(long)]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    offset: i32,
    /// Pair position 2..=5 or `auto`.
    #[arg(long, default_value = "auto")]
    digit_pos: String,
    /// Calibration container; without it channels rank by weight spread.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Hex string, or @FILE for raw bytes.
    #[arg(long)]
    message: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Extract {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Layers to read; default every marked layer.
    #[arg(long, allow_hyphen_values = true)]
    layer: Vec<i64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Verify {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    layer: Vec<i64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load(path: &Path) -> Result<ModelContainer> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ModelContainer::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn save(model: &ModelContainer, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()?).with_context(|| format!("writing {}", path.display()))
}

fn emit(report: Option<&Path>, text: &str) -> Result<()> {
    match report {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

fn parse_message(arg: &str) -> Result<Vec<bool>> {
    let bytes = match arg.strip_prefix('@') {
        Some(path) => fs::read(path).with_context(|| format!("reading {path}"))?,
        None => hex::decode(arg).context("message is not valid hex")?,
    };
    Ok(bytes_to_bits(&bytes))
}

fn parse_position(arg: &str) -> Result<PairPosition> {
    if arg == "auto" {
        return Ok(PairPosition::Auto);
    }
    match arg.parse::<u8>() {
        Ok(c) if (2..=5).contains(&c) => Ok(PairPosition::Fixed(c)),
        _ => bail!("--digit-pos must be 2..=5 or auto, got `{arg}`"),
    }
}

fn resolve_all(model: &ModelContainer, layers: &[i64]) -> Result<Vec<usize>> {
    layers
        .iter()
        .map(|&l| resolve_layer(model, l).map_err(Into::into))
        .collect()
}

fn rank_from_calib(model: &ModelContainer, calib: &ModelContainer, layer: usize) -> Result<ChannelRank> {
    let spec = &model.manifest[layer];
    let t = &model.tensors[spec.weight_tensor];
    let dims = t.conv_dims().context("layer is not a conv tensor")?;
    let inputs = calibration_inputs(calib, layer)?;
    let scores = channel_scores(&t.data, dims, spec.stride, spec.padding, &inputs)?;
    Ok(rank_channels(&scores))
}

fn build_config(model: &ModelContainer, a: &Embedding) -> Result<EmbedConfig> {
    let raw = if a.layer.is_empty() { vec![-1] } else { a.layer.clone() };
    if a.channels.len() > raw.len() {
        bail!("more --channels than --layer values");
    }
    let calib = a.calib.as_deref().map(load).transpose()?;
    let layers = resolve_all(model, &raw)?
        .into_iter()
        .enumerate()
        .map(|(k, layer)| {
            let d = model.tensors[model.manifest[layer].weight_tensor].shape[0];
            let order = match &calib {
                Some(c) => Some(rank_from_calib(model, c, layer)?.order),
                None => None,
            };
            Ok(LayerConfig {
                layer,
                channels: a.channels.get(k).copied().unwrap_or_else(|| default_channels(d)),
                order,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = EmbedConfig::new(layers);
    config.pair_position = parse_position(&a.digit_pos)?;
    config.offset = a.offset;
    Ok(config)
}

fn inspect(a: &Input) -> Result<ExitCode> {
    let m = load(&a.input)?;
    let mut out = String::new();
    for t in &m.tensors {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        out += &format!("tensor {} [{}]\n", t.name, shape.join("x"));
    }
    for (i, spec) in m.manifest.iter().enumerate() {
        out += &format!(
            "layer {i} {} stride={} padding={}\n",
            m.tensors[spec.weight_tensor].name, spec.stride, spec.padding
        );
    }
    out += &format!("digest {}\n", m.digest()?);
    let marked: Vec<String> = detect_marked_layers(&m).iter().map(usize::to_string).collect();
    out += &format!(
        "marked {}\n",
        if marked.is_empty() { "-".to_owned() } else { marked.join(",") }
    );
    emit(None, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn score(a: &Score) -> Result<ExitCode> {
    let m = load(&a.input)?;
    let layer = resolve_layer(&m, a.layer)?;
    let rank = rank_from_calib(&m, &load(&a.calib)?, layer)?;
    let mut position = vec![0; rank.order.len()];
    for (r, &ch) in rank.order.iter().enumerate() {
        position[ch] = r;
    }
    let mut csv = String::from("channel,m,entropy_bits,rank\n");
    for (ch, r) in position.iter().enumerate() {
        csv += &format!("{ch},{},{:.12},{r}\n", rank.bin_counts[ch], rank.entropies[ch]);
    }
    emit(a.report.as_deref(), &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn plan(a: &Embedding) -> Result<ExitCode> {
    let m = load(&a.input)?;
    let config = build_config(&m, a)?;
    let mut csv = String::from(
        "layer,c,entropy_bits,usable,peak,valley,capacity,plan_bits,exclusions,message_capacity,chosen\n",
    );
    for lc in &config.layers {
        let t = &m.tensors[m.manifest[lc.layer].weight_tensor];
        let dims = t.conv_dims().context("layer is not a conv tensor")?;
        let order = lc
            .order
            .clone()
            .unwrap_or_else(|| nnrw::protocol::magnitude_variance_order(&t.data, dims));
        let (chosen, reports) = plan_layer(
            &t.data,
            dims,
            lc.layer,
            &order,
            lc.channels,
            PairPosition::Auto,
            config.offset,
            usize::MAX,
        )?;
        let chosen_c = match config.pair_position {
            PairPosition::Fixed(c) => c,
            PairPosition::Auto => chosen.plan.c,
        };
        let mut rows: Vec<_> = reports.iter().collect();
        rows.sort_by_key(|r| r.entropy.c);
        for r in rows {
            let e = &r.entropy;
            let mark = u8::from(e.c == chosen_c);
            csv += &match &r.outcome {
                Ok(p) => format!(
                    "{},{},{:.12},{},{},{},{},{},{},{},{mark}\n",
                    lc.layer,
                    e.c,
                    e.entropy_bits,
                    e.usable,
                    p.peak,
                    p.valley,
                    p.capacity,
                    p.plan_bits,
                    p.exclusions,
                    p.message_capacity
                ),
                Err(_) => format!(
                    "{},{},{:.12},{},,,0,,,0,{mark}\n",
                    lc.layer, e.c, e.entropy_bits, e.usable
                ),
            };
        }
    }
    emit(a.report.as_deref(), &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn embed(a: &Embedding) -> Result<ExitCode> {
    let output = a.output.as_deref().context("embed needs -o")?;
    let m = load(&a.input)?;
    let config = build_config(&m, a)?;
    let message = parse_message(a.message.as_deref().context("embed needs --message")?)?;
    let room = capacity(&m, &config)?;
    let marked = embed_watermark(&m, &message, &config)?;
    save(&marked, output)?;
    emit(
        a.report.as_deref(),
        &format!("embedded {} bits, capacity {room} bits\n", message.len()),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn extract(a: &Extract) -> Result<ExitCode> {
    let m = load(&a.input)?;
    let layers = resolve_all(&m, &a.layer)?;
    let (bits, restored) = match extract_watermark(&m, &layers) {
        Err(e @ ProtocolError::Tampered { .. }) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
        r => r?,
    };
    if let Some(out) = &a.output {
        save(&restored, out)?;
    }
    if bits.len() % 8 != 0 {
        eprintln!("note: {} message bits, zero-padded to whole bytes", bits.len());
    }
    emit(a.report.as_deref(), &format!("{}\n", hex::encode(bits_to_bytes(&bits))))?;
    Ok(ExitCode::SUCCESS)
}

fn do_seal(a: &Embedding) -> Result<ExitCode> {
    if a.message.is_some() {
        bail!("seal embeds the model digest; --message is not accepted");
    }
    let output = a.output.as_deref().context("seal needs -o")?;
    let m = load(&a.input)?;
    let config = build_config(&m, a)?;
    let sealed = seal(&m, &config)?;
    save(&sealed, output)?;
    let layers: Vec<String> = config.layers.iter().map(|l| l.layer.to_string()).collect();
    emit(
        a.report.as_deref(),
        &format!("sealed {} into layers {}\n", m.digest()?, layers.join(",")),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn do_verify(a: &Verify) -> Result<ExitCode> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = if a.layer.is_empty() {
        nnrw::verify_bytes(&bytes, None)
    } else {
        match ModelContainer::from_bytes(&bytes) {
            Ok(m) => {
                let layers = resolve_all(&m, &a.layer)?;
                verify(&m, Some(&layers))
            }
            Err(_) => nnrw::verify_bytes(&bytes, None),
        }
    };
    println!("{}", report.to_record());
    eprint!("{}", report.to_text());
    if let Some(p) = &a.report {
        fs::write(p, report.to_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(match report.verdict {
        Verdict::Intact => ExitCode::SUCCESS,
        Verdict::Tampered => ExitCode::from(2),
        Verdict::NotSealed => ExitCode::from(1),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Score(a) => score(a),
        Command::Plan(a) => plan(a),
        Command::Embed(a) => embed(a),
        Command::Extract(a) => extract(a),
        Command::Seal(a) => do_seal(a),
        Command::Verify(a) => do_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("NNRW_THREADS").ok().and_then(|v| v.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: NNRW_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
