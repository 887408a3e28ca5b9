//! Command-line driver: run networks through the pipeline, verify them
//! against the sequential reference, print the analytical stats report, and
//! benchmark fused against unfused execution.
//!
//! All errors exit nonzero with a greppable category prefix
//! (`PARSE:`, `SHAPE:`, `IO:`, `CAPACITY:`, `RUN:`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};

use convpipe::io::{load_tensor_from_path, save_tensor_to_path};
use convpipe::layers::Accum;
use convpipe::model::{
    build_reference_topology, load_manifest, save_manifest, weighted_depth, NetName, NetworkGraph,
    Scale, WeightStore,
};
use convpipe::perf::{
    distribution_report, elided_interlayer_bytes, estimate_resources, total_cost,
    traffic_projection, write_cost_csv, Device, VectorConfig,
};
use convpipe::pipeline::{
    compare, mode_tolerance, run_network, run_network_unfused, run_reference, ChannelConfig,
    TrafficTotals,
};
use convpipe::{Error, Result, Shape3, Tensor};

#[derive(Parser)]
#[command(
    name = "convpipe",
    version,
    about = "Pipelined CNN inference with traffic accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a network and write the output tensor plus a traffic summary.
    Run(RunArgs),
    /// Run the pipeline against the sequential reference and report errors.
    Verify(VerifyArgs),
    /// Print cost, distribution, resource, and traffic reports.
    Stats(StatsArgs),
    /// Time fused-pipelined against unfused-sequential execution.
    Bench(BenchArgs),
    /// Write one of the built-in topologies as a manifest.
    Manifest(ManifestArgs),
}

#[derive(Args)]
struct WeightSource {
    /// Weight file to load.
    #[arg(long, conflicts_with = "seed")]
    weights: Option<PathBuf>,
    /// Seed for deterministic random weights instead of a file.
    #[arg(long)]
    seed: Option<u64>,
}

impl WeightSource {
    fn resolve(&self, graph: &NetworkGraph) -> Result<WeightStore> {
        match (&self.weights, self.seed) {
            (Some(path), None) => WeightStore::load_from_path(path, graph),
            (None, Some(seed)) => Ok(WeightStore::random(graph, seed)),
            (None, None) => Err(Error::Parse {
                line: 0,
                message: "give exactly one of --weights or --seed".into(),
            }),
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        }
    }

    fn input_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Args)]
struct PipelineArgs {
    /// In-flight tiles per channel before the producer blocks.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    depth: u64,
    /// Output rows per tile.
    #[arg(long = "tile-rows", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    tile_rows: u64,
    /// Accumulation order: seq (bit-exact) or tree (multiplier-adder tree).
    #[arg(long, default_value = "seq", value_parser = parse_accum)]
    accum: Accum,
}

impl PipelineArgs {
    fn channel_config(&self) -> Result<ChannelConfig> {
        ChannelConfig::new(self.depth as usize, self.tile_rows as usize)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Network manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    source: WeightSource,
    /// Input tensor file; omitted, a deterministic input is derived from the seed.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to write the output tensor.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Fuse conv cascades so interlayer tensors stay on channels (default).
    #[arg(long, action = ArgAction::SetTrue, overrides_with = "no_fused")]
    fused: bool,
    /// Run every layer as its own segment through global memory.
    #[arg(long = "no-fused", action = ArgAction::SetTrue, overrides_with = "fused")]
    no_fused: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    source: WeightSource,
    /// Input tensor file; omitted, derived from the seed.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Target device table entry: arria10 or stratix10.
    #[arg(long, default_value = "arria10")]
    device: String,
    /// Vectorization as output-channel x input-index lanes.
    #[arg(long, default_value = "32x16", value_parser = parse_lanes)]
    lanes: VectorConfig,
    /// Also write the per-layer cost table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    source: WeightSource,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Runs per mode; the median is reported.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    repeats: u64,
}

#[derive(Args)]
struct ManifestArgs {
    /// Topology: alexnet, vgg11, vgg16, vgg19, or resnet50.
    #[arg(long, value_parser = parse_net)]
    net: NetName,
    /// full (published dimensions) or desk (shrunk for verification).
    #[arg(long, default_value = "desk", value_parser = parse_scale)]
    scale: Scale,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_accum(s: &str) -> std::result::Result<Accum, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_lanes(s: &str) -> std::result::Result<VectorConfig, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_net(s: &str) -> std::result::Result<NetName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Deterministic input tensor for seed-driven runs, drawn from the same
/// generator family as the random weights but on a separate stream.
fn seeded_tensor(shape: Shape3, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1239_abcd_ef01);
    let data = (0..shape.elements())
        .map(|_| rng.random::<f32>() - 0.5)
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn load_graph(path: &Path) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    load_manifest(&text)
}

fn resolve_input(
    graph: &NetworkGraph,
    path: &Option<PathBuf>,
    fallback_seed: u64,
) -> Result<Tensor> {
    match path {
        Some(p) => {
            let t = load_tensor_from_path(p)?;
            if t.shape() != graph.input_shape() {
                return Err(Error::Shape(format!(
                    "input file has shape {}, network expects {}",
                    t.shape(),
                    graph.input_shape()
                )));
            }
            Ok(t)
        }
        None => Ok(seeded_tensor(graph.input_shape(), fallback_seed)),
    }
}

fn print_traffic(label: &str, t: &TrafficTotals) {
    println!("{label} bytes_read_global: {}", t.bytes_read_global);
    println!("{label} bytes_written_global: {}", t.bytes_written_global);
    println!("{label} bytes_moved_channels: {}", t.bytes_moved_channels);
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let graph = load_graph(&args.manifest)?;
    let store = args.source.resolve(&graph)?;
    let input = resolve_input(&graph, &args.input, args.source.input_seed())?;
    let cfg = args.pipeline.channel_config()?;
    let fused = !args.no_fused;

    let start = Instant::now();
    let (output, traffic) = if fused {
        run_network(&graph, &input, &store, &cfg, args.pipeline.accum)?
    } else {
        run_network_unfused(&graph, &input, &store, &cfg, args.pipeline.accum)?
    };
    let wall = start.elapsed();

    println!(
        "run: {} layers={} fused={} accum={:?} depth={} tile_rows={}",
        args.manifest.display(),
        graph.layers().len(),
        fused,
        args.pipeline.accum,
        cfg.depth(),
        cfg.tile_rows()
    );
    println!("output_shape: {}", output.shape());
    print_traffic("", &traffic);
    println!("wall_ms: {:.3}", wall.as_secs_f64() * 1e3);
    if let Some(path) = &args.output {
        save_tensor_to_path(&output, path)?;
        println!("output_file: {}", path.display());
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let graph = load_graph(&args.manifest)?;
    let store = args.source.resolve(&graph)?;
    let input = resolve_input(&graph, &args.input, args.source.input_seed())?;
    let cfg = args.pipeline.channel_config()?;

    let reference = run_reference(&graph, &input, &store)?;
    let (piped, _) = run_network(&graph, &input, &store, &cfg, args.pipeline.accum)?;
    let (max_abs, max_rel) = compare(&reference, &piped)?;
    let tolerance = mode_tolerance(args.pipeline.accum);
    let pass = max_rel <= tolerance;
    println!("max_abs_error: {max_abs:e}");
    println!("max_rel_error: {max_rel:e}");
    println!(
        "verify: {} (mode {:?}, tolerance {tolerance:e})",
        if pass { "PASS" } else { "FAIL" },
        args.pipeline.accum
    );
    Ok(pass)
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let graph = load_graph(&args.manifest)?;
    let total = total_cost(&graph);
    println!(
        "network: {} input {}",
        args.manifest.display(),
        graph.input_shape()
    );
    println!(
        "layers: {} (weighted {})",
        graph.layers().len(),
        weighted_depth(&graph)
    );
    println!("total_macs: {}", total.macs);
    println!("total_flops: {}", total.flops);
    println!("total_params: {}", total.params);

    let d = distribution_report(&graph);
    println!(
        "params share: conv {:.2}% | fc {:.2}% | other {:.2}%",
        d.conv_params_share * 100.0,
        d.fc_params_share * 100.0,
        d.other_params_share * 100.0
    );
    println!(
        "ops share: conv {:.2}% | fc {:.2}% | other {:.2}%",
        d.conv_ops_share * 100.0,
        d.fc_ops_share * 100.0,
        d.other_ops_share * 100.0
    );
    println!(
        "conv+fc share: params {:.4}% ops {:.4}%",
        d.conv_fc_params_share() * 100.0,
        d.conv_fc_ops_share() * 100.0
    );

    let device = args.device.parse::<Device>()?.model();
    println!(
        "device: {} dsp_total={} le={}K m20k={}MB clock={}GHz",
        device.name, device.dsp_total, device.logic_elements_k, device.m20k_mb, device.clock_ghz
    );
    let est = estimate_resources(&graph, &args.lanes, &device)?;
    println!(
        "lanes: {}x{} -> dsp_used {} of {}",
        args.lanes.lanes_oc, args.lanes.lanes_ic, est.dsp_used, est.dsp_total
    );
    println!("projected_gflops: {:.4}", est.projected_gflops);
    println!(
        "performance_density: {:.6} GFLOP/s per DSP",
        est.performance_density
    );
    println!("projected_time_ms: {:.4}", est.projected_time_s * 1e3);

    let fused = traffic_projection(&graph, true);
    let unfused = traffic_projection(&graph, false);
    println!(
        "traffic fused: read={} written={} total={}",
        fused.bytes_read_global,
        fused.bytes_written_global,
        fused.total()
    );
    println!(
        "traffic unfused: read={} written={} total={}",
        unfused.bytes_read_global,
        unfused.bytes_written_global,
        unfused.total()
    );
    println!(
        "fusion saves: {} bytes ({} interlayer bytes elided)",
        unfused.total() - fused.total(),
        elided_interlayer_bytes(&graph)
    );

    println!();
    println!(
        "{:<18} {:<12} {:>14} {:>14} {:>12} {:>12} {:>12}",
        "layer", "kind", "macs", "flops", "params", "in_bytes", "out_bytes"
    );
    for (name, kind, c) in convpipe::perf::graph_costs(&graph) {
        println!(
            "{:<18} {:<12} {:>14} {:>14} {:>12} {:>12} {:>12}",
            name, kind, c.macs, c.flops, c.params, c.in_bytes, c.out_bytes
        );
    }

    if let Some(path) = &args.csv {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
        write_cost_csv(&graph, std::io::BufWriter::new(file))?;
        println!();
        println!("csv: {}", path.display());
    }
    Ok(())
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let graph = load_graph(&args.manifest)?;
    let store = args.source.resolve(&graph)?;
    let input = seeded_tensor(graph.input_shape(), args.source.input_seed());
    let cfg = args.pipeline.channel_config()?;
    let repeats = args.repeats as usize;

    let mut fused_ms = Vec::with_capacity(repeats);
    let mut unfused_ms = Vec::with_capacity(repeats);
    let mut check: Option<Tensor> = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let (out, _) = run_network(&graph, &input, &store, &cfg, args.pipeline.accum)?;
        fused_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if let Some(prev) = &check {
            if !out.bitwise_eq(prev) {
                return Err(Error::Run("outputs differ across repeated runs".into()));
            }
        }
        check = Some(out);

        let t0 = Instant::now();
        let _ = run_network_unfused(&graph, &input, &store, &cfg, args.pipeline.accum)?;
        unfused_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    println!("bench: {} repeats={}", args.manifest.display(), repeats);
    for (i, (f, u)) in fused_ms.iter().zip(&unfused_ms).enumerate() {
        println!("repeat {}: fused_ms={:.3} unfused_ms={:.3}", i + 1, f, u);
    }
    let fm = median_ms(fused_ms);
    let um = median_ms(unfused_ms);
    println!("median fused_ms: {fm:.3}");
    println!("median unfused_ms: {um:.3}");
    println!("speedup: {:.3}x", um / fm);
    Ok(())
}

fn cmd_manifest(args: &ManifestArgs) -> Result<()> {
    let graph = build_reference_topology(args.net, args.scale);
    let text = save_manifest(&graph)?;
    match &args.output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => match cmd_verify(args) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Stats(args) => cmd_stats(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Manifest(args) => cmd_manifest(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}
