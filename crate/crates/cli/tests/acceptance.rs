//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`). Run with
//!
//! ```text
//! cargo test -p convpipe-cli --test acceptance -- --nocapture
//! ```

use std::process::Command;
use std::time::Instant;

use convpipe::layers::{conv2d_direct, conv2d_flat, Accum, ConvParams};
use convpipe::model::{
    build_reference_topology, load_manifest, NetName, NetworkGraph, Scale, WeightStore,
};
use convpipe::perf::{
    distribution_report, elided_interlayer_bytes, estimate_resources, total_cost,
    traffic_projection, Device, VectorConfig,
};
use convpipe::pipeline::{compare, run_network, run_network_unfused, run_reference, ChannelConfig};
use convpipe::tensor::ConvWeights;
use convpipe::{Shape3, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape3) -> Tensor {
    let data = (0..shape.elements())
        .map(|_| rng.random::<f32>() * 2.0 - 1.0)
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn pass(line: &str) {
    println!("[PASS] {line}");
}

/// Criterion 1: the flattened 1-D convolution is bit-identical to the direct
/// triple-sum form in sequential mode and within relative 1e-5 in tree mode,
/// over at least 1000 randomized cases, in under a minute.
#[test]
fn criterion_1_flattened_conv_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut cases = 0usize;
    while cases < 1000 {
        let k = [1usize, 3, 5, 7][rng.random_range(0..4)];
        let c = rng.random_range(1usize..=8);
        let f_o = rng.random_range(1usize..=8);
        let h = rng.random_range(1usize..=8);
        let w = rng.random_range(1usize..=8);
        let stride = rng.random_range(1usize..=2);
        let pad = rng.random_range(0usize..=3);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let input = random_tensor(&mut rng, Shape3::new(c, h, w).unwrap());
        let w4d = (0..f_o * c * k * k)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        let bias = (0..f_o).map(|_| rng.random::<f32>() - 0.5).collect();
        let weights = ConvWeights::new(f_o, c, k, w4d, bias).unwrap();
        let params = ConvParams::new(k, stride, pad).unwrap();

        let direct = conv2d_direct(&input, &weights, &params).unwrap();
        let flat = conv2d_flat(&input, &weights, &params, Accum::Sequential).unwrap();
        assert!(
            direct.bitwise_eq(&flat),
            "case {cases}: sequential flat conv differs from direct (C={c} K={k} s={stride} p={pad})"
        );
        let tree = conv2d_flat(&input, &weights, &params, Accum::Tree).unwrap();
        let (_, rel) = compare(&direct, &tree).unwrap();
        assert!(
            rel <= 1e-5,
            "case {cases}: tree error {rel} (C={c} K={k} s={stride} p={pad})"
        );
        cases += 1;
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "criterion 1 took {elapsed:?}, limit is 1 minute"
    );
    pass(&format!(
        "criterion 1: flattened conv == direct conv over {cases} cases \
         (seq bit-exact, tree <= 1e-5) in {elapsed:.2?}"
    ));
}

/// Criterion 2: the pipeline reproduces the sequential reference bit-exactly
/// on desk AlexNet and ResNet-50 for channel depths {1,4,64} and tile_rows
/// {1,3,full}, in under two minutes.
#[test]
fn criterion_2_pipeline_equals_reference() {
    let start = Instant::now();
    let full_rows = 1_000_000; // clamped to each segment's height
    for (net, seed) in [(NetName::Alexnet, 7u64), (NetName::Resnet50, 8u64)] {
        let graph = build_reference_topology(net, Scale::Desk);
        let store = WeightStore::random(&graph, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let input = random_tensor(&mut rng, graph.input_shape());
        let reference = run_reference(&graph, &input, &store).unwrap();
        for depth in [1usize, 4, 64] {
            for tile_rows in [1usize, 3, full_rows] {
                let cfg = ChannelConfig::new(depth, tile_rows).unwrap();
                let (out, _) =
                    run_network(&graph, &input, &store, &cfg, Accum::Sequential).unwrap();
                assert!(
                    out.bitwise_eq(&reference),
                    "{net:?} depth={depth} tile_rows={tile_rows}: pipeline != reference"
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "criterion 2 took {elapsed:?}, limit is 2 minutes"
    );
    pass(&format!(
        "criterion 2: pipeline == sequential reference bit-exactly on desk \
         alexnet/resnet50 across 9 channel configs each, in {elapsed:.2?}"
    ));
}

/// Criterion 3: on full VGG-11, conv+fc layers hold more than 99% of both
/// parameters and operations.
#[test]
fn criterion_3_vgg11_distribution() {
    let graph = build_reference_topology(NetName::Vgg11, Scale::Full);
    let d = distribution_report(&graph);
    assert!(
        d.conv_fc_params_share() > 0.99,
        "params share {}",
        d.conv_fc_params_share()
    );
    assert!(
        d.conv_fc_ops_share() > 0.99,
        "ops share {}",
        d.conv_fc_ops_share()
    );
    pass(&format!(
        "criterion 3: vgg11/full conv+fc shares: params {:.4}%, ops {:.4}%",
        d.conv_fc_params_share() * 100.0,
        d.conv_fc_ops_share() * 100.0
    ));
}

/// Independent layer-by-layer oracle for the VGG cost figures, written
/// against the published architecture tables rather than the builders.
fn vgg_oracle(convs_per_block: &[usize; 5]) -> (u64, u64) {
    let block_channels = [64u64, 128, 256, 512, 512];
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut c_in = 3u64;
    let mut side = 224u64;
    for (n, c_out) in convs_per_block.iter().zip(block_channels) {
        for _ in 0..*n {
            params += c_out * c_in * 9 + c_out;
            macs += c_out * c_in * 9 * side * side;
            c_in = c_out;
        }
        side /= 2;
    }
    let fc_dims = [(512 * 7 * 7, 4096u64), (4096, 4096), (4096, 1000)];
    for (fin, fout) in fc_dims {
        params += fout * fin + fout;
        macs += fout * fin;
    }
    (params, 2 * macs)
}

/// Criterion 4: full VGG-19 conv+fc FLOPs land within 5% of 39 GFLOP and
/// full VGG-16 parameters within 5% of 132 million values, with the model's
/// totals equal to an independent layer-by-layer oracle.
#[test]
fn criterion_4_vgg_count_reproduction() {
    let (oracle16_params, _) = vgg_oracle(&[2, 2, 3, 3, 3]);
    let (_, oracle19_flops) = vgg_oracle(&[2, 2, 4, 4, 4]);
    assert_eq!(oracle16_params, 138_357_544);
    assert_eq!(oracle19_flops, 39_264_124_928);

    let vgg16 = build_reference_topology(NetName::Vgg16, Scale::Full);
    let vgg19 = build_reference_topology(NetName::Vgg19, Scale::Full);
    let params16 = total_cost(&vgg16).params;
    let flops19 = total_cost(&vgg19).flops;
    assert_eq!(
        params16, oracle16_params,
        "model disagrees with the oracle on vgg16 params"
    );
    assert_eq!(
        flops19, oracle19_flops,
        "model disagrees with the oracle on vgg19 flops"
    );

    let params_err = (params16 as f64 - 132e6).abs() / 132e6;
    let flops_err = (flops19 as f64 - 39e9).abs() / 39e9;
    assert!(
        params_err <= 0.05,
        "vgg16 params {params16} off by {params_err:.4}"
    );
    assert!(
        flops_err <= 0.05,
        "vgg19 flops {flops19} off by {flops_err:.4}"
    );
    pass(&format!(
        "criterion 4: vgg19 flops {flops19} ({:.2}% from 39G), vgg16 params {params16} \
         ({:.2}% from 132M), both equal to the layer-by-layer oracle",
        flops_err * 100.0,
        params_err * 100.0
    ));
}

fn check_bandwidth(graph: &NetworkGraph, store: &WeightStore, input: &Tensor) -> (u64, u64) {
    let cfg = ChannelConfig::new(4, 4).unwrap();
    let (_, fused) = run_network(graph, input, store, &cfg, Accum::Sequential).unwrap();
    let (_, unfused) = run_network_unfused(graph, input, store, &cfg, Accum::Sequential).unwrap();

    let proj_fused = traffic_projection(graph, true);
    let proj_unfused = traffic_projection(graph, false);
    assert_eq!(proj_fused.bytes_read_global, fused.bytes_read_global);
    assert_eq!(proj_fused.bytes_written_global, fused.bytes_written_global);
    assert_eq!(proj_unfused.bytes_read_global, unfused.bytes_read_global);
    assert_eq!(
        proj_unfused.bytes_written_global,
        unfused.bytes_written_global
    );

    let elided = elided_interlayer_bytes(graph);
    assert!(
        elided > 0,
        "graph has a fusible pair, something must be elided"
    );
    assert_eq!(unfused.bytes_read_global - fused.bytes_read_global, elided);
    assert_eq!(
        unfused.bytes_written_global - fused.bytes_written_global,
        elided
    );
    assert!(fused.global_total() < unfused.global_total());
    (fused.global_total(), unfused.global_total())
}

/// Criterion 5: fusing keeps global traffic strictly below the unfused
/// baseline on conv-relu-pool chains and on full VGG-11; the saving is
/// exactly the elided interlayer bytes; the analytical projection matches
/// the measured ledger byte-for-byte.
#[test]
fn criterion_5_bandwidth_reduction() {
    let chain = load_manifest(
        "[network]\ninput = 3,32,32\n\n\
         [layer]\nname = c\nkind = conv\ninputs = input\nout = 8\nk = 3\npad = 1\n\n\
         [layer]\nname = r\nkind = relu\ninputs = c\n\n\
         [layer]\nname = p\nkind = maxpool\ninputs = r\nwindow = 2\nstride = 2\n",
    )
    .unwrap();
    let store = WeightStore::random(&chain, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_tensor(&mut rng, chain.input_shape());
    let (chain_fused, chain_unfused) = check_bandwidth(&chain, &store, &input);

    let vgg11 = build_reference_topology(NetName::Vgg11, Scale::Full);
    let store = WeightStore::random(&vgg11, 3);
    let input = random_tensor(&mut rng, vgg11.input_shape());
    let (vgg_fused, vgg_unfused) = check_bandwidth(&vgg11, &store, &input);

    pass(&format!(
        "criterion 5: fused < unfused global traffic and projection == ledger; \
         chain {chain_fused}/{chain_unfused} bytes, vgg11/full {vgg_fused}/{vgg_unfused} bytes"
    ));
}

/// Criterion 6: the device table reports 1687 and 5760 DSPs, over-budget
/// lane configurations are rejected, and density == gflops/dsp for every
/// accepted configuration.
#[test]
fn criterion_6_resource_model_sanity() {
    let arria = Device::Arria10.model();
    let stratix = Device::Stratix10.model();
    assert_eq!(arria.dsp_total, 1687);
    assert_eq!(stratix.dsp_total, 5760);

    let graph = build_reference_topology(NetName::Alexnet, Scale::Full);
    let err = estimate_resources(&graph, &VectorConfig::new(64, 64).unwrap(), &arria)
        .expect_err("4096 DSPs cannot fit arria10");
    assert_eq!(err.category(), "CAPACITY");
    assert!(err.to_string().contains("1687"));

    let mut checked = 0;
    for (oc, ic) in [(1, 1), (8, 4), (32, 16), (41, 41), (32, 32), (64, 64)] {
        let vec = VectorConfig::new(oc, ic).unwrap();
        for device in [&arria, &stratix] {
            match estimate_resources(&graph, &vec, device) {
                Ok(est) => {
                    let expect_gflops = 2.0 * (oc * ic) as f64 * device.clock_ghz;
                    assert!((est.projected_gflops - expect_gflops).abs() < 1e-9);
                    let density = est.projected_gflops / est.dsp_used as f64;
                    assert!((est.performance_density - density).abs() < 1e-12);
                    assert!(est.dsp_used <= est.dsp_total);
                    checked += 1;
                }
                Err(e) => {
                    assert!((oc * ic * device.dsp_per_mac as usize) as u32 > device.dsp_total);
                    assert_eq!(e.category(), "CAPACITY");
                }
            }
        }
    }
    assert!(checked >= 8);
    pass(&format!(
        "criterion 6: device tables 1687/5760 DSPs, over-budget lanes rejected, \
         density identity held for {checked} configurations"
    ));
}

/// Criterion 7: repeated seeded runs of the CLI produce byte-identical
/// output files, across at least 10 runs and across channel-depth settings.
#[test]
fn criterion_7_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_convpipe");
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("alexnet_desk.mf");

    let status = Command::new(bin)
        .args(["manifest", "--net", "alexnet", "--scale", "desk"])
        .arg("--output")
        .arg(&manifest)
        .status()
        .unwrap();
    assert!(status.success());

    let depths = [
        "1", "2", "4", "8", "16", "32", "64", "4", "1", "64", "8", "2",
    ];
    let mut reference: Option<Vec<u8>> = None;
    for (i, depth) in depths.iter().enumerate() {
        let out_path = dir.path().join(format!("out_{i}.t"));
        let status = Command::new(bin)
            .arg("run")
            .arg("--manifest")
            .arg(&manifest)
            .args(["--seed", "7", "--depth", depth, "--tile-rows", "2"])
            .arg("--output")
            .arg(&out_path)
            .status()
            .unwrap();
        assert!(status.success(), "run {i} failed");
        let bytes = std::fs::read(&out_path).unwrap();
        match &reference {
            Some(r) => assert_eq!(&bytes, r, "run {i} (depth {depth}) differs"),
            None => reference = Some(bytes),
        }
    }
    pass(&format!(
        "criterion 7: {} seeded cmd_run invocations across depths 1..64 wrote \
         byte-identical output files",
        depths.len()
    ));
}

/// Criterion 8: the layer-kernel invariants hold as property tests over at
/// least 100 seeds each, in under two minutes.
#[test]
fn criterion_8_layer_property_suite() {
    use convpipe::layers::{
        concat, eltwise_add, lrn, maxpool, relu, softmax, LrnParams, PoolParams,
    };
    use convpipe::tensor::flatten_weights;
    let start = Instant::now();

    // Oracle equivalence and purity per seed.
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = [1usize, 3, 5, 7][rng.random_range(0..4)];
        let c = rng.random_range(1usize..=8);
        let f_o = rng.random_range(1usize..=8);
        let pad = rng.random_range(0usize..=3);
        let stride = rng.random_range(1usize..=2);
        let h = rng.random_range(k.saturating_sub(2 * pad).max(1)..=8);
        let w = rng.random_range(k.saturating_sub(2 * pad).max(1)..=8);
        let input = random_tensor(&mut rng, Shape3::new(c, h, w).unwrap());
        let w4d: Vec<f32> = (0..f_o * c * k * k)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        let bias: Vec<f32> = (0..f_o).map(|_| rng.random::<f32>() - 0.5).collect();
        let weights = ConvWeights::new(f_o, c, k, w4d.clone(), bias).unwrap();
        let params = ConvParams::new(k, stride, pad).unwrap();

        let direct = conv2d_direct(&input, &weights, &params).unwrap();
        let flat = conv2d_flat(&input, &weights, &params, Accum::Sequential).unwrap();
        assert!(direct.bitwise_eq(&flat), "seed {seed}: oracle equivalence");
        assert!(direct.all_finite());
        let tree = conv2d_flat(&input, &weights, &params, Accum::Tree).unwrap();
        let (_, rel) = compare(&direct, &tree).unwrap();
        assert!(rel <= 1e-5, "seed {seed}: tree tolerance");
        let again = conv2d_flat(&input, &weights, &params, Accum::Sequential).unwrap();
        assert!(flat.bitwise_eq(&again), "seed {seed}: purity");

        // Weight flattening roundtrip through the inverse index map.
        let flat_w = flatten_weights(&w4d, k, c).unwrap();
        let mut back = vec![0.0f32; flat_w.len()];
        let window = c * k * k;
        for fo in 0..f_o {
            for x_i in 0..window {
                let fi = x_i / (k * k);
                let rem = x_i % (k * k);
                back[((fo * c + fi) * k + rem / k) * k + rem % k] = flat_w[fo * window + x_i];
            }
        }
        assert!(
            w4d.iter()
                .zip(&back)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "seed {seed}: flatten roundtrip"
        );

        // Pool bounds.
        let win = rng.random_range(1..=h.min(w));
        let pool = PoolParams::max(win, rng.random_range(1usize..=2)).unwrap();
        let pooled = maxpool(&input, &pool).unwrap();
        let in_max = input
            .data()
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max);
        let in_min = input.data().iter().copied().fold(f32::INFINITY, f32::min);
        assert!(
            pooled.data().iter().all(|&v| v >= in_min && v <= in_max),
            "seed {seed}: pool bounds"
        );

        // LRN with alpha = 0, k = 1 is the identity bit-exactly.
        let ident = lrn(&input, &LrnParams::new(5, 1.0, 0.0, 0.75).unwrap()).unwrap();
        assert!(ident.bitwise_eq(&input), "seed {seed}: lrn identity");

        // Softmax range and normalization.
        let logits: Vec<f32> = (0..rng.random_range(1usize..=64))
            .map(|_| rng.random::<f32>() * 20.0 - 10.0)
            .collect();
        let probs = softmax(&logits);
        let sum: f32 = probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "seed {seed}: softmax sum {sum}");
        assert!(
            probs.iter().all(|&p| p > 0.0 && p <= 1.0),
            "seed {seed}: softmax range"
        );

        // ReLU idempotence, eltwise commutativity, concat/slice roundtrip.
        let r1 = relu(&input);
        assert!(r1.bitwise_eq(&relu(&r1)), "seed {seed}: relu idempotent");
        let other = random_tensor(&mut rng, input.shape());
        let ab = eltwise_add(&input, &other).unwrap();
        let ba = eltwise_add(&other, &input).unwrap();
        assert!(ab.bitwise_eq(&ba), "seed {seed}: eltwise commutes");
        let joined = concat(&[&input, &other]).unwrap();
        assert_eq!(&joined.data()[..input.data().len()], input.data());
        assert_eq!(&joined.data()[input.data().len()..], other.data());
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "criterion 8 took {elapsed:?}, limit is 2 minutes"
    );
    pass(&format!(
        "criterion 8: layer invariants held over 100 seeds each in {elapsed:.2?}"
    ));
}
