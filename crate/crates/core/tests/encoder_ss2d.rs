use proptest::prelude::*;

use ssm_zsl::autodiff::{finite_diff_check_many, Tape, Var};
use ssm_zsl::encoder::{
    downsample, patch_embed, scan_expand, scan_merge, ss2d_block, vssb_forward, Downsample,
    Encoder, EncoderConfig, PatchEmbed, ChannelLinear, ScanOrder, Ss2dParams, VssBlock,
};
use ssm_zsl::params::{Bound, ParamBuilder, ParamStore};
use ssm_zsl::rng::Rng64;
use ssm_zsl::ssm::selective_scan;
use ssm_zsl::tensor::Tensor;

fn rand_t(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

/// Replaces every parameter with fresh uniform values (biases included).
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng64::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let mut t = rand_t(&mut rng, &shape);
        if store.name(id).ends_with("delta_bias") {
            t = t.map(|v| v - 1.0);
        }
        store.set(id, t).unwrap();
    }
}

fn zero_params(store: &mut ParamStore<f64>, suffixes: &[&str]) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if suffixes.iter().any(|s| store.name(id).ends_with(s)) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
}

fn labels_grid(r: usize) -> Tensor<f64> {
    Tensor::new(&[1, r, r], (0..r * r).map(|v| v as f64).collect()).unwrap()
}

fn expand(order: ScanOrder, grid: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone());
    let s = scan_expand(&mut tape, g, order).unwrap();
    tape.value(s).to_vec()
}

fn transpose_grid(t: &Tensor<f64>) -> Tensor<f64> {
    let (d, r) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; d * r * r];
    for c in 0..d {
        for i in 0..r {
            for j in 0..r {
                out[c * r * r + j * r + i] = t.data()[c * r * r + i * r + j];
            }
        }
    }
    Tensor::new(t.shape(), out).unwrap()
}

#[test]
fn scan_order_examples() {
    // [[a, b], [c, d]] = [[0, 1], [2, 3]]
    let g = labels_grid(2);
    assert_eq!(expand(ScanOrder::RowForward, &g), vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(expand(ScanOrder::RowBackward, &g), vec![3.0, 2.0, 1.0, 0.0]);
    assert_eq!(expand(ScanOrder::ColForward, &g), vec![0.0, 2.0, 1.0, 3.0]);
    assert_eq!(expand(ScanOrder::ColBackward, &g), vec![3.0, 1.0, 2.0, 0.0]);
}

#[test]
fn scan_orders_are_bijections_up_to_side_8() {
    for r in 1..=8 {
        for order in ScanOrder::ALL {
            let perm = order.permutation(r);
            let inv = order.inverse(r);
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..r * r).collect::<Vec<_>>());
            for t in 0..r * r {
                assert_eq!(inv[perm[t]], t);
                assert_eq!(perm[inv[t]], t);
            }
        }
    }
}

#[test]
fn merge_of_expansions_is_four_times_grid() {
    let mut rng = Rng64::new(1);
    for r in 1..=5 {
        let g = rand_t(&mut rng, &[3, r, r]);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let seqs: Vec<Var> = ScanOrder::ALL
            .iter()
            .map(|&o| scan_expand(&mut tape, gv, o).unwrap())
            .collect();
        let m = scan_merge(&mut tape, &seqs, &ScanOrder::ALL, r).unwrap();
        for (a, b) in tape.value(m).data().iter().zip(g.data()) {
            assert!((a - 4.0 * b).abs() < 1e-15);
        }
    }
}

#[test]
fn merge_matches_permutation_table() {
    let (d, r) = (2, 3);
    let mut rng = Rng64::new(2);
    let seqs: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&mut rng, &[r * r, d])).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = seqs.iter().map(|s| tape.constant(s.clone())).collect();
    let m = scan_merge(&mut tape, &vars, &ScanOrder::ALL, r).unwrap();
    // Explicit visiting tables: step t of each order visits cell (row, col).
    let tables: [Vec<(usize, usize)>; 4] = [
        (0..r * r).map(|t| (t / r, t % r)).collect(),
        (0..r * r).rev().map(|t| (t / r, t % r)).collect(),
        (0..r * r).map(|t| (t % r, t / r)).collect(),
        (0..r * r).rev().map(|t| (t % r, t / r)).collect(),
    ];
    let mut want = vec![0.0; d * r * r];
    for (seq, table) in seqs.iter().zip(&tables) {
        for (t, &(i, j)) in table.iter().enumerate() {
            for c in 0..d {
                want[c * r * r + i * r + j] += seq.data()[t * d + c];
            }
        }
    }
    for (a, b) in tape.value(m).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn merge_rejects_bad_lengths() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::zeros(&[5, 2]));
    assert!(scan_merge(&mut tape, &[s], &[ScanOrder::RowForward], 2).is_err());
    assert!(scan_merge(&mut tape, &[s, s], &[ScanOrder::RowForward], 2).is_err());
}

fn ss2d_setup(d: usize, cfg: &EncoderConfig, seed: u64) -> (Ss2dParams, ParamStore<f64>) {
    let mut pb = ParamBuilder::new(seed);
    let p = Ss2dParams::init(&mut pb, "ss2d", d, cfg);
    let mut store = pb.finish();
    randomize(&mut store, seed + 100);
    (p, store)
}

fn ss2d_eval(p: &Ss2dParams, store: &ParamStore<f64>, grid: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let g = tape.constant(grid.clone());
    let y = ss2d_block(&mut tape, &bound, p, g).unwrap();
    tape.value(y).clone()
}

#[test]
fn ss2d_zero_input_zero_output() {
    let cfg = EncoderConfig::default();
    let (p, mut store) = ss2d_setup(4, &cfg, 3);
    zero_params(&mut store, &["in_proj.bias", "out_proj.bias"]);
    let y = ss2d_eval(&p, &store, &Tensor::zeros(&[4, 3, 3]));
    assert_eq!(y.shape(), &[4, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn ss2d_matches_composition_of_primitives() {
    let cfg = EncoderConfig::default();
    let (d, r) = (4, 2);
    let (p, store) = ss2d_setup(d, &cfg, 4);
    let mut rng = Rng64::new(5);
    let grid = rand_t(&mut rng, &[d, r, r]);
    let got = ss2d_eval(&p, &store, &grid);

    // in_proj by hand, then each direction through expand/scan/merge.
    let w = store.get(p.in_proj.weight).data().to_vec();
    let b = store.get(p.in_proj.bias).data().to_vec();
    let mut xin = vec![0.0; d * r * r];
    for o in 0..d {
        for cell in 0..r * r {
            xin[o * r * r + cell] = b[o] + (0..d).map(|i| w[o * d + i] * grid.data()[i * r * r + cell]).sum::<f64>();
        }
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.constant(Tensor::new(&[d, r, r], xin).unwrap());
    let mut merged = vec![0.0; d * r * r];
    for order in ScanOrder::ALL {
        let seq = scan_expand(&mut tape, xv, order).unwrap();
        let y = selective_scan(&mut tape, &bound, &p.scans[0], seq, cfg.zoh_exact).unwrap();
        let yv = tape.value(y).data().to_vec();
        for (t, &cell) in order.permutation(r).iter().enumerate() {
            for c in 0..d {
                merged[c * r * r + cell] += yv[t * d + c];
            }
        }
    }
    let w = store.get(p.out_proj.weight).data().to_vec();
    let b = store.get(p.out_proj.bias).data().to_vec();
    for o in 0..d {
        for cell in 0..r * r {
            let want = b[o] + (0..d).map(|i| w[o * d + i] * merged[i * r * r + cell]).sum::<f64>();
            assert!((got.data()[o * r * r + cell] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn per_direction_params_use_four_scans() {
    let cfg = EncoderConfig {
        per_direction_params: true,
        ..EncoderConfig::default()
    };
    let (p, store) = ss2d_setup(3, &cfg, 6);
    assert_eq!(p.scans.len(), 4);
    let y = ss2d_eval(&p, &store, &Tensor::full(&[3, 2, 2], 0.5));
    assert_eq!(y.shape(), &[3, 2, 2]);
}

fn vssb_setup(d: usize, seed: u64) -> (VssBlock, ParamStore<f64>) {
    let mut pb = ParamBuilder::new(seed);
    let b = VssBlock::init(&mut pb, "blk", d, &EncoderConfig::default());
    let mut store = pb.finish();
    randomize(&mut store, seed + 200);
    (b, store)
}

#[test]
fn vssb_with_zero_output_maps_is_identity() {
    let (b, mut store) = vssb_setup(4, 7);
    zero_params(&mut store, &["out_proj.weight", "out_proj.bias", "fc2.weight", "fc2.bias"]);
    let mut rng = Rng64::new(8);
    let g = rand_t(&mut rng, &[4, 3, 3]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let gv = tape.constant(g.clone());
    let y = vssb_forward(&mut tape, &bound, &b, gv).unwrap();
    assert_eq!(tape.value(y).data(), g.data());
}

#[test]
fn vssb_gradients_on_2x2_grid() {
    let (b, store) = vssb_setup(4, 9);
    let mut rng = Rng64::new(10);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(rand_t(&mut rng, &[4, 2, 2]));
    let w = rand_t(&mut rng, &[4, 2, 2]);
    let checks = finite_diff_check_many(
        |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            let bound = Bound::from_vars(params.to_vec());
            let y = vssb_forward(tape, &bound, &b, x[0])?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            tape.sum_all(p)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    for (c, (name, _)) in checks.iter().zip(store.iter().map(|(n, t)| (n.to_string(), t)).chain([("input".to_string(), &inputs[0])])) {
        assert!(c.passes(1e-4), "{name}: {}", c.max_rel_error);
    }
}

#[test]
fn downsample_shapes_and_averaging() {
    let (d, r) = (2, 4);
    let mut pb = ParamBuilder::new(0);
    let ds = Downsample::init(&mut pb, "down", d);
    let mut store = pb.finish();
    // Output channel o averages channel o % d over the 2x2 block.
    let mut w = vec![0.0; 2 * d * 4 * d];
    for o in 0..2 * d {
        for q in 0..4 {
            w[o * 4 * d + q * d + o % d] = 0.25;
        }
    }
    store.set(ds.proj.weight, Tensor::new(&[2 * d, 4 * d], w).unwrap()).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let g = tape.constant(Tensor::full(&[d, r, r], 1.5));
    let y = downsample(&mut tape, &bound, &ds, g).unwrap();
    assert_eq!(tape.shape(y), &[2 * d, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    let z = tape.constant(Tensor::zeros(&[d, r, r]));
    let y = downsample(&mut tape, &bound, &ds, z).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let odd = tape.constant(Tensor::zeros(&[d, 3, 3]));
    assert!(downsample(&mut tape, &bound, &ds, odd).is_err());

    let mut pb = ParamBuilder::new(0);
    let ds16 = Downsample::init(&mut pb, "down", 16);
    let store = pb.finish();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let g = tape.constant(Tensor::zeros(&[16, 8, 8]));
    let y = downsample(&mut tape, &bound, &ds16, g).unwrap();
    assert_eq!(tape.shape(y), &[32, 4, 4]);
}

#[test]
fn patch_embed_cases() {
    let mut pb = ParamBuilder::new(1);
    let pe = PatchEmbed {
        proj: ChannelLinear::init(&mut pb, "pe", 3 * 16, 16),
        patch_size: 4,
        in_channels: 3,
    };
    let store = pb.finish();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let img = tape.constant(Tensor::zeros(&[3, 32, 32]));
    let y = patch_embed(&mut tape, &bound, &pe, img).unwrap();
    assert_eq!(tape.shape(y), &[16, 8, 8]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let bad = tape.constant(Tensor::zeros(&[3, 30, 32]));
    assert!(patch_embed(&mut tape, &bound, &pe, bad).is_err());

    // Patch 1 is a per-pixel channel map.
    let mut pb = ParamBuilder::new(2);
    let pe1 = PatchEmbed {
        proj: ChannelLinear::init(&mut pb, "pe", 2, 3),
        patch_size: 1,
        in_channels: 2,
    };
    let store = pb.finish();
    let mut rng = Rng64::new(3);
    let img = rand_t(&mut rng, &[2, 3, 3]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let iv = tape.constant(img.clone());
    let y = patch_embed(&mut tape, &bound, &pe1, iv).unwrap();
    let w = store.get(pe1.proj.weight).data().to_vec();
    for o in 0..3 {
        for cell in 0..9 {
            let want = (0..2).map(|i| w[o * 2 + i] * img.data()[i * 9 + cell]).sum::<f64>();
            assert!((tape.value(y).data()[o * 9 + cell] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn patch_embed_flattens_patches_channel_major() {
    // Channel q of the patch grid holds pixel (di, dj) of input channel ch,
    // q = ch*p*p + di*p + dj; an identity projection exposes the layout.
    let (c, p, side) = (2, 2, 4);
    let mut pb = ParamBuilder::new(0);
    let pe = PatchEmbed {
        proj: ChannelLinear::init(&mut pb, "pe", c * p * p, c * p * p),
        patch_size: p,
        in_channels: c,
    };
    let mut store = pb.finish();
    let n = c * p * p;
    let eye: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    store.set(pe.proj.weight, Tensor::new(&[n, n], eye).unwrap()).unwrap();
    let img = Tensor::new(&[c, side, side], (0..c * side * side).map(|v| v as f64).collect()).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let iv = tape.constant(img.clone());
    let y = patch_embed(&mut tape, &bound, &pe, iv).unwrap();
    let g = side / p;
    for ch in 0..c {
        for di in 0..p {
            for dj in 0..p {
                for pi in 0..g {
                    for pj in 0..g {
                        let q = ch * p * p + di * p + dj;
                        let got = tape.value(y).data()[q * g * g + pi * g + pj];
                        let want = img.data()[ch * side * side + (pi * p + di) * side + pj * p + dj];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
}

#[test]
fn desk_encoder_output_shape_and_determinism() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.validate(3, 32, 32).unwrap(), 4);
    let mut pb = ParamBuilder::new(11);
    let enc = Encoder::init(&mut pb, &cfg, 3);
    let store: ParamStore<f32> = pb.finish().cast();
    let mut rng = Rng64::new(12);
    let img: Tensor<f32> = rand_t(&mut rng, &[3, 32, 32]).cast();
    let mut outs = Vec::new();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let iv = tape.constant(img.clone());
        let f = enc.encode(&mut tape, &bound, iv).unwrap();
        assert_eq!((f.channels, f.side), (32, 4));
        assert_eq!(tape.shape(f.values), &[32, 4, 4]);
        outs.push(tape.value(f.values).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn encoder_config_validation() {
    let cfg = EncoderConfig::default();
    assert!(cfg.validate(3, 30, 30).is_err());
    assert!(cfg.validate(3, 32, 16).is_err());
    assert!(cfg.validate(3, 4, 4).is_err());
    let bad = EncoderConfig {
        stage_dims: vec![16, 24],
        ..EncoderConfig::default()
    };
    assert!(bad.validate(3, 32, 32).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ss2d_commutes_with_transpose(seed in any::<u64>(), d in 1usize..4, r in 1usize..5) {
        let cfg = EncoderConfig::default();
        let (p, store) = ss2d_setup(d, &cfg, seed);
        let mut rng = Rng64::new(seed ^ 0x55);
        let g = rand_t(&mut rng, &[d, r, r]);
        let a = ss2d_eval(&p, &store, &transpose_grid(&g));
        let b = transpose_grid(&ss2d_eval(&p, &store, &g));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn expand_then_inverse_is_identity(r in 1usize..=8, d in 1usize..4, k in 0usize..4) {
        let order = ScanOrder::ALL[k];
        let g = Tensor::new(&[d, r, r], (0..d * r * r).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let s = scan_expand(&mut tape, gv, order).unwrap();
        let back = scan_merge(&mut tape, &[s], &[order], r).unwrap();
        prop_assert_eq!(tape.value(back).data(), g.data());
    }

    #[test]
    fn blocks_preserve_shape(seed in any::<u64>(), d in 1usize..4, r in 1usize..4) {
        let (b, store) = vssb_setup(d, seed % 1000);
        let mut rng = Rng64::new(seed);
        let g = rand_t(&mut rng, &[d, r, r]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let gv = tape.constant(g);
        let y = vssb_forward(&mut tape, &bound, &b, gv).unwrap();
        prop_assert_eq!(tape.shape(y), &[d, r, r]);
    }
}
