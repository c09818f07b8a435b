use proptest::prelude::*;

use splitwire::model::{aux_head_layers, build_network, client_forward, partition, server_forward, Arch, CutSpec, LayerSpec, SplitPlan, Stack};
use splitwire::tape::Tape;
use splitwire::tensor::{DType, Tensor};

fn random(dims: &[usize], seed: u64, dtype: DType) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|i| ((i as u64 * 13 + seed * 7919) as f64 * 0.173).sin()).collect();
    Tensor::from_values(dims, &v, dtype).unwrap()
}

proptest! {
    #[test]
    fn presets_are_ordered_and_in_range(n in 2usize..500) {
        let plan = SplitPlan::new(n).unwrap();
        let s = plan.resolve(CutSpec::Shallow).unwrap();
        let m = plan.resolve(CutSpec::Middle).unwrap();
        let d = plan.resolve(CutSpec::Deep).unwrap();
        prop_assert!(1 <= s && s <= m && m <= d && d < n);
        if n >= 4 {
            prop_assert!(s < m && m < d);
        }
        prop_assert_eq!(plan.resolve(CutSpec::Shallow).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Running M_b then M_t reproduces the unsplit network bit for bit.
    #[test]
    fn split_composition_is_exact(arch_i in 0usize..3, cut_pick in any::<prop::sample::Index>(), seed in 0u64..1000, f64s in any::<bool>()) {
        let dtype = if f64s { DType::F64 } else { DType::F32 };
        let (arch, input) = match arch_i {
            0 => (Arch::Mlp, vec![12]),
            1 => (Arch::TinyConv, vec![2, 8, 8]),
            _ => (Arch::TinyResnet, vec![3, 8, 8]),
        };
        let net = build_network(arch, &input, 5, 4).unwrap();
        let params = net.init_params(seed, dtype).unwrap();
        let cut = 1 + cut_pick.index(net.block_count() - 1);
        let full = net.stack(params.clone()).unwrap();
        let part = partition(&net, params, cut, seed + 1).unwrap();

        let mut dims = vec![3];
        dims.extend(&input);
        let x = random(&dims, seed, dtype);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let (y, _) = full.forward(&mut t, xv).unwrap();

        let mut tc = Tape::new();
        let cf = client_forward(&part.bottom, Some(&part.aux), &mut tc, x).unwrap();
        let z = tc.value(cf.z).clone();
        prop_assert_eq!(&z.dims()[1..], &part.cut_dims()[..]);
        let mut ts = Tape::new();
        let sf = server_forward(&part.top, &mut ts, z).unwrap();
        prop_assert!(ts.value(sf.logits).bit_eq(t.value(y)));
    }
}

#[test]
fn one_block_bottom_on_four_block_net() {
    let net = build_network(Arch::TinyResnet, &[3, 8, 8], 10, 4).unwrap();
    assert_eq!(net.block_count(), 4);
    let part = partition(&net, net.init_params(0, DType::F32).unwrap(), 1, 1).unwrap();
    let bottom_layers: usize = net.blocks()[..1].iter().map(Vec::len).sum();
    let top_layers: usize = net.blocks()[1..].iter().map(Vec::len).sum();
    assert_eq!(part.bottom.layers().len(), bottom_layers);
    assert_eq!(part.top.layers().len(), top_layers);
}

#[test]
fn aux_head_for_wide_cut_activation() {
    let layers = aux_head_layers(&[64, 8, 8], 10);
    let dims: Vec<Vec<usize>> = layers.iter().flat_map(LayerSpec::param_dims).collect();
    assert_eq!(dims, vec![vec![4096, 10], vec![10]]);
    assert_eq!(aux_head_layers(&[32], 10)[0], LayerSpec::Dense { inputs: 32, outputs: 10 });
}

#[test]
fn aux_logits_are_one_dense_layer_on_flattened_z() {
    let net = build_network(Arch::TinyConv, &[1, 8, 8], 10, 8).unwrap();
    let part = partition(&net, net.init_params(4, DType::F64).unwrap(), 1, 5).unwrap();
    let x = random(&[2, 1, 8, 8], 9, DType::F64);
    let mut t = Tape::new();
    let cf = client_forward(&part.bottom, Some(&part.aux), &mut t, x).unwrap();
    let z = t.value(cf.z).to_f64_vec();
    let logits = t.value(cf.aux.unwrap().0).to_f64_vec();
    let w = part.aux.params()[0].to_f64_vec();
    let b = part.aux.params()[1].to_f64_vec();
    let d = z.len() / 2;
    for i in 0..2 {
        for j in 0..10 {
            let want = b[j] + (0..d).map(|k| z[i * d + k] * w[k * 10 + j]).sum::<f64>();
            assert!((logits[i * 10 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_aux_head_gives_zero_logits() {
    let net = build_network(Arch::Mlp, &[6], 4, 8).unwrap();
    let mut part = partition(&net, net.init_params(1, DType::F32).unwrap(), 2, 2).unwrap();
    let zeros: Vec<Tensor> = part.aux.params().iter().map(Tensor::zeros_like).collect();
    part.aux.set_params(zeros).unwrap();
    let mut t = Tape::new();
    let cf = client_forward(&part.bottom, Some(&part.aux), &mut t, random(&[3, 6], 2, DType::F32)).unwrap();
    assert!(t.value(cf.aux.unwrap().0).to_f64_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_residual_branch_passes_z_through() {
    let layers = vec![LayerSpec::Residual(vec![
        LayerSpec::Conv3x3 { in_channels: 4, out_channels: 4, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_channels: 4, out_channels: 4, stride: 1 },
    ])];
    let params: Vec<Tensor> = layers
        .iter()
        .flat_map(LayerSpec::param_dims)
        .map(|d| Tensor::zeros(&d, DType::F64).unwrap())
        .collect();
    let stack = Stack::new(layers, vec![4, 5, 5], params).unwrap();
    let z = random(&[2, 4, 5, 5], 3, DType::F64);
    let mut t = Tape::new();
    let zv = t.input(z.clone());
    let (out, _) = stack.forward(&mut t, zv).unwrap();
    assert!(t.value(out).bit_eq(&z));
}

#[test]
fn batch_of_128_sets_activation_leading_extent() {
    let net = build_network(Arch::TinyConv, &[1, 28, 28], 10, 8).unwrap();
    let part = partition(&net, net.init_params(0, DType::F32).unwrap(), 2, 0).unwrap();
    let mut t = Tape::new();
    let cf = client_forward(&part.bottom, None, &mut t, Tensor::zeros(&[128, 1, 28, 28], DType::F32).unwrap()).unwrap();
    assert_eq!(t.value(cf.z).dims()[0], 128);
}
