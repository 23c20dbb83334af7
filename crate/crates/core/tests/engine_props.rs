use agnet::layers::{Bound, ParamStore};
use agnet::marcu::{eca_attention, MarcuBlock, MarcuBlockConfig};
use agnet::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv2d_output_shape_sweep() {
    let mut r = rng(0);
    for h in 1..=12usize {
        for k in [1usize, 3, 5, 7] {
            for stride in 1..=3 {
                for pad in 0..=3 {
                    let mut g = Graph::new();
                    let x = g.constant(Tensor::uniform([2, 3, h, h], 1.0, &mut r));
                    let w = g.constant(Tensor::uniform([4, 3, k, k], 1.0, &mut r));
                    let got = g.conv2d(x, w, None, stride, pad);
                    let padded = h + 2 * pad;
                    if padded < k {
                        assert!(got.is_err(), "h {h} k {k} s {stride} p {pad}");
                        continue;
                    }
                    let side = (padded - k) / stride + 1;
                    let y = got.unwrap();
                    assert_eq!(g.value(y).shape(), &[2, 4, side, side], "h {h} k {k} s {stride} p {pad}");
                }
            }
        }
    }
}

fn block_run(cfg: MarcuBlockConfig, input: &Tensor, seed: u64) -> (Tensor, Vec<Tensor>) {
    let mut store = ParamStore::new();
    let block = MarcuBlock::new(&mut store, "b", cfg, &mut rng(seed)).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let x = g.param(input.clone());
    let y = block.forward(&mut g, &p, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let mut grads = p.grads(&g);
    grads.push(g.grad(x));
    (g.value(y).clone(), grads)
}

#[test]
fn same_seed_gives_bit_identical_values_and_gradients() {
    let cfg = MarcuBlockConfig {
        in_channels: 4,
        out_channels: 8,
        stride: 2,
        attention_kernel: 3,
    };
    let input = Tensor::uniform([2, 4, 7, 7], 1.0, &mut rng(5));
    let (a, ga) = block_run(cfg, &input, 11);
    let (b, gb) = block_run(cfg, &input, 11);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ga.len(), gb.len());
    for (x, y) in ga.iter().zip(&gb) {
        assert_eq!(bits(x), bits(y));
    }
}

#[test]
fn zeroed_block_with_identity_shortcut_is_relu() {
    let cfg = MarcuBlockConfig {
        in_channels: 8,
        out_channels: 8,
        stride: 1,
        attention_kernel: 3,
    };
    let mut store = ParamStore::new();
    let block = MarcuBlock::new(&mut store, "b", cfg, &mut rng(1)).unwrap();
    assert!(block.shortcut.is_none());
    let zeros = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    store.set_all(zeros).unwrap();
    let input = Tensor::uniform([2, 8, 5, 5], 1.0, &mut rng(2));
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(input.clone());
    let y = block.forward(&mut g, &p, x).unwrap();
    let want: Vec<f64> = input.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(g.value(y).data(), &want[..]);
}

proptest! {
    #[test]
    fn channel_attention_keeps_shape(
        n in 1usize..3,
        c in 1usize..20,
        h in 1usize..6,
        k in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([n, c, h, h], 2.0, &mut r));
        let w = g.constant(Tensor::uniform([k], 1.0, &mut r));
        let y = eca_attention(&mut g, x, w).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n, c, h, h]);
        // each gate lies in (0, 1), so outputs shrink toward zero
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}

#[test]
fn bound_vars_follow_store_order() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::scalar(1.0)).unwrap();
    store.add("b", Tensor::scalar(2.0)).unwrap();
    let mut g = Graph::new();
    let p: Bound = store.bind(&mut g, true);
    assert_eq!(p.vars().len(), 2);
    assert_eq!(g.value(p.vars()[1]).item().unwrap(), 2.0);
}
