use std::collections::BTreeSet;

use agnet::checkpoint::Checkpoint;
use agnet::config::RunConfig;
use agnet::gradcheck::{gradcheck, GradcheckConfig};
use agnet::head::{attr_loss, AttributeCoefficients, AttributeLabels, AttributeSchema, BranchLogits};
use agnet::marcu::NetworkConfig;
use agnet::model::{AgeNet, ModelSpec};
use agnet::ranking::LossKind;
use agnet::train::{train, Splits};
use agnet::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schemas() -> [AttributeSchema; 3] {
    [AttributeSchema::morph(), AttributeSchema::utkface(), AttributeSchema::lap2016()]
}

fn desk(resolution: usize, schema: AttributeSchema) -> AgeNet {
    let net = NetworkConfig {
        input_resolution: resolution,
        ..NetworkConfig::desk()
    };
    AgeNet::new(ModelSpec::new(net, schema, LossKind::Ecr), 3).unwrap()
}

#[test]
fn head_dimensions_follow_the_schema() {
    for schema in schemas() {
        let model = desk(16, schema.clone());
        let (gg, ga, ge) = schema.dims();
        assert_eq!(schema.fused_dim(), gg + ga + ge);
        let f = model.head.cfg.feature_dim;
        let w = model.store.by_name("head.final_fc.weight").unwrap();
        assert_eq!(w.shape(), &[f + gg + ga + ge, 1]);
        assert_eq!(model.store.by_name("head.ethnicity.weight").is_some(), ge > 0);

        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let x = g.constant(Tensor::full([2, 3, 16, 16], 0.5));
        let fwd = model.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(fwd.second_layer).shape(), &[2, gg + ga + ge]);
        assert_eq!(g.value(fwd.output).shape(), &[2, 1]);
    }
}

#[test]
fn checkpoint_lists_every_parameter_once_and_reloads_exactly() {
    let model = desk(16, AttributeSchema::morph());
    let cfg = RunConfig::from_toml_str(
        "schema = \"morph\"\n[synthetic]\nresolution = 16\na_min = 16\na_max = 77\nnoise_sigma = 0.0\nseed = 0\ntrain = 8\nval = 1\ntest = 1\n",
    )
    .unwrap();
    let ckpt = Checkpoint::from_model(&model, cfg, 1.5, 1);
    let names: BTreeSet<&str> = ckpt.params.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), ckpt.params.len());
    assert_eq!(names, model.store.names().collect());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.agn");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let images = Tensor::uniform([3, 3, 16, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(4));
    let a = model.predict(&images).unwrap().ages;
    let b = back.predict(&images).unwrap().ages;
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn fuse_and_final_head_pass_gradcheck() {
    let model = desk(16, AttributeSchema::morph());
    let head = &model.head;
    let names = ["head.fuse.kernel", "head.final_fc.weight", "head.final_fc.bias"];
    let mut inputs: Vec<Tensor> = names.iter().map(|n| model.store.by_name(n).unwrap().clone()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (gg, ga, ge) = AttributeSchema::morph().dims();
    inputs.push(Tensor::uniform([2, gg], 2.0, &mut r));
    inputs.push(Tensor::uniform([2, ga], 2.0, &mut r));
    inputs.push(Tensor::uniform([2, ge], 2.0, &mut r));
    inputs.push(Tensor::uniform([2, head.cfg.feature_dim], 2.0, &mut r));
    let f = |g: &mut Graph, v: &[agnet::Var]| {
        let logits = BranchLogits {
            gender: v[3],
            age_group: v[4],
            ethnicity: Some(v[5]),
        };
        let p = agnet::layers::Bound::from_vars(
            model
                .store
                .names()
                .map(|n| match names.iter().position(|m| *m == n) {
                    Some(i) => v[i],
                    None => g.constant(model.store.by_name(n).unwrap().clone()),
                })
                .collect(),
        );
        let fused = agnet::head::fuse_attributes(g, &p, head, &logits)?;
        let out = agnet::head::final_head(g, &p, head, v[6], fused)?;
        agnet::gradcheck::random_projection(g, out, &mut ChaCha8Rng::seed_from_u64(1))
    };
    let report = gradcheck("fuse+final", f, &inputs, &GradcheckConfig::default()).unwrap();
    let report = report.unwrap_or_else(|e| panic!("{e}"));
    assert!(report.checked() > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attribute_loss_is_non_negative(
        seed in any::<u64>(),
        n in 1usize..6,
        scale in 0.0f64..20.0,
    ) {
        let schema = AttributeSchema::utkface();
        let (gg, ga, ge) = schema.dims();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let gender = g.constant(Tensor::uniform([n, gg], scale.max(1e-9), &mut r));
        let age_group = g.constant(Tensor::uniform([n, ga], scale.max(1e-9), &mut r));
        let eth = g.constant(Tensor::uniform([n, ge], scale.max(1e-9), &mut r));
        let labels: Vec<AttributeLabels> = (0..n)
            .map(|i| AttributeLabels::new(1 + (i as i32 * 17) % 100, i % gg, i % ge, &schema).unwrap())
            .collect();
        let logits = BranchLogits { gender, age_group, ethnicity: Some(eth) };
        let loss = attr_loss(&mut g, &logits, &labels, AttributeCoefficients::default()).unwrap();
        let v = g.value(loss).item().unwrap();
        prop_assert!(v.is_finite() && v > 0.0, "{v}");
    }
}

#[test]
fn best_mae_never_increases_and_logs_repeat() {
    let cfg = RunConfig::from_toml_str(
        "schema = \"morph\"\n[train]\nepochs = 4\nbatch_size = 4\nseed = 5\n\
         [synthetic]\nresolution = 16\na_min = 16\na_max = 77\nnoise_sigma = 0.05\nseed = 2\ntrain = 12\nval = 4\ntest = 0\n",
    )
    .unwrap();
    let splits = Splits::from_config(&cfg).unwrap();
    let a = train(&cfg, &splits, None).unwrap();
    let mut best = f64::INFINITY;
    for r in &a.log {
        assert_eq!(r.retained, r.val_mae < best);
        best = best.min(r.val_mae);
    }
    assert_eq!(a.best.meta.best_val_mae, best);
    let b = train(&cfg, &splits, None).unwrap();
    assert_eq!(agnet::train::metrics_log(&a.log), agnet::train::metrics_log(&b.log));
}
