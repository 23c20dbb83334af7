//! The full age estimator: backbone, attribute head and regression output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{
    attr_loss, attribute_branches, final_head, fuse_attributes, total_loss, AttributeCoefficients, AttributeHead,
    AttributeLabels, AttributeSchema, BranchLogits, HeadConfig,
};
use crate::layers::{Bound, ParamId, ParamStore};
use crate::marcu::{build_backbone, Backbone, NetworkConfig};
use crate::ranking::{baseline_loss, predict_ages, IntervalPoints, LossKind, Reduction};
use crate::tensor::Tensor;

/// Everything needed to rebuild a model with identical parameter names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub network: NetworkConfig,
    pub schema: AttributeSchema,
    pub loss: LossKind,
    pub fuse_kernel: usize,
}

impl ModelSpec {
    pub fn new(network: NetworkConfig, schema: AttributeSchema, loss: LossKind) -> Self {
        ModelSpec {
            network,
            schema,
            loss,
            fuse_kernel: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgeNet {
    pub spec: ModelSpec,
    pub points: IntervalPoints,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: AttributeHead,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub branches: BranchLogits,
    pub second_layer: Var,
    /// N×1 for ECR and L1, N×K for the cross-entropy baseline.
    pub output: Var,
}

/// One labelled mini-batch in the layout the model consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub ages: Vec<i32>,
    pub attributes: Vec<AttributeLabels>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOptions {
    pub attribute_guidance: bool,
    pub coefficients: AttributeCoefficients,
    pub reduction: Reduction,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            attribute_guidance: true,
            coefficients: AttributeCoefficients::default(),
            reduction: Reduction::Sum,
        }
    }
}

impl AgeNet {
    /// Builds and initialises every parameter from `seed`.
    ///
    /// The regression bias of single-output heads starts at the middle
    /// of the age range.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.network.validate()?;
        spec.schema.validate()?;
        let points = IntervalPoints::new(spec.schema.a_min, spec.schema.a_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = build_backbone(&spec.network, &mut store, &mut rng)?;
        let f = spec.network.feature_dim();
        let head_cfg = HeadConfig {
            fuse_kernel: spec.fuse_kernel,
            ..HeadConfig::new(f)
        };
        let out_dim = spec.loss.output_dim(&points);
        let head = AttributeHead::new(&mut store, &spec.schema, &head_cfg, f, out_dim, &mut rng)?;
        if out_dim == 1 {
            let mid = 0.5 * f64::from(spec.schema.a_min + spec.schema.a_max);
            store.get_mut(head.final_fc.bias).data_mut()[0] = mid;
        }
        Ok(AgeNet {
            spec,
            points,
            store,
            backbone,
            head,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.spec.schema
    }

    pub fn final_fc(&self) -> (ParamId, ParamId) {
        (self.head.final_fc.weight, self.head.final_fc.bias)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Forward> {
        let features = self.backbone.forward(g, p, images)?.features;
        let global = self.head.global_fc.forward(g, p, features)?;
        let branches = attribute_branches(g, p, &self.head, features)?;
        let second_layer = fuse_attributes(g, p, &self.head, &branches)?;
        let output = final_head(g, p, &self.head, global, second_layer)?;
        Ok(Forward {
            features,
            branches,
            second_layer,
            output,
        })
    }

    /// Age loss plus, under attribute guidance, the weighted attribute loss.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, batch: &Batch, opts: &LossOptions) -> Result<Var> {
        if batch.ages.len() != batch.attributes.len() {
            return Err(Error::shape(
                "loss",
                format!("{} ages for {} attribute labels", batch.ages.len(), batch.attributes.len()),
            ));
        }
        let age = baseline_loss(g, self.spec.loss, fwd.output, &batch.ages, &self.points, opts.reduction)?;
        if !opts.attribute_guidance {
            return Ok(age);
        }
        let mut attr = attr_loss(g, &fwd.branches, &batch.attributes, opts.coefficients)?;
        if opts.reduction == Reduction::Mean {
            attr = g.scale(attr, 1.0 / batch.ages.len().max(1) as f64);
        }
        total_loss(g, age, attr)
    }

    /// Runs a non-trainable forward pass and decodes ages.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, &p, x)?;
        let ages = predict_ages(self.spec.loss, g.value(fwd.output).data(), &self.points);
        let argmax = |v: Var| -> Vec<usize> {
            let t = g.value(v);
            let width = t.shape()[1];
            t.data()
                .chunks_exact(width)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
                        .0
                })
                .collect()
        };
        Ok(Prediction {
            ages,
            gender: argmax(fwd.branches.gender),
            age_group: argmax(fwd.branches.age_group),
            ethnicity: fwd.branches.ethnicity.map(argmax),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub ages: Vec<f64>,
    pub gender: Vec<usize>,
    pub age_group: Vec<usize>,
    pub ethnicity: Option<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_spec(loss: LossKind) -> ModelSpec {
        let mut net = NetworkConfig::desk();
        net.input_resolution = 16;
        ModelSpec::new(net, AttributeSchema::morph(), loss)
    }

    fn batch(n: usize, res: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = AttributeSchema::morph();
        let ages: Vec<i32> = (0..n).map(|i| 16 + (i as i32 * 13) % 62).collect();
        Batch {
            images: Tensor::uniform([n, 3, res, res], 1.0, &mut rng),
            attributes: ages
                .iter()
                .enumerate()
                .map(|(i, &a)| AttributeLabels::new(a, i % 2, i % 4, &schema).unwrap())
                .collect(),
            ages,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = AgeNet::new(tiny_spec(LossKind::Ecr), 3).unwrap();
        let b = AgeNet::new(tiny_spec(LossKind::Ecr), 3).unwrap();
        let c = AgeNet::new(tiny_spec(LossKind::Ecr), 4).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn output_widths() {
        let b = batch(2, 16, 0);
        for (kind, width) in [(LossKind::Ecr, 1), (LossKind::L1, 1), (LossKind::MulticlassCe, 62)] {
            let net = AgeNet::new(tiny_spec(kind), 0).unwrap();
            let mut g = Graph::new();
            let p = net.store.bind(&mut g, true);
            let x = g.constant(b.images.clone());
            let fwd = net.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.value(fwd.output).shape(), &[2, width]);
            assert_eq!(g.value(fwd.second_layer).shape(), &[2, 9]);
            let (w, _) = net.final_fc();
            assert_eq!(net.store.get(w).shape(), &[128 + 9, width]);
        }
    }

    #[test]
    fn age_loss_reaches_branches_through_fused_layer() {
        let net = AgeNet::new(tiny_spec(LossKind::Ecr), 1).unwrap();
        let b = batch(3, 16, 1);
        for guidance in [false, true] {
            let mut g = Graph::new();
            let p = net.store.bind(&mut g, true);
            let x = g.constant(b.images.clone());
            let fwd = net.forward(&mut g, &p, x).unwrap();
            let opts = LossOptions {
                attribute_guidance: guidance,
                ..LossOptions::default()
            };
            let loss = net.loss(&mut g, &fwd, &b, &opts).unwrap();
            g.backward(loss).unwrap();
            let grads = p.grads(&g);
            for id in net.head.attribute_params() {
                let i = p.vars().iter().position(|&v| v == p.var(id)).unwrap();
                assert!(grads[i].max_abs() > 0.0);
            }
        }
    }

    #[test]
    fn zero_coefficients_match_unguided_loss_and_grads() {
        let net = AgeNet::new(tiny_spec(LossKind::Ecr), 2).unwrap();
        let b = batch(2, 16, 2);
        let run = |opts: LossOptions| {
            let mut g = Graph::new();
            let p = net.store.bind(&mut g, true);
            let x = g.constant(b.images.clone());
            let fwd = net.forward(&mut g, &p, x).unwrap();
            let loss = net.loss(&mut g, &fwd, &b, &opts).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item().unwrap(), p.grads(&g))
        };
        let off = run(LossOptions {
            attribute_guidance: false,
            ..LossOptions::default()
        });
        let zero = run(LossOptions {
            attribute_guidance: true,
            coefficients: AttributeCoefficients {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
            },
            ..LossOptions::default()
        });
        assert_eq!(off.0.to_bits(), zero.0.to_bits());
        for (a, b) in off.1.iter().zip(&zero.1) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x == y));
        }
    }

    #[test]
    fn predict_decodes_every_sample() {
        let net = AgeNet::new(tiny_spec(LossKind::Ecr), 0).unwrap();
        let b = batch(3, 16, 0);
        let pred = net.predict(&b.images).unwrap();
        assert_eq!(pred.ages.len(), 3);
        assert_eq!(pred.gender.len(), 3);
        assert_eq!(pred.ethnicity.as_ref().unwrap().len(), 3);
        assert!(pred.ages.iter().all(|a| a.is_finite()));
    }
}
