//! Demographic attribute guidance: gender, age-group and ethnicity
//! branches over the shared feature vector, their fused "second attribute
//! layer", and the final regression layer that reads it alongside the
//! global features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, Conv1dLayer, Linear, ParamStore};

/// Class counts and age-group boundaries for one dataset.
///
/// `group_boundaries` are inclusive lower bounds; the last group runs to
/// `a_max`. An `ethnicity_classes` of 0 disables that branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub name: String,
    pub a_min: i32,
    pub a_max: i32,
    pub gender_classes: usize,
    pub ethnicity_classes: usize,
    pub group_boundaries: Vec<i32>,
}

impl AttributeSchema {
    /// Ages 16-77; groups 16-44, 45-59, 60-77; four ethnicities.
    pub fn morph() -> Self {
        AttributeSchema {
            name: "morph".into(),
            a_min: 16,
            a_max: 77,
            gender_classes: 2,
            ethnicity_classes: 4,
            group_boundaries: vec![16, 45, 60],
        }
    }

    /// Ages 1-100; groups <18, 18-44, 45-59, 60-74, 75-89, 90-100.
    pub fn utkface() -> Self {
        AttributeSchema {
            name: "utkface".into(),
            a_min: 1,
            a_max: 100,
            gender_classes: 2,
            ethnicity_classes: 4,
            group_boundaries: vec![1, 18, 45, 60, 75, 90],
        }
    }

    /// Ages 3-80; groups <18, 18-44, 45-59, 60-74, 75-80; no ethnicity labels.
    pub fn lap2016() -> Self {
        AttributeSchema {
            name: "lap2016".into(),
            a_min: 3,
            a_max: 80,
            gender_classes: 2,
            ethnicity_classes: 0,
            group_boundaries: vec![3, 18, 45, 60, 75],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "morph" => Ok(Self::morph()),
            "utkface" => Ok(Self::utkface()),
            "lap2016" => Ok(Self::lap2016()),
            other => Err(Error::invalid(format!(
                "unknown schema `{other}` (expected morph, utkface or lap2016)"
            ))),
        }
    }

    pub fn age_groups(&self) -> usize {
        self.group_boundaries.len()
    }

    pub fn has_ethnicity(&self) -> bool {
        self.ethnicity_classes > 0
    }

    /// Branch widths in concatenation order (gender, age group, ethnicity).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.gender_classes, self.age_groups(), self.ethnicity_classes)
    }

    /// Width of the fused second attribute layer.
    pub fn fused_dim(&self) -> usize {
        let (g, a, e) = self.dims();
        g + a + e
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_min >= self.a_max {
            return Err(Error::invalid(format!("schema `{}`: a_min must be below a_max", self.name)));
        }
        if self.gender_classes == 0 {
            return Err(Error::invalid(format!("schema `{}`: needs gender classes", self.name)));
        }
        let b = &self.group_boundaries;
        if b.is_empty() || b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "schema `{}`: group boundaries must be non-empty and strictly increasing",
                self.name
            )));
        }
        if b[0] > self.a_min || *b.last().expect("non-empty") > self.a_max {
            return Err(Error::invalid(format!(
                "schema `{}`: boundaries {b:?} do not cover {}..={}",
                self.name, self.a_min, self.a_max
            )));
        }
        Ok(())
    }
}

/// Index of the age group containing `age`.
pub fn age_group_bin(age: i32, schema: &AttributeSchema) -> Result<usize> {
    if age < schema.a_min || age > schema.a_max {
        return Err(Error::invalid(format!(
            "age {age} outside {}..={} of schema `{}`",
            schema.a_min, schema.a_max, schema.name
        )));
    }
    Ok(schema.group_boundaries.iter().rposition(|&b| b <= age).unwrap_or(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLabels {
    pub gender: usize,
    pub ethnicity: usize,
    pub age_group: usize,
}

impl AttributeLabels {
    pub fn new(age: i32, gender: usize, ethnicity: usize, schema: &AttributeSchema) -> Result<Self> {
        if gender >= schema.gender_classes {
            return Err(Error::invalid(format!(
                "gender {gender} outside 0..{}",
                schema.gender_classes
            )));
        }
        if schema.has_ethnicity() && ethnicity >= schema.ethnicity_classes {
            return Err(Error::invalid(format!(
                "ethnicity {ethnicity} outside 0..{}",
                schema.ethnicity_classes
            )));
        }
        Ok(AttributeLabels {
            gender,
            ethnicity,
            age_group: age_group_bin(age, schema)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for AttributeCoefficients {
    fn default() -> Self {
        AttributeCoefficients {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub fuse_kernel: usize,
    #[serde(default)]
    pub coefficients: AttributeCoefficients,
}

impl HeadConfig {
    pub fn new(feature_dim: usize) -> Self {
        HeadConfig {
            feature_dim,
            fuse_kernel: 3,
            coefficients: AttributeCoefficients::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttributeHead {
    pub schema: AttributeSchema,
    pub cfg: HeadConfig,
    pub global_fc: Linear,
    pub gender: Linear,
    pub age_group: Linear,
    pub ethnicity: Option<Linear>,
    pub fuse: Conv1dLayer,
    pub final_fc: Linear,
}

/// Raw logits of the three attribute branches.
#[derive(Clone, Copy, Debug)]
pub struct BranchLogits {
    pub gender: Var,
    pub age_group: Var,
    pub ethnicity: Option<Var>,
}

impl AttributeHead {
    /// Registers `head.*` parameters for a regression output of width `out_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        schema: &AttributeSchema,
        cfg: &HeadConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        schema.validate()?;
        if cfg.feature_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("head feature dimension must be positive"));
        }
        let f = cfg.feature_dim;
        let global_fc = Linear::new(store, "head.global_fc", in_dim, f, rng)?;
        let gender = Linear::new(store, "head.gender", in_dim, schema.gender_classes, rng)?;
        let age_group = Linear::new(store, "head.age_group", in_dim, schema.age_groups(), rng)?;
        let ethnicity = if schema.has_ethnicity() {
            Some(Linear::new(store, "head.ethnicity", in_dim, schema.ethnicity_classes, rng)?)
        } else {
            None
        };
        let fuse = Conv1dLayer::new(store, "head.fuse", cfg.fuse_kernel, rng)?;
        let final_fc = Linear::new(store, "head.final_fc", f + schema.fused_dim(), out_dim, rng)?;
        Ok(AttributeHead {
            schema: schema.clone(),
            cfg: cfg.clone(),
            global_fc,
            gender,
            age_group,
            ethnicity,
            fuse,
            final_fc,
        })
    }

    /// Ids of the attribute branch parameters.
    pub fn attribute_params(&self) -> Vec<crate::layers::ParamId> {
        let mut ids = vec![self.gender.weight, self.gender.bias, self.age_group.weight, self.age_group.bias];
        if let Some(e) = &self.ethnicity {
            ids.extend([e.weight, e.bias]);
        }
        ids
    }
}

/// One affine map per attribute from the shared feature vector.
pub fn attribute_branches(g: &mut Graph, p: &Bound, head: &AttributeHead, features: Var) -> Result<BranchLogits> {
    Ok(BranchLogits {
        gender: head.gender.forward(g, p, features)?,
        age_group: head.age_group.forward(g, p, features)?,
        ethnicity: match &head.ethnicity {
            Some(l) => Some(l.forward(g, p, features)?),
            None => None,
        },
    })
}

/// Concatenates (gender, age group, ethnicity) and runs the shared
/// length-preserving 1-D convolution over the result.
pub fn fuse_attributes(g: &mut Graph, p: &Bound, head: &AttributeHead, logits: &BranchLogits) -> Result<Var> {
    let mut parts = vec![logits.gender, logits.age_group];
    parts.extend(logits.ethnicity);
    let spliced = g.concat(&parts)?;
    head.fuse.forward(g, p, spliced)
}

/// Concatenates global features with the second attribute layer and maps
/// them to the regression output.
pub fn final_head(g: &mut Graph, p: &Bound, head: &AttributeHead, global: Var, second_layer: Var) -> Result<Var> {
    let (gs, ss) = (g.value(global).shape(), g.value(second_layer).shape());
    if gs.len() != 2 || ss.len() != 2 || gs[0] != ss[0] {
        return Err(Error::shape(
            "final_head",
            format!("global {gs:?} and second layer {ss:?} need the same batch"),
        ));
    }
    let joined = g.concat(&[global, second_layer])?;
    head.final_fc.forward(g, p, joined)
}

/// `α·CE(age group) + β·CE(gender) + γ·CE(ethnicity)`, each summed over the batch.
pub fn attr_loss(
    g: &mut Graph,
    logits: &BranchLogits,
    labels: &[AttributeLabels],
    coeffs: AttributeCoefficients,
) -> Result<Var> {
    let groups: Vec<usize> = labels.iter().map(|l| l.age_group).collect();
    let genders: Vec<usize> = labels.iter().map(|l| l.gender).collect();
    let ce_group = g.softmax_xent(logits.age_group, &groups)?;
    let ce_gender = g.softmax_xent(logits.gender, &genders)?;
    let a = g.scale(ce_group, coeffs.alpha);
    let b = g.scale(ce_gender, coeffs.beta);
    let mut total = g.add(a, b)?;
    if let Some(eth) = logits.ethnicity {
        let eths: Vec<usize> = labels.iter().map(|l| l.ethnicity).collect();
        let ce_eth = g.softmax_xent(eth, &eths)?;
        let c = g.scale(ce_eth, coeffs.gamma);
        total = g.add(total, c)?;
    }
    Ok(total)
}

/// `L_total = L_age + L_attr`.
pub fn total_loss(g: &mut Graph, age_loss: Var, attr: Var) -> Result<Var> {
    g.add(age_loss, attr)
}
