//! Finite-difference verification of every backward rule.
//!
//! Each registered check builds a small graph from random leaf tensors,
//! seeds the reverse pass with a random projection `r` of the output and
//! compares the resulting leaf gradients with central differences of
//! `⟨r, output⟩`.
//!
//! Gradient reversal makes the analytic gradient deliberately differ from the
//! derivative of the forward function. Checks that pass through a reversal
//! layer report the reversed scalar term separately; the reference gradient
//! for a leaf upstream of the layer is then
//! `numeric(output) + w·(−γ − 1)·numeric(term)`.

use std::error::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::branches::{self, AttentionParams, ConvLayer, EncoderParams, EmbeddingKind, Linear};
use crate::gate::{self, GateMask, GateParams};
use crate::group::Group;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::objectives::{self, LossWeights, MarginConfig, ObjectiveInputs};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A scalar term of the output that flows through a reversal layer.
#[derive(Debug, Clone)]
pub struct Reversal {
    pub term: Var,
    /// Weight of the term inside the output.
    pub weight: f64,
    pub gamma: f64,
    /// Indices of the leaves that reach the term only through the reversal.
    pub upstream: Vec<usize>,
}

/// What a check builder returns: the output to differentiate and, when the
/// graph contains a reversal layer, the reversed term.
#[derive(Debug, Clone)]
pub struct Probe {
    pub output: Var,
    pub reversed: Option<Reversal>,
}

impl From<Var> for Probe {
    fn from(output: Var) -> Self {
        Probe {
            output,
            reversed: None,
        }
    }
}

type BuildResult = Result<Probe, Box<dyn Error>>;
type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> BuildResult>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Builder,
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Evaluates `⟨r, output⟩` and the projected reversed term without gradients.
fn evaluate(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> BuildResult,
    r: &Tensor,
) -> Result<(f64, f64), Box<dyn Error>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let probe = build(&mut g, &vars)?;
    let out = dot(g.value(probe.output), r);
    let term = match &probe.reversed {
        Some(rev) if rev.term == probe.output => out,
        // A separate term is a scalar summand of a scalar output.
        Some(_) if r.numel() != 1 => {
            return Err("a reversed term requires a scalar output".into());
        }
        Some(rev) => r.item() * rev.weight * g.value(rev.term).item(),
        None => 0.0,
    };
    Ok((out, term))
}

/// Compares analytic and numeric gradients of one builder.
///
/// `fault` corrupts the named op's backward rule in the analytic pass only.
pub fn check_gradient(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> BuildResult,
    rng: &mut ChaCha8Rng,
    tolerance: f64,
    fault: Option<&str>,
) -> GradReport {
    let max_rel_error = match max_relative_error(inputs, build, rng, fault) {
        Ok(e) => e,
        Err(err) => {
            log::error!("gradcheck {name}: {err}");
            f64::INFINITY
        }
    };
    GradReport {
        op: name.to_string(),
        max_rel_error,
        tolerance,
        passed: max_rel_error <= tolerance,
    }
}

fn max_relative_error(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> BuildResult,
    rng: &mut ChaCha8Rng,
    fault: Option<&str>,
) -> Result<f64, Box<dyn Error>> {
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let probe = build(&mut g, &vars)?;
    let r = Tensor::randn(g.shape(probe.output).to_vec(), 1.0, rng);
    let grads = g.backward_with(probe.output, r.clone());

    let mut worst: f64 = 0.0;
    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let factor = match &probe.reversed {
            Some(rev) if rev.upstream.contains(&i) => Some(-rev.gamma - 1.0),
            _ => None,
        };
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + FD_STEP;
            let (out_p, term_p) = evaluate(&perturbed, build, &r)?;
            perturbed[i].data_mut()[j] = x0 - FD_STEP;
            let (out_m, term_m) = evaluate(&perturbed, build, &r)?;
            perturbed[i].data_mut()[j] = x0;

            let mut numeric = (out_p - out_m) / (2.0 * FD_STEP);
            if let Some(f) = factor {
                numeric += f * (term_p - term_m) / (2.0 * FD_STEP);
            }
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            if !rel.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Entries with magnitude in `[0.2, 1.2]` and random sign, so that kinks at
/// `offset` are never within a finite-difference step.
fn away_from(shape: &[usize], offset: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mag = Tensor::uniform(shape.to_vec(), 0.2, 1.2, rng);
    let sign = Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng);
    mag.zip_map(&sign, |m, s| offset + if s < 0.0 { -m } else { m })
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> BuildResult + 'static,
) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let r = rng;
    vec![
        case("add", vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| {
            Ok(g.add(v[0], v[1])?.into())
        }),
        case("sub", vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| {
            Ok(g.sub(v[0], v[1])?.into())
        }),
        case("mul", vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| {
            Ok(g.mul(v[0], v[1])?.into())
        }),
        case("scale", vec![randn(&[2, 3], r)], |g, v| {
            Ok(g.scale(v[0], -0.7).into())
        }),
        case("add_scalar", vec![randn(&[2, 3], r)], |g, v| {
            Ok(g.add_scalar(v[0], 0.3).into())
        }),
        case("tanh", vec![randn(&[2, 3], r)], |g, v| Ok(g.tanh(v[0]).into())),
        case("relu", vec![away_from(&[2, 3], 0.0, r)], |g, v| {
            Ok(g.relu(v[0]).into())
        }),
        case("sigmoid", vec![randn(&[2, 3], r)], |g, v| {
            Ok(g.sigmoid(v[0]).into())
        }),
        case(
            "sqrt",
            vec![Tensor::uniform(vec![2, 3], 0.5, 2.0, r)],
            |g, v| Ok(g.sqrt(v[0])?.into()),
        ),
        case("clamp_min", vec![away_from(&[2, 3], 0.1, r)], |g, v| {
            Ok(g.clamp_min(v[0], 0.1).into())
        }),
        case("matmul", vec![randn(&[2, 3], r), randn(&[3, 4], r)], |g, v| {
            Ok(g.matmul(v[0], v[1])?.into())
        }),
        case(
            "matmul_nt",
            vec![randn(&[2, 3], r), randn(&[4, 3], r)],
            |g, v| Ok(g.matmul_nt(v[0], v[1])?.into()),
        ),
        case("add_bias", vec![randn(&[2, 3], r), randn(&[3], r)], |g, v| {
            Ok(g.add_bias(v[0], v[1])?.into())
        }),
        case("sum_axis", vec![randn(&[2, 3, 4], r)], |g, v| {
            Ok(g.sum_axis(v[0], 1)?.into())
        }),
        case("mean_axis", vec![randn(&[2, 3, 4], r)], |g, v| {
            Ok(g.mean_axis(v[0], 2)?.into())
        }),
        case("sum_all", vec![randn(&[2, 3], r)], |g, v| {
            Ok(g.sum_all(v[0]).into())
        }),
        case("mean_all", vec![randn(&[2, 3], r)], |g, v| {
            Ok(g.mean_all(v[0]).into())
        }),
        case("inner", vec![randn(&[3, 4], r), randn(&[3, 4], r)], |g, v| {
            Ok(g.inner(v[0], v[1])?.into())
        }),
        case("concat", vec![randn(&[2, 3], r), randn(&[2, 2], r)], |g, v| {
            Ok(g.concat_last(v[0], v[1])?.into())
        }),
        case("select_rows", vec![randn(&[4, 3], r)], |g, v| {
            Ok(g.select_rows(v[0], &[2, 0, 2])?.into())
        }),
        case("softmax", vec![randn(&[2, 5], r)], |g, v| {
            Ok(g.softmax_last(v[0]).into())
        }),
        case("reshape", vec![randn(&[2, 6], r)], |g, v| {
            Ok(g.reshape(v[0], &[3, 4])?.into())
        }),
        case(
            "time_weighted_sum",
            vec![randn(&[2, 3, 5], r), randn(&[2, 5], r)],
            |g, v| Ok(g.time_weighted_sum(v[0], v[1])?.into()),
        ),
        case(
            "depthwise_conv1d",
            vec![randn(&[2, 3, 6], r), randn(&[3, 5], r), randn(&[3], r)],
            |g, v| Ok(g.depthwise_conv1d(v[0], v[1], v[2])?.into()),
        ),
        case(
            "conv1d",
            vec![randn(&[2, 3, 6], r), randn(&[4, 3, 3], r), randn(&[4], r)],
            |g, v| Ok(g.conv1d(v[0], v[1], Some(v[2]))?.into()),
        ),
        case("cross_entropy", vec![randn(&[3, 4], r)], |g, v| {
            Ok(g.cross_entropy_logits(v[0], &[1, 0, 3])?.into())
        }),
        case("l2_normalize", vec![randn(&[3, 4], r)], |g, v| {
            Ok(g.l2_normalize(v[0], super::DEFAULT_NORM_EPS)?.into())
        }),
        case("grl", vec![randn(&[2, 3], r)], |g, v| {
            let out = g.grl(v[0], 0.7)?;
            Ok(Probe {
                output: out,
                reversed: Some(Reversal {
                    term: out,
                    weight: 1.0,
                    gamma: 0.7,
                    upstream: vec![0],
                }),
            })
        }),
        case(
            "aam_margin",
            vec![Tensor::uniform(vec![3, 4], -0.9, 0.9, r)],
            |g, v| Ok(g.aam_margin(v[0], &[0, 2, 1], 30.0, 0.2)?.into()),
        ),
    ]
}

fn gate_from(v: &[Var]) -> GateParams<Var> {
    GateParams {
        kernel: v[1],
        bias: v[2],
    }
}

fn mask_of(g: &mut Graph, v: &[Var]) -> Result<GateMask, Box<dyn Error>> {
    Ok(gate::compute_mask(g, v[0], &gate_from(v))?)
}

fn attention_from(v: &[Var]) -> AttentionParams<Var> {
    AttentionParams {
        w: v[0],
        b: v[1],
        v: v[2],
    }
}

fn composite_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let r = rng;
    let gate_inputs = |r: &mut ChaCha8Rng| {
        vec![
            randn(&[2, 4, 6], r),
            Tensor::randn(vec![4, 5], 0.5, r),
            Tensor::randn(vec![4], 0.5, r),
        ]
    };
    let pool_inputs = |r: &mut ChaCha8Rng| {
        vec![
            randn(&[2, 3], r),
            randn(&[2], r),
            randn(&[2], r),
            randn(&[2, 3, 6], r),
        ]
    };
    let groups = [Group::M, Group::F, Group::M, Group::F, Group::F, Group::M];
    let mut cases = vec![
        case("gate_mask", gate_inputs(r), |g, v| {
            Ok(mask_of(g, v)?.mask.into())
        }),
        case("route.identity", gate_inputs(r), |g, v| {
            let m = mask_of(g, v)?;
            Ok(gate::route(g, v[0], m)?.identity.into())
        }),
        case("route.sex", gate_inputs(r), |g, v| {
            let m = mask_of(g, v)?;
            Ok(gate::route(g, v[0], m)?.sex.into())
        }),
        case("cap_loss", gate_inputs(r), |g, v| {
            let m = mask_of(g, v)?;
            Ok(gate::cap_loss(g, m, 0.3)?.into())
        }),
        case("sat_loss", gate_inputs(r), |g, v| {
            let m = mask_of(g, v)?;
            Ok(gate::sat_loss(g, m).into())
        }),
        case(
            "encode",
            vec![
                randn(&[2, 3, 6], r),
                Tensor::randn(vec![4, 3, 3], 0.5, r),
                randn(&[4], r),
                Tensor::randn(vec![4, 4, 3], 0.5, r),
                randn(&[4], r),
            ],
            |g, v| {
                let enc = EncoderParams {
                    layers: vec![
                        ConvLayer {
                            weight: v[1],
                            bias: v[2],
                            activation: branches::Activation::Relu,
                        },
                        ConvLayer {
                            weight: v[3],
                            bias: v[4],
                            activation: branches::Activation::Identity,
                        },
                    ],
                };
                Ok(branches::encode(g, v[0], &enc)?.into())
            },
        ),
        case("attentive_pool", pool_inputs(r), |g, v| {
            let p = attention_from(v);
            Ok(branches::attentive_stats_pool(g, v[3], &p, branches::EMBED_EPS)?.into())
        }),
        case(
            "embed",
            {
                let mut inputs = pool_inputs(r);
                inputs.push(randn(&[4, 6], r));
                inputs.push(randn(&[4], r));
                inputs
            },
            |g, v| {
                let pooled = branches::attentive_stats_pool(
                    g,
                    v[3],
                    &attention_from(v),
                    branches::EMBED_EPS,
                )?;
                let proj = Linear {
                    weight: v[4],
                    bias: v[5],
                };
                Ok(branches::embed(g, pooled, &proj, EmbeddingKind::Identity)?
                    .vectors
                    .into())
            },
        ),
        case(
            "aam_logits",
            vec![randn(&[3, 4], r), randn(&[5, 4], r)],
            |g, v| Ok(branches::aam_logits(g, v[0], &[4, 0, 2], v[1], 30.0, 0.2)?.into()),
        ),
        case(
            "spk_loss",
            vec![randn(&[4, 4], r), randn(&[3, 4], r)],
            |g, v| {
                let l = objectives::spk_loss(g, v[0], &[0, 2, 1, 2], v[1], MarginConfig::default())?;
                Ok(l.loss.into())
            },
        ),
        case(
            "sex_loss",
            vec![randn(&[4, 3], r), randn(&[2, 3], r), randn(&[2], r)],
            move |g, v| {
                let head = Linear {
                    weight: v[1],
                    bias: v[2],
                };
                Ok(objectives::sex_loss(g, v[0], &groups[..4], &head)?.into())
            },
        ),
        case(
            "adv_loss",
            vec![randn(&[4, 3], r), randn(&[2, 3], r), randn(&[2], r)],
            move |g, v| {
                let head = Linear {
                    weight: v[1],
                    bias: v[2],
                };
                let l = objectives::adv_loss(g, v[0], &groups[..4], &head, 0.6)?;
                Ok(Probe {
                    output: l,
                    reversed: Some(Reversal {
                        term: l,
                        weight: 1.0,
                        gamma: 0.6,
                        upstream: vec![0],
                    }),
                })
            },
        ),
        case(
            "decor_loss",
            vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |g, v| Ok(objectives::decor_loss(g, v[0], v[1])?.into()),
        ),
        case(
            "rex_penalty",
            vec![Tensor::uniform(vec![6], 0.1, 3.0, r)],
            move |g, v| Ok(objectives::rex_penalty(g, v[0], &groups, 2)?.0.into()),
        ),
    ];
    cases.push(total_case(r));
    cases
}

/// The full weighted objective on a tiny model, differentiated with respect
/// to the input batch and every parameter.
fn total_case(rng: &mut ChaCha8Rng) -> Case {
    let cfg = ModelConfig {
        feature_bins: 3,
        channels: 4,
        encoder_layers: 2,
        encoder_width: 3,
        gate_width: 5,
        attention_dim: 3,
        embedding_dim: 4,
        speakers: 3,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg, rng);
    // Move the gate away from its near-neutral initialization.
    params.gate.kernel = Tensor::randn(vec![4, 5], 0.5, rng);
    params.gate.bias = Tensor::randn(vec![4], 0.5, rng);
    let x = Tensor::randn(vec![4, 3, 8], 1.0, rng);

    let named = params.named_tensors();
    let upstream: Vec<usize> = named
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| {
            n.starts_with("encoder") || n.starts_with("gate") || n.starts_with("identity")
        })
        .map(|(i, _)| i)
        .chain(std::iter::once(named.len()))
        .collect();
    let mut inputs: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    inputs.push(x);

    let weights = LossWeights {
        lambda_s: 0.7,
        lambda_adv: 0.3,
        lambda_decor: 0.4,
        lambda_cap: 0.5,
        lambda_sat: 0.2,
        lambda_rex: 0.6,
        gamma: 0.8,
        rho_id: 0.4,
    };
    let template = params;
    case("total_loss", inputs, move |g, v| {
        let mut k = 0;
        let p = template.map(&mut |_, _| {
            k += 1;
            v[k - 1]
        });
        let xv = v[k];
        let fp = forward(g, xv, &p)?;
        let speakers = [0, 1, 2, 1];
        let groups = [Group::M, Group::F, Group::M, Group::F];
        let inputs = ObjectiveInputs {
            z_id: fp.z_id.vectors,
            z_sex: fp.z_sex.vectors,
            mask: fp.mask,
            speakers: &speakers,
            groups: &groups,
            heads: &p.heads,
            margin: MarginConfig {
                scale: 30.0,
                margin: 0.2,
            },
            min_per_group: 2,
        };
        let obj = objectives::total_loss(g, &inputs, &weights)?;
        Ok(Probe {
            output: obj.total,
            reversed: Some(Reversal {
                term: obj.adv,
                weight: weights.lambda_adv,
                gamma: weights.gamma,
                upstream: upstream.clone(),
            }),
        })
    })
}

fn all_cases(seed: u64) -> Vec<(Case, ChaCha8Rng)> {
    let mut setup = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut setup);
    cases.extend(composite_cases(&mut setup));
    cases
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let stream = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + i as u64));
            (c, stream)
        })
        .collect()
}

/// Names of every registered check, in execution order.
pub fn registered_checks() -> Vec<&'static str> {
    all_cases(0).into_iter().map(|(c, _)| c.name).collect()
}

fn run(seed: u64, tolerance: f64, fault: Option<&str>) -> Vec<GradReport> {
    all_cases(seed)
        .into_iter()
        .map(|(c, mut rng)| check_gradient(c.name, &c.inputs, &*c.build, &mut rng, tolerance, fault))
        .collect()
}

/// Runs every registered check on inputs drawn from `seed`.
pub fn gradcheck_all(seed: u64, tolerance: f64) -> Vec<GradReport> {
    run(seed, tolerance, None)
}

/// Like [`gradcheck_all`] with the backward rule of `op` corrupted.
#[doc(hidden)]
pub fn gradcheck_with_fault(seed: u64, tolerance: f64, op: &str) -> Vec<GradReport> {
    run(seed, tolerance, Some(op))
}
