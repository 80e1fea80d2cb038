//! The four inverse-dynamics model families.
//!
//! All of them regress joint torques from a robot state, but they consume
//! different views of the sample: the plain feedforward baseline eats the
//! stacked flat vector, the shared-encoder network eats per-leg feature
//! blocks, and the two graph networks eat the graph form. The shared-encoder
//! and structured-graph families inherit exact equivariance to symmetric leg
//! relabelings from weight sharing plus order-free pooling; the baseline and
//! the typical graph encoding do not, which is the comparison the toolkit
//! exists to make.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batch_gradients, geometric_lr, Adam, Gradients, Mlp, MlpConfig, NodeRef, ParamStore, Tape,
};
use crate::repr::{to_flat_vector, to_graph, GraphStyle, StructuredSample, TargetMode};
use crate::robot::{JointTorques, RobotModel};

/// Standard deviations below this are clamped before dividing. Slots that
/// are constant over the training split normalize to zero either way; the
/// floor only guards the division. Queries must therefore keep constant
/// slots at their training value (see the tracking controller, which takes
/// the base motion from the reference command, not the plant).
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Ffnn,
    TypicalGnn,
    Sdgnn,
    Sdnn,
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Ffnn => "ffnn",
            ModelFamily::TypicalGnn => "typical_gnn",
            ModelFamily::Sdgnn => "sdgnn",
            ModelFamily::Sdnn => "sdnn",
        }
    }

    pub fn all() -> [ModelFamily; 4] {
        [ModelFamily::Ffnn, ModelFamily::TypicalGnn, ModelFamily::Sdgnn, ModelFamily::Sdnn]
    }

    /// Families whose predictions commute with symmetric leg relabelings
    /// for any parameter values.
    pub fn is_equivariant(&self) -> bool {
        matches!(self, ModelFamily::Sdgnn | ModelFamily::Sdnn)
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::all()
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

/// Architecture sizes. `defaults` pins the reference configuration per
/// family; fields not used by a family keep their default values so specs
/// serialize uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub mode: TargetMode,
    /// Hidden widths of the flat baseline.
    pub ffnn_hidden: Vec<usize>,
    /// Per-leg latent width of the shared-encoder network.
    pub leg_latent: usize,
    /// Graph-network latent widths.
    pub edge_latent: usize,
    pub node_latent: usize,
    pub global_latent: usize,
    /// Hidden layers inside each shared MLP.
    pub hidden_layers: usize,
    /// Processing steps after encoding.
    pub steps: usize,
}

impl ModelSpec {
    pub fn defaults(family: ModelFamily, mode: TargetMode) -> ModelSpec {
        let steps = match family {
            ModelFamily::TypicalGnn => 5,
            ModelFamily::Ffnn => 0,
            _ => 2,
        };
        ModelSpec {
            family,
            mode,
            ffnn_hidden: vec![256, 256, 256],
            leg_latent: 128,
            edge_latent: 64,
            node_latent: 16,
            global_latent: 16,
            hidden_layers: 2,
            steps,
        }
    }

    fn graph_style(&self) -> GraphStyle {
        match self.family {
            ModelFamily::TypicalGnn => GraphStyle::Typical,
            _ => GraphStyle::Structured,
        }
    }

    fn hidden(&self, width: usize) -> Vec<usize> {
        vec![width; self.hidden_layers]
    }
}

/// Per-slot affine normalization fitted on the training split.
///
/// The flat baseline uses one statistic per stacked coordinate. The
/// equivariant families pool statistics across legs (and across nodes for
/// the graph form): every leg is normalized by the same per-slot affine
/// map, which is what keeps normalization from breaking equivariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Graph node slots; empty for non-graph families.
    pub node_mean: Vec<f64>,
    pub node_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn fit_slots(rows: impl Iterator<Item = Vec<f64>> + Clone, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; width];
    let mut count = 0usize;
    for row in rows.clone() {
        assert_eq!(row.len(), width, "slot width drift");
        for (m, v) in mean.iter_mut().zip(&row) {
            *m += v;
        }
        count += 1;
    }
    assert!(count > 0, "no rows to fit");
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; width];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(&row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

fn normalize(values: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    values
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

impl NormStats {
    /// Identity map; the state of an untrained model.
    pub fn identity(spec: &ModelSpec, robot: &RobotModel) -> NormStats {
        let (iw, nw, tw) = NormStats::widths(spec, robot);
        NormStats {
            input_mean: vec![0.0; iw],
            input_std: vec![1.0; iw],
            node_mean: vec![0.0; nw],
            node_std: vec![1.0; nw],
            target_mean: vec![0.0; tw],
            target_std: vec![1.0; tw],
        }
    }

    fn widths(spec: &ModelSpec, robot: &RobotModel) -> (usize, usize, usize) {
        let leg_width = crate::repr::LegFeature::width(spec.mode, robot.joints_per_leg);
        match spec.family {
            ModelFamily::Ffnn => {
                (crate::repr::flat_input_len(robot, spec.mode), 0, robot.n_joints())
            }
            ModelFamily::Sdnn => (leg_width, 0, robot.joints_per_leg),
            ModelFamily::Sdgnn => (leg_width - 2, 2, robot.joints_per_leg),
            ModelFamily::TypicalGnn => {
                let joint = leg_width - 14;
                (joint, 11, robot.joints_per_leg)
            }
        }
    }

    /// Fits statistics on a training split.
    pub fn fit(spec: &ModelSpec, robot: &RobotModel, samples: &[StructuredSample]) -> NormStats {
        assert!(!samples.is_empty(), "empty training split");
        let (iw, nw, tw) = NormStats::widths(spec, robot);
        let mut stats = NormStats::identity(spec, robot);
        match spec.family {
            ModelFamily::Ffnn => {
                let rows = samples.iter().map(|s| to_flat_vector(robot, s));
                (stats.input_mean, stats.input_std) = fit_slots(rows, iw);
                let targets = samples.iter().map(|s| s.tau.data.clone());
                (stats.target_mean, stats.target_std) = fit_slots(targets, tw);
            }
            ModelFamily::Sdnn => {
                let rows = samples.iter().flat_map(|s| s.legs.iter().map(|l| l.to_vec()));
                (stats.input_mean, stats.input_std) = fit_slots(rows, iw);
                let targets = samples
                    .iter()
                    .flat_map(|s| (0..s.n_legs()).map(|i| s.tau.leg(i).to_vec()));
                (stats.target_mean, stats.target_std) = fit_slots(targets, tw);
            }
            ModelFamily::Sdgnn | ModelFamily::TypicalGnn => {
                let style = spec.graph_style();
                let graphs: Vec<crate::repr::GraphData> =
                    samples.iter().map(|s| to_graph(robot, s, style)).collect();
                let edges = graphs.iter().flat_map(|g| g.edges.iter().map(|(f, _, _)| f.clone()));
                (stats.input_mean, stats.input_std) = fit_slots(edges, iw);
                let nodes = graphs.iter().flat_map(|g| {
                    g.nodes.iter().map(move |n| {
                        let mut padded = n.clone();
                        padded.resize(nw, 0.0);
                        padded
                    })
                });
                (stats.node_mean, stats.node_std) = fit_slots(nodes, nw);
                let targets = samples
                    .iter()
                    .flat_map(|s| (0..s.n_legs()).map(|i| s.tau.leg(i).to_vec()));
                (stats.target_mean, stats.target_std) = fit_slots(targets, tw);
            }
        }
        stats
    }
}

/// A sample translated into a family's input form, normalized, with the
/// normalized stacked target alongside.
pub enum Prepared {
    Flat { x: Vec<f64>, t: Vec<f64> },
    Legs { xs: Vec<Vec<f64>>, t: Vec<f64> },
    Graph { nodes: Vec<Vec<f64>>, edges: Vec<(Vec<f64>, usize, usize)>, t: Vec<f64> },
}

impl Prepared {
    fn target(&self) -> &[f64] {
        match self {
            Prepared::Flat { t, .. } | Prepared::Legs { t, .. } | Prepared::Graph { t, .. } => t,
        }
    }
}

enum Arch {
    Ffnn { net: Mlp },
    Sdnn { encoder: Mlp, core: Mlp, decoder: Mlp },
    Gn { enc_edge: Mlp, enc_node: Mlp, enc_u: Mlp, core_edge: Mlp, core_node: Mlp, core_u: Mlp, decoder: Mlp },
}

/// A model family instance bound to one robot's dimensions.
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub norm: NormStats,
    arch: Arch,
    joints_per_leg: usize,
}

impl Model {
    /// Builds the architecture for a robot and initializes parameters from
    /// the seed. Parameter registration order is fixed per family.
    pub fn new(robot: &RobotModel, spec: ModelSpec, seed: u64) -> Model {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let leg_width = crate::repr::LegFeature::width(spec.mode, robot.joints_per_leg);
        let arch = match spec.family {
            ModelFamily::Ffnn => {
                let input = crate::repr::flat_input_len(robot, spec.mode);
                let cfg = MlpConfig::new(input, &spec.ffnn_hidden, robot.n_joints());
                Arch::Ffnn { net: Mlp::new(&mut store, "net", cfg) }
            }
            ModelFamily::Sdnn => {
                let h = spec.leg_latent;
                Arch::Sdnn {
                    encoder: Mlp::new(
                        &mut store,
                        "enc.leg",
                        MlpConfig::new(leg_width, &spec.hidden(h), h),
                    ),
                    core: Mlp::new(
                        &mut store,
                        "core.leg",
                        MlpConfig::new(2 * h, &spec.hidden(h), h),
                    ),
                    decoder: Mlp::new(
                        &mut store,
                        "dec.leg",
                        MlpConfig::new(h, &spec.hidden(h), robot.joints_per_leg),
                    ),
                }
            }
            ModelFamily::Sdgnn | ModelFamily::TypicalGnn => {
                let (ew, nw, _) = NormStats::widths(&spec, robot);
                let (e, n, u) = (spec.edge_latent, spec.node_latent, spec.global_latent);
                // Processing inputs carry the encoder output concatenated
                // with the current latent, so every role enters at twice
                // its latent width.
                Arch::Gn {
                    enc_edge: Mlp::new(&mut store, "enc.edge", MlpConfig::new(ew, &spec.hidden(e), e)),
                    enc_node: Mlp::new(&mut store, "enc.node", MlpConfig::new(nw, &spec.hidden(n), n)),
                    enc_u: Mlp::new(&mut store, "enc.u", MlpConfig::new(0, &spec.hidden(u), u)),
                    core_edge: Mlp::new(
                        &mut store,
                        "core.edge",
                        MlpConfig::new(2 * e + 2 * n + 2 * n + 2 * u, &spec.hidden(e), e),
                    ),
                    core_node: Mlp::new(
                        &mut store,
                        "core.node",
                        MlpConfig::new(2 * n + e + 2 * u, &spec.hidden(n), n),
                    ),
                    core_u: Mlp::new(
                        &mut store,
                        "core.u",
                        MlpConfig::new(2 * u + e + n, &spec.hidden(u), u),
                    ),
                    decoder: Mlp::new(
                        &mut store,
                        "dec.edge",
                        MlpConfig::new(e, &spec.hidden(e), robot.joints_per_leg),
                    ),
                }
            }
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        store.init_he_uniform(&mut rng);
        // Sum-pooled input blocks enter with n times the second moment the
        // fan-in rule assumes; their columns shrink so activations start at
        // unit scale.
        let n = robot.n_legs as f64;
        match &arch {
            Arch::Sdnn { core, .. } => {
                let h = spec.leg_latent;
                store.scale_columns(core.first_weight(), h..2 * h, 1.0 / n.sqrt());
            }
            Arch::Gn { core_u, .. } => {
                let (e, nl, u) = (spec.edge_latent, spec.node_latent, spec.global_latent);
                let w = core_u.first_weight();
                store.scale_columns(w, 2 * u..2 * u + e, 1.0 / n.sqrt());
                store.scale_columns(w, 2 * u + e..2 * u + e + nl, 1.0 / (n + 1.0).sqrt());
            }
            Arch::Ffnn { .. } => {}
        }
        let norm = NormStats::identity(&spec, robot);
        Model {
            spec,
            store,
            norm,
            arch,
            joints_per_leg: robot.joints_per_leg,
        }
    }

    /// Normalizes a sample into the family's input form.
    pub fn prepare(&self, robot: &RobotModel, sample: &StructuredSample) -> Prepared {
        let t_stacked = self.normalize_target(&sample.tau);
        match self.spec.family {
            ModelFamily::Ffnn => Prepared::Flat {
                x: normalize(
                    &to_flat_vector(robot, sample),
                    &self.norm.input_mean,
                    &self.norm.input_std,
                ),
                t: t_stacked,
            },
            ModelFamily::Sdnn => Prepared::Legs {
                xs: sample
                    .legs
                    .iter()
                    .map(|l| normalize(&l.to_vec(), &self.norm.input_mean, &self.norm.input_std))
                    .collect(),
                t: t_stacked,
            },
            ModelFamily::Sdgnn | ModelFamily::TypicalGnn => {
                let g = to_graph(robot, sample, self.spec.graph_style());
                let nw = self.norm.node_mean.len();
                let nodes = g
                    .nodes
                    .iter()
                    .map(|n| {
                        let mut padded = n.clone();
                        padded.resize(nw, 0.0);
                        normalize(&padded, &self.norm.node_mean, &self.norm.node_std)
                    })
                    .collect();
                let edges = g
                    .edges
                    .iter()
                    .map(|(f, s, r)| {
                        (normalize(f, &self.norm.input_mean, &self.norm.input_std), *s, *r)
                    })
                    .collect();
                Prepared::Graph { nodes, edges, t: t_stacked }
            }
        }
    }

    fn normalize_target(&self, tau: &JointTorques) -> Vec<f64> {
        match self.spec.family {
            ModelFamily::Ffnn => {
                normalize(&tau.data, &self.norm.target_mean, &self.norm.target_std)
            }
            _ => (0..tau.n_legs())
                .flat_map(|i| {
                    normalize(tau.leg(i), &self.norm.target_mean, &self.norm.target_std)
                })
                .collect(),
        }
    }

    fn denormalize_target(&self, stacked: &[f64]) -> Vec<f64> {
        let (mean, std) = (&self.norm.target_mean, &self.norm.target_std);
        match self.spec.family {
            ModelFamily::Ffnn => stacked
                .iter()
                .zip(mean)
                .zip(std)
                .map(|((v, m), s)| v * s + m)
                .collect(),
            _ => stacked
                .chunks(self.joints_per_leg)
                .flat_map(|leg| {
                    leg.iter().zip(mean).zip(std).map(|((v, m), s)| v * s + m)
                })
                .collect(),
        }
    }

    /// Forward pass on prepared input; output is the normalized stacked
    /// torque prediction, legs in order.
    pub fn forward(&self, tape: &mut Tape, input: &Prepared) -> Result<NodeRef> {
        match (&self.arch, input) {
            (Arch::Ffnn { net }, Prepared::Flat { x, .. }) => {
                let xn = tape.input(x);
                net.forward(tape, xn)
            }
            (Arch::Sdnn { encoder, core, decoder }, Prepared::Legs { xs, .. }) => {
                let mut h: Vec<NodeRef> = xs
                    .iter()
                    .map(|x| {
                        let xn = tape.input(x);
                        encoder.forward(tape, xn)
                    })
                    .collect::<Result<_>>()?;
                for _ in 0..self.spec.steps {
                    let pooled = tape.sum(&h)?;
                    h = h
                        .iter()
                        .map(|&hi| {
                            let joined = tape.concat(&[hi, pooled]);
                            core.forward(tape, joined)
                        })
                        .collect::<Result<_>>()?;
                }
                let outs = h
                    .iter()
                    .map(|&hi| decoder.forward(tape, hi))
                    .collect::<Result<Vec<_>>>()?;
                Ok(tape.concat(&outs))
            }
            (
                Arch::Gn { enc_edge, enc_node, enc_u, core_edge, core_node, core_u, decoder },
                Prepared::Graph { nodes, edges, .. },
            ) => {
                let e_enc: Vec<NodeRef> = edges
                    .iter()
                    .map(|(f, _, _)| {
                        let x = tape.input(f);
                        enc_edge.forward(tape, x)
                    })
                    .collect::<Result<_>>()?;
                let n_enc: Vec<NodeRef> = nodes
                    .iter()
                    .map(|f| {
                        let x = tape.input(f);
                        enc_node.forward(tape, x)
                    })
                    .collect::<Result<_>>()?;
                let empty = tape.input(&[]);
                let u_enc = enc_u.forward(tape, empty)?;

                let zero_edge = tape.input(&vec![0.0; self.spec.edge_latent]);
                let (mut e_cur, mut n_cur, mut u_cur) = (e_enc.clone(), n_enc.clone(), u_enc);
                for _ in 0..self.spec.steps {
                    let e_in: Vec<NodeRef> = e_enc
                        .iter()
                        .zip(&e_cur)
                        .map(|(&enc, &cur)| tape.concat(&[enc, cur]))
                        .collect();
                    let n_in: Vec<NodeRef> = n_enc
                        .iter()
                        .zip(&n_cur)
                        .map(|(&enc, &cur)| tape.concat(&[enc, cur]))
                        .collect();
                    let u_in = tape.concat(&[u_enc, u_cur]);

                    let e_next: Vec<NodeRef> = edges
                        .iter()
                        .zip(&e_in)
                        .map(|((_, s, r), &e)| {
                            let x = tape.concat(&[e, n_in[*s], n_in[*r], u_in]);
                            core_edge.forward(tape, x)
                        })
                        .collect::<Result<_>>()?;

                    let n_next: Vec<NodeRef> = (0..nodes.len())
                        .map(|i| {
                            let incoming: Vec<NodeRef> = edges
                                .iter()
                                .zip(&e_next)
                                .filter(|((_, _, r), _)| *r == i)
                                .map(|(_, &e)| e)
                                .collect();
                            let agg = if incoming.is_empty() {
                                zero_edge
                            } else {
                                tape.sum(&incoming)?
                            };
                            let x = tape.concat(&[n_in[i], agg, u_in]);
                            core_node.forward(tape, x)
                        })
                        .collect::<Result<_>>()?;

                    let e_all = tape.sum(&e_next)?;
                    let n_all = tape.sum(&n_next)?;
                    let xu = tape.concat(&[u_in, e_all, n_all]);
                    let u_next = core_u.forward(tape, xu)?;

                    e_cur = e_next;
                    n_cur = n_next;
                    u_cur = u_next;
                }
                let outs = e_cur
                    .iter()
                    .map(|&e| decoder.forward(tape, e))
                    .collect::<Result<Vec<_>>>()?;
                Ok(tape.concat(&outs))
            }
            _ => Err(Error::Shape("prepared input does not match the family".into())),
        }
    }

    /// Predicts de-normalized torques for one sample.
    pub fn predict(&self, robot: &RobotModel, sample: &StructuredSample) -> Result<JointTorques> {
        let prepared = self.prepare(robot, sample);
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, &prepared)?;
        let data = self.denormalize_target(tape.value(out));
        Ok(JointTorques { data, joints_per_leg: self.joints_per_leg })
    }

    /// Mean squared error over normalized torque coordinates, averaged over
    /// the batch. Summation runs in sample order.
    pub fn loss(&self, robot: &RobotModel, samples: &[StructuredSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Config("loss of an empty batch".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let prepared = self.prepare(robot, s);
            total += self.loss_prepared(&prepared)?;
        }
        Ok(total / samples.len() as f64)
    }

    fn loss_prepared(&self, prepared: &Prepared) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, prepared)?;
        let l = tape.mse(out, prepared.target())?;
        Ok(tape.value(l)[0])
    }
}

/// Training loop configuration. The defaults are the reference protocol:
/// batches of 64, learning rate decaying geometrically between 1e-3 and
/// 1e-4 over the budget, and the stop rule that ends training once the
/// condition 0.7 * val > train has failed `patience` consecutive epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr1: f64,
    pub patience: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr0: 1e-3,
            lr1: 1e-4,
            patience: 5,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Root-mean-square torque error in physical units, comparable across
/// model families regardless of their normalization statistics.
pub fn torque_rmse(
    model: &Model,
    robot: &RobotModel,
    samples: &[StructuredSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("torque rmse over an empty sample set".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for s in samples {
        let pred = model.predict(robot, s)?;
        for (p, y) in pred.data.iter().zip(&s.tau.data) {
            sq += (p - y) * (p - y);
        }
        count += s.tau.data.len();
    }
    Ok((sq / count as f64).sqrt())
}

/// Mean normalized MSE over prepared samples, summed in order.
fn eval_prepared(model: &Model, prepared: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for p in prepared {
        total += model.loss_prepared(p)?;
    }
    Ok(total / prepared.len() as f64)
}

/// Fits normalization on the training split, then runs mini-batch Adam with
/// the geometric schedule. Keeps the best-validation parameters: the model
/// ends at the checkpoint that scored `best_val`, not at the last epoch.
pub fn train(
    model: &mut Model,
    robot: &RobotModel,
    train_split: &[StructuredSample],
    val_split: &[StructuredSample],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    use rand::{Rng, SeedableRng};
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    model.norm = NormStats::fit(&model.spec, robot, train_split);
    let train_prep: Vec<Prepared> =
        train_split.iter().map(|s| model.prepare(robot, s)).collect();
    let val_prep: Vec<Prepared> = val_split.iter().map(|s| model.prepare(robot, s)).collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_prep.len()).collect();
    let mut adam = Adam::new(&model.store);
    let mut logs = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<serde_json::Value> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = geometric_lr(cfg.lr0, cfg.lr1, epoch, cfg.epochs);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = batch_ids.iter().map(|&i| &train_prep[i]).collect();
            let (_, grads) = batch_gradients(
                &model.store,
                &batch,
                cfg.threads,
                |store, sample, grads: &mut Gradients| {
                    let mut tape = Tape::new(store);
                    let out = model.forward(&mut tape, sample).expect("shapes fixed at prepare");
                    let l = tape.mse(out, sample.target()).expect("target width fixed");
                    tape.backward(l, grads);
                    tape.value(l)[0]
                },
            );
            adam.step(&mut model.store, &grads, lr);
        }

        let train_mse = eval_prepared(model, &train_prep)?;
        let val_mse = eval_prepared(model, &val_prep)?;
        logs.push(EpochLog { epoch, train_mse, val_mse, lr });

        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best_params = Some(model.store.to_json());
        }
        if 0.7 * val_mse > train_mse {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some(p) = best_params {
        model.store.load_json(&p)?;
    }
    Ok(TrainResult { logs, best_epoch, best_val })
}

/// Serialized model: header with the architecture, provenance, and
/// normalization, followed by the parameter tensors in registration order.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub robot: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub lr0: f64,
    pub lr1: f64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub norm: NormStats,
    pub params: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "symleg-model-v1";

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        robot: &RobotModel,
        seed: u64,
        lr: (f64, f64),
        best_epoch: usize,
        best_val: f64,
    ) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            robot: robot.name.clone(),
            spec: model.spec.clone(),
            seed,
            lr0: lr.0,
            lr1: lr.1,
            best_epoch,
            best_val,
            norm: model.norm.clone(),
            params: model.store.to_json(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and restores parameters, validating the shape
    /// manifest against the robot's dimensions.
    pub fn restore(&self, robot: &RobotModel) -> Result<Model> {
        if robot.name != self.robot {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for {:?}, not {:?}",
                self.robot, robot.name,
            )));
        }
        let mut model = Model::new(robot, self.spec.clone(), 0);
        model.store.load_json(&self.params)?;
        model.norm = self.norm.clone();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{inverse_dynamics, sample_contact_consistent_state};
    use crate::nn::gradient_check;
    use crate::repr::{build_sample, SampleMeta};
    use crate::robot::{make_robot, RobotFamily, RobotState};
    use crate::symmetry::{act_on_state, act_on_torques, equivariance_residual, GroupElement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_pair(robot: &RobotModel, rng: &mut ChaCha8Rng) -> (RobotState, JointTorques) {
        let state = sample_contact_consistent_state(robot, rng);
        let tau = inverse_dynamics(robot, &state, &state.attached_legs()).unwrap().torques;
        (state, tau)
    }

    fn oracle_sample(robot: &RobotModel, rng: &mut ChaCha8Rng) -> StructuredSample {
        let (state, tau) = oracle_pair(robot, rng);
        build_sample(robot, &state, &tau, TargetMode::Accel, None, SampleMeta::unlabeled())
    }

    fn shifted_sample(
        robot: &RobotModel,
        state: &RobotState,
        tau: &JointTorques,
        steps: i64,
    ) -> StructuredSample {
        let g = GroupElement::LegShift { steps };
        build_sample(
            robot,
            &act_on_state(robot, &g, state),
            &act_on_torques(robot, &g, tau),
            TargetMode::Accel,
            None,
            SampleMeta::unlabeled(),
        )
    }

    fn model_as_state_map<'a>(
        model: &'a Model,
        robot: &'a RobotModel,
    ) -> impl Fn(&RobotState) -> crate::error::Result<JointTorques> + 'a {
        move |state: &RobotState| {
            let tau = JointTorques::zeros(robot);
            let sample =
                build_sample(robot, state, &tau, TargetMode::Accel, None, SampleMeta::unlabeled());
            model.predict(robot, &sample)
        }
    }

    #[test]
    fn default_specs_match_the_reference_table() {
        let f = ModelSpec::defaults(ModelFamily::Ffnn, TargetMode::Accel);
        assert_eq!(f.ffnn_hidden, vec![256, 256, 256]);
        let s = ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel);
        assert_eq!((s.leg_latent, s.hidden_layers, s.steps), (128, 2, 2));
        let g = ModelSpec::defaults(ModelFamily::Sdgnn, TargetMode::Accel);
        assert_eq!(
            (g.edge_latent, g.node_latent, g.global_latent, g.steps),
            (64, 16, 16, 2),
        );
        let t = ModelSpec::defaults(ModelFamily::TypicalGnn, TargetMode::Accel);
        assert_eq!(t.steps, 5);
    }

    #[test]
    fn every_family_predicts_the_right_shape_on_every_robot() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for rf in RobotFamily::all() {
            let robot = make_robot(rf);
            let sample = oracle_sample(&robot, &mut rng);
            for mf in ModelFamily::all() {
                let model = Model::new(&robot, ModelSpec::defaults(mf, TargetMode::Accel), 1);
                let tau = model.predict(&robot, &sample).unwrap();
                assert_eq!(tau.data.len(), robot.n_joints(), "{}", mf.name());
                assert!(tau.data.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn equivariant_families_commute_with_leg_shifts_at_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for rf in RobotFamily::all() {
            let robot = make_robot(rf);
            for mf in [ModelFamily::Sdnn, ModelFamily::Sdgnn] {
                let model = Model::new(&robot, ModelSpec::defaults(mf, TargetMode::Accel), 7);
                let f = model_as_state_map(&model, &robot);
                for steps in 1..robot.symmetry_order() {
                    let state = sample_contact_consistent_state(&robot, &mut rng);
                    let g = GroupElement::LegShift { steps: steps as i64 };
                    let r = equivariance_residual(&robot, &g, &state, &f).unwrap();
                    assert!(r < 1e-6, "{} {} shift {steps}: {r}", rf.name(), mf.name());
                }
            }
        }
    }

    #[test]
    fn baseline_families_break_leg_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let robot = make_robot(RobotFamily::Hexa6);
        for mf in [ModelFamily::Ffnn, ModelFamily::TypicalGnn] {
            let model = Model::new(&robot, ModelSpec::defaults(mf, TargetMode::Accel), 7);
            let f = model_as_state_map(&model, &robot);
            let state = sample_contact_consistent_state(&robot, &mut rng);
            let g = GroupElement::LegShift { steps: 1 };
            let r = equivariance_residual(&robot, &g, &state, &f).unwrap();
            assert!(r > 1e-3, "{}: residual {r} suspiciously small", mf.name());
        }
    }

    #[test]
    fn scene_motions_leave_predictions_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let robot = make_robot(RobotFamily::Nona9);
        let state = sample_contact_consistent_state(&robot, &mut rng);
        let tau = JointTorques::zeros(&robot);
        let sample =
            build_sample(&robot, &state, &tau, TargetMode::Accel, None, SampleMeta::unlabeled());
        for mf in [ModelFamily::Sdnn, ModelFamily::Sdgnn] {
            let model = Model::new(&robot, ModelSpec::defaults(mf, TargetMode::Accel), 9);
            let base = model.predict(&robot, &sample).unwrap();
            let moved_state = act_on_state(
                &robot,
                &GroupElement::Translation { offset: crate::spatial::Vec3::new(2.0, -1.0, 3.0) },
                &state,
            );
            let moved = build_sample(
                &robot,
                &moved_state,
                &tau,
                TargetMode::Accel,
                None,
                SampleMeta::unlabeled(),
            );
            let out = model.predict(&robot, &moved).unwrap();
            assert!(base
                .data
                .iter()
                .zip(&out.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn loss_is_zero_when_the_label_equals_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let robot = make_robot(RobotFamily::Magneto4);
        let mut sample = oracle_sample(&robot, &mut rng);
        let model = Model::new(&robot, ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel), 3);
        sample.tau = model.predict(&robot, &sample).unwrap();
        let l = model.loss(&robot, std::slice::from_ref(&sample)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn unit_error_on_one_coordinate_costs_one_over_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let robot = make_robot(RobotFamily::Hexa6);
        let mut sample = oracle_sample(&robot, &mut rng);
        let model = Model::new(&robot, ModelSpec::defaults(ModelFamily::Ffnn, TargetMode::Accel), 3);
        let mut tau = model.predict(&robot, &sample).unwrap();
        tau.data[5] += 1.0;
        sample.tau = tau;
        let l = model.loss(&robot, std::slice::from_ref(&sample)).unwrap();
        let d = robot.n_joints() as f64;
        assert!((l - 1.0 / d).abs() < 1e-12);
    }

    #[test]
    fn sdnn_loss_is_invariant_to_shifting_a_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let robot = make_robot(RobotFamily::Hexa6);
        let pairs: Vec<(RobotState, JointTorques)> =
            (0..6).map(|_| oracle_pair(&robot, &mut rng)).collect();
        let samples: Vec<StructuredSample> = pairs
            .iter()
            .map(|(s, t)| {
                build_sample(&robot, s, t, TargetMode::Accel, None, SampleMeta::unlabeled())
            })
            .collect();
        let shifted: Vec<StructuredSample> =
            pairs.iter().map(|(s, t)| shifted_sample(&robot, s, t, 2)).collect();
        let model = Model::new(&robot, ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel), 5);
        let a = model.loss(&robot, &samples).unwrap();
        let b = model.loss(&robot, &shifted).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradients_check_out_for_every_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let robot = make_robot(RobotFamily::Magneto4);
        let samples: Vec<StructuredSample> =
            (0..3).map(|_| oracle_sample(&robot, &mut rng)).collect();
        for mf in ModelFamily::all() {
            let mut model = Model::new(&robot, ModelSpec::defaults(mf, TargetMode::Accel), 11);
            // Probe at a generic point: fan-in scaled weights keep the
            // activations near unit size through depth (a huge loss would
            // drown the finite differences in cancellation noise), while
            // small random biases push every ReLU input off the exact kink
            // where central differences and the zero subgradient disagree.
            let mut prng = ChaCha8Rng::seed_from_u64(1234);
            for id in model.store.ids().collect::<Vec<_>>() {
                use rand::Rng;
                if model.store.param(id).is_bias {
                    for v in model.store.value_mut(id) {
                        *v = prng.random_range(-0.05..0.05);
                    }
                }
            }
            model.norm = NormStats::fit(&model.spec, &robot, &samples);
            let prepared: Vec<Prepared> =
                samples.iter().map(|s| model.prepare(&robot, s)).collect();

            let mut grads = Gradients::zeros_like(&model.store);
            for p in &prepared {
                let mut tape = Tape::new(&model.store);
                let out = model.forward(&mut tape, p).unwrap();
                let l = tape.mse(out, p.target()).unwrap();
                tape.backward(l, &mut grads);
            }
            // The forward pass reads parameters through the tape's store,
            // so probing perturbed values only needs the store moved out.
            let mut store = std::mem::take(&mut model.store);
            let report = gradient_check(
                &mut store,
                &grads,
                |s| {
                    prepared
                        .iter()
                        .map(|p| {
                            let mut tape = Tape::new(s);
                            let out = model.forward(&mut tape, p).unwrap();
                            let l = tape.mse(out, p.target()).unwrap();
                            tape.value(l)[0]
                        })
                        .sum::<f64>()
                },
                4,
            );
            assert!(
                report.passes(1e-4),
                "{}: worst {} at {}",
                mf.name(),
                report.worst_rel,
                report.worst_param,
            );
        }
    }

    #[test]
    fn tiny_dataset_is_memorized_within_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let robot = make_robot(RobotFamily::Magneto4);
        let samples: Vec<StructuredSample> =
            (0..64).map(|_| oracle_sample(&robot, &mut rng)).collect();
        let (train_split, val_split) = samples.split_at(48);
        for mf in [ModelFamily::Ffnn, ModelFamily::Sdgnn] {
            let mut model = Model::new(&robot, ModelSpec::defaults(mf, TargetMode::Accel), 13);
            // Constant learning rate: this is a pure optimization sanity
            // run, not the reference protocol.
            let cfg = TrainConfig {
                epochs: 50,
                batch_size: 8,
                lr1: 1e-3,
                patience: usize::MAX,
                seed: 99,
                ..TrainConfig::default()
            };
            let result = train(&mut model, &robot, train_split, val_split, &cfg).unwrap();
            let first = result.logs.first().unwrap().train_mse;
            let last = result.logs.last().unwrap().train_mse;
            assert!(
                last * 10.0 <= first,
                "{} went {first} -> {last} in {} epochs",
                mf.name(),
                result.logs.len(),
            );
        }
    }

    #[test]
    fn training_is_reproducible_for_a_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let robot = make_robot(RobotFamily::Magneto4);
        let samples: Vec<StructuredSample> =
            (0..40).map(|_| oracle_sample(&robot, &mut rng)).collect();
        let (tr, va) = samples.split_at(32);
        let run = || {
            let mut model =
                Model::new(&robot, ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel), 17);
            let cfg = TrainConfig { epochs: 4, batch_size: 8, seed: 5, ..TrainConfig::default() };
            train(&mut model, &robot, tr, va, &cfg).unwrap().logs
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.train_mse.to_bits() == y.train_mse.to_bits()));
    }

    #[test]
    fn checkpoints_restore_identical_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let robot = make_robot(RobotFamily::Hexa6);
        let samples: Vec<StructuredSample> =
            (0..24).map(|_| oracle_sample(&robot, &mut rng)).collect();
        let (tr, va) = samples.split_at(16);
        let mut model =
            Model::new(&robot, ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel), 19);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 7, ..TrainConfig::default() };
        let result = train(&mut model, &robot, tr, va, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_model(&model, &robot, 19, (1e-3, 1e-4), result.best_epoch, result.best_val)
            .save(&path)
            .unwrap();
        let restored = Checkpoint::load(&path).unwrap().restore(&robot).unwrap();
        for s in va {
            let a = model.predict(&robot, s).unwrap();
            let b = restored.predict(&robot, s).unwrap();
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let other = make_robot(RobotFamily::Nona9);
        assert!(Checkpoint::load(&path).unwrap().restore(&other).is_err());
    }

    #[test]
    fn pooled_normalization_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let robot = make_robot(RobotFamily::Hexa6);
        let pairs: Vec<(RobotState, JointTorques)> =
            (0..12).map(|_| oracle_pair(&robot, &mut rng)).collect();
        let samples: Vec<StructuredSample> = pairs
            .iter()
            .map(|(s, t)| {
                build_sample(&robot, s, t, TargetMode::Accel, None, SampleMeta::unlabeled())
            })
            .collect();
        let shifted: Vec<StructuredSample> =
            pairs.iter().map(|(s, t)| shifted_sample(&robot, s, t, 1)).collect();
        let spec = ModelSpec::defaults(ModelFamily::Sdnn, TargetMode::Accel);
        let a = NormStats::fit(&spec, &robot, &samples);
        let b = NormStats::fit(&spec, &robot, &shifted);
        for (x, y) in a.input_mean.iter().zip(&b.input_mean) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.target_std.iter().zip(&b.target_std) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_slots_center_to_zero() {
        let rows = vec![vec![4.0, 1.0], vec![4.0, 3.0], vec![4.0, 5.0]];
        let (mean, std) = fit_slots(rows.iter().cloned(), 2);
        assert_eq!(mean[0], 4.0);
        assert_eq!(std[0], STD_FLOOR);
        assert!((std[1] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let z = normalize(&[4.0, 3.0], &mean, &std);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let robot = make_robot(RobotFamily::Magneto4);
        let mut model =
            Model::new(&robot, ModelSpec::defaults(ModelFamily::Ffnn, TargetMode::Accel), 1);
        let cfg = TrainConfig::default();
        assert!(train(&mut model, &robot, &[], &[], &cfg).is_err());
    }
}
