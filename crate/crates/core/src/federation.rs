//! Synchronous full-mesh rounds: local training, message exchange, model and
//! prototype aggregation, and per-round evaluation for ProFe, FedAvg and FedProto.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteLedger, QuantMode, RoundMessage, WirePrototype};
use crate::datagen::{self, LabeledDataset, PartitionSpec};
use crate::distill::{self, DistillConfig, TeacherOutputs};
use crate::error::{Error, Result};
use crate::harness::{macro_f1, DatasetKind, ExperimentConfig, MetricsRecord};
use crate::nn::{sgd_step, MlpSpec, SplitModel, Tape, Tensor};
use crate::prototype::{self, GlobalPrototypeTable, Prototype};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(rename = "profe")]
    ProFe,
    FedAvg,
    FedProto,
}

impl Algorithm {
    pub fn wire_tag(self) -> u8 {
        match self {
            Algorithm::ProFe => 0,
            Algorithm::FedAvg => 1,
            Algorithm::FedProto => 2,
        }
    }

    pub fn from_wire(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Algorithm::ProFe),
            1 => Some(Algorithm::FedAvg),
            2 => Some(Algorithm::FedProto),
            _ => None,
        }
    }

    /// Whether model parameters travel on the wire.
    pub fn shares_model(self) -> bool {
        !matches!(self, Algorithm::FedProto)
    }

    pub fn shares_prototypes(self) -> bool {
        !matches!(self, Algorithm::FedAvg)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::ProFe => "profe",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProto => "fedproto",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "profe" => Ok(Algorithm::ProFe),
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedproto" => Ok(Algorithm::FedProto),
            _ => Err(format!("unknown algorithm `{s}`; expected profe, fedavg or fedproto")),
        }
    }
}

/// Fully connected topology over `n` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    nodes: usize,
}

impl Topology {
    pub fn full_mesh(nodes: usize) -> Self {
        Topology { nodes }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn connected(&self, a: usize, b: usize) -> bool {
        a != b && a < self.nodes && b < self.nodes
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes).filter(move |&j| j != node)
    }

    /// Number of directed links.
    pub fn link_count(&self) -> usize {
        self.nodes * self.nodes.saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub rounds: usize,
    pub epochs: usize,
    pub algorithm: Algorithm,
}

impl RoundPlan {
    pub fn new(rounds: usize, epochs: usize, algorithm: Algorithm) -> Result<Self> {
        if rounds == 0 || epochs == 0 {
            return Err(Error::Config(format!(
                "rounds and epochs must be at least 1 (got rounds={rounds}, epochs={epochs})"
            )));
        }
        Ok(RoundPlan {
            rounds,
            epochs,
            algorithm,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub lr: f32,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub batches: usize,
    pub mean_loss: f64,
    pub teacher_forwards: u64,
}

pub struct Node {
    id: usize,
    algorithm: Algorithm,
    /// Private model, ProFe only. Never serialized.
    teacher: Option<SplitModel>,
    /// The shared model (the only model for FedAvg and FedProto).
    student: SplitModel,
    train: LabeledDataset,
    test: LabeledDataset,
    distill: DistillConfig,
    table: GlobalPrototypeTable,
    settings: TrainSettings,
    rng: ChaCha8Rng,
    teacher_forwards_round: u64,
    teacher_forwards_total: u64,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id)
            .field("algorithm", &self.algorithm)
            .field("train", &self.train.len())
            .field("test", &self.test.len())
            .field("alpha_s", &self.distill.alpha_s)
            .field("prototypes", &self.table.len())
            .finish()
    }
}

impl Node {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        algorithm: Algorithm,
        teacher: Option<SplitModel>,
        student: SplitModel,
        train: LabeledDataset,
        test: LabeledDataset,
        distill: DistillConfig,
        settings: TrainSettings,
        batch_seed: u64,
    ) -> Result<Self> {
        distill.validate()?;
        if settings.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(t) = &teacher {
            if t.repr_width() != student.repr_width() || t.classes() != student.classes() {
                return Err(Error::Config(format!(
                    "teacher (repr {}, classes {}) and student (repr {}, classes {}) must share representation width and classes",
                    t.repr_width(),
                    t.classes(),
                    student.repr_width(),
                    student.classes()
                )));
            }
        }
        Ok(Node {
            id,
            algorithm,
            teacher,
            student,
            train,
            test,
            distill,
            table: GlobalPrototypeTable::empty(),
            settings,
            rng: rand::SeedableRng::seed_from_u64(batch_seed),
            teacher_forwards_round: 0,
            teacher_forwards_total: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn student(&self) -> &SplitModel {
        &self.student
    }

    pub fn teacher(&self) -> Option<&SplitModel> {
        self.teacher.as_ref()
    }

    pub fn distill(&self) -> &DistillConfig {
        &self.distill
    }

    pub fn table(&self) -> &GlobalPrototypeTable {
        &self.table
    }

    pub fn train_data(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_data(&self) -> &LabeledDataset {
        &self.test
    }

    /// Teacher forward passes during the most recent `local_train`.
    pub fn teacher_forwards_last_round(&self) -> u64 {
        self.teacher_forwards_round
    }

    pub fn teacher_forwards_total(&self) -> u64 {
        self.teacher_forwards_total
    }

    /// `epochs` passes over the training shard in freshly shuffled batches.
    pub fn local_train(&mut self, epochs: usize) -> Result<TrainStats> {
        if self.train.is_empty() {
            return Err(Error::Config(format!("node {} has an empty training shard", self.id)));
        }
        self.teacher_forwards_round = 0;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut stats = TrainStats::default();
        let mut loss_sum = 0.0f64;
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.settings.batch_size) {
                loss_sum += self.train_batch(chunk)? as f64;
                stats.batches += 1;
            }
        }
        stats.mean_loss = loss_sum / stats.batches as f64;
        stats.teacher_forwards = self.teacher_forwards_round;
        self.teacher_forwards_total += self.teacher_forwards_round;
        if !stats.mean_loss.is_finite() {
            return Err(Error::Data(format!("training loss diverged ({})", stats.mean_loss)));
        }
        Ok(stats)
    }

    fn train_batch(&mut self, idx: &[usize]) -> Result<f32> {
        let x = self.train.batch(idx)?;
        let labels = self.train.label_batch(idx)?;
        let lr = self.settings.lr;

        // Teacher step first; its pre-step outputs guide the student.
        let mut teacher_out = None;
        if self.algorithm == Algorithm::ProFe && self.distill.teacher_active() {
            let teacher = self
                .teacher
                .as_mut()
                .ok_or_else(|| Error::State("ProFe node without a teacher".into()))?;
            let mut tape = Tape::new();
            let bound = teacher.bind(&mut tape)?;
            let (repr, logits) = teacher.forward_tape(&mut tape, &bound, &x)?;
            self.teacher_forwards_round += 1;
            let loss = distill::teacher_loss_on(&mut tape, logits, repr, &labels, &self.table, self.distill.beta_t)?;
            let out = (tape.value(logits).detached(), tape.value(repr).detached());
            tape.backward(loss)?;
            teacher.collect_grads(&tape, &bound)?;
            sgd_step(teacher, lr)?;
            teacher_out = Some(out);
        }

        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape)?;
        let (repr, logits) = self.student.forward_tape(&mut tape, &bound, &x)?;
        let loss = match self.algorithm {
            Algorithm::FedAvg => tape.cross_entropy(logits, &labels)?,
            Algorithm::ProFe => {
                let teacher = teacher_out.as_ref().map(|(l, r)| TeacherOutputs { logits: l, repr: r });
                distill::student_loss_on(&mut tape, logits, repr, teacher, &labels, &self.table, &self.distill)?
            }
            Algorithm::FedProto => {
                let cfg = DistillConfig {
                    alpha_s: 0.0,
                    ..self.distill
                };
                distill::student_loss_on(&mut tape, logits, repr, None, &labels, &self.table, &cfg)?
            }
        };
        let value = tape.scalar(loss);
        tape.backward(loss)?;
        self.student.collect_grads(&tape, &bound)?;
        sgd_step(&mut self.student, lr)?;
        Ok(value)
    }

    /// Local prototypes of the shared model on the training shard.
    pub fn local_prototypes(&self) -> Result<Vec<Prototype>> {
        prototype::compute_local_prototypes(&self.student, &self.train)
    }

    /// Builds this node's round message. `quant` applies to ProFe's model and
    /// prototypes; FedAvg models and FedProto prototypes always travel at 32 bits.
    pub fn build_message(&self, round: u32, quant: QuantMode) -> Result<RoundMessage> {
        let params = if self.algorithm.shares_model() {
            // the FedAvg baseline always exchanges full-precision models
            let quant = match self.algorithm {
                Algorithm::FedAvg => QuantMode::Float32,
                _ => quant,
            };
            self.student
                .params()
                .into_iter()
                .map(|p| codec::quantize(p, quant))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let prototypes = if self.algorithm.shares_prototypes() {
            let proto_mode = match self.algorithm {
                Algorithm::FedProto => QuantMode::Float32,
                _ => quant,
            };
            self.local_prototypes()?
                .into_iter()
                .map(|p| {
                    Ok(WirePrototype {
                        class_id: p.class_id,
                        count: p.count,
                        vector: codec::quantize(&Tensor::vector(p.vector), proto_mode)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(RoundMessage {
            sender: self.id,
            round,
            algorithm: self.algorithm,
            params,
            prototypes,
        })
    }

    /// Macro-F1 of the shared model on `data`: nearest-prototype inference once
    /// a global table exists (ProFe, FedProto), argmax otherwise.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut predictions = Vec::with_capacity(data.len());
        for chunk in idx.chunks(1024) {
            let (repr, logits) = self.student.forward_split(&data.batch(chunk)?)?;
            if self.algorithm.shares_prototypes() && !self.table.is_empty() {
                predictions.extend(prototype::predict_nearest_batch(&repr, &self.table)?);
            } else {
                predictions.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
            }
        }
        macro_f1(&predictions, data.labels(), data.classes())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-link fault hook: `(round, sender, receiver, bytes)`; may mutate the bytes in flight.
pub type FaultHook = Box<dyn Fn(u32, usize, usize, &mut Vec<u8>) + Send + Sync>;

#[derive(Debug, Default)]
pub struct Delivery {
    /// `inboxes[i]` holds the decoded messages received by node `i`, by sender.
    pub inboxes: Vec<Vec<RoundMessage>>,
    /// Messages dropped because they failed to decode or validate.
    pub errors: usize,
}

/// Sends every node's encoded message to all of its neighbors, accounting
/// exact encoded sizes in `ledger`. Undecodable messages are dropped and counted.
pub fn broadcast_round(
    encoded: &[Vec<u8>],
    topology: &Topology,
    ledger: &mut ByteLedger,
    round: u32,
    fault: Option<&FaultHook>,
) -> Delivery {
    let n = topology.nodes();
    let mut delivery = Delivery {
        inboxes: vec![Vec::with_capacity(n.saturating_sub(1)); n],
        errors: 0,
    };
    for (sender, bytes) in encoded.iter().enumerate() {
        for receiver in topology.neighbors(sender) {
            ledger.record_send(sender, bytes.len());
            let decoded = match fault {
                Some(hook) => {
                    let mut copy = bytes.clone();
                    hook(round, sender, receiver, &mut copy);
                    ledger.record_receive(receiver, copy.len());
                    codec::decode_message(&copy)
                }
                None => {
                    ledger.record_receive(receiver, bytes.len());
                    codec::decode_message(bytes)
                }
            };
            match decoded {
                Ok(m) if m.sender == sender && m.round == round => delivery.inboxes[receiver].push(m),
                Ok(m) => {
                    log::warn!(
                        "node {receiver}: dropping message claiming sender {} round {} on link from {sender}",
                        m.sender,
                        m.round
                    );
                    delivery.errors += 1;
                }
                Err(e) => {
                    log::warn!("node {receiver}: dropping message from {sender}: {e}");
                    delivery.errors += 1;
                }
            }
        }
    }
    delivery
}

/// Elementwise mean over `sets` (each a full parameter list), accumulated in f64
/// in the given order.
pub fn average_params(template: &SplitModel, sets: &[&[Tensor]]) -> Result<SplitModel> {
    if sets.is_empty() {
        return Err(Error::Protocol("no parameter sets to average".into()));
    }
    let shapes = template.param_shapes();
    for (k, set) in sets.iter().enumerate() {
        let got: Vec<Vec<usize>> = set.iter().map(|t| t.shape().to_vec()).collect();
        if got != shapes {
            return Err(Error::Protocol(format!(
                "architecture mismatch in parameter set {k}: expected shapes {shapes:?}, got {got:?}"
            )));
        }
    }
    let k = sets.len() as f64;
    let averaged: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(p, shape)| {
            let mut acc = vec![0.0f64; sets[0][p].numel()];
            for set in sets {
                for (a, &v) in acc.iter_mut().zip(set[p].values()) {
                    *a += v as f64;
                }
            }
            Tensor::new(shape.clone(), acc.into_iter().map(|a| (a / k) as f32).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = template.clone();
    out.load_params(&averaged)?;
    Ok(out)
}

/// Unweighted mean of `own` and every received parameter set.
pub fn aggregate_models(own: &SplitModel, received: &[Vec<Tensor>]) -> Result<SplitModel> {
    let own_params = own.export_params();
    let mut sets: Vec<&[Tensor]> = vec![&own_params];
    sets.extend(received.iter().map(Vec::as_slice));
    average_params(own, &sets)
}

fn decoded_params(m: &RoundMessage) -> Vec<Tensor> {
    m.params.iter().map(codec::dequantize).collect()
}

fn decoded_prototypes(m: &RoundMessage) -> Vec<Prototype> {
    m.prototypes
        .iter()
        .map(|p| Prototype {
            class_id: p.class_id,
            vector: codec::dequantize(&p.vector).into_values(),
            count: p.count,
        })
        .collect()
}

/// Per-round view handed to observers.
pub struct RoundSnapshot<'a> {
    pub round: usize,
    pub nodes: &'a [Node],
    pub ledger: &'a ByteLedger,
    pub records: &'a [MetricsRecord],
    pub decode_errors: usize,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub records: Vec<MetricsRecord>,
    pub total_bytes_sent: u64,
    pub total_bytes_received: u64,
    pub decode_errors: usize,
    pub wall_seconds: f64,
    pub teacher_forwards: Vec<u64>,
}

/// A configured federation advancing one synchronous round at a time.
pub struct Simulation {
    plan: RoundPlan,
    topology: Topology,
    quant: QuantMode,
    literal_eq4: bool,
    sequential: bool,
    nodes: Vec<Node>,
    global_test: LabeledDataset,
    ledger: ByteLedger,
    round: usize,
    decode_errors: usize,
    compute_seconds: Vec<f64>,
    records: Vec<MetricsRecord>,
    fault: Option<FaultHook>,
    started: Instant,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("plan", &self.plan)
            .field("round", &self.round)
            .field("nodes", &self.nodes)
            .finish()
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let ds = match cfg.dataset {
        DatasetKind::Mnist => datagen::load_mnist(&cfg.data_dir)?,
        DatasetKind::Blobs => datagen::gen_blobs(
            cfg.blob_classes,
            cfg.blob_per_class,
            cfg.blob_dim,
            cfg.blob_spread,
            seed::derive_seed(cfg.seed, "blobs", 0),
        )?,
    };
    Ok(match cfg.samples {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    })
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = load_dataset(cfg)?;
        Self::with_dataset(cfg, ds)
    }

    /// Builds the federation over an already loaded dataset.
    pub fn with_dataset(cfg: &ExperimentConfig, ds: LabeledDataset) -> Result<Self> {
        cfg.validate()?;
        let plan = RoundPlan::new(cfg.rounds, cfg.epochs, cfg.algo)?;
        let (pool, global_test) = datagen::split_global_test(&ds, cfg.test_fraction, cfg.seed)?;
        let shards = datagen::partition(
            &pool,
            &PartitionSpec {
                scheme: cfg.partition,
                nodes: cfg.nodes,
                seed: cfg.seed,
            },
        )?;

        let teacher_spec = MlpSpec {
            input: ds.width(),
            hidden: cfg.teacher_hidden.clone(),
            repr_width: cfg.repr_width,
            classes: ds.classes(),
        };
        let student_spec = MlpSpec {
            hidden: cfg.student_hidden.clone(),
            ..teacher_spec.clone()
        };
        // One shared initialization for the exchanged model, independent of node ids.
        let shared_spec = match cfg.algo {
            Algorithm::ProFe => &student_spec,
            _ => &teacher_spec,
        };
        let shared = SplitModel::mlp(shared_spec, &mut seed::stream(cfg.seed, "shared-model", 0))?;
        let settings = TrainSettings {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
        };

        let mut nodes = Vec::with_capacity(cfg.nodes);
        for (id, shard) in shards.into_iter().enumerate() {
            let (train, test) = datagen::split_local(&shard, cfg.train_fraction, seed::derive_seed(cfg.seed, "local", id as u64));
            if train.is_empty() {
                return Err(Error::Config(format!("node {id} received no training samples")));
            }
            let teacher = match cfg.algo {
                Algorithm::ProFe => Some(SplitModel::mlp(
                    &teacher_spec,
                    &mut seed::stream(cfg.seed, "teacher", id as u64),
                )?),
                _ => None,
            };
            nodes.push(Node::new(
                id,
                cfg.algo,
                teacher,
                shared.clone(),
                train,
                test,
                cfg.distill(),
                settings,
                seed::derive_seed(cfg.seed, "batches", id as u64),
            )?);
        }

        Ok(Simulation {
            plan,
            topology: Topology::full_mesh(cfg.nodes),
            quant: cfg.quant_mode(),
            literal_eq4: cfg.literal_eq4,
            sequential: cfg.sequential,
            ledger: ByteLedger::new(cfg.nodes),
            compute_seconds: vec![0.0; cfg.nodes],
            nodes,
            global_test,
            round: 0,
            decode_errors: 0,
            records: Vec::new(),
            fault: None,
            started: Instant::now(),
        })
    }

    pub fn set_fault_hook(&mut self, hook: FaultHook) {
        self.fault = Some(hook);
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    pub fn global_test(&self) -> &LabeledDataset {
        &self.global_test
    }

    pub fn plan(&self) -> &RoundPlan {
        &self.plan
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn decode_errors(&self) -> usize {
        self.decode_errors
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.plan.rounds
    }

    /// Runs one full round and returns its metrics rows (one per node).
    pub fn step(&mut self) -> Result<&[MetricsRecord]> {
        let round = self.round + 1;
        let wire_round = round as u32;
        let epochs = self.plan.epochs;
        let quant = self.quant;

        // local training, prototypes and message encoding
        let outcomes = for_each_node(&mut self.nodes, self.sequential, |node| {
            let t0 = Instant::now();
            let stats = node.local_train(epochs)?;
            let msg = node.build_message(wire_round, quant)?;
            let bytes = codec::encode_message(&msg)?;
            log::debug!(
                "round {round} node {}: {} batches, loss {:.4}, {} bytes",
                node.id,
                stats.batches,
                stats.mean_loss,
                bytes.len()
            );
            Ok((bytes, t0.elapsed().as_secs_f64()))
        });
        let mut encoded = Vec::with_capacity(self.nodes.len());
        for (i, r) in outcomes.into_iter().enumerate() {
            let (bytes, secs) = r.map_err(|e| e.at_node(i, round))?;
            self.compute_seconds[i] += secs;
            encoded.push(bytes);
        }

        let delivery = broadcast_round(&encoded, &self.topology, &mut self.ledger, wire_round, self.fault.as_ref());
        self.decode_errors += delivery.errors;

        // Every node averages its own (decoded) message with its inbox, in sender order.
        let own: Vec<RoundMessage> = encoded
            .iter()
            .enumerate()
            .map(|(i, b)| codec::decode_message(b).map_err(|e| Error::from(e).at_node(i, round)))
            .collect::<Result<_>>()?;
        let mut inboxes = delivery.inboxes;
        for (i, inbox) in inboxes.iter_mut().enumerate() {
            inbox.push(own[i].clone());
            inbox.sort_by_key(|m| m.sender);
        }

        let algorithm = self.plan.algorithm;
        let literal = self.literal_eq4;
        let global_test = &self.global_test;
        let outcomes = for_each_node_with(&mut self.nodes, inboxes, self.sequential, |node, inbox| {
            let t0 = Instant::now();
            if algorithm.shares_model() {
                let params: Vec<Vec<Tensor>> = inbox.iter().map(decoded_params).collect();
                let sets: Vec<&[Tensor]> = params.iter().map(Vec::as_slice).collect();
                node.student = average_params(&node.student, &sets)?;
            }
            if algorithm.shares_prototypes() {
                let sets: Vec<(usize, Vec<Prototype>)> =
                    inbox.iter().map(|m| (m.sender, decoded_prototypes(m))).collect();
                node.table = prototype::aggregate_global(&sets, literal)?;
            }
            if algorithm == Algorithm::ProFe {
                node.distill = distill::decay_alpha(node.distill);
            }
            let f1 = node.evaluate(global_test)?;
            Ok((f1, t0.elapsed().as_secs_f64()))
        });

        let first = self.records.len();
        for (i, r) in outcomes.into_iter().enumerate() {
            let (f1, secs) = r.map_err(|e| e.at_node(i, round))?;
            self.compute_seconds[i] += secs;
            self.records.push(MetricsRecord {
                round,
                node_id: i,
                macro_f1: f1,
                bytes_sent: self.ledger.sent(i),
                bytes_received: self.ledger.received(i),
                elapsed_seconds: if self.sequential { 0.0 } else { self.compute_seconds[i] },
            });
        }
        self.round = round;
        let mean_f1 = self.records[first..].iter().map(|r| r.macro_f1).sum::<f64>() / self.nodes.len() as f64;
        log::info!(
            "{} round {round}/{}: mean macro-F1 {mean_f1:.4}, bytes sent {}",
            algorithm,
            self.plan.rounds,
            self.ledger.total_sent()
        );
        Ok(&self.records[first..])
    }

    pub fn snapshot(&self) -> RoundSnapshot<'_> {
        RoundSnapshot {
            round: self.round,
            nodes: &self.nodes,
            ledger: &self.ledger,
            records: &self.records,
            decode_errors: self.decode_errors,
        }
    }

    /// Runs the remaining rounds, calling `observe` after each.
    pub fn run(mut self, mut observe: impl FnMut(&RoundSnapshot<'_>)) -> Result<RunReport> {
        while !self.is_finished() {
            self.step()?;
            observe(&self.snapshot());
        }
        Ok(self.report())
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            records: self.records.clone(),
            total_bytes_sent: self.ledger.total_sent(),
            total_bytes_received: self.ledger.total_received(),
            decode_errors: self.decode_errors,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            teacher_forwards: self.nodes.iter().map(Node::teacher_forwards_total).collect(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Simulation::new(cfg)?.run(|_| {})
}

#[cfg(feature = "parallel")]
fn for_each_node<T, F>(nodes: &mut [Node], sequential: bool, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&mut Node) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    if sequential {
        nodes.iter_mut().map(f).collect()
    } else {
        nodes.par_iter_mut().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn for_each_node<T, F>(nodes: &mut [Node], _sequential: bool, f: F) -> Vec<Result<T>>
where
    F: Fn(&mut Node) -> Result<T>,
{
    nodes.iter_mut().map(f).collect()
}

#[cfg(feature = "parallel")]
fn for_each_node_with<T, U, F>(nodes: &mut [Node], inputs: Vec<U>, sequential: bool, f: F) -> Vec<Result<T>>
where
    T: Send,
    U: Send,
    F: Fn(&mut Node, U) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    if sequential {
        nodes.iter_mut().zip(inputs).map(|(n, u)| f(n, u)).collect()
    } else {
        nodes.par_iter_mut().zip(inputs).map(|(n, u)| f(n, u)).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn for_each_node_with<T, U, F>(nodes: &mut [Node], inputs: Vec<U>, _sequential: bool, f: F) -> Vec<Result<T>>
where
    F: Fn(&mut Node, U) -> Result<T>,
{
    nodes.iter_mut().zip(inputs).map(|(n, u)| f(n, u)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_blobs, PartitionScheme};
    use crate::nn::{Layer, Linear};

    fn blob_cfg(algo: Algorithm) -> ExperimentConfig {
        ExperimentConfig {
            algo,
            dataset: DatasetKind::Blobs,
            nodes: 2,
            rounds: 1,
            blob_classes: 3,
            blob_per_class: 40,
            blob_dim: 8,
            teacher_hidden: vec![16],
            student_hidden: vec![8],
            repr_width: 6,
            sequential: true,
            seed: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn algorithm_tags_roundtrip() {
        for a in [Algorithm::ProFe, Algorithm::FedAvg, Algorithm::FedProto] {
            assert_eq!(Algorithm::from_wire(a.wire_tag()), Some(a));
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!(Algorithm::from_wire(3), None);
        assert!("bogus".parse::<Algorithm>().is_err());
    }

    #[test]
    fn topology_is_symmetric_without_self_edges() {
        let t = Topology::full_mesh(5);
        for a in 0..5 {
            assert!(!t.connected(a, a));
            for b in 0..5 {
                assert_eq!(t.connected(a, b), t.connected(b, a));
            }
            assert_eq!(t.neighbors(a).count(), 4);
        }
        assert_eq!(t.link_count(), 20);
    }

    #[test]
    fn round_plan_rejects_zero() {
        assert!(RoundPlan::new(0, 1, Algorithm::FedAvg).is_err());
        assert!(RoundPlan::new(1, 0, Algorithm::FedAvg).is_err());
    }

    fn scalar_model(v: f32) -> SplitModel {
        let lin = Linear {
            weight: Tensor::new(vec![1, 1], vec![v]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        };
        SplitModel::new(1, vec![], vec![Layer::Linear(lin)]).unwrap()
    }

    #[test]
    fn aggregation_means() {
        let a = scalar_model(0.0);
        let b = scalar_model(2.0);
        let m = aggregate_models(&a, &[b.export_params()]).unwrap();
        assert_eq!(m.params()[0].values(), &[1.0]);
        let same = aggregate_models(&b, &[b.export_params(), b.export_params()]).unwrap();
        assert_eq!(same, b);

        let wide = SplitModel::new(2, vec![], vec![Layer::Linear(Linear::identity(2))]).unwrap();
        assert!(matches!(
            aggregate_models(&a, &[wide.export_params()]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn fedavg_lr_zero_keeps_parameters() {
        let ds = gen_blobs(2, 20, 4, 0.1, 3).unwrap();
        let model = SplitModel::mlp(
            &MlpSpec {
                input: 4,
                hidden: vec![],
                repr_width: 3,
                classes: 2,
            },
            &mut seed::stream(0, "m", 0),
        )
        .unwrap();
        let mut node = Node::new(
            0,
            Algorithm::FedAvg,
            None,
            model.clone(),
            ds.clone(),
            ds,
            DistillConfig::default(),
            TrainSettings { lr: 0.0, batch_size: 8 },
            1,
        )
        .unwrap();
        node.local_train(2).unwrap();
        assert_eq!(node.student(), &model);
    }

    #[test]
    fn separable_blobs_train_well_in_one_epoch() {
        let ds = gen_blobs(2, 200, 10, 0.05, 11).unwrap();
        let model = SplitModel::mlp(
            &MlpSpec {
                input: 10,
                hidden: vec![],
                repr_width: 8,
                classes: 2,
            },
            &mut seed::stream(0, "m", 0),
        )
        .unwrap();
        let mut node = Node::new(
            0,
            Algorithm::FedAvg,
            None,
            model,
            ds.clone(),
            ds.clone(),
            DistillConfig::default(),
            TrainSettings { lr: 0.1, batch_size: 8 },
            2,
        )
        .unwrap();
        node.local_train(1).unwrap();
        let (_, logits) = node.student().forward_split(&ds.batch(&(0..ds.len()).collect::<Vec<_>>()).unwrap()).unwrap();
        let correct = (0..ds.len()).filter(|&i| argmax(logits.row(i)) == ds.label(i)).count();
        assert!(correct as f64 / ds.len() as f64 > 0.9, "{correct}/{}", ds.len());
    }

    #[test]
    fn empty_shard_is_a_config_error() {
        let ds = gen_blobs(2, 2, 2, 0.1, 3).unwrap();
        let empty = ds.subset(&[]);
        let m = SplitModel::mlp(
            &MlpSpec {
                input: 2,
                hidden: vec![],
                repr_width: 2,
                classes: 2,
            },
            &mut seed::stream(0, "m", 0),
        )
        .unwrap();
        let mut node = Node::new(
            0,
            Algorithm::FedAvg,
            None,
            m,
            empty.clone(),
            empty,
            DistillConfig::default(),
            TrainSettings { lr: 0.1, batch_size: 4 },
            0,
        )
        .unwrap();
        assert!(matches!(node.local_train(1), Err(Error::Config(_))));
    }

    #[test]
    fn two_node_fedavg_reaches_consensus() {
        let mut sim = Simulation::new(&blob_cfg(Algorithm::FedAvg)).unwrap();
        let rows = sim.step().unwrap().len();
        assert_eq!(rows, 2);
        assert_eq!(sim.nodes()[0].student(), sim.nodes()[1].student());
        assert_eq!(sim.ledger().total_sent(), sim.ledger().total_received());
        assert_eq!(sim.decode_errors(), 0);
    }

    #[test]
    fn fedproto_sends_no_model_tensors() {
        let sim = Simulation::new(&blob_cfg(Algorithm::FedProto)).unwrap();
        let msg = sim.nodes()[0].build_message(1, QuantMode::Float16).unwrap();
        assert!(msg.params.is_empty());
        assert!(!msg.prototypes.is_empty());
        assert!(msg.prototypes.iter().all(|p| p.vector.mode() == QuantMode::Float32));
    }

    #[test]
    fn corrupt_message_is_dropped_and_counted() {
        let mut cfg = blob_cfg(Algorithm::FedAvg);
        cfg.nodes = 3;
        let mut sim = Simulation::new(&cfg).unwrap();
        sim.set_fault_hook(Box::new(|_, s, r, bytes: &mut Vec<u8>| {
            if s == 0 && r == 2 {
                bytes[0] ^= 0xff;
            }
        }));
        sim.step().unwrap();
        assert_eq!(sim.decode_errors(), 1);
        assert_eq!(sim.nodes()[0].student(), sim.nodes()[1].student());
        assert_ne!(sim.nodes()[0].student(), sim.nodes()[2].student());
    }

    #[test]
    fn partition_schemes_run() {
        let mut cfg = blob_cfg(Algorithm::ProFe);
        cfg.partition = PartitionScheme::Dirichlet(0.5);
        cfg.nodes = 3;
        cfg.rounds = 2;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.records.len(), 6);
        assert!(report.records.iter().all(|r| (0.0..=1.0).contains(&r.macro_f1)));
    }
}
