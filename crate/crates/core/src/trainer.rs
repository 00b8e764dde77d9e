//! The training loop and its baseline topologies.
//!
//! One iteration: students forward on labeled and unlabeled images,
//! supervised loss, teachers forward (no gradient) for pseudo-labels and
//! bank candidates, routed pseudo-label loss, contrastive losses once every
//! bank is full, one SGD-with-momentum step on all students at the poly
//! learning rate, then the EMA teacher updates.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{compute_k, select_candidates, MemoryBank};
use crate::checkpoint::{Archive, Manifest, NamedTensor, RngState, CHECKPOINT_FORMAT};
use crate::config::{poly_lr, EvalNet, Topology, TrainConfig};
use crate::data::{augment, downsample_nearest, load_dataset, split_labeled, AugmentConfig, Sample, SplitSpec, IGNORE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pseudo_label_quality, ConfusionMatrix, EvalNetwork};
use crate::losses::{
    cross_routes, hc_loss, hc_mask, lc_loss, lc_mask, pixel_cross_entropy, routed_cross_entropy, total_loss,
    LossComponents, PseudoLabels,
};
use crate::model::{backward, ema_update, forward, forward_train, init_model, ImageBatch, ModelParams, StudentTeacherPair};
use crate::tensor::{l2_normalize_backward, l2_normalize_rows, Matrix};

const DATA_STREAM: u64 = 1;
const BANK_STREAM: u64 = 2;
const EVAL_BATCH: usize = 8;

/// Labeled and unlabeled training pools plus the held-out set.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    /// Labels are kept only for pseudo-label diagnostics.
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Pool indices of the labeled samples.
    pub labeled_indices: Vec<usize>,
}

impl TrainData {
    pub fn from_pool(pool: &[Sample], val: Vec<Sample>, split: &SplitSpec) -> Result<Self> {
        let s = split_labeled(pool.len(), split)?;
        Ok(TrainData {
            labeled: s.labeled.iter().map(|&i| pool[i].clone()).collect(),
            unlabeled: s.unlabeled.iter().map(|&i| pool[i].clone()).collect(),
            val,
            labeled_indices: s.labeled,
        })
    }

    /// Reads `data_dir` (and `val_dir` unless empty) and applies the split.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let pool = load_dataset(Path::new(&cfg.data_dir))?;
        if pool.spec.num_classes != cfg.backbone.num_classes {
            return Err(Error::config(
                "backbone.num_classes",
                format!("dataset has {} classes", pool.spec.num_classes),
            ));
        }
        let val = if cfg.val_dir.is_empty() {
            Vec::new()
        } else {
            load_dataset(Path::new(&cfg.val_dir))?.samples
        };
        let split = SplitSpec {
            labeled_fraction: cfg.labeled_fraction,
            seed: cfg.split_seed,
        };
        TrainData::from_pool(&pool.samples, val, &split)
    }
}

/// One line of the metrics log. Loss terms are unweighted; `weighted` holds
/// each term times its weight as it entered the total. Contrastive terms
/// are 0 until every bank is full, and stay 0 when both of their weights
/// are 0 (they are not computed then).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Number of completed iterations.
    pub iter: usize,
    pub lr: f64,
    pub sup: f64,
    pub ct: f64,
    pub hc: f64,
    pub lc: f64,
    pub weighted: LossComponents,
    pub total: f64,
    pub banks_full: bool,
    /// Per bank, per class fill fraction.
    pub bank_fill: Vec<Vec<f64>>,
    /// Fraction of unlabeled pixels where the first two pseudo-label sources agree.
    pub pseudo_agreement: Option<f64>,
    /// Accuracy of the first pseudo-label source against the hidden labels.
    pub pseudo_accuracy: Option<f64>,
    pub hc_queries: usize,
    pub lc_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

fn rng_state(name: &str, seed: u64, rng: &ChaCha8Rng) -> RngState {
    RngState {
        name: name.into(),
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|_| Error::config("rng.word_pos", "not an integer"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

fn slice_rows(m: &Matrix<f32>, start: usize, end: usize) -> Matrix<f32> {
    let c = m.cols();
    Matrix::from_vec(end - start, c, m.as_slice()[start * c..end * c].to_vec()).expect("row range in bounds")
}

fn add_scaled_rows(dst: &mut Matrix<f32>, start: usize, src: &Matrix<f32>, w: f32) {
    let c = dst.cols();
    let out = &mut dst.as_mut_slice()[start * c..(start + src.rows()) * c];
    for (d, &s) in out.iter_mut().zip(src.as_slice()) {
        *d += w * s;
    }
}

fn agreement(a: &[u8], b: &[u8]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Training state: student/teacher pairs, optimizer buffers, banks, rngs.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    pairs: Vec<StudentTeacherPair<f32>>,
    velocity: Vec<Vec<f32>>,
    banks: Vec<MemoryBank<f32>>,
    /// Self-training: the frozen first-phase students.
    frozen: Vec<ModelParams<f32>>,
    data_rng: ChaCha8Rng,
    bank_rng: ChaCha8Rng,
    iter: usize,
    n_labeled: usize,
    k: usize,
}

impl Trainer {
    /// Fresh state. `n_labeled` is the size of the labeled pool (sets the
    /// per-iteration bank intake).
    pub fn new(cfg: &TrainConfig, n_labeled: usize) -> Result<Self> {
        cfg.validate()?;
        if n_labeled == 0 {
            return Err(Error::config("labeled_fraction", "no labeled images"));
        }
        if cfg.topology == Topology::Mutual && cfg.eval_network == EvalNet::TeacherA {
            return Err(Error::config("eval_network", "mutual training has no teachers"));
        }
        let pairs = (0..cfg.pairs)
            .map(|a| init_model(&Self::student_config(cfg, a)).map(|s| StudentTeacherPair::new(s, cfg.ema_decay as f32)))
            .collect::<Result<Vec<_>>>()?;
        let velocity = pairs.iter().map(|p| p.student.zeros_like()).collect();
        let banks = if cfg.topology.uses_contrast() {
            (0..cfg.pairs)
                .map(|_| MemoryBank::new(cfg.backbone.num_classes, cfg.bank_capacity, cfg.bank_dim))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(DATA_STREAM);
        let mut bank_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        bank_rng.set_stream(BANK_STREAM);
        Ok(Trainer {
            cfg: cfg.clone(),
            pairs,
            velocity,
            banks,
            frozen: Vec::new(),
            data_rng,
            bank_rng,
            iter: 0,
            n_labeled,
            k: compute_k(n_labeled, cfg.bank_capacity)?,
        })
    }

    /// Pair `a`'s initial weights depend on the backbone seed, the run seed
    /// and the pair index.
    fn student_config(cfg: &TrainConfig, a: usize) -> crate::model::BackboneConfig {
        let mut b = cfg.backbone.clone();
        b.init_seed = b
            .init_seed
            .wrapping_mul(1_000_003)
            .wrapping_add(cfg.seed.wrapping_mul(7_919))
            .wrapping_add(a as u64);
        b
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn pairs(&self) -> &[StudentTeacherPair<f32>] {
        &self.pairs
    }

    /// Mutable access for tests and tools; training invariants are the
    /// caller's problem.
    pub fn pairs_mut(&mut self) -> &mut [StudentTeacherPair<f32>] {
        &mut self.pairs
    }

    pub fn banks(&self) -> &[MemoryBank<f32>] {
        &self.banks
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frozen(&self) -> &[ModelParams<f32>] {
        &self.frozen
    }

    fn phase_one_iters(&self) -> usize {
        self.cfg.max_iters / 2
    }

    /// Self-training switches phases once half the iterations are done.
    pub fn phase_switch_due(&self) -> bool {
        self.cfg.topology == Topology::SelfTraining && self.frozen.is_empty() && self.iter >= self.phase_one_iters()
    }

    /// Freezes the current students as pseudo-labelers and restarts the
    /// students (and their optimizer state) from initialization.
    pub fn begin_phase_two(&mut self) -> Result<()> {
        self.frozen = self.pairs.iter().map(|p| p.student.clone()).collect();
        for a in 0..self.pairs.len() {
            let s = init_model(&Self::student_config(&self.cfg, a))?;
            self.pairs[a] = StudentTeacherPair::new(s, self.cfg.ema_decay as f32);
            self.velocity[a] = self.pairs[a].student.zeros_like();
        }
        Ok(())
    }

    /// Learning rate for the next iteration. Self-training restarts the
    /// schedule for its second phase.
    pub fn current_lr(&self) -> Result<f64> {
        let c = &self.cfg;
        if c.topology == Topology::SelfTraining {
            let t1 = self.phase_one_iters();
            if self.frozen.is_empty() {
                return poly_lr(c.base_lr, self.iter, t1.max(1), c.lr_power);
            }
            return poly_lr(c.base_lr, self.iter - t1, c.max_iters - t1, c.lr_power);
        }
        poly_lr(c.base_lr, self.iter, c.max_iters, c.lr_power)
    }

    fn uses_unlabeled(&self) -> bool {
        match self.cfg.topology {
            Topology::SupervisedOnly => false,
            Topology::SelfTraining => !self.frozen.is_empty(),
            _ => true,
        }
    }

    /// Draws a labeled and an unlabeled batch (uniform with replacement)
    /// and augments them.
    pub fn draw_batches(&mut self, data: &TrainData) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let aug = AugmentConfig { crop: self.cfg.crop };
        let draw = |pool: &[Sample], n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Sample>> {
            if pool.is_empty() {
                return Ok(Vec::new());
            }
            (0..n)
                .map(|_| {
                    let i = rng.random_range(0..pool.len());
                    augment(&pool[i], &aug, rng)
                })
                .collect()
        };
        if data.labeled.is_empty() {
            return Err(Error::config("labeled_fraction", "no labeled images"));
        }
        let lb = draw(&data.labeled, self.cfg.batch_labeled, &mut self.data_rng)?;
        // Self-training's first phase never touches the unlabeled pool.
        let ub = if self.cfg.topology == Topology::SelfTraining && self.frozen.is_empty() && !self.phase_switch_due() {
            Vec::new()
        } else {
            draw(&data.unlabeled, self.cfg.batch_unlabeled, &mut self.data_rng)?
        };
        Ok((lb, ub))
    }

    /// Draws batches and runs one iteration.
    pub fn step(&mut self, data: &TrainData) -> Result<MetricsRecord> {
        if self.phase_switch_due() {
            self.begin_phase_two()?;
        }
        let (lb, ub) = self.draw_batches(data)?;
        self.train_step(&lb, &ub)
    }

    /// Pseudo-label sets on the unlabeled rows and the routing table.
    fn pseudo_sources(
        &self,
        student_outs: &[crate::model::ForwardOutput<f32>],
        teacher_outs: &[crate::model::ForwardOutput<f32>],
        frozen_outs: &[crate::model::ForwardOutput<f32>],
        unl_start: usize,
    ) -> (Vec<PseudoLabels>, Vec<Vec<usize>>) {
        let n = self.pairs.len();
        let take = |o: &crate::model::ForwardOutput<f32>| PseudoLabels {
            num_classes: o.num_classes(),
            classes: o.hard_labels[unl_start..].to_vec(),
        };
        match self.cfg.topology {
            Topology::CrossTeacher => (teacher_outs.iter().map(take).collect(), cross_routes(n)),
            Topology::MeanTeacher | Topology::Ensemble => {
                (teacher_outs.iter().map(take).collect(), (0..n).map(|a| vec![a]).collect())
            }
            Topology::DualTeacher => (
                teacher_outs.iter().map(take).collect(),
                (0..n).map(|_| (0..n).collect()).collect(),
            ),
            Topology::Mutual => (student_outs.iter().map(take).collect(), cross_routes(n)),
            Topology::SelfTraining => (frozen_outs.iter().map(take).collect(), (0..n).map(|a| vec![a]).collect()),
            Topology::SupervisedOnly => (Vec::new(), vec![Vec::new(); n]),
        }
    }

    fn teacher_outputs(&self, batch: &ImageBatch<f32>) -> Result<Vec<crate::model::ForwardOutput<f32>>> {
        let need = match self.cfg.topology {
            Topology::CrossTeacher => true,
            Topology::MeanTeacher | Topology::Ensemble | Topology::DualTeacher => self.uses_unlabeled(),
            Topology::Mutual | Topology::SelfTraining | Topology::SupervisedOnly => false,
        };
        if !need {
            return Ok(Vec::new());
        }
        self.pairs.iter().map(|p| forward(&p.teacher, batch)).collect()
    }

    /// Per-student routed pseudo-label loss on `unlabeled` at the current
    /// parameters, without touching any state.
    pub fn unsupervised_losses(&self, unlabeled: &[Sample]) -> Result<Vec<f64>> {
        if unlabeled.is_empty() || !self.uses_unlabeled() {
            return Ok(vec![0.0; self.pairs.len()]);
        }
        let batch = ImageBatch::<f32>::from_samples(unlabeled)?;
        let student_outs = self
            .pairs
            .iter()
            .map(|p| forward(&p.student, &batch))
            .collect::<Result<Vec<_>>>()?;
        let teacher_outs = self.teacher_outputs(&batch)?;
        let frozen_outs = self
            .frozen
            .iter()
            .map(|f| forward(f, &batch))
            .collect::<Result<Vec<_>>>()?;
        let (pseudo, routes) = self.pseudo_sources(&student_outs, &teacher_outs, &frozen_outs, 0);
        let probs: Vec<&Matrix<f32>> = student_outs.iter().map(|o| &o.probs).collect();
        let refs: Vec<&PseudoLabels> = pseudo.iter().collect();
        let l = routed_cross_entropy(&probs, &refs, &routes)?;
        Ok(l.per_student.iter().map(|&v| v as f64).collect())
    }

    /// One iteration on already augmented batches.
    pub fn train_step(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<MetricsRecord> {
        if self.phase_switch_due() {
            self.begin_phase_two()?;
        }
        if labeled.is_empty() {
            return Err(Error::config("batch_labeled", "labeled batch is empty"));
        }
        let cfg = self.cfg.clone();
        let w = cfg.weights;
        let n = self.pairs.len();
        let nc = cfg.backbone.num_classes;
        let stride = cfg.backbone.stride;
        let lr = self.current_lr()?;
        let unlabeled: &[Sample] = if self.uses_unlabeled() { unlabeled } else { &[] };
        let batch = ImageBatch::<f32>::from_samples(labeled.iter().chain(unlabeled))?;

        let mut student_outs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for p in &self.pairs {
            let (o, c) = forward_train(&p.student, &batch)?;
            student_outs.push(o);
            caches.push(c);
        }
        let rows = student_outs[0].pixels();
        let lab_rows = labeled.len() * student_outs[0].height * student_outs[0].width;
        let mut gt: Vec<u8> = labeled
            .iter()
            .flat_map(|s| downsample_nearest(&s.label, s.height, s.width, stride))
            .collect();
        let gt_unl: Vec<u8> = unlabeled
            .iter()
            .flat_map(|s| downsample_nearest(&s.label, s.height, s.width, stride))
            .collect();

        let mut comp = LossComponents::default();
        let mut dlogits: Vec<Matrix<f32>> = (0..n).map(|_| Matrix::zeros(rows, nc)).collect();
        let mut dfeat: Vec<Option<Matrix<f32>>> = vec![None; n];

        // supervised
        for a in 0..n {
            let probs = slice_rows(&student_outs[a].probs, 0, lab_rows);
            let l = pixel_cross_entropy(&probs, &gt)?;
            comp.sup += l.value as f64;
            if w.sup != 0.0 {
                add_scaled_rows(&mut dlogits[a], 0, &l.grad, w.sup as f32);
            }
        }

        // pseudo-label routing
        let teacher_outs = self.teacher_outputs(&batch)?;
        let frozen_outs = if unlabeled.is_empty() {
            Vec::new()
        } else {
            self.frozen.iter().map(|f| forward(f, &batch)).collect::<Result<Vec<_>>>()?
        };
        let (mut pseudo_agreement, mut pseudo_accuracy) = (None, None);
        if !unlabeled.is_empty() {
            let (pseudo, routes) = self.pseudo_sources(&student_outs, &teacher_outs, &frozen_outs, lab_rows);
            let probs: Vec<Matrix<f32>> = student_outs.iter().map(|o| slice_rows(&o.probs, lab_rows, rows)).collect();
            let prefs: Vec<&Matrix<f32>> = probs.iter().collect();
            let refs: Vec<&PseudoLabels> = pseudo.iter().collect();
            let l = routed_cross_entropy(&prefs, &refs, &routes)?;
            comp.ct = l.total as f64;
            if w.ct != 0.0 {
                for (a, g) in l.grads.iter().enumerate() {
                    add_scaled_rows(&mut dlogits[a], lab_rows, g, w.ct as f32);
                }
            }
            if let Some(first) = pseudo.first() {
                pseudo_accuracy = Some(pseudo_label_quality(&first.classes, &gt_unl));
                if let Some(second) = pseudo.get(1) {
                    pseudo_agreement = Some(agreement(&first.classes, &second.classes));
                }
            }
        }

        // memory banks: teacher features on labeled pixels that agree with gt
        gt.resize(rows, IGNORE);
        if cfg.topology.uses_contrast() {
            for (a, t) in teacher_outs.iter().enumerate() {
                let cands = select_candidates(t, &gt, self.k, cfg.selection, &mut self.bank_rng)?;
                for (c, list) in cands.iter().enumerate() {
                    let vecs: Vec<&[f32]> = list
                        .iter()
                        .filter(|f| {
                            let n2: f32 = f.vector.iter().map(|v| v * v).sum();
                            (n2 - 1.0).abs() < 1e-4
                        })
                        .map(|f| f.vector.as_slice())
                        .collect();
                    self.banks[a].push(c, &vecs)?;
                }
            }
        }
        let banks_full = cfg.topology.uses_contrast() && self.banks.iter().all(|b| b.is_full());

        let (mut hc_queries, mut lc_queries) = (0, 0);
        if banks_full && (w.hc != 0.0 || w.lc != 0.0) {
            let tau = cfg.contrast.temperature;
            let normed: Vec<(Matrix<f32>, Vec<f32>)> =
                student_outs.iter().map(|o| l2_normalize_rows(&o.features)).collect();
            let classes: Vec<Vec<u8>> = student_outs
                .iter()
                .map(|o| {
                    let mut c = o.hard_labels.clone();
                    if cfg.contrast_gt_labels {
                        for (ci, &g) in c.iter_mut().zip(&gt) {
                            if g != IGNORE {
                                *ci = g;
                            }
                        }
                    }
                    c
                })
                .collect();
            let masks: Vec<_> = student_outs
                .iter()
                .map(|o| hc_mask(&o.confidence, cfg.contrast.phi))
                .collect();
            let d = cfg.backbone.feature_dim;
            for a in 0..n {
                let mut dz = Matrix::<f32>::zeros(rows, d);
                let mut touched = false;
                let l = hc_loss(&normed[a].0, &classes[a], &masks[a], &self.banks[a], tau)?;
                hc_queries += masks[a].count();
                comp.hc += l.value as f64;
                if w.hc != 0.0 {
                    add_scaled_rows(&mut dz, 0, &l.grad, w.hc as f32);
                    touched = true;
                }
                let peers = n - 1;
                for b in (0..n).filter(|&b| b != a) {
                    let m = lc_mask(
                        &masks[a],
                        &student_outs[a].confidence,
                        &student_outs[b].confidence,
                        cfg.contrast.directional,
                    )?;
                    lc_queries += m.count();
                    let l = lc_loss(
                        &normed[a].0,
                        &normed[b].0,
                        &classes[a],
                        &m,
                        &self.banks[a],
                        &self.banks[b],
                        tau,
                    )?;
                    comp.lc += l.value as f64 / peers as f64;
                    if w.lc != 0.0 {
                        add_scaled_rows(&mut dz, 0, &l.grad, (w.lc / peers as f64) as f32);
                        touched = true;
                    }
                }
                if touched {
                    dfeat[a] = Some(l2_normalize_backward(&normed[a].0, &normed[a].1, &dz));
                }
            }
        }

        let total = total_loss(&comp, &w, banks_full)?;
        if !total.is_finite() {
            return Err(Error::Divergence {
                iter: self.iter + 1,
                reason: format!(
                    "non-finite loss (sup {}, ct {}, hc {}, lc {})",
                    comp.sup, comp.ct, comp.hc, comp.lc
                ),
            });
        }

        // SGD with momentum on every student
        let (mu, wd, lr32) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32);
        for a in 0..n {
            let g = backward(&self.pairs[a].student, &caches[a], dfeat[a].as_ref(), Some(&dlogits[a]))?;
            let params = &mut self.pairs[a].student.data;
            for ((p, v), &g) in params.iter_mut().zip(self.velocity[a].iter_mut()).zip(&g) {
                *v = mu * *v + g + wd * *p;
                *p -= lr32 * *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    iter: self.iter + 1,
                    reason: format!("non-finite parameters in student {a} after the update (lr {lr})"),
                });
            }
        }
        if cfg.topology.uses_ema() {
            for p in &mut self.pairs {
                ema_update(p)?;
            }
        }
        self.iter += 1;

        let weighted = LossComponents {
            sup: w.sup * comp.sup,
            ct: w.ct * comp.ct,
            hc: if banks_full { w.hc * comp.hc } else { 0.0 },
            lc: if banks_full { w.lc * comp.lc } else { 0.0 },
        };
        Ok(MetricsRecord {
            iter: self.iter,
            lr,
            sup: comp.sup,
            ct: comp.ct,
            hc: comp.hc,
            lc: comp.lc,
            weighted,
            total,
            banks_full,
            bank_fill: self.banks.iter().map(|b| b.fill_fractions()).collect(),
            pseudo_agreement,
            pseudo_accuracy,
            hc_queries,
            lc_queries,
            miou: None,
        })
    }

    /// Confusion matrix of the selected network on `samples`. The ensemble
    /// topology always evaluates its averaged students.
    pub fn evaluate(&self, samples: &[&Sample], which: EvalNet) -> Result<ConfusionMatrix> {
        let nc = self.cfg.backbone.num_classes;
        let which = if self.cfg.topology == Topology::Ensemble {
            EvalNet::Ensemble
        } else {
            which
        };
        match which {
            EvalNet::StudentA => evaluate(EvalNetwork::Single(&self.pairs[0].student), samples, nc, EVAL_BATCH),
            EvalNet::TeacherA => evaluate(EvalNetwork::Single(&self.pairs[0].teacher), samples, nc, EVAL_BATCH),
            EvalNet::Ensemble => {
                let members: Vec<&ModelParams<f32>> = self.pairs.iter().map(|p| &p.student).collect();
                evaluate(EvalNetwork::Ensemble(&members), samples, nc, EVAL_BATCH)
            }
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = Vec::new();
        let mut push = |prefix: String, m: &ModelParams<f32>| {
            for p in &m.layout.params {
                tensors.push(NamedTensor {
                    name: format!("{prefix}.{}", p.name),
                    shape: p.shape.clone(),
                    data: m.data[p.offset..p.offset + p.len].to_vec(),
                });
            }
        };
        for (a, pair) in self.pairs.iter().enumerate() {
            push(format!("pair{a}.student"), &pair.student);
            push(format!("pair{a}.teacher"), &pair.teacher);
            let vel = ModelParams {
                layout: pair.student.layout.clone(),
                data: self.velocity[a].clone(),
            };
            push(format!("pair{a}.velocity"), &vel);
        }
        for (a, f) in self.frozen.iter().enumerate() {
            push(format!("pair{a}.frozen"), f);
        }
        Archive {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.into(),
                iteration: self.iter,
                phase: if self.frozen.is_empty() { 1 } else { 2 },
                n_labeled: self.n_labeled,
                tensors: 0,
                banks: 0,
                rng: vec![
                    rng_state("data", self.cfg.seed, &self.data_rng),
                    rng_state("bank", self.cfg.seed, &self.bank_rng),
                ],
                config: self.cfg.clone(),
            },
            tensors,
            banks: self.banks.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn from_archive(ar: &Archive, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::integrity(path, reason);
        let m = &ar.manifest;
        let mut t = Trainer::new(&m.config, m.n_labeled.max(1))?;
        let fill = |prefix: String, target: &mut ModelParams<f32>| -> Result<()> {
            for p in &target.layout.params.clone() {
                let name = format!("{prefix}.{}", p.name);
                let src = ar.tensor(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
                if src.shape != p.shape {
                    return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", src.shape, p.shape)));
                }
                target.data[p.offset..p.offset + p.len].copy_from_slice(&src.data);
            }
            Ok(())
        };
        for a in 0..t.pairs.len() {
            fill(format!("pair{a}.student"), &mut t.pairs[a].student)?;
            fill(format!("pair{a}.teacher"), &mut t.pairs[a].teacher)?;
            let mut vel = t.pairs[a].student.clone();
            fill(format!("pair{a}.velocity"), &mut vel)?;
            t.velocity[a] = vel.data;
        }
        if m.phase == 2 {
            t.frozen = t.pairs.iter().map(|p| p.student.clone()).collect();
            for a in 0..t.frozen.len() {
                fill(format!("pair{a}.frozen"), &mut t.frozen[a])?;
            }
        }
        if ar.banks.len() != t.banks.len() {
            return Err(bad(format!("{} banks, expected {}", ar.banks.len(), t.banks.len())));
        }
        for (dst, src) in t.banks.iter_mut().zip(&ar.banks) {
            if (src.num_classes(), src.capacity(), src.dim()) != (dst.num_classes(), dst.capacity(), dst.dim()) {
                return Err(bad("bank geometry differs from config".into()));
            }
            *dst = src.clone();
        }
        for s in &m.rng {
            let rng = restore_rng(s)?;
            match s.name.as_str() {
                "data" => t.data_rng = rng,
                "bank" => t.bank_rng = rng,
                other => return Err(bad(format!("unknown rng {other}"))),
            }
        }
        t.iter = m.iteration;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trainer::from_archive(&Archive::read(path)?, path)
    }
}

/// What a run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub final_miou: Option<f64>,
    pub final_per_class: Vec<Option<f64>>,
    pub checkpoints: Vec<PathBuf>,
    pub trainer: Trainer,
}

pub fn checkpoint_name(iter: usize) -> String {
    format!("iter_{iter:06}.ckpt")
}

struct RunSink {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl RunSink {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let path = dir.join("metrics.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunSink {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        writeln!(self.log, "{text}")
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, t: &Trainer, name: &str) -> Result<PathBuf> {
        let path = self.dir.join("checkpoints").join(name);
        t.save(&path)?;
        Ok(path)
    }
}

/// Trains from scratch. With `out_dir`, writes `metrics.jsonl` (one JSON
/// record per iteration) and `checkpoints/`.
pub fn run(cfg: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<RunOutput> {
    let trainer = Trainer::new(cfg, data.labeled.len())?;
    run_from(trainer, data, out_dir)
}

/// Same as [`run`] for the non-cross-teacher topologies.
pub fn run_baseline_topology(cfg: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<RunOutput> {
    if cfg.topology == Topology::CrossTeacher {
        return Err(Error::config("topology", "baseline runs exclude cross_teacher"));
    }
    run(cfg, data, out_dir)
}

/// Continues `trainer` up to `max_iters`. A fresh trainer gets an initial
/// checkpoint; a resumed one appends to the existing log.
pub fn run_from(mut trainer: Trainer, data: &TrainData, out_dir: Option<&Path>) -> Result<RunOutput> {
    let cfg = trainer.cfg.clone();
    if data.labeled.is_empty() {
        return Err(Error::config("labeled_fraction", "no labeled images"));
    }
    for s in data.labeled.iter().chain(&data.unlabeled) {
        if s.height < cfg.crop.0 || s.width < cfg.crop.1 {
            return Err(Error::config("crop", format!("larger than a {}x{} image", s.height, s.width)));
        }
    }
    let resumed = trainer.iter > 0;
    let mut sink = match out_dir {
        Some(d) => Some(RunSink::open(d, resumed)?),
        None => None,
    };
    let mut checkpoints = Vec::new();
    if let (Some(s), false) = (&sink, resumed) {
        checkpoints.push(s.checkpoint(&trainer, &checkpoint_name(0))?);
    }
    let val: Vec<&Sample> = data.val.iter().collect();
    let mut records = Vec::new();
    let mut last_eval: Option<(f64, Vec<Option<f64>>)> = None;
    while trainer.iter < cfg.max_iters {
        if trainer.phase_switch_due() {
            if let Some(s) = &sink {
                checkpoints.push(s.checkpoint(&trainer, "phase1.ckpt")?);
            }
            trainer.begin_phase_two()?;
        }
        let mut rec = match trainer.step(data) {
            Ok(r) => r,
            Err(e @ Error::Divergence { .. }) => {
                if let Some(s) = &mut sink {
                    let diag = serde_json::json!({
                        "iter": trainer.iter + 1,
                        "diverged": true,
                        "reason": e.to_string(),
                    });
                    s.line(&diag.to_string())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = trainer.iter == cfg.max_iters;
        let periodic = cfg.eval_interval > 0 && trainer.iter % cfg.eval_interval == 0;
        if !val.is_empty() && (periodic || done) {
            let (per_class, mean) = trainer.evaluate(&val, cfg.eval_network)?.miou()?;
            rec.miou = Some(mean);
            last_eval = Some((mean, per_class));
        }
        if let Some(s) = &mut sink {
            s.line(&serde_json::to_string(&rec).map_err(|e| Error::Internal(e.to_string()))?)?;
            let periodic_ck = cfg.checkpoint_interval > 0 && trainer.iter % cfg.checkpoint_interval == 0;
            if periodic_ck || done {
                checkpoints.push(s.checkpoint(&trainer, &checkpoint_name(trainer.iter))?);
            }
        }
        records.push(rec);
    }
    let (final_miou, final_per_class) = match last_eval {
        Some((m, pc)) => (Some(m), pc),
        None => (None, Vec::new()),
    };
    Ok(RunOutput {
        records,
        final_miou,
        final_per_class,
        checkpoints,
        trainer,
    })
}
