use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adamw_step, grad_norm, lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{
    make_mask_plan, save_checkpoint, Arch, Bound, Checkpoint, MaskPlan, ModelParams, OptimizerState, TokenInputs,
};
use crate::scene::SceneBundle;
use crate::seed;
use crate::stage1::{
    forward_3d, pool_regions, region_coefficients, stage1_loss, token_regions, Pooling, ScaleMode, WeightTable,
    DEFAULT_K_GROUPS, DEFAULT_SMOOTH_L1_BETA,
};
use crate::stage2::{stage2_loss, student_forward, teacher_forward, TeacherOutput};
use crate::tensor::{Tape, Tensor};
use crate::tokenize::TokenizerConfig;

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const STUDENT_INIT_STREAM: u64 = 0x7374_7564;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Loss components in the stage's column order.
    pub losses: Vec<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

fn metrics_header(loss_names: &[&str]) -> String {
    format!("epoch,step,lr,{},grad_norm,wall_ms\n", loss_names.join(","))
}

fn metrics_line(m: &StepMetrics) -> String {
    let losses: Vec<String> = m.losses.iter().map(|l| l.to_string()).collect();
    format!(
        "{},{},{},{},{},{:.3}\n",
        m.epoch,
        m.step,
        m.lr,
        losses.join(","),
        m.grad_norm,
        m.wall_ms
    )
}

/// Output sink: checkpoint after every epoch, metrics appended as they come.
struct RunDir<'a> {
    dir: &'a Path,
}

impl<'a> RunDir<'a> {
    fn open(dir: &'a Path, loss_names: &[&str], resume_step: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        match resume_step {
            Some(step) if path.exists() => {
                // drop rows past the checkpoint being resumed
                let text = fs::read_to_string(&path)?;
                let mut kept = String::new();
                for (i, line) in text.lines().enumerate() {
                    let keep = i == 0
                        || line
                            .split(',')
                            .nth(1)
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s <= step);
                    if keep {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
                fs::write(&path, kept)?;
            }
            _ => fs::write(&path, metrics_header(loss_names))?,
        }
        Ok(Self { dir })
    }

    fn epoch_done(&self, ck: &Checkpoint, rows: &[StepMetrics]) -> Result<()> {
        save_checkpoint(&self.dir.join("checkpoint"), ck)?;
        let mut f = fs::OpenOptions::new().append(true).open(self.dir.join("metrics.csv"))?;
        for r in rows {
            f.write_all(metrics_line(r).as_bytes())?;
        }
        Ok(())
    }
}

type GradMap = BTreeMap<String, Tensor>;

/// Runs `f` on every item (in parallel when possible) and returns the
/// per-item results in input order.
fn map_items<T: Sync, R: Send>(items: &[&T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if threads <= 1 {
        return items.iter().map(|t| f(t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(|t| f(t)).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// Averages per-item losses and gradients in a fixed order.
fn average(results: Vec<(Vec<f64>, GradMap)>) -> (Vec<f64>, GradMap) {
    let n = results.len() as f64;
    let mut losses = vec![0.0; results.first().map_or(0, |r| r.0.len())];
    let mut acc: GradMap = BTreeMap::new();
    for (l, g) in results {
        losses.iter_mut().zip(&l).for_each(|(a, b)| *a += b / n);
        for (name, t) in g {
            match acc.get_mut(&name) {
                Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y / n),
                None => {
                    let mut t = t;
                    t.data_mut().iter_mut().for_each(|x| *x /= n);
                    acc.insert(name, t);
                }
            }
        }
    }
    (losses, acc)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, &[SHUFFLE_STREAM, epoch as u64]));
    order
}

fn non_finite_to_divergence(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::DivergedRun { step },
        other => other,
    }
}

struct Progress {
    params: ModelParams,
    state: OptimizerState,
    step: u64,
    start_epoch: usize,
}

fn start(init: ModelParams, resume: Option<Checkpoint>, steps_per_epoch: usize) -> Result<Progress> {
    match resume {
        None => Ok(Progress {
            params: init,
            state: OptimizerState::default(),
            step: 0,
            start_epoch: 0,
        }),
        Some(ck) => {
            if ck.params.arch != init.arch {
                return Err(Error::InvalidInput("resume checkpoint has a different architecture".into()));
            }
            if steps_per_epoch > 0 && ck.step % steps_per_epoch as u64 != 0 {
                return Err(Error::InvalidInput(format!(
                    "checkpoint step {} is not at an epoch boundary",
                    ck.step
                )));
            }
            let start_epoch = if steps_per_epoch == 0 { 0 } else { (ck.step / steps_per_epoch as u64) as usize };
            Ok(Progress {
                params: ck.params,
                state: ck.optimizer.unwrap_or_default(),
                step: ck.step,
                start_epoch,
            })
        }
    }
}

/// Shared epoch/batch loop. `grads_for` returns per-scene loss components
/// and gradients for scene `i` at `epoch`.
fn train_loop<T: Sync>(
    progress: &mut Progress,
    scenes: &[T],
    config: &TrainConfig,
    out: Option<&RunDir>,
    grads_for: impl Fn(&ModelParams, &T, usize, usize) -> Result<(Vec<f64>, GradMap)> + Sync,
) -> Result<Vec<StepMetrics>> {
    let spe = config.steps_per_epoch(scenes.len());
    let total = spe * config.epochs;
    let warmup = spe * config.warmup_epochs;
    let mut metrics = Vec::new();
    let end = config.stop_after_epochs.map_or(config.epochs, |e| e.min(config.epochs));
    for epoch in progress.start_epoch..end {
        let order = epoch_order(scenes.len(), config.seed, epoch);
        let mut rows = Vec::with_capacity(spe);
        for batch in order.chunks(config.batch_size) {
            let t0 = Instant::now();
            let step = progress.step;
            let items: Vec<(usize, &T)> = batch.iter().map(|&i| (i, &scenes[i])).collect();
            let refs: Vec<&(usize, &T)> = items.iter().collect();
            let params = &progress.params;
            let results = map_items(&refs, |&(i, s)| grads_for(params, s, i, epoch))
                .map_err(|e| non_finite_to_divergence(e, step))?;
            let (losses, grads) = average(results);
            let norm = grad_norm(&grads);
            if !norm.is_finite() || losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::DivergedRun { step });
            }
            let lr = lr_at(step as usize + 1, total, warmup, config);
            adamw_step(&mut progress.params, &grads, &mut progress.state, lr, config, step)?;
            progress.step += 1;
            rows.push(StepMetrics {
                epoch,
                step: progress.step,
                lr,
                losses,
                grad_norm: norm,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        if let Some(o) = out {
            o.epoch_done(
                &Checkpoint {
                    params: progress.params.clone(),
                    step: progress.step,
                    optimizer: Some(progress.state.clone()),
                },
                &rows,
            )?;
        }
        metrics.extend(rows);
    }
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Options {
    pub arch: Arch,
    pub tokenizer: TokenizerConfig,
    pub k_groups: usize,
    pub scale_mode: ScaleMode,
    /// Group-balanced weights; off gives every region weight one.
    pub reweight: bool,
    pub smooth_l1_beta: f64,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            arch: Arch::default(),
            tokenizer: TokenizerConfig::default(),
            k_groups: DEFAULT_K_GROUPS,
            scale_mode: ScaleMode::MeanOne,
            reweight: true,
            smooth_l1_beta: DEFAULT_SMOOTH_L1_BETA,
        }
    }
}

/// One scene prepared for stage 1.
#[derive(Clone, Debug)]
pub struct Stage1Scene {
    pub inputs: TokenInputs,
    /// Tokens that have a distillation target, ascending.
    pub target_rows: Vec<usize>,
    /// Mean-pooled 2D features of each target row's region.
    pub target: Tensor,
    /// Max-pooled 2D features, used for the group lookup.
    pub max_features: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub beta: f64,
}

/// Tokenizes and pools every scene. Scenes without any distillable token
/// are rejected.
pub fn prepare_stage1(bundles: &[SceneBundle], opts: &Stage1Options) -> Result<Vec<Stage1Scene>> {
    let refs: Vec<&SceneBundle> = bundles.iter().collect();
    map_items(&refs, |b| {
        if b.feature_dim != opts.arch.feat2d_dim {
            return Err(Error::DimensionMismatch(format!(
                "scene features have width {}, model projects to {}",
                b.feature_dim, opts.arch.feat2d_dim
            )));
        }
        let tokens = opts.tokenizer.tokenize(b)?;
        let regions = token_regions(b, &tokens)?;
        let (target_rows, ids): (Vec<usize>, Vec<i32>) =
            regions.iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).unzip();
        if target_rows.is_empty() {
            return Err(Error::EmptyTokenization);
        }
        let target = pool_regions(b, &ids, Pooling::Mean)?.features;
        let maxed = pool_regions(b, &ids, Pooling::Max)?.features;
        Ok(Stage1Scene {
            inputs: TokenInputs::new(&b.points_f64(), &tokens, opts.arch.max_points_per_token)?,
            max_features: (0..maxed.rows()).map(|r| maxed.row_slice(r).to_vec()).collect(),
            groups: vec![0; target_rows.len()],
            coefficients: vec![1.0; target_rows.len()],
            beta: opts.smooth_l1_beta,
            target_rows,
            target,
        })
    })
}

/// Builds the weight table over all regions and fills in every scene's
/// groups and loss coefficients.
pub fn assign_weights(scenes: &mut [Stage1Scene], opts: &Stage1Options, seed: u64) -> Result<WeightTable> {
    let feats: Vec<Vec<f64>> = scenes.iter().flat_map(|s| s.max_features.iter().cloned()).collect();
    let table = WeightTable::build(&feats, opts.k_groups, seed)?;
    apply_weights(scenes, &table, opts)?;
    Ok(table)
}

/// Looks up each region's group in an existing table (nearest centroid)
/// and sets the loss coefficients.
pub fn apply_weights(scenes: &mut [Stage1Scene], table: &WeightTable, opts: &Stage1Options) -> Result<()> {
    for s in scenes.iter_mut() {
        s.groups = s.max_features.iter().map(|f| table.group_of(f)).collect::<Result<_>>()?;
        s.coefficients = if opts.reweight {
            region_coefficients(table, &s.groups, opts.scale_mode)?
        } else {
            vec![1.0; s.groups.len()]
        };
    }
    Ok(())
}

/// Scene loss; also used by evaluation code.
pub fn stage1_scene_loss(p: &Bound, s: &Stage1Scene) -> Result<crate::tensor::Var> {
    let tape = p.tape;
    let f3d = forward_3d(p, &s.inputs)?;
    let rows = if s.target_rows.len() == s.inputs.len() {
        f3d
    } else {
        tape.gather_rows(f3d, &s.target_rows)?
    };
    stage1_loss(tape, tape.constant(s.target.clone()), rows, &s.coefficients, s.beta)
}

/// Mean stage-1 loss over `scenes`.
pub fn evaluate_stage1(params: &ModelParams, scenes: &[Stage1Scene]) -> Result<f64> {
    let refs: Vec<&Stage1Scene> = scenes.iter().collect();
    let losses = map_items(&refs, |s| {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let l = stage1_scene_loss(&p, s)?;
        let v = tape.value(l).item();
        Ok(v)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct Stage1Run {
    pub params: ModelParams,
    pub table: WeightTable,
    pub metrics: Vec<StepMetrics>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Serialize)]
struct Stage1Summary<'a> {
    options: &'a Stage1Options,
    config: &'a TrainConfig,
    n_scenes: usize,
    steps: u64,
    initial_loss: f64,
    final_loss: f64,
}

/// Trains the encoder and projection head against pooled 2D features.
///
/// With `out`, writes `checkpoint/` after every epoch, `metrics.csv`,
/// `weights/` (the group table) and `summary.json`. `resume` continues from
/// a checkpoint saved at an epoch boundary of the same run.
pub fn run_stage1(
    bundles: &[SceneBundle],
    opts: &Stage1Options,
    config: &TrainConfig,
    out: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<Stage1Run> {
    config.validate()?;
    let mut scenes = prepare_stage1(bundles, opts)?;
    let table = assign_weights(&mut scenes, opts, config.seed)?;
    let init = ModelParams::init(&opts.arch, config.seed)?;
    let spe = config.steps_per_epoch(scenes.len());
    let mut progress = start(init, resume, spe)?;
    let run_dir = match out {
        Some(dir) => {
            let r = RunDir::open(dir, &["l_distill"], (progress.step > 0).then_some(progress.step))?;
            table.save(&dir.join("weights"))?;
            if progress.step == 0 {
                save_checkpoint(
                    &dir.join("checkpoint"),
                    &Checkpoint {
                        params: progress.params.clone(),
                        step: 0,
                        optimizer: Some(OptimizerState::default()),
                    },
                )?;
            }
            Some(r)
        }
        None => None,
    };
    let initial_loss = evaluate_stage1(&progress.params, &scenes)?;
    let metrics = train_loop(&mut progress, &scenes, config, run_dir.as_ref(), |params, s, _, _| {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let loss = stage1_scene_loss(&p, s)?;
        let grads = tape.backward(loss)?;
        let v = tape.value(loss).item();
        Ok((vec![v], p.grads(&grads)))
    })?;
    let final_loss = evaluate_stage1(&progress.params, &scenes)?;
    if let Some(dir) = out {
        crate::blob::write_manifest(
            &dir.join("summary.json"),
            &Stage1Summary {
                options: opts,
                config,
                n_scenes: scenes.len(),
                steps: progress.step,
                initial_loss,
                final_loss,
            },
        )?;
    }
    Ok(Stage1Run {
        params: progress.params,
        table,
        metrics,
        initial_loss,
        final_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Options {
    pub tokenizer: TokenizerConfig,
    pub mask_ratio: f64,
    /// Start the student from the teacher's weights instead of a fresh init.
    pub init_from_teacher: bool,
    /// L2-normalize each teacher token target.
    pub normalize_targets: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            mask_ratio: 0.6,
            init_from_teacher: true,
            normalize_targets: false,
        }
    }
}

/// One scene prepared for stage 2: token inputs plus the teacher's outputs
/// at every position (the mask plan only selects rows).
#[derive(Clone, Debug)]
pub struct Stage2Scene {
    pub inputs: TokenInputs,
    pub teacher_f_ins: Tensor,
    pub teacher_tokens: Tensor,
}

impl Stage2Scene {
    pub fn teacher_output(&self, plan: &MaskPlan) -> TeacherOutput {
        let c = self.teacher_tokens.cols();
        let rows: Vec<f64> = plan.masked.iter().flat_map(|&i| self.teacher_tokens.row_slice(i).to_vec()).collect();
        TeacherOutput {
            f_ins: self.teacher_f_ins.clone(),
            token_targets: Tensor::matrix(plan.masked.len(), c, rows),
        }
    }
}

pub fn prepare_stage2(bundles: &[SceneBundle], teacher: &ModelParams, opts: &Stage2Options) -> Result<Vec<Stage2Scene>> {
    let refs: Vec<&SceneBundle> = bundles.iter().collect();
    map_items(&refs, |b| {
        let tokens = opts.tokenizer.tokenize(b)?;
        let inputs = TokenInputs::new(&b.points_f64(), &tokens, teacher.arch.max_points_per_token)?;
        let all = MaskPlan {
            visible: Vec::new(),
            masked: (0..inputs.len()).collect(),
            ratio: 0.0,
        };
        let t = teacher_forward(teacher, &inputs, &all, opts.normalize_targets)?;
        Ok(Stage2Scene {
            inputs,
            teacher_f_ins: t.f_ins,
            teacher_tokens: t.token_targets,
        })
    })
}

fn stage2_scene(
    params: &ModelParams,
    s: &Stage2Scene,
    plan: &MaskPlan,
    with_grads: bool,
) -> Result<(Vec<f64>, GradMap)> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let out = student_forward(&p, &s.inputs, plan)?;
    let l = stage2_loss(&p, &out, &s.teacher_output(plan))?;
    let losses = vec![tape.value(l.ins).item(), tape.value(l.token).item(), tape.value(l.total).item()];
    let grads = if with_grads {
        p.grads(&tape.backward(l.total)?)
    } else {
        GradMap::new()
    };
    Ok((losses, grads))
}

/// Mean `(L_ins, L_token, L_final)` over `scenes` under the plans of
/// `epoch`.
pub fn evaluate_stage2(
    params: &ModelParams,
    scenes: &[Stage2Scene],
    mask_ratio: f64,
    seed: u64,
    epoch: usize,
) -> Result<[f64; 3]> {
    let items: Vec<(usize, &Stage2Scene)> = scenes.iter().enumerate().collect();
    let refs: Vec<&(usize, &Stage2Scene)> = items.iter().collect();
    let results = map_items(&refs, |&(i, s)| {
        let plan = make_mask_plan(s.inputs.len(), mask_ratio, seed, i as u64, epoch as u64)?;
        stage2_scene(params, s, &plan, false)
    })?;
    let (l, _) = average(results);
    Ok([l[0], l[1], l[2]])
}

#[derive(Clone, Debug)]
pub struct Stage2Run {
    pub params: ModelParams,
    pub metrics: Vec<StepMetrics>,
    /// `(L_ins, L_token, L_final)` on the training scenes under the first
    /// epoch's mask plans, before and after training.
    pub initial: [f64; 3],
    pub final_: [f64; 3],
}

#[derive(Serialize)]
struct Stage2Summary<'a> {
    options: &'a Stage2Options,
    config: &'a TrainConfig,
    n_scenes: usize,
    steps: u64,
    initial: [f64; 3],
    #[serde(rename = "final")]
    final_: [f64; 3],
}

/// Trains a student against the frozen `teacher`.
pub fn run_stage2(
    bundles: &[SceneBundle],
    teacher: &ModelParams,
    opts: &Stage2Options,
    config: &TrainConfig,
    out: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<Stage2Run> {
    config.validate()?;
    if !(0.0..1.0).contains(&opts.mask_ratio) {
        return Err(Error::InvalidInput(format!("mask ratio {} not in [0, 1)", opts.mask_ratio)));
    }
    let mut teacher = teacher.clone();
    teacher.freeze_all();
    let scenes = prepare_stage2(bundles, &teacher, opts)?;
    let init = if opts.init_from_teacher {
        let mut s = teacher.clone();
        s.unfreeze_all();
        s
    } else {
        ModelParams::init(&teacher.arch, seed::derive(config.seed, &[STUDENT_INIT_STREAM]))?
    };
    let spe = config.steps_per_epoch(scenes.len());
    let mut progress = start(init, resume, spe)?;
    let run_dir = match out {
        Some(dir) => {
            let r = RunDir::open(dir, &["l_ins", "l_token", "l_final"], (progress.step > 0).then_some(progress.step))?;
            if progress.step == 0 {
                save_checkpoint(
                    &dir.join("checkpoint"),
                    &Checkpoint {
                        params: progress.params.clone(),
                        step: 0,
                        optimizer: Some(OptimizerState::default()),
                    },
                )?;
            }
            Some(r)
        }
        None => None,
    };
    let ratio = opts.mask_ratio;
    let initial = evaluate_stage2(&progress.params, &scenes, ratio, config.seed, 0)?;
    let metrics = train_loop(&mut progress, &scenes, config, run_dir.as_ref(), |params, s, i, epoch| {
        let plan = make_mask_plan(s.inputs.len(), ratio, config.seed, i as u64, epoch as u64)?;
        stage2_scene(params, s, &plan, true)
    })?;
    let final_ = evaluate_stage2(&progress.params, &scenes, ratio, config.seed, 0)?;
    if let Some(dir) = out {
        crate::blob::write_manifest(
            &dir.join("summary.json"),
            &Stage2Summary {
                options: opts,
                config,
                n_scenes: scenes.len(),
                steps: progress.step,
                initial,
                final_,
            },
        )?;
    }
    Ok(Stage2Run {
        params: progress.params,
        metrics,
        initial,
        final_,
    })
}
