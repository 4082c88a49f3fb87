use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sam3d::eval::{
    linear_probe, mean, mean_purity, region_cosines, report_ablation, tail_cosine, CellKey, CellValues,
    EncoderTag,
};
use sam3d::nn::{load_checkpoint, Checkpoint, ModelParams};
use sam3d::scene::{generate_dataset, read_bundle, write_bundle, SceneBundle, SceneSpec};
use sam3d::seed;
use sam3d::stage1::WeightTable;
use sam3d::tokenize::{audit_csv, audit_scene, TokenizerConfig};
use sam3d::train::{apply_weights, prepare_stage1, run_stage1, run_stage2, Stage1Options, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::{Cli, Command, ProbeArgs, ReportArgs, SceneArgs, Stage1Args, Stage2Args, TokenizeArgs, TokenizerArgs, TrainArgs};

const TEST_SPLIT_STREAM: u64 = 0x7465_7374;

pub fn run(cli: &Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?.with_seed(cli.seed);
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Scene(a) => scene(a, config, out),
        Command::Tokenize(a) => tokenize(a, config, out),
        Command::Stage1(a) => stage1(a, config, out),
        Command::Stage2(a) => stage2(a, config, out),
        Command::Probe(a) => probe(a, config, out),
        Command::Report(a) => report(a, out),
    }
}

fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:04}"))
}

/// Every bundle under `dir`, in directory-name order.
pub fn load_scenes(dir: &Path) -> Result<Vec<SceneBundle>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading scene directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|p| p.join("manifest.json").is_file());
    dirs.sort();
    if dirs.is_empty() {
        bail!("no scene bundles in {}", dir.display());
    }
    dirs.iter()
        .map(|d| read_bundle(d).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn scene(a: &SceneArgs, mut config: Config, out: &Path) -> Result<()> {
    let s = &mut config.scene;
    if let Some(v) = a.n_train {
        s.n_train = v;
    }
    if let Some(v) = a.n_test {
        s.n_test = v;
    }
    if let Some(v) = a.n_objects {
        s.spec.n_objects = v;
    }
    if let Some(v) = a.imbalance {
        s.spec.imbalance_exponent = v;
    }
    if let Some(v) = a.noise_sigma {
        s.spec.noise_sigma = v;
    }
    if let Some(v) = &a.layout {
        s.spec.layout = v.parse()?;
    }
    let train = generate_dataset(&s.spec, s.n_train)?;
    let test_spec = SceneSpec {
        seed: seed::derive(s.spec.seed, &[TEST_SPLIT_STREAM]),
        ..s.spec.clone()
    };
    let test = generate_dataset(&test_spec, s.n_test)?;
    for (split, bundles) in [("train", &train), ("test", &test)] {
        let root = out.join(split);
        if root.exists() {
            fs::remove_dir_all(&root)?;
        }
        for (i, b) in bundles.iter().enumerate() {
            write_bundle(b, &scene_dir(&root, i))?;
        }
    }
    write_json(&out.join("scene_spec.json"), s)?;
    println!("wrote {} train and {} test scenes to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn apply_tokenizer(base: TokenizerConfig, a: &TokenizerArgs) -> Result<TokenizerConfig> {
    let mut t = base;
    if let Some(m) = &a.tokenizer {
        t.mode = m.parse()?;
    }
    if let Some(n) = a.min_points {
        t.min_points = n;
    }
    if let Some(n) = a.knn_n {
        t.knn_n = n;
    }
    if let Some(k) = a.knn_k {
        t.knn_k = k;
    }
    Ok(t)
}

fn tokenize(a: &TokenizeArgs, config: Config, out: &Path) -> Result<()> {
    let tokenizer = apply_tokenizer(config.stage1.tokenizer, &a.tokenizer)?;
    let bundles = load_scenes(&a.scenes)?;
    let rows = bundles
        .iter()
        .enumerate()
        .map(|(i, b)| audit_scene(i, b, &tokenizer))
        .collect::<sam3d::Result<Vec<_>>>()?;
    let path = a.audit.clone().unwrap_or_else(|| out.join("audit.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, audit_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    let purity = mean(&rows.iter().map(|r| r.purity).collect::<Vec<_>>());
    println!("{} scenes, tokenizer {}, mean purity {purity:.6}", rows.len(), tokenizer.mode);
    Ok(())
}

fn apply_train(base: TrainConfig, a: &TrainArgs) -> TrainConfig {
    let mut c = if a.paper_defaults {
        TrainConfig {
            seed: base.seed,
            ..TrainConfig::paper_defaults()
        }
    } else {
        base
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
        c.warmup_epochs = c.warmup_epochs.min(v);
    }
    if let Some(v) = a.lr {
        c.base_lr = v;
    }
    if let Some(v) = a.wd {
        c.weight_decay = v;
    }
    if let Some(v) = a.batch {
        c.batch_size = v;
    }
    if let Some(v) = a.warmup {
        c.warmup_epochs = v;
    }
    if a.stop_after.is_some() {
        c.stop_after_epochs = a.stop_after;
    }
    c
}

fn resume_from(out: &Path, resume: bool) -> Result<Option<Checkpoint>> {
    if !resume {
        return Ok(None);
    }
    let dir = out.join("checkpoint");
    Ok(Some(load_checkpoint(&dir).with_context(|| format!("resuming from {}", dir.display()))?))
}

fn stage1(a: &Stage1Args, config: Config, out: &Path) -> Result<()> {
    let mut opts = config.stage1;
    opts.tokenizer = apply_tokenizer(opts.tokenizer, &a.tokenizer)?;
    if let Some(k) = a.k_groups {
        opts.k_groups = k;
    }
    if let Some(m) = &a.scale_mode {
        opts.scale_mode = m.parse()?;
    }
    if a.no_reweight {
        opts.reweight = false;
    }
    if let Some(m) = a.max_points {
        opts.arch.max_points_per_token = m;
    }
    let train = apply_train(config.stage1_train, &a.train);
    let bundles = load_scenes(&a.scenes)?;
    let resume = resume_from(out, a.train.resume)?;
    let r = run_stage1(&bundles, &opts, &train, Some(out), resume)?;
    println!(
        "stage1: {} steps, L_distill {:.6} -> {:.6}",
        r.metrics.last().map_or(0, |m| m.step),
        r.initial_loss,
        r.final_loss
    );
    Ok(())
}

fn stage2(a: &Stage2Args, config: Config, out: &Path) -> Result<()> {
    let mut opts = config.stage2;
    opts.tokenizer = apply_tokenizer(opts.tokenizer, &a.tokenizer)?;
    if let Some(v) = a.init_from_teacher {
        opts.init_from_teacher = v;
    }
    if let Some(v) = a.mask_ratio {
        opts.mask_ratio = v;
    }
    let train = apply_train(config.stage2_train, &a.train);
    let teacher = load_checkpoint(&a.teacher_ckpt)
        .with_context(|| format!("loading teacher {}", a.teacher_ckpt.display()))?
        .params;
    let bundles = load_scenes(&a.scenes)?;
    let resume = resume_from(out, a.train.resume)?;
    let r = run_stage2(&bundles, &teacher, &opts, &train, Some(out), resume)?;
    println!(
        "stage2: {} steps, L_final {:.6} -> {:.6}",
        r.metrics.last().map_or(0, |m| m.step),
        r.initial[2],
        r.final_[2]
    );
    Ok(())
}

/// Contents of `eval.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub encoder_tag: EncoderTag,
    pub tokenizer: String,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub n_tokens: usize,
    /// Mean token purity of the tokenizer on the test scenes.
    pub purity: f64,
    pub tail_groups: Option<Vec<usize>>,
    /// Mean held-out cosine between projected 3D and pooled 2D region
    /// features over the smallest groups.
    pub tail_cosine: Option<f64>,
}

fn probe(a: &ProbeArgs, config: Config, out: &Path) -> Result<()> {
    let tag: EncoderTag = a.tag.parse()?;
    let params = match (&a.ckpt, tag) {
        (Some(dir), _) => load_checkpoint(dir).with_context(|| format!("loading {}", dir.display()))?.params,
        (None, EncoderTag::Scratch) => ModelParams::init(&config.stage1.arch, config.stage1_train.seed)?,
        (None, _) => bail!("--ckpt is required for a {tag} encoder"),
    };
    let tokenizer = apply_tokenizer(config.stage1.tokenizer, &a.tokenizer)?;
    let mut probe_cfg = config.probe;
    if let Some(e) = a.epochs {
        probe_cfg.epochs = e;
    }
    let train = load_scenes(&a.train)?;
    let test = load_scenes(&a.test)?;
    let result = linear_probe(&params, &train, &test, &tokenizer, tag, &probe_cfg)?;
    let purity = mean_purity(&test, &tokenizer)?;
    let tail = match &a.weights {
        None => None,
        Some(dir) => {
            let table = WeightTable::load(dir).with_context(|| format!("loading {}", dir.display()))?;
            let opts = Stage1Options {
                arch: params.arch.clone(),
                tokenizer,
                k_groups: table.k_groups,
                ..config.stage1.clone()
            };
            let mut scenes = prepare_stage1(&test, &opts)?;
            apply_weights(&mut scenes, &table, &opts)?;
            tail_cosine(&table, &region_cosines(&params, &scenes)?)
        }
    };
    let report = ProbeReport {
        encoder_tag: tag,
        tokenizer: tokenizer.mode.to_string(),
        accuracy: result.accuracy,
        per_class: result.per_class,
        n_tokens: result.n_tokens,
        purity,
        tail_cosine: tail.as_ref().map(|t| t.1),
        tail_groups: tail.map(|t| t.0),
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "probe {tag}: accuracy {:.4} on {} tokens, purity {:.4}{}",
        report.accuracy,
        report.n_tokens,
        report.purity,
        report.tail_cosine.map_or_else(String::new, |c| format!(", tail cosine {c:.4}"))
    );
    Ok(())
}

/// One entry of the report matrix file. Paths are relative to the file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixCell {
    tokenizer: String,
    reweight: bool,
    stage2: bool,
    /// Stage-1 run directory (its `metrics.csv` gives the final L_distill).
    stage1: Option<PathBuf>,
    /// Stage-2 run directory (its `metrics.csv` gives the final L_final).
    stage2_run: Option<PathBuf>,
    /// Probe output directory holding `eval.json`.
    probe: Option<PathBuf>,
}

/// Mean of `column` over the rows of the last epoch in a metrics CSV.
pub fn final_epoch_mean(csv: &str, column: &str) -> Result<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("empty metrics file"))?.split(',').collect();
    let col = header.iter().position(|h| *h == column).ok_or_else(|| anyhow!("no `{column}` column"))?;
    let epoch_col = header.iter().position(|h| *h == "epoch").ok_or_else(|| anyhow!("no `epoch` column"))?;
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let field = |i: usize| f.get(i).copied().ok_or_else(|| anyhow!("short metrics row `{line}`"));
        rows.push((field(epoch_col)?.parse()?, field(col)?.parse()?));
    }
    let last = rows.iter().map(|r| r.0).max().ok_or_else(|| anyhow!("metrics file has no rows"))?;
    let vals: Vec<f64> = rows.iter().filter(|r| r.0 == last).map(|r| r.1).collect();
    Ok(mean(&vals))
}

fn read_cell(base: &Path, c: &MatrixCell) -> Result<CellValues> {
    let mut v = CellValues::default();
    if let Some(dir) = &c.probe {
        let path = base.join(dir).join("eval.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let p: ProbeReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        v.probe_accuracy = Some(p.accuracy);
        v.purity = Some(p.purity);
        v.tail_cosine = p.tail_cosine;
    }
    let from_metrics = |dir: &Option<PathBuf>, column: &str| -> Result<Option<f64>> {
        match dir {
            None => Ok(None),
            Some(d) => {
                let path = base.join(d).join("metrics.csv");
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                Ok(Some(final_epoch_mean(&text, column).with_context(|| format!("in {}", path.display()))?))
            }
        }
    };
    v.final_l_distill = from_metrics(&c.stage1, "l_distill")?;
    v.final_l_final = from_metrics(&c.stage2_run, "l_final")?;
    Ok(v)
}

fn report(a: &ReportArgs, out: &Path) -> Result<()> {
    let text = fs::read_to_string(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
    let cells: Vec<MatrixCell> = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.matrix.display()))?;
    let base = a.matrix.parent().unwrap_or(Path::new("."));
    let mut values = BTreeMap::new();
    for c in &cells {
        if !matches!(c.tokenizer.as_str(), "sam" | "knn") {
            bail!("matrix cell tokenizer must be sam or knn, got `{}`", c.tokenizer);
        }
        let key = CellKey {
            tokenizer: c.tokenizer.clone(),
            reweight: c.reweight,
            stage2: c.stage2,
        };
        if values.insert(key, read_cell(base, c)?).is_some() {
            bail!("duplicate matrix cell {} reweight={} stage2={}", c.tokenizer, c.reweight, c.stage2);
        }
    }
    let (csv, summary) = report_ablation(&values);
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), &csv)?;
    fs::write(out.join("report.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
