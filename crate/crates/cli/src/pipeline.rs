//! Commands and the on-disk layout they share.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use textloc::celldb::{load_database, sample_cells, save_database, CellDatabase};
use textloc::coarse::{load_index, save_index, train_coarse, CoarseModel, RetrievalIndex};
use textloc::encoders::{pretrain_points, Vocabulary};
use textloc::eval::{evaluable_queries, evaluate_pipeline, EvalMode, MetricsTable, Models};
use textloc::fine::{train_fine, FineDebug, FineModel};
use textloc::numerics::{load_params, save_params, ParamStore};
use textloc::querygen::{generate_dataset, load_dataset, save_dataset, QueryDescription};
use textloc::scene::{generate_scene, import_labeled_cloud, load_scene, save_scene, LabeledCloud, Palette, Scene};

use crate::config::{mix, ExperimentConfig, Split};
use crate::manifest::{artifact_versions, digests, RunManifest, StageTiming, MANIFEST_VERSION};
use crate::report::{emit_report, plot_modes_svg, read_json, write_json, AblationEntry, AblationReport};
use crate::CliError;

/// Paths of every artifact under one output root.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scene(&self, s: Split) -> PathBuf {
        self.root.join("scenes").join(format!("{}.json", s.name()))
    }

    pub fn queries(&self, s: Split) -> PathBuf {
        self.root.join("queries").join(format!("{}.jsonl", s.name()))
    }

    pub fn query_stats(&self, s: Split) -> PathBuf {
        self.root.join("logs").join(format!("queries_{}.json", s.name()))
    }

    pub fn cells(&self, s: Split) -> PathBuf {
        self.root.join("cells").join(format!("{}.json", s.name()))
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn index(&self, s: Split) -> PathBuf {
        self.root.join("index").join(format!("{}.json", s.name()))
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.metrics_dir().join("metrics.json")
    }

    pub fn debug_dir(&self) -> PathBuf {
        self.root.join("debug")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    pub fn ablation_dir(&self, p: AblationParam) -> PathBuf {
        self.root.join("ablations").join(p.name())
    }
}

/// Swept settings. `num-hints` varies the training hint count with the test
/// set fixed; `num-hints-infer` varies the test hint count with training
/// fixed; `positions` varies training positions per location with the test
/// set fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationParam {
    Stride,
    NumHints,
    NumHintsInfer,
    Positions,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Stride => "stride",
            AblationParam::NumHints => "num-hints",
            AblationParam::NumHintsInfer => "num-hints-infer",
            AblationParam::Positions => "positions",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            AblationParam::Stride => vec![10.0, 15.0, 20.0],
            AblationParam::NumHints | AblationParam::NumHintsInfer => vec![4.0, 6.0, 10.0, 12.0],
            AblationParam::Positions => vec![4.0, 8.0, 12.0, 16.0],
        }
    }

    /// Config for one sweep value.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, CliError> {
        let mut c = base.clone();
        let count = || -> Result<usize, CliError> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(CliError::Usage(format!("{}: {value} is not a positive integer", self.name())))
            }
        };
        match self {
            AblationParam::Stride => c.cells.stride = value,
            AblationParam::NumHints => {
                c.data.test_num_hints = Some(base.query_for(Split::Test).num_hints);
                c.query.num_hints = count()?;
            }
            AblationParam::NumHintsInfer => c.data.test_num_hints = Some(count()?),
            AblationParam::Positions => {
                c.data.test_positions_per_location = Some(base.query_for(Split::Test).positions_per_location);
                c.query.positions_per_location = count()?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    GenScene,
    /// Replaces one split's scene with an external labeled cloud.
    ImportScene { cloud: PathBuf, split: Split },
    GenQueries,
    BuildCells,
    PretrainPoints,
    /// Trains the retrieval model and indexes the test cells.
    TrainCoarse,
    BuildIndex,
    TrainFine,
    /// `debug` dumps the fine prediction on the GT cell for that many queries.
    Evaluate { debug: usize },
    Ablate { param: AblationParam, values: Vec<f64> },
    /// Empty lists are a no-op.
    Plot { modes: Vec<String>, ablations: Vec<AblationParam> },
    Pipeline,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenScene => "gen-scene",
            Command::ImportScene { .. } => "import-scene",
            Command::GenQueries => "gen-queries",
            Command::BuildCells => "build-cells",
            Command::PretrainPoints => "pretrain-points",
            Command::TrainCoarse => "train-coarse",
            Command::BuildIndex => "build-index",
            Command::TrainFine => "train-fine",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
            Command::Pipeline => "pipeline",
        }
    }

    /// Stages of `pipeline`, in order.
    pub fn pipeline_stages(cfg: &ExperimentConfig) -> Vec<Command> {
        let mut v = vec![Command::GenScene, Command::GenQueries, Command::BuildCells];
        if cfg.data.use_pretrained_points {
            v.push(Command::PretrainPoints);
        }
        v.extend([Command::TrainCoarse, Command::TrainFine, Command::Evaluate { debug: 0 }]);
        v
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    layout: Layout,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Vec<StageTiming>,
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage(stage, e.to_string())
}

impl Ctx<'_> {
    fn input(&mut self, path: PathBuf, hint: &'static str) -> Result<PathBuf, CliError> {
        if !path.is_file() {
            return Err(CliError::MissingInput { path, hint });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn parent_dir(path: &Path) -> Result<(), CliError> {
        match path.parent() {
            Some(d) => fs::create_dir_all(d).map_err(|e| CliError::io(d, e)),
            None => Ok(()),
        }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let t = Instant::now();
        let r = f(self)?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(r)
    }

    fn scene(&mut self, s: Split) -> Result<Scene, CliError> {
        let p = self.input(self.layout.scene(s), "gen-scene")?;
        load_scene(&p).map_err(stage_err("load scene"))
    }

    fn queries(&mut self, s: Split) -> Result<Vec<QueryDescription>, CliError> {
        let p = self.input(self.layout.queries(s), "gen-queries")?;
        load_dataset(&p).map_err(stage_err("load queries"))
    }

    fn cells(&mut self, s: Split) -> Result<CellDatabase, CliError> {
        let p = self.input(self.layout.cells(s), "build-cells")?;
        load_database(&p).map_err(stage_err("load cells"))
    }

    fn params(&mut self, name: &str, hint: &'static str) -> Result<ParamStore, CliError> {
        let p = self.input(self.layout.checkpoint(name), hint)?;
        load_params(&p).map_err(stage_err("load checkpoint"))
    }

    fn save_params(&mut self, name: &str, params: &ParamStore) -> Result<(), CliError> {
        let p = self.layout.checkpoint(name);
        Self::parent_dir(&p)?;
        save_params(params, &p).map_err(stage_err("save checkpoint"))?;
        self.output(p);
        Ok(())
    }

    /// The vocabulary is derived from the training scene's classes.
    fn write_vocab(&mut self, scene: &Scene) -> Result<Vocabulary, CliError> {
        let vocab = Vocabulary::template(&scene.classes, &Palette::default());
        let p = self.layout.vocab();
        Self::parent_dir(&p)?;
        let f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
        vocab.write(BufWriter::new(f)).map_err(|e| CliError::io(&p, e))?;
        self.output(p);
        Ok(vocab)
    }

    fn read_vocab(&mut self, hint: &'static str) -> Result<Vocabulary, CliError> {
        let p = self.input(self.layout.vocab(), hint)?;
        let f = fs::File::open(&p).map_err(|e| CliError::io(&p, e))?;
        Vocabulary::read(f).map_err(|e| CliError::io(&p, e))
    }

    fn pretrained(&mut self) -> Result<Option<ParamStore>, CliError> {
        if self.cfg.data.use_pretrained_points {
            Ok(Some(self.params("pretrain", "pretrain-points")?))
        } else {
            Ok(None)
        }
    }

    fn write_text(&mut self, path: PathBuf, text: &str) -> Result<(), CliError> {
        crate::report::write_text(&path, text)?;
        self.output(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, v: &T) -> Result<(), CliError> {
        write_json(&path, v)?;
        self.output(path);
        Ok(())
    }
}

/// Runs one command against `cfg.out_dir`, writes its manifest to
/// `manifests/<command>.json` and returns it.
pub fn run_command(cmd: &Command, cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let mut ctx = Ctx {
        cfg,
        layout: layout.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        timings: Vec::new(),
    };
    log::info!("{} -> {}", cmd.name(), layout.root.display());
    match cmd {
        Command::GenScene => ctx.timed("gen-scene", gen_scene)?,
        Command::ImportScene { cloud, split } => ctx.timed("import-scene", |c| import_scene(c, cloud, *split))?,
        Command::GenQueries => ctx.timed("gen-queries", gen_queries)?,
        Command::BuildCells => ctx.timed("build-cells", build_cells)?,
        Command::PretrainPoints => ctx.timed("pretrain-points", pretrain)?,
        Command::TrainCoarse => ctx.timed("train-coarse", coarse)?,
        Command::BuildIndex => ctx.timed("build-index", build_index)?,
        Command::TrainFine => ctx.timed("train-fine", fine)?,
        Command::Evaluate { debug } => ctx.timed("evaluate", |c| evaluate(c, *debug))?,
        Command::Ablate { param, values } => ctx.timed("ablate", |c| ablate(c, *param, values))?,
        Command::Plot { modes, ablations } => ctx.timed("plot", |c| plot(c, modes, ablations))?,
        Command::Pipeline => {
            for stage in Command::pipeline_stages(cfg) {
                let t = Instant::now();
                let m = run_command(&stage, cfg)?;
                ctx.outputs.extend(m.outputs.iter().map(|d| layout.root.join(&d.path)));
                ctx.timings.push(StageTiming {
                    stage: stage.name().to_string(),
                    seconds: t.elapsed().as_secs_f64(),
                });
            }
        }
    }
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        command: cmd.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        inputs: digests(&layout.root, &ctx.inputs)?,
        outputs: digests(&layout.root, &ctx.outputs)?,
        artifact_versions: artifact_versions(),
        timings: ctx.timings,
    };
    write_json(&layout.manifest(cmd.name()), &manifest)?;
    Ok(manifest)
}

fn gen_scene(ctx: &mut Ctx) -> Result<(), CliError> {
    for s in Split::ALL {
        let scene = generate_scene(&ctx.cfg.scene, s.scene_seed(ctx.cfg.seed)).map_err(stage_err("gen-scene"))?;
        let p = ctx.layout.scene(s);
        Ctx::parent_dir(&p)?;
        save_scene(&scene, &p).map_err(stage_err("gen-scene"))?;
        log::info!("{} scene: {} instances", s.name(), scene.instances.len());
        ctx.output(p);
    }
    Ok(())
}

fn import_scene(ctx: &mut Ctx, cloud: &Path, split: Split) -> Result<(), CliError> {
    let src = ctx.input(cloud.to_path_buf(), "an exporter for the labeled-cloud format")?;
    let parsed: LabeledCloud = read_json(&src)?;
    let scene = import_labeled_cloud(&parsed).map_err(stage_err("import-scene"))?;
    let p = ctx.layout.scene(split);
    Ctx::parent_dir(&p)?;
    save_scene(&scene, &p).map_err(stage_err("import-scene"))?;
    ctx.output(p);
    Ok(())
}

fn gen_queries(ctx: &mut Ctx) -> Result<(), CliError> {
    for s in Split::ALL {
        let scene = ctx.scene(s)?;
        let (descs, stats) =
            generate_dataset(&scene, &ctx.cfg.query_for(s), s.query_seed(ctx.cfg.seed)).map_err(stage_err("gen-queries"))?;
        log::info!("{} queries: {} descriptions at {} positions", s.name(), stats.descriptions, stats.positions);
        let p = ctx.layout.queries(s);
        Ctx::parent_dir(&p)?;
        save_dataset(&descs, &p).map_err(stage_err("gen-queries"))?;
        ctx.output(p);
        ctx.write_json(ctx.layout.query_stats(s), &stats)?;
    }
    Ok(())
}

fn build_cells(ctx: &mut Ctx) -> Result<(), CliError> {
    for s in Split::ALL {
        let scene = ctx.scene(s)?;
        let db = sample_cells(&scene, &ctx.cfg.cells).map_err(stage_err("build-cells"))?;
        log::info!("{} cells: {} of {} anchors", s.name(), db.len(), db.anchor_count());
        let p = ctx.layout.cells(s);
        Ctx::parent_dir(&p)?;
        save_database(&db, &p).map_err(stage_err("build-cells"))?;
        ctx.output(p);
    }
    Ok(())
}

fn pretrain(ctx: &mut Ctx) -> Result<(), CliError> {
    let scene = ctx.scene(Split::Train)?;
    let db = ctx.cells(Split::Train)?;
    let vocab = ctx.write_vocab(&scene)?;
    let cfg = ctx.cfg;
    let mut model = CoarseModel::init(&cfg.encoder, vocab, mix(cfg.seed, 10));
    let pc = textloc::encoders::PretrainConfig {
        seed: cfg.pretrain.seed.wrapping_add(cfg.seed),
        ..cfg.pretrain.clone()
    };
    let report = pretrain_points(&db, &model.encoders, &mut model.params, scene.classes.len(), &pc)
        .map_err(stage_err("pretrain-points"))?;
    log::info!("pretraining accuracy {:.3}", report.train_accuracy);
    ctx.save_params("pretrain", &model.params)?;
    ctx.write_json(ctx.layout.log("pretrain.json"), &report)
}

/// Holds out about `fraction` of the query positions, spread evenly along
/// the dataset order; all descriptions of a position stay together.
pub fn split_validation(descs: Vec<QueryDescription>, fraction: f64) -> (Vec<QueryDescription>, Vec<QueryDescription>) {
    let key = |d: &QueryDescription| (d.position[0].to_bits(), d.position[1].to_bits());
    let mut groups: Vec<(u64, u64)> = Vec::new();
    for d in &descs {
        if !groups.contains(&key(d)) {
            groups.push(key(d));
        }
    }
    let n = groups.len();
    let n_val = (fraction * n as f64).round() as usize;
    let held: Vec<(u64, u64)> = (0..n)
        .filter(|&i| (i + 1) * n_val / n.max(1) > i * n_val / n.max(1))
        .map(|i| groups[i])
        .collect();
    descs.into_iter().partition(|d| !held.contains(&key(d)))
}

fn coarse(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let scene = ctx.scene(Split::Train)?;
    let db = ctx.cells(Split::Train)?;
    let (train, val) = split_validation(ctx.queries(Split::Train)?, cfg.data.val_fraction);
    let vocab = ctx.write_vocab(&scene)?;
    let mut model = CoarseModel::init(&cfg.encoder, vocab, mix(cfg.seed, 11));
    if let Some(pre) = ctx.pretrained()? {
        model.load_point_branch(&pre);
    }
    let tc = textloc::coarse::TrainConfigCoarse {
        seed: cfg.coarse.seed.wrapping_add(cfg.seed),
        ..cfg.coarse.clone()
    };
    let report = train_coarse(&mut model, &train, &val, &db, &tc).map_err(stage_err("train-coarse"))?;
    log::info!("coarse: best val recall {:.3} at epoch {}", report.best_recall, report.best_epoch);
    ctx.save_params("coarse", &model.params)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| CliError::io(&ctx.layout.log("coarse.csv"), e))?;
    ctx.write_text(ctx.layout.log("coarse.csv"), &String::from_utf8_lossy(&csv))?;
    ctx.write_json(ctx.layout.log("coarse.json"), &report)?;
    index_split(ctx, &model, Split::Test)
}

fn index_split(ctx: &mut Ctx, model: &CoarseModel, s: Split) -> Result<(), CliError> {
    let db = ctx.cells(s)?;
    let index = RetrievalIndex::build(model, &db).map_err(stage_err("build-index"))?;
    let p = ctx.layout.index(s);
    Ctx::parent_dir(&p)?;
    save_index(&index, &p).map_err(stage_err("build-index"))?;
    ctx.output(p);
    Ok(())
}

fn load_coarse(ctx: &mut Ctx) -> Result<CoarseModel, CliError> {
    let params = ctx.params("coarse", "train-coarse")?;
    let vocab = ctx.read_vocab("train-coarse")?;
    CoarseModel::from_params(&ctx.cfg.encoder, vocab, params).map_err(stage_err("load coarse model"))
}

fn build_index(ctx: &mut Ctx) -> Result<(), CliError> {
    let model = load_coarse(ctx)?;
    index_split(ctx, &model, Split::Test)
}

fn fine(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let scene = ctx.scene(Split::Train)?;
    let db = ctx.cells(Split::Train)?;
    let (train, val) = split_validation(ctx.queries(Split::Train)?, cfg.data.val_fraction);
    let vocab = ctx.write_vocab(&scene)?;
    let mut model =
        FineModel::init(&cfg.encoder, &cfg.matcher, vocab, mix(cfg.seed, 12)).map_err(stage_err("train-fine"))?;
    if let Some(pre) = ctx.pretrained()? {
        let p = model.encoders.point.prefix.clone();
        model.params.copy_prefixed(&pre, &p, &p);
    }
    let tc = textloc::fine::TrainConfigFine {
        seed: cfg.fine.seed.wrapping_add(cfg.seed),
        ..cfg.fine.clone()
    };
    let report =
        train_fine(&mut model, &train, &val, &db, &scene.classes, &tc).map_err(stage_err("train-fine"))?;
    ctx.save_params("fine", &model.params)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| CliError::io(&ctx.layout.log("fine.csv"), e))?;
    ctx.write_text(ctx.layout.log("fine.csv"), &String::from_utf8_lossy(&csv))
}

fn evaluate(ctx: &mut Ctx, debug: usize) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let modes: Vec<EvalMode> = cfg
        .eval
        .modes
        .iter()
        .map(|m| EvalMode::preset(m))
        .collect::<Result<_, _>>()
        .map_err(stage_err("evaluate"))?;
    let need_coarse = modes.iter().any(EvalMode::needs_coarse);
    let need_fine = debug > 0 || modes.iter().any(EvalMode::needs_fine);
    let coarse = if need_coarse { Some(load_coarse(ctx)?) } else { None };
    let fine = if need_fine {
        let params = ctx.params("fine", "train-fine")?;
        let vocab = ctx.read_vocab("train-fine")?;
        Some(FineModel::from_params(&cfg.encoder, &cfg.matcher, vocab, params).map_err(stage_err("load fine model"))?)
    } else {
        None
    };
    let scene = ctx.scene(Split::Test)?;
    let db = ctx.cells(Split::Test)?;
    let descs = ctx.queries(Split::Test)?;
    let index = match &coarse {
        Some(_) => {
            let p = ctx.input(ctx.layout.index(Split::Test), "build-index")?;
            let index = load_index(&p).map_err(stage_err("load index"))?;
            index.check_database(&db).map_err(stage_err("load index"))?;
            Some(index)
        }
        None => None,
    };
    let models = Models {
        coarse: coarse.as_ref().zip(index.as_ref()),
        fine: fine.as_ref(),
    };
    let table = evaluate_pipeline(&descs, &db, &scene.classes, models, &cfg.eval).map_err(stage_err("evaluate"))?;
    for r in &table.rows {
        log::info!("{} k={} eps={}: {:.3}", r.mode, r.k, r.epsilon, r.recall);
    }
    let plots = if cfg.report.plots { cfg.eval.modes.clone() } else { Vec::new() };
    for p in emit_report(&ctx.layout.metrics_dir(), "metrics", &table, &plots)? {
        ctx.output(p);
    }
    if let Some(fine) = &fine {
        let (queries, _) = evaluable_queries(&descs, &db, &scene.classes);
        for q in queries.iter().take(debug) {
            let (pred, est) = fine.localize(q.desc, db.cell(q.gt_cell)).map_err(stage_err("evaluate"))?;
            let p = ctx.layout.debug_dir().join(format!("query_{}.json", q.desc.id));
            ctx.write_json(p, &FineDebug::new(q.desc.id, q.gt_cell, &pred, &est))?;
        }
    }
    Ok(())
}

fn value_label(v: f64) -> String {
    format!("{v}")
}

fn ablate(ctx: &mut Ctx, param: AblationParam, values: &[f64]) -> Result<(), CliError> {
    let values = if values.is_empty() { param.default_values() } else { values.to_vec() };
    let dir = ctx.layout.ablation_dir(param);
    let mut report = AblationReport {
        param: param.name().to_string(),
        entries: Vec::new(),
    };
    for v in values {
        let mut sub = param.apply(ctx.cfg, v)?;
        sub.out_dir = dir.join(value_label(v));
        log::info!("ablation {} = {v}", param.name());
        run_command(&Command::Pipeline, &sub)?;
        let sub_layout = Layout::new(&sub.out_dir);
        let table: MetricsTable = read_json(&sub_layout.metrics_json())?;
        let cells = load_database(&sub_layout.cells(Split::Test)).map_err(stage_err("ablate"))?.len();
        report.entries.push(AblationEntry { value: v, cells, table });
    }
    for p in report.write(&dir, ctx.cfg.report.plots)? {
        ctx.output(p);
    }
    Ok(())
}

fn plot(ctx: &mut Ctx, modes: &[String], ablations: &[AblationParam]) -> Result<(), CliError> {
    if modes.is_empty() && ablations.is_empty() {
        log::info!("plot: nothing requested");
        return Ok(());
    }
    if !modes.is_empty() {
        let p = ctx.input(ctx.layout.metrics_json(), "evaluate")?;
        let table: MetricsTable = read_json(&p)?;
        for out in plot_modes_svg(&ctx.layout.metrics_dir(), "metrics", &table, modes)? {
            ctx.output(out);
        }
    }
    for &a in ablations {
        let dir = ctx.layout.ablation_dir(a);
        let p = ctx.input(dir.join("report.json"), "ablate")?;
        let report: AblationReport = read_json(&p)?;
        for out in report.write_plots(&dir)? {
            ctx.output(out);
        }
    }
    Ok(())
}
