use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stnas::cost::{network_cost, report_views};
use stnas::data::{generate_synthetic, load_dataset, save_dataset, ClipPipeline, Dataset, SyntheticSpec};
use stnas::engine::{retrain, search, AdamConfig, EpochRecord, RetrainConfig, SearchConfig, SgdConfig};
use stnas::model::{build_discrete, default_stack_plan, save_checkpoint, StackPlan};
use stnas::net::NetConfig;
use stnas::ops::{gradcheck_op, OpKind, Stride, UNIT_STRIDE};
use stnas::space::{
    count_search_space, derive_genotype, export_dot, genotype_from_json, genotype_to_json, random_genotype,
    rounded_total_search_space, CellCategory, Genotype,
};
use stnas::supernet::{build_supernet, gradcheck_mixed_alpha, ArchParams};
use stnas::tensor::Rng;
use stnas::Error;

use crate::args::*;

/// Gradient checks fail above this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or unreadable / malformed input.
    Input(String),
    /// Output could not be written.
    Io(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) | Failure::Io(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| Failure::Input("--out DIR is required".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn out_file(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Failure::Input("--out FILE is required".into()))
}

#[derive(Serialize)]
struct ResolvedConfig<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    rng: &'static str,
    cli: &'a Cli,
    resolved: T,
}

/// Writes the flags plus the library-level settings they resolved to.
fn write_config<T: Serialize>(path: &Path, cli: &Cli, resolved: T) -> Result<()> {
    let cfg = ResolvedConfig {
        tool: "stnas",
        version: env!("CARGO_PKG_VERSION"),
        rng: Rng::ALGORITHM,
        cli,
        resolved,
    };
    let mut text = serde_json::to_string_pretty(&cfg).expect("config serialises");
    text.push('\n');
    write_file(path, text)
}

/// `genotype.json` → `genotype.config.json`.
fn config_beside(file: &Path) -> PathBuf {
    file.with_extension("config.json")
}

fn load_genotype(path: &Path) -> Result<Genotype> {
    genotype_from_json(&read_text(path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(name);
    load_dataset(&path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn pipeline(p: &PipelineArgs) -> ClipPipeline {
    ClipPipeline {
        window: p.window,
        frames: p.frames,
        jitter: p.jitter,
        crop: p.crop,
    }
}

fn net_config(base: NetConfig, net: &NetArgs) -> NetConfig {
    NetConfig {
        temporal_reduction_stride: net.trc_stride as Stride,
        ..base
    }
}

fn print_epoch(r: &EpochRecord) {
    eprintln!("{}", r.to_jsonl());
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Count(a) => count(cli, a),
        Command::GenData(a) => gen_data(cli, a),
        Command::Search(a) => cmd_search(cli, a),
        Command::Derive(a) => derive(cli, a),
        Command::Random(a) => random(cli, a),
        Command::Retrain(a) => cmd_retrain(cli, a),
        Command::Cost(a) => cost(cli, a),
        Command::ExportDot(a) => export(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

fn count(cli: &Cli, a: &CountArgs) -> Result<()> {
    if a.nodes == 0 {
        return Err(Failure::Input("--nodes must be at least 1".into()));
    }
    let c = count_search_space(a.nodes);
    let total_exact = c.total.to_string();
    let total_sci = format!("{:.1e}", total_exact.parse::<f64>().expect("digits parse"));
    let rounded = format!("{:.1e}", rounded_total_search_space());
    let mut text = format!("nodes {}\nspatial {}\ntemporal {}\n", a.nodes, c.spatial, c.temporal);
    text += &format!("total {}\n", if a.exact { &total_exact } else { &total_sci });
    if a.paper_rounded {
        text += &format!("paper_rounded {rounded}\n");
    }
    print!("{text}");
    if let Some(path) = &cli.out {
        let json = serde_json::json!({
            "nodes": a.nodes,
            "spatial": c.spatial.to_string(),
            "temporal": c.temporal.to_string(),
            "total": total_exact,
            "paper_rounded": rounded,
        });
        write_file(path, format!("{}\n", serde_json::to_string_pretty(&json).expect("json")))?;
        write_config(&config_beside(path), cli, ())?;
    }
    Ok(())
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let spec = SyntheticSpec {
        n_train: a.n_train,
        n_val: a.n_val,
        length: a.length,
        size: a.size,
        noise: a.noise,
        ..SyntheticSpec::default()
    };
    let splits = generate_synthetic(&spec, cli.seed)?;
    for (name, ds) in [("train.pvn", &splits.train), ("val.pvn", &splits.val)] {
        let path = dir.join(name);
        save_dataset(ds, &path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    }
    write_config(&dir.join("config.json"), cli, &spec)?;
    println!("wrote {} train and {} val clips to {}", splits.train.len(), splits.val.len(), dir.display());
    Ok(())
}

fn cmd_search(cli: &Cli, a: &SearchArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let train = load_split(&a.data, "train.pvn")?;
    let (epochs, step, snapshots) = if a.paper_scale {
        (80, 20, vec![20, 40, 60, 80])
    } else {
        (a.epochs, a.step, a.snapshot.clone())
    };
    let cfg = SearchConfig {
        epochs,
        sgd: SgdConfig {
            lr0: a.lr_w,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
        },
        step: match a.w_sched {
            WeightSchedule::Step => Some((step, a.decay)),
            WeightSchedule::Constant => None,
        },
        adam: AdamConfig {
            lr: a.lr_a,
            ..AdamConfig::default()
        },
        batch_size: a.batch,
        seed: cli.seed,
        snapshots,
    };
    cfg.validate()?;
    let pipe = pipeline(&a.pipeline);
    let [c, t, h, w] = pipe.output_shape(train.clip_shape());
    let net_cfg = net_config(NetConfig::search(a.net.channels, a.net.classes), &a.net);
    if train.n_classes != net_cfg.n_classes {
        return Err(Failure::Input(format!("dataset has {} classes, --classes is {}", train.n_classes, net_cfg.n_classes)));
    }
    write_config(
        &dir.join("config.json"),
        cli,
        serde_json::json!({ "search": &cfg, "net": &net_cfg, "pipeline": &pipe }),
    )?;
    let mut net = build_supernet::<f32>(&CellCategory::ALL, [1, c, t, h, w], &net_cfg, &mut Rng::new(cli.seed))?;
    let out = search(&mut net, &train, &pipe, &cfg, &mut print_epoch)?;
    let metrics: String = out.log.iter().map(|r| r.to_jsonl() + "\n").collect();
    write_file(&dir.join("metrics.jsonl"), metrics)?;
    write_file(&dir.join("alpha.json"), out.alpha.to_json() + "\n")?;
    for (epoch, g) in &out.snapshots {
        write_file(&dir.join(format!("genotype_epoch{epoch}.json")), genotype_to_json(g) + "\n")?;
    }
    write_file(&dir.join("genotype.json"), genotype_to_json(&out.genotype) + "\n")?;
    println!("search finished; genotype written to {}", dir.join("genotype.json").display());
    Ok(())
}

fn derive(cli: &Cli, a: &DeriveArgs) -> Result<()> {
    let path = out_file(cli)?;
    let alpha = ArchParams::<f64>::from_json(&read_text(&a.alpha)?)
        .map_err(|e| Failure::Input(format!("{}: {e}", a.alpha.display())))?;
    let g = derive_genotype(&alpha)?;
    write_file(path, genotype_to_json(&g) + "\n")?;
    write_config(&config_beside(path), cli, ())?;
    Ok(())
}

fn random(cli: &Cli, a: &RandomArgs) -> Result<()> {
    let path = out_file(cli)?;
    let g = random_genotype(&mut Rng::new(cli.seed), a.min_convs)?;
    write_file(path, genotype_to_json(&g) + "\n")?;
    write_config(&config_beside(path), cli, ())?;
    Ok(())
}

fn cmd_retrain(cli: &Cli, a: &RetrainArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let g = load_genotype(&a.arch)?;
    let train = load_split(&a.data, "train.pvn")?;
    let val = load_split(&a.data, "val.pvn")?;
    if train.clip_shape() != val.clip_shape() {
        return Err(Failure::Input("train and val clips differ in shape".into()));
    }
    let plan = StackPlan {
        c0: a.net.channels,
        ..default_stack_plan(a.k)?
    };
    let net_cfg = NetConfig {
        dropout: a.dropout,
        drop_path: a.drop_path,
        ..net_config(NetConfig::retrain(a.net.channels, a.net.classes), &a.net)
    };
    let cfg = RetrainConfig {
        epochs: a.epochs,
        warmup: a.warmup,
        sgd: SgdConfig {
            lr0: a.lr,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
        },
        batch_size: a.batch,
        eval_batch_size: 32,
        seed: cli.seed,
    };
    cfg.sgd.validate()?;
    cfg.schedule()?;
    let pipe = pipeline(&a.pipeline);
    let [c, t, h, w] = pipe.output_shape(train.clip_shape());
    write_config(
        &dir.join("config.json"),
        cli,
        serde_json::json!({ "retrain": &cfg, "net": &net_cfg, "plan": &plan, "pipeline": &pipe }),
    )?;
    let mut net = build_discrete::<f32>(&g, &plan, [1, c, t, h, w], &net_cfg, &mut Rng::new(cli.seed))?;
    let params = net.num_params();
    let out = retrain(&mut net, &train, &val, &pipe, &cfg, &mut print_epoch)?;
    let metrics: String = out.log.iter().map(|r| r.to_jsonl() + "\n").collect();
    write_file(&dir.join("metrics.jsonl"), metrics)?;
    let model = dir.join("model.pvnw");
    save_checkpoint(&net.store, &model).map_err(|e| Failure::Io(format!("{}: {e}", model.display())))?;
    let result = serde_json::json!({ "params": params, "train": out.train, "val": out.val });
    write_file(&dir.join("result.json"), serde_json::to_string_pretty(&result).expect("json") + "\n")?;
    println!("val top-1 {:.2}% top-5 {:.2}%", out.val.top1, out.val.top5);
    Ok(())
}

fn cost(cli: &Cli, a: &CostArgs) -> Result<()> {
    let g = load_genotype(&a.arch)?;
    let plan = StackPlan {
        c0: a.net.channels,
        ..default_stack_plan(a.k)?
    };
    let cfg = net_config(NetConfig::retrain(a.net.channels, a.net.classes), &a.net);
    let [t, h, w] = a.input;
    let report = network_cost(&g, &plan, [1, a.in_channels, t, h, w], &cfg)?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("json") + "\n";
    print!("{json}");
    eprintln!("GFLOPs × views: {}", report_views(report.gflops(), a.views)?);
    if let Some(path) = &cli.out {
        write_file(path, &json)?;
        write_config(&config_beside(path), cli, &cfg)?;
    }
    Ok(())
}

fn export(cli: &Cli, a: &ExportDotArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let g = load_genotype(&a.arch)?;
    for (cat, dot) in export_dot(&g) {
        write_file(&dir.join(format!("{}.dot", cat.key())), dot)?;
    }
    write_config(&dir.join("config.json"), cli, ())?;
    Ok(())
}

#[derive(Serialize)]
struct CheckLine {
    check: String,
    max_rel_error: f64,
    pass: bool,
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let kinds: Vec<OpKind> = if a.op == "all" {
        OpKind::ALL.to_vec()
    } else {
        vec![a.op.parse::<OpKind>()?]
    };
    let mut lines = Vec::new();
    let mut record = |check: String, err: f64| {
        let pass = err < GRADCHECK_TOLERANCE;
        println!("{} {check} max_rel_error={err:.3e}", if pass { "PASS" } else { "FAIL" });
        lines.push(CheckLine { check, max_rel_error: err, pass });
    };
    for &kind in &kinds {
        let strides: &[Stride] = if kind == OpKind::Zero { &[UNIT_STRIDE] } else { &[UNIT_STRIDE, [1, 2, 2], [2, 2, 2]] };
        for &stride in strides {
            for affine in [false, true] {
                let worst = gradcheck_op(kind, stride, affine)?.into_iter().fold(0.0f64, |m, (_, e)| m.max(e));
                record(format!("{kind} stride={stride:?} affine={affine}"), worst);
            }
        }
    }
    if a.op == "all" {
        for (name, ops) in [("spatial", &OpKind::SPATIAL[..]), ("temporal", &OpKind::TEMPORAL[..])] {
            record(format!("mixed_alpha {name}"), gradcheck_mixed_alpha(ops, cli.seed)?);
        }
    }
    if let Some(path) = &cli.out {
        write_file(path, serde_json::to_string_pretty(&lines).expect("json") + "\n")?;
        write_config(&config_beside(path), cli, ())?;
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient checks exceed {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}
