use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use step_core::bank_io;
use step_core::checkpoint::{load_checkpoint, save_checkpoint};
use step_core::data::{load_cifar10, write_synthetic_cifar, LabeledImageBatch, Split};
use step_core::model::{
    build_model, estimate_memory, format_table, reduction_percent,
    trainable_reduction_percent, AccountingReport, ArchConfig, PrecisionCounts,
};
use step_core::nn::{
    evaluate, train_loop, OptimizerKind, Schedule, TrainConfig,
};
use step_core::pgm::export_kernels_pgm;
use step_core::{
    bank_to_weights, conv2d_reference, conv2d_reference_counted, conv2d_ternary,
    conv2d_ternary_counted, BankShape, ConvGeometry, FilterBank, KernelFamily, PatternRng, Shape4,
    Tensor4f,
};

use crate::{BenchArgs, BuildArgs, Command, CountArgs, EvalArgs, GenArgs, InspectArgs, TrainArgs};

/// Schema tag stamped into every JSON document the CLI prints.
const SCHEMA_VERSION: u32 = 1;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

type CmdResult = Result<(), CliError>;

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Build(args) => cmd_build(args),
        Command::Count(args) => cmd_count(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn parse_shape(text: &str) -> Result<BankShape, CliError> {
    let dims: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--shape '{text}' is not h,w,k,f")))?;
    if dims.len() != 4 {
        return Err(CliError::usage(format!("--shape '{text}' needs exactly four dimensions")));
    }
    Ok(BankShape::new(dims[0], dims[1], dims[2], dims[3]))
}

fn cmd_gen(args: GenArgs) -> CmdResult {
    let family = KernelFamily::parse(&args.family).map_err(|e| CliError::usage(e.to_string()))?;
    let shape = parse_shape(&args.shape)?;
    let bank = FilterBank::generate(shape, family, args.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    bank_io::write_bank(&args.out, &bank).map_err(|e| CliError::data(e.to_string()))?;
    let descriptor_path = descriptor_path(&args.out);
    bank_io::write_descriptor(&descriptor_path, &bank).map_err(|e| CliError::data(e.to_string()))?;
    let mut pgm_count = 0;
    if let Some(dir) = &args.pgm {
        pgm_count = export_kernels_pgm(&bank, dir).map_err(|e| CliError::data(e.to_string()))?.len();
    }
    println!(
        "{}",
        json!({
            "schema_version": SCHEMA_VERSION,
            "bank": args.out,
            "descriptor": descriptor_path,
            "family": family.name(),
            "shape": { "h": shape.h, "w": shape.w, "k": shape.in_channels, "f": shape.filters },
            "seed": args.seed,
            "sparsity": bank.sparsity(),
            "pgm_files": pgm_count,
        })
    );
    Ok(())
}

fn descriptor_path(bank: &Path) -> PathBuf {
    let mut os = bank.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    let bank = bank_io::read_bank(&args.bank).map_err(|e| CliError::data(e.to_string()))?;
    let descriptor = descriptor_path(&args.bank);
    let (records, replay_ok) = if descriptor.exists() {
        let desc = bank_io::read_descriptor(&descriptor).map_err(|e| CliError::data(e.to_string()))?;
        match bank_io::attach_records(bank.clone(), &desc) {
            Ok(_) => (desc.kernels.len(), Some(true)),
            Err(_) => (desc.kernels.len(), Some(false)),
        }
    } else {
        (0, None)
    };
    let values = bank.unpack().map_err(|e| CliError::data(e.to_string()))?;
    let histogram = values.iter().fold([0u64; 3], |mut acc, &v| {
        acc[(v + 1) as usize] += 1;
        acc
    });
    let shape = bank.shape();
    println!(
        "{}",
        json!({
            "schema_version": SCHEMA_VERSION,
            "family": bank.family().name(),
            "shape": { "h": shape.h, "w": shape.w, "k": shape.in_channels, "f": shape.filters },
            "seed": bank.seed(),
            "elements": shape.element_count(),
            "sparsity": bank.sparsity(),
            "histogram": { "-1": histogram[0], "0": histogram[1], "+1": histogram[2] },
            "descriptor_records": records,
            "replay_verified": replay_ok,
        })
    );
    let mut shown = 0;
    'outer: for f in 0..shape.filters {
        for c in 0..shape.in_channels {
            if shown == args.kernels {
                break 'outer;
            }
            let kernel = bank.kernel(f, c).map_err(|e| CliError::data(e.to_string()))?;
            println!("# f{f}_c{c}");
            for row in 0..shape.h {
                let line: String = (0..shape.w)
                    .map(|col| match kernel.get(row, col) {
                        -1 => '-',
                        0 => '.',
                        _ => '+',
                    })
                    .collect();
                println!("{line}");
            }
            shown += 1;
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ArchConfig, CliError> {
    ArchConfig::from_file(path).map_err(|e| CliError::data(e.to_string()))
}

fn cmd_build(args: BuildArgs) -> CmdResult {
    let config = load_config(&args.config)?;
    let model = build_model::<f32>(&config).map_err(|e| CliError::data(e.to_string()))?;
    save_checkpoint(&model, &config, &args.out).map_err(|e| CliError::data(e.to_string()))?;
    let report = AccountingReport::for_model(config.name.clone(), &model);
    println!(
        "{}",
        json!({
            "schema_version": SCHEMA_VERSION,
            "checkpoint": args.out,
            "report": report,
        })
    );
    Ok(())
}

fn cmd_count(args: CountArgs) -> CmdResult {
    if let Some(counts) = &args.literal_counts {
        let (trainable, frozen) = (counts[0], counts[1]);
        let precision = if args.binary {
            PrecisionCounts { float32: trainable, ternary: 0, binary: frozen }
        } else {
            PrecisionCounts { float32: trainable, ternary: frozen, binary: 0 }
        };
        let estimate = estimate_memory(precision);
        println!(
            "{}",
            json!({
                "schema_version": SCHEMA_VERSION,
                "trainable": trainable,
                "non_trainable": frozen,
                "frozen_precision": if args.binary { "binary" } else { "ternary" },
                "memory_bytes": estimate.bytes,
                "memory_mb": estimate.megabytes(),
            })
        );
        println!("{:.1} MB", estimate.megabytes());
        return Ok(());
    }
    let config = load_config(args.config.as_deref().expect("clap enforces presence"))?;
    let model = build_model::<f32>(&config).map_err(|e| CliError::data(e.to_string()))?;
    let mut rows = vec![AccountingReport::for_model(config.name.clone(), &model)];
    match args.baseline.as_deref() {
        None => {}
        Some("float") => {
            let twin_cfg = config.float_twin();
            let twin = build_model::<f32>(&twin_cfg).map_err(|e| CliError::data(e.to_string()))?;
            let base = AccountingReport::for_model(twin_cfg.name.clone(), &twin);
            rows[0].reduction_pct =
                Some(reduction_percent(&rows[0], &base).map_err(|e| CliError::data(e.to_string()))?);
            let trainable_reduction = trainable_reduction_percent(&rows[0], &base)
                .map_err(|e| CliError::data(e.to_string()))?;
            rows.push(base);
            println!(
                "{}",
                json!({
                    "schema_version": SCHEMA_VERSION,
                    "reports": rows,
                    "trainable_reduction_pct": trainable_reduction,
                })
            );
            print!("{}", format_table(&rows));
            println!("trainable reduction vs float twin: {trainable_reduction:.1}%");
            return Ok(());
        }
        Some(other) => {
            return Err(CliError::usage(format!("unknown baseline '{other}' (try: float)")));
        }
    }
    println!("{}", json!({ "schema_version": SCHEMA_VERSION, "reports": rows }));
    print!("{}", format_table(&rows));
    Ok(())
}

enum DataSource {
    Real(PathBuf),
    Synthetic(PathBuf),
}

impl DataSource {
    fn resolve(
        data: Option<PathBuf>,
        synthetic: Option<PathBuf>,
        train_n: usize,
        test_n: usize,
    ) -> Result<Self, CliError> {
        match (data, synthetic) {
            (Some(dir), None) => Ok(DataSource::Real(dir)),
            (None, Some(dir)) => {
                // Regenerated on every run: cheap, and the content is a pure
                // function of the requested sizes.
                write_synthetic_cifar(&dir, train_n, test_n, 0xDA7A)
                    .map_err(|e| CliError::data(e.to_string()))?;
                Ok(DataSource::Synthetic(dir))
            }
            (Some(_), Some(_)) => Err(CliError::usage("--data and --synthetic are exclusive")),
            (None, None) => Err(CliError::usage("one of --data or --synthetic is required")),
        }
    }

    fn dir(&self) -> &Path {
        match self {
            DataSource::Real(d) | DataSource::Synthetic(d) => d,
        }
    }

    fn load(&self, split: Split, subset: Option<usize>) -> Result<LabeledImageBatch<f32>, CliError> {
        load_cifar10::<f32>(self.dir(), split, subset).map_err(|e| CliError::data(e.to_string()))
    }
}

fn parse_optimizer(text: &str) -> Result<OptimizerKind, CliError> {
    match text {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(CliError::usage(format!("unknown optimizer '{other}'"))),
    }
}

fn parse_schedule(text: &str) -> Result<Schedule, CliError> {
    match text {
        "cosine" => Ok(Schedule::Cosine),
        "const" => Ok(Schedule::Const),
        other => Err(CliError::usage(format!("unknown schedule '{other}'"))),
    }
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let config = load_config(&args.config)?;
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr0: args.lr,
        weight_decay: args.weight_decay,
        schedule: parse_schedule(&args.schedule)?,
        optimizer: parse_optimizer(&args.optimizer)?,
        seed: args.seed,
    };
    train_cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let source = DataSource::resolve(
        args.data,
        args.synthetic,
        args.subset.unwrap_or(5000),
        args.test_subset.unwrap_or(1000),
    )?;
    let train_data = source.load(Split::Train, args.subset)?;
    if train_data.is_empty() {
        return Err(CliError::data("training split is empty"));
    }
    let test_data = source.load(Split::Test, args.test_subset).ok();
    let mut model = match &args.resume {
        Some(ckpt) => {
            let (model, ckpt_cfg) = load_checkpoint(ckpt).map_err(|e| CliError::data(e.to_string()))?;
            if ckpt_cfg != config {
                return Err(CliError::data("--resume checkpoint was built from a different config"));
            }
            model
        }
        None => build_model::<f32>(&config).map_err(|e| CliError::data(e.to_string()))?,
    };
    let started = Instant::now();
    let log = train_loop(&mut model, &train_data, test_data.as_ref(), &train_cfg)
        .map_err(|e| CliError::data(e.to_string()))?;
    save_checkpoint(&model, &config, &args.out).map_err(|e| CliError::data(e.to_string()))?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut os = args.out.as_os_str().to_owned();
        os.push(".csv");
        PathBuf::from(os)
    });
    std::fs::write(&log_path, log.to_csv()).map_err(|e| CliError::data(e.to_string()))?;
    let final_eval = log.records.last().and_then(|r| r.eval_acc);
    println!(
        "{}",
        json!({
            "schema_version": SCHEMA_VERSION,
            "checkpoint": args.out,
            "log": log_path,
            "epochs": log.records.len(),
            "train_records": train_data.len(),
            "test_records": test_data.as_ref().map(|t| t.len()),
            "final_eval_acc": final_eval,
            "wall_seconds": started.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let (model, _config) = load_checkpoint(&args.ckpt).map_err(|e| CliError::data(e.to_string()))?;
    let split = match args.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return Err(CliError::usage(format!("unknown split '{other}'"))),
    };
    let source = DataSource::resolve(args.data, args.synthetic, 5000, args.subset.unwrap_or(1000))?;
    let data = source.load(split, args.subset)?;
    if data.is_empty() {
        return Err(CliError::data("evaluation split is empty"));
    }
    let accuracy = evaluate(&model, &data, args.quantized, args.batch)
        .map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "{}",
        json!({
            "schema_version": SCHEMA_VERSION,
            "checkpoint": args.ckpt,
            "split": args.split,
            "records": data.len(),
            "quantized": args.quantized,
            "accuracy": accuracy,
        })
    );
    Ok(())
}

struct BenchCase {
    input: Shape4,
    bank_shape: BankShape,
    geom: ConvGeometry,
    family: KernelFamily,
}

impl BenchCase {
    fn label(&self) -> String {
        format!(
            "{}x{}x{}x{}_f{}_k{}x{}_s{}p{}_{}",
            self.input.n,
            self.input.c,
            self.input.h,
            self.input.w,
            self.bank_shape.filters,
            self.bank_shape.h,
            self.bank_shape.w,
            self.geom.stride,
            self.geom.padding,
            self.family.name()
        )
    }
}

fn parse_bench_line(line: &str, lineno: usize) -> Result<BenchCase, CliError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 10 {
        return Err(CliError::data(format!(
            "shapes line {lineno}: expected n,c,h,w,f,kh,kw,stride,pad,family"
        )));
    }
    let nums: Vec<usize> = fields[..9]
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::data(format!("shapes line {lineno}: non-numeric field")))?;
    let family = KernelFamily::parse(fields[9]).map_err(|e| CliError::data(e.to_string()))?;
    Ok(BenchCase {
        input: Shape4::new(nums[0], nums[1], nums[2], nums[3]),
        bank_shape: BankShape::new(nums[5], nums[6], nums[1], nums[4]),
        geom: ConvGeometry::new(nums[7], nums[8]),
        family,
    })
}

fn median_ns(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.shapes).map_err(|e| CliError::data(e.to_string()))?;
    let mut csv = String::from("shape,path,wall_ns_per_output_elem,mults,adds\n");
    let repeat = args.repeat.max(1);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let case = parse_bench_line(line, lineno + 1)?;
        let bank = FilterBank::generate(case.bank_shape, case.family, args.seed)
            .map_err(|e| CliError::data(e.to_string()))?;
        let mut rng = PatternRng::new(args.seed ^ 0xB0B0);
        let input: Tensor4f =
            Tensor4f::from_fn(case.input, |_| rng.symmetric_f64(1.0) as f32);
        let weights = bank_to_weights::<f32>(&bank).map_err(|e| CliError::internal(e.to_string()))?;

        // Correctness gate before any timing.
        let (ternary_out, ternary_ops) = conv2d_ternary_counted(&input, &bank, case.geom)
            .map_err(|e| CliError::data(e.to_string()))?;
        let (reference_out, reference_ops) = conv2d_reference_counted(&input, &weights, case.geom)
            .map_err(|e| CliError::data(e.to_string()))?;
        if ternary_out.data() != reference_out.data() {
            return Err(CliError::internal(format!(
                "cross-check failed for {}: ternary and reference outputs differ",
                case.label()
            )));
        }
        if ternary_ops.mults != 0 {
            return Err(CliError::internal(format!(
                "cross-check failed for {}: ternary path multiplied",
                case.label()
            )));
        }

        let out_elems = ternary_out.shape().len() as f64;
        let time_path = |ternary: bool| -> Result<f64, CliError> {
            let mut samples = Vec::with_capacity(repeat);
            for rep in 0..=repeat {
                let t0 = Instant::now();
                let out = if ternary {
                    conv2d_ternary(&input, &bank, case.geom)
                } else {
                    conv2d_reference(&input, &weights, case.geom)
                }
                .map_err(|e| CliError::internal(e.to_string()))?;
                let ns = t0.elapsed().as_nanos() as f64;
                std::hint::black_box(out);
                if rep > 0 {
                    // First iteration is warmup.
                    samples.push(ns / out_elems);
                }
            }
            Ok(median_ns(&mut samples))
        };
        let reference_ns = time_path(false)?;
        let ternary_ns = time_path(true)?;
        csv.push_str(&format!(
            "{},reference,{:.3},{},{}\n",
            case.label(),
            reference_ns,
            reference_ops.mults,
            reference_ops.adds
        ));
        csv.push_str(&format!(
            "{},ternary,{:.3},{},{}\n",
            case.label(),
            ternary_ns,
            ternary_ops.mults,
            ternary_ops.adds
        ));
    }
    print!("{csv}");
    if let Some(out) = &args.out {
        std::fs::write(out, &csv).map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(())
}
