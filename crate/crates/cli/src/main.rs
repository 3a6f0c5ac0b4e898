mod commands;
mod config;

use config::{CliError, RunConfig};

const USAGE: &str = "\
vfl, the spatio-temporal focal modulation toolkit

usage: vfl <subcommand> [--config FILE]... [--key value]...

subcommands:
  gen-data   write a synthetic motion corpus (videos/*.vtr + index.tsv)
  train      fit a model on a corpus with cross-entropy
  distill    fit a student against a frozen teacher checkpoint
  eval       score a checkpoint on a corpus split, optionally multi-view
  inspect    export modulator heatmaps of one corpus video as PGM files
  count      print parameter and FLOP figures for the model presets
  ablate     sweep the distillation alpha x tau grid, one CSV row per cell

configuration is a flat key=value namespace. Files use one 'key = value' per
line, '#' comments, and '[section]' headers are ignored; flags override file
keys one-to-one (--model.embed_dim 96). Unknown keys are errors.

common keys:
  profile            desk (default, CPU-minutes) or full (published recipe)
  seed               training seed (u64)

gen-data:   out (dir, required), data.samples_per_class, data.canvas,
            data.t_raw, data.noise, data.seed
train:      data (corpus dir), out.checkpoint (required), out.metrics,
            resume, stop_after, data.per_class, model.preset teacher|student|
            desk-teacher|desk-student plus model.{num_classes, embed_dim,
            depths, focal_levels, focal_windows, patch_sizes, mlp_ratio,
            drop_path_rate, temporal, out_proj}, train.{epochs, batch_size,
            frames, stride (0 spans), crop, base_lr, warmup_lr, min_lr,
            warmup_epochs}
distill:    the train keys plus teacher.checkpoint (required), alpha, tau,
            and teacher.* model overrides; model.preset defaults to student
eval:       data, checkpoint (required), views CLIPSxCROPS (default 1x1),
            eval.{split val|train, frames, stride, crop}, out.csv, model.*
inspect:    data, out (dir, required), inspect.index, inspect.block s<i>.b<j>,
            checkpoint (optional; omitted means fresh weights), seed, eval.*,
            model.*
count:      preset teacher|student|desk-teacher|desk-student|both,
            count.{frames, height, width} (default 8x224x224), csv
ablate:     data, teacher.checkpoint (required), alphas, taus, out.csv,
            data.per_class, model.* (student), teacher.*, train.*, seed

exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error
";

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = args.first().map(String::as_str) else {
        eprintln!("{USAGE}");
        return 2;
    };
    if matches!(cmd, "help" | "--help" | "-h") {
        println!("{USAGE}");
        return 0;
    }
    if args[1..].iter().any(|a| a == "--help" || a == "-h") {
        println!("{USAGE}");
        return 0;
    }
    let result = RunConfig::from_args(&args[1..]).and_then(|cfg| dispatch(cmd, cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &str, cfg: RunConfig) -> Result<(), CliError> {
    match cmd {
        "gen-data" | "generate" => commands::gen_data(cfg),
        "train" => commands::fit(cfg, false),
        "distill" => commands::fit(cfg, true),
        "eval" => commands::eval(cfg),
        "inspect" => commands::inspect(cfg),
        "count" => commands::count(cfg),
        "ablate" => commands::ablate(cfg),
        other => Err(CliError::Config(format!(
            "unknown subcommand {other:?}; expected gen-data, train, distill, eval, inspect, count or ablate"
        ))),
    }
}
