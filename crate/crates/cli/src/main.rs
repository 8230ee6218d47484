//! `epp` — batch pipeline for ensemble forecast postprocessing.
//!
//! Subcommands: `generate`, `train-transformer`, `fit-mbm`, `postprocess`,
//! `verify`, `attention-map`. Exit codes: 0 success, 1 usage error,
//! 2 runtime error; errors print a single machine-parsable line on stderr
//! (`error[usage]: ...` or `error[runtime]: ...`).

mod args;
mod commands;
mod config;

use args::{Args, CliError};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

const USAGE: &str = "usage: epp <command> [flags]

commands:
  generate           write a synthetic EPPG dataset       (--out, common flags)
  train-transformer  train the attention model            (--data, --out)
  fit-mbm            fit member-by-member parameters      (--data, --out)
  postprocess        correct a dataset                    (--data, --checkpoint | --mbm-params, --out, --split)
  verify             score raw vs corrected ensembles     (--raw, --corrected..., --label..., --out)
  attention-map      export one head's attention map      (--checkpoint, --data, --block, --head, --sample, --out)

common flags:
  --config PATH      key = value configuration file
  --seed N           override the configured seed
  --out PATH         output file or directory";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let code = match run(&argv) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {}", one_line(&msg));
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error[runtime]: {}", one_line(&msg));
            2
        }
    };
    std::process::exit(code);
}

fn one_line(msg: &str) -> String {
    msg.replace('\n', "; ")
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let Some(command) = argv.first() else {
        return Err(CliError::Usage(format!("missing command\n{USAGE}")));
    };
    let args = Args::parse(&argv[1..])?;
    match command.as_str() {
        "generate" => commands::generate(&args),
        "train-transformer" => commands::train_transformer(&args),
        "fit-mbm" => commands::fit_mbm(&args),
        "postprocess" => commands::postprocess(&args),
        "verify" => commands::verify(&args),
        "attention-map" => commands::attention_map(&args),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "unknown command '{other}'\n{USAGE}"
        ))),
    }
}
