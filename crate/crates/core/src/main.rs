use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use naclab::error::{Error, Result};
use naclab::harness::gallery::{instance, stored_certification, GALLERY_NAMES};
use naclab::harness::{run_experiment, ExperimentKind, ExperimentSpec, RunOptions};

#[derive(Parser)]
#[command(name = "naclab", version, about = "Off-policy n-step TD and natural actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an experiment spec without running it.
    Validate { spec: PathBuf },
    /// Run an experiment spec.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the sample-complexity sweep described by a spec's `sweep` section.
    Sweep {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Canonical instances.
    Gallery {
        #[command(subcommand)]
        command: GalleryCommand,
    },
}

#[derive(Subcommand)]
enum GalleryCommand {
    List,
    /// Recompute an instance's certification record and compare it to the stored one.
    Certify { name: String },
}

#[derive(Args)]
struct RunFlags {
    /// Seeds as a comma list (`1,2,5`) or a half-open range (`0..10`).
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Output root; overrides NACLAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Record every `thin`-th critic iterate.
    #[arg(long)]
    thin: Option<usize>,
}

impl RunFlags {
    fn options(self) -> RunOptions {
        RunOptions {
            out_root: self.out,
            workers: self.workers,
            thin: self.thin,
            seeds: self.seeds.map(|s| s.0),
        }
    }
}

#[derive(Debug, Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        return Ok(SeedList((a..b).collect()));
    }
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(SeedList)
}

fn run(spec: PathBuf, flags: RunFlags, sweep: bool) -> Result<i32> {
    let mut spec = ExperimentSpec::load(&spec)?;
    if sweep {
        if spec.sweep.is_none() {
            return Err(Error::Config("spec has no sweep section".into()));
        }
        spec.kind = ExperimentKind::SampleComplexity;
    }
    let out = run_experiment(&spec, &flags.options())?;
    for note in &out.manifest.notes {
        eprintln!("note: {note}");
    }
    println!("{}", out.dir.display());
    Ok(out.status)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate { spec } => {
            let spec = ExperimentSpec::load(&spec)?;
            let inst = spec.validate()?;
            println!("ok: {} on {}", spec.kind.name(), inst.name);
            Ok(0)
        }
        Command::Run { spec, flags } => run(spec, flags, false),
        Command::Sweep { spec, flags } => run(spec, flags, true),
        Command::Gallery { command: GalleryCommand::List } => {
            for name in GALLERY_NAMES {
                let inst = instance(name)?;
                println!(
                    "{name}\t|S|={} |A|={} d={} gamma={} gamma_c={}\t{}",
                    inst.mdp.num_states(),
                    inst.mdp.num_actions(),
                    inst.features.dim(),
                    inst.mdp.gamma(),
                    inst.gamma_c,
                    inst.notes
                );
            }
            Ok(0)
        }
        Command::Gallery {
            command: GalleryCommand::Certify { name },
        } => {
            let live = instance(&name)?.certify()?;
            let stored = stored_certification(&name)?;
            println!("{}", serde_json::to_string_pretty(&live)?);
            if live.matches(&stored, 1e-9) {
                println!("matches stored record");
                Ok(0)
            } else {
                Err(Error::Construction(format!(
                    "{name}: live certification differs from the stored record {stored:?}"
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_seeds;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1,2, 5").unwrap().0, vec![1, 2, 5]);
        assert_eq!(parse_seeds("3..6").unwrap().0, vec![3, 4, 5]);
        assert!(parse_seeds("x").is_err());
    }
}
