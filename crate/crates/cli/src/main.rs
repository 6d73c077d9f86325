use clap::Parser;

use sepsis_rl_cli::{init_threads_from_env, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = init_threads_from_env().and_then(|_| run(&cli));
    match result {
        Ok(manifests) => {
            for m in manifests {
                println!("[{}] {:.1}s, {} output(s)", m.stage, m.seconds, m.outputs.len());
                for n in &m.notes {
                    println!("  {n}");
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
