use clap::Parser;
use medkg_cli::{exit_code, run, Cli, EXIT_CONFIG};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(m) => {
            log::info!("{} done in {:.1}s; outputs: {}", m.command, m.wall_time_s, m.outputs.keys().cloned().collect::<Vec<_>>().join(", "));
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
