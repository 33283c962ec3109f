use clap::{CommandFactory, FromArgMatches};
use crnet_cli::{config::keys_help, run, Cli};

fn main() {
    if let Some(n) = std::env::var("CRNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let matches = Cli::command().after_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let mut stdout = std::io::stdout().lock();
    if let Err(f) = run(cli, &mut stdout) {
        eprintln!("error[{}]: {}", f.class, f.message);
        std::process::exit(f.code);
    }
}
