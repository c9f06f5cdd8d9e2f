use clap::Parser;

use splat_avatar_service::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(splat_avatar_service::thread_count())
        .build_global();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.one_line());
        std::process::exit(e.exit_code());
    }
}
