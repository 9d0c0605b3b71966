use std::io;
use std::path::PathBuf;

fn main() {
    let config_dir = std::env::var_os(qe_core::cli::CONFIG_DIR_ENV).map(PathBuf::from);
    let code = qe_core::cli::run(std::env::args_os(), config_dir.as_deref(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
