use std::process::exit;

fn main() {
    env_logger::Builder::from_default_env()
        .format_timestamp(None)
        .init();
    exit(ltmp::cli::cli_main(std::env::args_os()));
}
