fn main() {
    std::process::exit(mups_cli::run_cli(std::env::args_os()));
}
