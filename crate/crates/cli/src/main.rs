fn main() {
    fgd_cli::init_logging();
    std::process::exit(fgd_cli::run_from(std::env::args_os()));
}
