fn main() {
    dismob_cli::init_logging();
    std::process::exit(dismob_cli::run(std::env::args_os()));
}
