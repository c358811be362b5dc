fn main() {
    std::process::exit(lfsl_cli::run(std::env::args_os()));
}
