fn main() {
    std::process::exit(simsl_cli::run(std::env::args_os()));
}
