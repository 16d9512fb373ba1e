fn main() {
    std::process::exit(magicflow_cli::run(std::env::args_os()));
}
