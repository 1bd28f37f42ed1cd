fn main() {
    std::process::exit(cubefield_cli::run(std::env::args_os()));
}
