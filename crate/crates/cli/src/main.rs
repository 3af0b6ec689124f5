fn main() {
    std::process::exit(tonguetrack_cli::run(std::env::args_os()));
}
