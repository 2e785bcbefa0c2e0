fn main() {
    std::process::exit(turbo_ai::harness::cli(std::env::args_os()));
}
