fn main() {
    std::process::exit(profe::harness::run_cli(std::env::args_os()));
}
