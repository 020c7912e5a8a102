fn main() {
    std::process::exit(pivad_cli::run(std::env::args_os()));
}
