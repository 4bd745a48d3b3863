fn main() {
    std::process::exit(yk_cli::run(std::env::args_os()));
}
