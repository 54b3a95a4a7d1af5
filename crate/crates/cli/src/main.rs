fn main() {
    std::process::exit(eisprnu_cli::run(std::env::args_os()));
}
