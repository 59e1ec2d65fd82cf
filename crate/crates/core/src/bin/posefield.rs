fn main() {
    std::process::exit(posefield::cli::run(std::env::args_os()));
}
