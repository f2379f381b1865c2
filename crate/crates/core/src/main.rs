fn main() {
    std::process::exit(magms::cli::run(std::env::args_os()));
}
