fn main() {
    std::process::exit(dtits::cli::run(std::env::args_os()));
}
