fn main() {
    std::process::exit(hycone::cli::run(std::env::args_os()));
}
