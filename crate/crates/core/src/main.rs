fn main() {
    std::process::exit(dyncert::cli::run(std::env::args_os()));
}
