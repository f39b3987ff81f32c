fn main() {
    std::process::exit(muka::cli::run(std::env::args_os()));
}
