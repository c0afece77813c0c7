fn main() {
    std::process::exit(dftlab::cli::run(std::env::args_os()));
}
