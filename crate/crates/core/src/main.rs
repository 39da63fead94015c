fn main() {
    std::process::exit(impplan::cli::run(std::env::args_os()));
}
