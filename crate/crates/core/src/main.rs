fn main() {
    std::process::exit(rigidflow::cli::run(std::env::args_os()));
}
