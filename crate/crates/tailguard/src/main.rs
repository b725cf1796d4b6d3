fn main() {
    std::process::exit(tailguard::cli::run(std::env::args_os()));
}
