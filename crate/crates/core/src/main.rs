fn main() {
    std::process::exit(promptta::cli::run(std::env::args_os()));
}
