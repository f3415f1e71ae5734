fn main() {
    std::process::exit(cemoe::cli::main(std::env::args_os()));
}
