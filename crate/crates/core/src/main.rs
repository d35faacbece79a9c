fn main() {
    std::process::exit(blora::cli::run(std::env::args_os()));
}
