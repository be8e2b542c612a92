fn main() {
    std::process::exit(omedr::cli::run(std::env::args_os()));
}
