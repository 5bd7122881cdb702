fn main() {
    std::process::exit(acu::cli::run(std::env::args_os()));
}
