fn main() {
    std::process::exit(shdp::cli::run(std::env::args_os()));
}
