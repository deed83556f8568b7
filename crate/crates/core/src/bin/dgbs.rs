fn main() {
    std::process::exit(dgbs::cli::run(std::env::args_os()));
}
