fn main() {
    std::process::exit(sapnet::cli::run(std::env::args_os()));
}
