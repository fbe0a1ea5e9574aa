fn main() {
    std::process::exit(danet::cli::run(std::env::args_os()));
}
