fn main() {
    std::process::exit(plembed::cli::run(std::env::args_os()));
}
