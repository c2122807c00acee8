fn main() {
    std::process::exit(legaussians::cli::run(std::env::args_os()));
}
